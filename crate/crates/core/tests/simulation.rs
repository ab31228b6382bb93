mod common;

use distobs::error_system;
use distobs::graph::{self, NetworkGraph};
use distobs::linalg;
use distobs::simulator::{self, simulate, SimulationConfig, SimulationTrace};
use distobs::synthesis::{synthesize, Synthesis, SynthesisParameters};
use distobs::Plant;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};

fn standard(alpha: f64) -> (common::Instance, Synthesis) {
    let inst = common::standard_instance();
    let s = synthesize(&inst.plant, &inst.graph, &SynthesisParameters::with_alpha(alpha)).unwrap();
    (inst, s)
}

fn x0_standard() -> DVector<f64> {
    dvector![1.0, -0.5, 0.8, 2.0]
}

fn run(inst: &common::Instance, s: &Synthesis, t_final: f64, dt: Option<f64>) -> SimulationTrace {
    let mut cfg = SimulationConfig::new(t_final, x0_standard());
    cfg.dt = dt;
    simulate(&s.realization, &inst.plant, &inst.graph, &cfg).unwrap()
}

#[test]
fn final_error_matches_the_matrix_exponential() {
    for alpha in [0.0, 0.5, 1.0] {
        let (inst, s) = standard(alpha);
        let trace = run(&inst, &s, 1.0, None);
        let e0 = trace.stacked_error(0);
        let oracle = s.error_system.full_matrix.clone().exp() * &e0;
        let e_t = trace.stacked_error(trace.len() - 1);
        let rel = (&e_t - &oracle).norm() / oracle.norm();
        assert!(rel <= 1e-6, "alpha {alpha}: relative deviation {rel:e}");
    }
}

#[test]
fn halving_the_step_barely_moves_the_final_error() {
    for alpha in [0.5, 1.0] {
        let (inst, s) = standard(alpha);
        let t_final = 10.0 / alpha.max(0.5);
        let dt = simulator::default_dt(&s.realization, &inst.plant, &inst.graph).unwrap();
        let coarse = run(&inst, &s, t_final, Some(dt));
        let fine = run(&inst, &s, t_final, Some(coarse.dt / 2.0));
        let a = *coarse.global_error_norms().last().unwrap();
        let b = *fine.global_error_norms().last().unwrap();
        assert!((a - b).abs() <= 1e-4 * b, "alpha {alpha}: {a:e} vs {b:e}");
    }
}

/// Decay certified by `V = eᵀ𝒫e`: `‖e(t)‖ ≤ √κ e^{−αt} ‖e(0)‖` on `im T_s`.
fn transient_constant(s: &Synthesis) -> f64 {
    let ts = &s.error_system.t_s;
    let weight = ts.transpose() * error_system::lyapunov_weight(&s.realization) * ts;
    let ev = linalg::symmetric_eigenvalues(&weight);
    (ev.max() / ev.min()).sqrt()
}

#[test]
fn estimates_become_omniscient() {
    for alpha in [0.5, 1.0] {
        let (inst, s) = standard(alpha);
        let probe = run(&inst, &s, 10.0 / alpha, None);
        let rate = simulator::estimate_rate(&probe, 0.5).unwrap();
        assert!(rate >= alpha - 0.05, "alpha {alpha}: rate {rate}");

        let start = probe.errors[0].clone();
        let e0 = probe.global_error_norms()[0];
        let spread = start.iter().map(|e| e0 / e.norm()).fold(1.0, f64::max);
        let t_final = (1e6 * transient_constant(&s) * spread).ln() / alpha;
        assert!(t_final >= 1e6_f64.ln() / rate);
        let trace = run(&inst, &s, t_final, None);
        let last = trace.errors.last().unwrap();
        for (i, (e0, e)) in start.iter().zip(last).enumerate() {
            assert!(e.norm() <= 1e-6 * e0.norm(), "alpha {alpha}, node {i}: {:e} of {:e}", e.norm(), e0.norm());
        }
    }
}

#[test]
fn invariance_holds_along_random_trajectories() {
    let mut rng = common::rng(200);
    for k in 0..30 {
        let inst = common::random_instance(&mut rng);
        let s = synthesize(&inst.plant, &inst.graph, &SynthesisParameters::with_alpha(0.5)).unwrap();
        let n = inst.plant.n();
        let x0 = DVector::from_fn(n, |i, _| 1.0 - 0.3 * i as f64);
        let trace = simulate(&s.realization, &inst.plant, &inst.graph, &SimulationConfig::new(5.0, x0)).unwrap();
        let worst = simulator::check_invariance(&trace);
        assert!(worst <= 1e-6, "instance {k}: {worst:e}");
    }
}

#[test]
fn trace_estimates_follow_from_the_output_map() {
    let (inst, s) = standard(1.0);
    let mut cfg = SimulationConfig::new(2.0, x0_standard());
    cfg.record_stride = 7;
    let trace = simulate(&s.realization, &inst.plant, &inst.graph, &cfg).unwrap();
    let steps = (2.0 / trace.dt).round() as usize;
    assert_eq!(trace.len(), steps / 7 + 1 + usize::from(!steps.is_multiple_of(7)));
    assert_eq!(*trace.times.last().unwrap(), 2.0);
    for k in 0..trace.len() {
        let y = inst.plant.c() * &trace.x[k];
        assert_eq!(trace.z[k].len(), 3);
        for (i, g) in s.realization.nodes.iter().enumerate() {
            let xh = g.estimate(&trace.z[k][i], &inst.plant.output_block(&y, i));
            assert_eq!(xh, trace.xhat[k][i]);
            assert_eq!(&trace.xhat[k][i] - &trace.x[k], trace.errors[k][i]);
        }
    }
}

#[test]
fn static_plant_is_tracked_at_the_certified_rate() {
    let a = DMatrix::zeros(3, 3);
    let c = dmatrix![1.0, 0.0, 0.0; 0.0, 1.0, 0.0; 0.0, 0.0, 1.0];
    let plant = Plant::new(a, c, vec![1, 2]).unwrap();
    let graph = NetworkGraph::cycle(2);
    let alpha = 1.0;
    let s = synthesize(&plant, &graph, &SynthesisParameters::with_alpha(alpha)).unwrap();
    let x0 = dvector![2.0, -1.0, 0.5];
    let z0 = s.realization.nodes.iter().map(|g| DVector::from_element(g.order(), 1.0)).collect();
    let mut cfg = SimulationConfig::new(12.0, x0.clone());
    cfg.z0 = Some(z0);
    let trace = simulate(&s.realization, &plant, &graph, &cfg).unwrap();
    assert!(trace.x.iter().all(|x| *x == x0));
    let rate = simulator::estimate_rate(&trace, 0.5).unwrap();
    assert!(rate >= alpha - 0.05, "rate {rate}");
    assert!(*trace.global_error_norms().last().unwrap() < 1e-4);
}

#[test]
fn single_node_reduces_to_a_classical_observer() {
    // n = 3, p = 1: order two, driven only by the output injection
    let a = dmatrix![0.0, 1.0, 0.0; 0.0, 0.0, 1.0; 1.0, -2.0, 0.5];
    let plant = Plant::new(a, dmatrix![1.0, 0.0, 0.0], vec![1]).unwrap();
    let graph = NetworkGraph::cycle(1);
    let alpha = 0.5;
    let s = synthesize(&plant, &graph, &SynthesisParameters::with_alpha(alpha)).unwrap();
    assert_eq!(s.realization.total_order, 2);
    let n1 = &s.realization.nodes[0].n_gain;
    assert!(linalg::spectral_abscissa(n1) < -alpha);
    let spectral = graph::spectral_data(&graph).unwrap();
    assert_eq!(spectral.laplacian, dmatrix![0.0]);

    let trace = simulate(&s.realization, &plant, &graph, &SimulationConfig::new(30.0, dvector![1.0, 0.0, -1.0])).unwrap();
    let norms = trace.global_error_norms();
    let x_last = trace.x.last().unwrap().norm();
    assert!(*norms.last().unwrap() <= 1e-6 * norms[0].max(x_last), "{:e}", norms.last().unwrap());
}
