//! Fixed-step RK4 integration of the plant together with all local observers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::error_system;
use crate::graph::{self, NetworkGraph};
use crate::linalg;
use crate::plant::Plant;
use crate::synthesis::ObserverRealization;

/// Fewest above-floor samples [`estimate_rate`] will fit a slope to.
pub const MIN_RATE_SAMPLES: usize = 10;
/// Relative error floor below which samples are ignored by the rate fit.
pub const ERROR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub t_final: f64,
    /// Step size; `None` picks [`default_dt`].
    pub dt: Option<f64>,
    pub x0: DVector<f64>,
    /// Initial observer states; `None` means all zero.
    pub z0: Option<Vec<DVector<f64>>>,
    pub record_stride: usize,
}

impl SimulationConfig {
    pub fn new(t_final: f64, x0: DVector<f64>) -> Self {
        Self {
            t_final,
            dt: None,
            x0,
            z0: None,
            record_stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationTrace {
    pub times: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    /// `z[k][i]`: state of observer `i` at sample `k`.
    pub z: Vec<Vec<DVector<f64>>>,
    pub xhat: Vec<Vec<DVector<f64>>>,
    pub errors: Vec<Vec<DVector<f64>>>,
    /// `‖T_ipᵀ e_i‖` per sample and node.
    pub invariance_residuals: Vec<Vec<f64>>,
    /// `T_is` per node, kept for re-checking invariance on the stored errors.
    pub t_is: Vec<DMatrix<f64>>,
    /// Step size actually used.
    pub dt: f64,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.t_is.len()
    }

    /// `‖col(e_1, …, e_N)‖` at every sample.
    pub fn global_error_norms(&self) -> Vec<f64> {
        self.errors
            .iter()
            .map(|es| es.iter().map(|e| e.norm_squared()).sum::<f64>().sqrt())
            .collect()
    }

    pub fn final_error_norms(&self) -> Vec<f64> {
        self.errors
            .last()
            .map(|es| es.iter().map(|e| e.norm()).collect())
            .unwrap_or_default()
    }

    /// Stacked error `col(e_1, …, e_N)` at sample `k`.
    pub fn stacked_error(&self, k: usize) -> DVector<f64> {
        let parts: Vec<f64> = self.errors[k].iter().flat_map(|e| e.iter().copied()).collect();
        DVector::from_vec(parts)
    }
}

/// `z_i(0)` giving `x̂_i(0) = x(0)` at every node.
pub fn consistent_initial_states(realization: &ObserverRealization, plant: &Plant, x0: &DVector<f64>) -> Vec<DVector<f64>> {
    realization
        .nodes
        .iter()
        .enumerate()
        .map(|(i, g)| g.consistent_state(x0, &plant.c_block(i)))
        .collect()
}

/// `0.1 / (ρ(F) + ‖A‖₂ + γ‖ℒ‖₂)` with `F` the full error matrix.
pub fn default_dt(realization: &ObserverRealization, plant: &Plant, graph: &NetworkGraph) -> Result<f64> {
    let spectral = graph::spectral_data(graph)?;
    let sys = error_system::build_error_system(realization, &spectral)?;
    let scale = linalg::spectral_radius(&sys.full_matrix)
        + linalg::norm2(plant.a())
        + realization.gamma * linalg::norm2(&spectral.laplacian);
    Ok(if scale > 0.0 { 0.1 / scale } else { 0.1 })
}

struct Coupled<'a> {
    realization: &'a ObserverRealization,
    plant: &'a Plant,
    /// `γ r_i ℓ_ij`
    weights: DMatrix<f64>,
    offsets: Vec<usize>,
}

impl Coupled<'_> {
    fn split(&self, s: &DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>) {
        let n = self.plant.n();
        let x = s.rows(0, n).into_owned();
        let z = self
            .realization
            .nodes
            .iter()
            .zip(&self.offsets)
            .map(|(g, &o)| s.rows(o, g.order()).into_owned())
            .collect();
        (x, z)
    }

    fn estimates(&self, x: &DVector<f64>, z: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let y = self.plant.c() * x;
        self.realization
            .nodes
            .iter()
            .zip(z)
            .enumerate()
            .map(|(i, (g, zi))| g.estimate(zi, &self.plant.output_block(&y, i)))
            .collect()
    }

    fn derivative(&self, s: &DVector<f64>) -> DVector<f64> {
        let (x, z) = self.split(s);
        let xhat = self.estimates(&x, &z);
        let y = self.plant.c() * &x;
        let mut ds = DVector::zeros(s.len());
        let n = self.plant.n();
        ds.rows_mut(0, n).copy_from(&(self.plant.a() * &x));
        for (i, (g, &o)) in self.realization.nodes.iter().zip(&self.offsets).enumerate() {
            let k = g.order();
            if k == 0 {
                continue;
            }
            let mut consensus = DVector::zeros(n);
            for (j, xj) in xhat.iter().enumerate() {
                let w = self.weights[(i, j)];
                if w != 0.0 {
                    consensus.axpy(-w, xj, 1.0);
                }
            }
            let dz = &g.n_gain * &z[i] + &g.l_gain * self.plant.output_block(&y, i) + &g.m_gain * consensus;
            ds.rows_mut(o, k).copy_from(&dz);
        }
        ds
    }
}

fn check_config(realization: &ObserverRealization, plant: &Plant, graph: &NetworkGraph, cfg: &SimulationConfig) -> Result<()> {
    let n = plant.n();
    let big_n = plant.node_count();
    if realization.nodes.len() != big_n || graph.node_count() != big_n || realization.r_vector.len() != big_n {
        return Err(Error::Dimension(format!(
            "{} observer nodes, {} graph nodes, {big_n} output blocks",
            realization.nodes.len(),
            graph.node_count()
        )));
    }
    for (i, g) in realization.nodes.iter().enumerate() {
        g.check_dimensions(n, plant.output_sizes()[i])
            .map_err(|e| Error::Dimension(format!("node {}: {e}", i + 1)))?;
    }
    if cfg.x0.len() != n {
        return Err(Error::Dimension(format!("x0 has length {}, expected {n}", cfg.x0.len())));
    }
    if let Some(z0) = &cfg.z0 {
        if z0.len() != big_n {
            return Err(Error::Dimension(format!("z0 given for {} nodes, expected {big_n}", z0.len())));
        }
        for (i, (zi, g)) in z0.iter().zip(&realization.nodes).enumerate() {
            if zi.len() != g.order() {
                return Err(Error::Dimension(format!(
                    "z0 for node {} has length {}, expected {}",
                    i + 1,
                    zi.len(),
                    g.order()
                )));
            }
        }
    }
    if !(cfg.t_final > 0.0) || !cfg.t_final.is_finite() {
        return Err(Error::InvalidParameter(format!("t_final = {}", cfg.t_final)));
    }
    if let Some(dt) = cfg.dt {
        if !(dt > 0.0 && dt <= cfg.t_final) {
            return Err(Error::InvalidParameter(format!("dt = {dt} with t_final = {}", cfg.t_final)));
        }
    }
    if cfg.record_stride == 0 {
        return Err(Error::InvalidParameter("record_stride must be positive".into()));
    }
    Ok(())
}

pub fn simulate(
    realization: &ObserverRealization,
    plant: &Plant,
    graph: &NetworkGraph,
    cfg: &SimulationConfig,
) -> Result<SimulationTrace> {
    check_config(realization, plant, graph, cfg)?;
    let n = plant.n();
    let dt_req = match cfg.dt {
        Some(dt) => dt,
        None => default_dt(realization, plant, graph)?,
    };
    let steps = ((cfg.t_final / dt_req).round() as usize).max(1);
    let dt = cfg.t_final / steps as f64;

    let l = graph::laplacian(graph);
    let weights = DMatrix::from_fn(l.nrows(), l.ncols(), |i, j| {
        realization.gamma * realization.r_vector[i] * l[(i, j)]
    });
    let mut offsets = Vec::with_capacity(realization.nodes.len());
    let mut total = n;
    for g in &realization.nodes {
        offsets.push(total);
        total += g.order();
    }
    let sys = Coupled {
        realization,
        plant,
        weights,
        offsets,
    };

    let mut s = DVector::zeros(total);
    s.rows_mut(0, n).copy_from(&cfg.x0);
    if let Some(z0) = &cfg.z0 {
        for (zi, &o) in z0.iter().zip(&sys.offsets) {
            s.rows_mut(o, zi.len()).copy_from(zi);
        }
    }

    let t_is: Vec<_> = realization.nodes.iter().map(|g| g.t_is.clone()).collect();
    let mut trace = SimulationTrace {
        times: Vec::new(),
        x: Vec::new(),
        z: Vec::new(),
        xhat: Vec::new(),
        errors: Vec::new(),
        invariance_residuals: Vec::new(),
        t_is,
        dt,
    };
    let record = |trace: &mut SimulationTrace, t: f64, s: &DVector<f64>| {
        let (x, z) = sys.split(s);
        let xhat = sys.estimates(&x, &z);
        let errors: Vec<_> = xhat.iter().map(|xh| xh - &x).collect();
        let inv = errors
            .iter()
            .zip(&trace.t_is)
            .map(|(e, ts)| (e - ts * (ts.transpose() * e)).norm())
            .collect();
        trace.times.push(t);
        trace.x.push(x);
        trace.z.push(z);
        trace.xhat.push(xhat);
        trace.errors.push(errors);
        trace.invariance_residuals.push(inv);
    };

    record(&mut trace, 0.0, &s);
    for k in 1..=steps {
        let k1 = sys.derivative(&s);
        let k2 = sys.derivative(&(&s + &k1 * (0.5 * dt)));
        let k3 = sys.derivative(&(&s + &k2 * (0.5 * dt)));
        let k4 = sys.derivative(&(&s + &k3 * dt));
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        let t = if k == steps { cfg.t_final } else { k as f64 * dt };
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(t));
        }
        if k % cfg.record_stride == 0 || k == steps {
            record(&mut trace, t, &s);
        }
    }
    Ok(trace)
}

/// Worst `‖(I − T_is T_isᵀ) e_i‖ / max(1, ‖e_i‖)` over the trace.
pub fn check_invariance(trace: &SimulationTrace) -> f64 {
    trace
        .errors
        .iter()
        .flat_map(|es| es.iter().zip(&trace.t_is))
        .map(|(e, ts)| (e - ts * (ts.transpose() * e)).norm() / e.norm().max(1.0))
        .fold(0.0, f64::max)
}

/// Empirical decay rate: negated least-squares slope of `log‖e(t)‖`.
///
/// Only samples above [`ERROR_FLOOR`]`·max(1, ‖x‖)` are used, and of those the
/// last `window` fraction. Returns `+∞` when nothing is above the floor.
pub fn estimate_rate(trace: &SimulationTrace, window: f64) -> Result<f64> {
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::InvalidParameter(format!("window = {window} not in (0, 1]")));
    }
    let norms = trace.global_error_norms();
    let above: Vec<(f64, f64)> = trace
        .times
        .iter()
        .zip(&norms)
        .zip(&trace.x)
        .filter(|((_, &e), x)| e > ERROR_FLOOR * x.norm().max(1.0))
        .map(|((&t, &e), _)| (t, e.ln()))
        .collect();
    if above.is_empty() {
        return Ok(f64::INFINITY);
    }
    let keep = ((above.len() as f64) * window).round() as usize;
    let tail = &above[above.len() - keep.min(above.len())..];
    if tail.len() < MIN_RATE_SAMPLES {
        return Err(Error::InsufficientSamples {
            found: tail.len(),
            needed: MIN_RATE_SAMPLES,
        });
    }
    let m = tail.len() as f64;
    let t_mean = tail.iter().map(|p| p.0).sum::<f64>() / m;
    let y_mean = tail.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = tail.iter().map(|(t, y)| (t - t_mean) * (y - y_mean)).sum();
    let sxx: f64 = tail.iter().map(|(t, _)| (t - t_mean).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientSamples {
            found: 1,
            needed: MIN_RATE_SAMPLES,
        });
    }
    Ok(-sxy / sxx)
}
