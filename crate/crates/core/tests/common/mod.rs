//! Shared fixtures: the standard 3-node instance and a seeded random instance generator.
#![allow(dead_code, clippy::needless_range_loop)]

use distobs::graph::{Edge, NetworkGraph};
use distobs::plant::Plant;
use distobs::linalg;
use nalgebra::{dmatrix, DMatrix};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::atomic::{AtomicUsize, Ordering};

pub use rand::SeedableRng;

static REJECTED: AtomicUsize = AtomicUsize::new(0);

/// Observable draws discarded by [`random_instance`] as ill-conditioned so far
/// (process-wide).
pub fn rejected_draws() -> usize {
    REJECTED.load(Ordering::Relaxed)
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub plant: Plant,
    pub graph: NetworkGraph,
}

/// n = 4 oscillator plus a cascade with an unstable mode; three single-row
/// outputs on a directed 3-cycle. Node 3 reads a coordinate with no upstream
/// coupling, so its output spans its whole observable subspace.
pub fn standard_instance() -> Instance {
    let a = dmatrix![
        0.0, 1.0, 0.0, 0.0;
        -1.0, 0.0, 0.0, 0.0;
        0.0, 0.0, 0.5, 1.0;
        0.0, 0.0, 0.0, -1.0
    ];
    let c = dmatrix![
        1.0, 0.0, 0.0, 0.0;
        0.0, 0.0, 1.0, 0.0;
        0.0, 0.0, 0.0, 1.0
    ];
    Instance {
        plant: Plant::new(a, c, vec![1, 1, 1]).unwrap(),
        graph: NetworkGraph::cycle(3),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    gaussian(rng, n, n).qr().q()
}

/// Block lower-triangular matrix with 1×1 real and 2×2 rotational diagonal
/// blocks; returns the matrix and the block boundaries. Coupling entries have
/// magnitude in [0.5, 1.5], so observability along a chain is never carried
/// by a near-zero link.
fn cascade(rng: &mut ChaCha8Rng, n: usize) -> (DMatrix<f64>, Vec<(usize, usize)>) {
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < n {
        let size = if n - start >= 2 && rng.random_bool(0.4) { 2 } else { 1 };
        blocks.push((start, size));
        start += size;
    }
    let mut a = DMatrix::zeros(n, n);
    for (bi, &(s, size)) in blocks.iter().enumerate() {
        if size == 1 {
            a[(s, s)] = rng.random_range(-2.0..1.5);
        } else {
            let re = rng.random_range(-1.0..1.0);
            let im = rng.random_range(0.5..2.0);
            a[(s, s)] = re;
            a[(s + 1, s + 1)] = re;
            a[(s, s + 1)] = im;
            a[(s + 1, s)] = -im;
        }
        // couplings from earlier blocks into this one
        for &(s0, size0) in &blocks[..bi] {
            if rng.random_bool(0.6) {
                for r in s..s + size {
                    for c in s0..s0 + size0 {
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        a[(r, c)] = sign * rng.random_range(0.5..1.5);
                    }
                }
            }
        }
    }
    (a, blocks)
}

/// One output row: a random combination of the coordinates of one cascade
/// block, or occasionally a dense random row.
fn output_row(rng: &mut ChaCha8Rng, n: usize, blocks: &[(usize, usize)]) -> DMatrix<f64> {
    let mut row = DMatrix::zeros(1, n);
    if rng.random_bool(0.2) {
        return gaussian(rng, 1, n);
    }
    let &(s, size) = &blocks[rng.random_range(0..blocks.len())];
    for c in s..s + size {
        row[(0, c)] = rng.random_range(-1.0..1.0);
    }
    if row.norm() < 0.1 {
        row[(0, s)] = 1.0;
    }
    row
}

/// Random strongly connected digraph: a random Hamiltonian cycle plus extra
/// edges with probability 0.4, weights in [0.5, 2].
pub fn random_graph(rng: &mut ChaCha8Rng, big_n: usize) -> NetworkGraph {
    if big_n == 1 {
        return NetworkGraph::cycle(1);
    }
    let mut order: Vec<usize> = (0..big_n).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    let mut present = vec![vec![false; big_n]; big_n];
    for k in 0..big_n {
        let (from, to) = (order[k], order[(k + 1) % big_n]);
        present[from][to] = true;
        edges.push(Edge { from, to, weight: rng.random_range(0.5..2.0) });
    }
    for from in 0..big_n {
        for to in 0..big_n {
            if from != to && !present[from][to] && rng.random_bool(0.4) {
                edges.push(Edge { from, to, weight: rng.random_range(0.5..2.0) });
            }
        }
    }
    NetworkGraph::from_edges(big_n, &edges).unwrap()
}

/// Smallest distance of the pair `(a22, c)` to unobservability, sampled at
/// the eigenvalues `λ` of `a22`: `min σ_min([a22 − λI; c])`, with complex `λ`
/// handled through the real 2×2 embedding. `+∞` for an empty block.
pub fn modal_observability(a22: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    let k = a22.nrows();
    if k == 0 {
        return f64::INFINITY;
    }
    let p = c.nrows();
    let eye = DMatrix::<f64>::identity(k, k);
    linalg::eigenvalues(a22)
        .into_iter()
        .map(|(re, im)| {
            let shifted = a22 - &eye * re;
            let mut m = DMatrix::zeros(2 * (k + p), 2 * k);
            m.view_mut((0, 0), (k, k)).copy_from(&shifted);
            m.view_mut((k, k), (k, k)).copy_from(&shifted);
            m.view_mut((0, k), (k, k)).copy_from(&(&eye * im));
            m.view_mut((k, 0), (k, k)).copy_from(&(&eye * -im));
            m.view_mut((2 * k, 0), (p, k)).copy_from(c);
            m.view_mut((2 * k + p, k), (p, k)).copy_from(c);
            linalg::symmetric_eigenvalues(&(m.transpose() * &m)).min().max(0.0).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Relative distance to unobservability every node's `(A_22, E·A_12)` pair
/// must keep; see [`random_instance`].
pub const MIN_MODAL_OBSERVABILITY: f64 = 1e-3;

/// Whether every node's injection pair is observable with margin
/// `MIN_MODAL_OBSERVABILITY · ‖A‖`.
pub fn well_conditioned(plant: &Plant) -> bool {
    let a = plant.a();
    (0..plant.node_count()).all(|i| {
        let Ok(f) = linalg::full_rank_factorize(&plant.c_block(i), 1e-9) else {
            return false;
        };
        let Ok(d) = linalg::observability_decomposition(a, &f.f_factor, 1e-9) else {
            return false;
        };
        modal_observability(&d.a22, &d.ea12()) >= MIN_MODAL_OBSERVABILITY * a.norm()
    })
}

/// Random jointly observable instance with n ∈ [2, 6], N ∈ [1, 4].
///
/// Outputs are drawn in cascade coordinates and then rotated, so individual
/// nodes usually have a nontrivial unobservable subspace. About one node in
/// six gets a duplicated (proportional) row, making `C_i` rank deficient.
///
/// Draws where some node sees part of its observable subspace only through a
/// nearly unobservable mode are redrawn: any injection gain for such a node is
/// forced to be huge, and the Lyapunov and LMI certificates then drown in
/// rounding. [`rejected_draws`] counts them.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    loop {
        let n = rng.random_range(2..=6);
        let big_n = rng.random_range(1..=4);
        let (a0, blocks) = cascade(rng, n);
        let q = random_orthogonal(rng, n);
        let a = &q * a0 * q.transpose();

        let mut rows = Vec::new();
        let mut sizes = Vec::new();
        for _ in 0..big_n {
            let mut m = if rng.random_bool(0.3) { 2 } else { 1 };
            let first = output_row(rng, n, &blocks);
            rows.push(&first * q.transpose());
            if m == 2 {
                rows.push(output_row(rng, n, &blocks) * q.transpose());
            }
            if rng.random_bool(1.0 / 6.0) {
                rows.push(&first * q.transpose() * rng.random_range(-2.0..2.0));
                m += 1;
            }
            sizes.push(m);
        }
        let mut c = DMatrix::zeros(rows.len(), n);
        for (k, r) in rows.iter().enumerate() {
            c.row_mut(k).copy_from(r);
        }
        if linalg::observable_dimension(&a, &c, 1e-6) < n {
            continue;
        }
        let plant = Plant::new(a, c, sizes).unwrap();
        if !well_conditioned(&plant) {
            REJECTED.fetch_add(1, Ordering::Relaxed);
            continue;
        }
        let graph = random_graph(rng, big_n);
        return Instance { plant, graph };
    }
}

/// Rank of each `C_i`.
pub fn output_ranks(plant: &Plant) -> Vec<usize> {
    (0..plant.node_count())
        .map(|i| linalg::numerical_rank(&plant.c_block(i), 1e-9))
        .collect()
}

/// `Nn − Σ rank C_i`.
pub fn expected_order(plant: &Plant) -> usize {
    let n = plant.n();
    output_ranks(plant).iter().map(|p| n - p).sum()
}
