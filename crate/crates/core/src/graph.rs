//! Weighted directed communication graphs and their Laplacian spectra.
//!
//! Weights follow the adjacency convention `weights[(j, i)] = a_ji > 0` iff
//! information flows from node `i` to node `j`. Node `j` therefore reads row
//! `j` of the adjacency matrix to find whose estimates it receives.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// One directed edge; `from → to` with a positive weight. Indices are 0-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    weights: DMatrix<f64>,
}

impl NetworkGraph {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        let n = weights.nrows();
        if n == 0 || weights.ncols() != n {
            return Err(Error::InvalidGraph(format!(
                "adjacency must be square and nonempty, got {}x{}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        for ((r, c), &w) in weights
            .iter()
            .enumerate()
            .map(|(k, w)| ((k % n, k / n), w))
        {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidGraph(format!("weight a[{r},{c}] = {w}")));
            }
            if r == c && w != 0.0 {
                return Err(Error::InvalidGraph(format!("self loop on node {r}")));
            }
        }
        Ok(Self { weights })
    }

    pub fn from_edges(node_count: usize, edges: &[Edge]) -> Result<Self> {
        let mut weights = DMatrix::zeros(node_count, node_count);
        for e in edges {
            if e.from >= node_count || e.to >= node_count {
                return Err(Error::InvalidGraph(format!(
                    "edge {} -> {} outside {node_count} nodes",
                    e.from, e.to
                )));
            }
            if !(e.weight > 0.0) {
                return Err(Error::InvalidGraph(format!(
                    "edge {} -> {} has non-positive weight {}",
                    e.from, e.to, e.weight
                )));
            }
            weights[(e.to, e.from)] = e.weight;
        }
        Self::new(weights)
    }

    /// Directed cycle `0 → 1 → … → N−1 → 0` with unit weights.
    pub fn cycle(node_count: usize) -> Self {
        let edges: Vec<Edge> = (0..node_count)
            .filter(|_| node_count > 1)
            .map(|i| Edge {
                from: i,
                to: (i + 1) % node_count,
                weight: 1.0,
            })
            .collect();
        Self::from_edges(node_count, &edges).expect("cycle is a valid graph")
    }

    pub fn node_count(&self) -> usize {
        self.weights.nrows()
    }

    /// Adjacency matrix `[a_ij]`.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn edges(&self) -> Vec<Edge> {
        let n = self.node_count();
        let mut out = Vec::new();
        for from in 0..n {
            for to in 0..n {
                let w = self.weights[(to, from)];
                if w > 0.0 {
                    out.push(Edge { from, to, weight: w });
                }
            }
        }
        out
    }
}

fn reaches_all(n: usize, has_edge: impl Fn(usize, usize) -> bool) -> bool {
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if !seen[v] && has_edge(u, v) {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Every node reaches every other node along positive-weight edges.
pub fn is_strongly_connected(g: &NetworkGraph) -> bool {
    let n = g.node_count();
    let w = g.weights();
    // forward from node 0, then backward: both cover the graph iff one SCC
    reaches_all(n, |u, v| w[(v, u)] > 0.0) && reaches_all(n, |u, v| w[(u, v)] > 0.0)
}

/// `ℒ = 𝒟 − 𝒜`, where `𝒟` holds the row sums of the adjacency matrix.
pub fn laplacian(g: &NetworkGraph) -> DMatrix<f64> {
    let a = g.weights();
    let n = g.node_count();
    let mut l = -a.clone();
    for i in 0..n {
        l[(i, i)] = a.row(i).sum();
    }
    l
}

const NULLSPACE_TOL: f64 = 1e-10;

/// Positive left null vector `r` of a Laplacian, scaled so that `Σ r_i = N`.
pub fn perron_row_vector(l: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = l.nrows();
    if n == 0 || l.ncols() != n {
        return Err(Error::Dimension(format!(
            "Laplacian must be square and nonempty, got {}x{}",
            l.nrows(),
            l.ncols()
        )));
    }
    let svd = crate::linalg::sorted_svd(&l.transpose());
    let v_t = svd.v_t;
    let smax = svd.sigma[0];
    let null: Vec<usize> = (0..n)
        .filter(|&k| svd.sigma[k] <= NULLSPACE_TOL * smax)
        .collect();
    if null.len() != 1 {
        return Err(Error::PerronNullity(null.len()));
    }
    let mut r: DVector<f64> = v_t.row(null[0]).transpose();
    let total = r.sum();
    if total == 0.0 {
        return Err(Error::PerronNotPositive(0.0));
    }
    r *= n as f64 / total;
    let min = r.min();
    if !(min > 0.0) {
        return Err(Error::PerronNotPositive(min));
    }
    Ok(r)
}

/// Laplacian spectral data of a strongly connected graph.
#[derive(Clone, Debug)]
pub struct GraphSpectralData {
    pub laplacian: DMatrix<f64>,
    pub perron_row: DVector<f64>,
    pub r_diag: DMatrix<f64>,
    /// `ℒ̂ = Rℒ + ℒᵀR`.
    pub mirror: DMatrix<f64>,
    /// Second-smallest eigenvalue of the mirror Laplacian; `+∞` for a single node.
    pub lambda2: f64,
}

impl GraphSpectralData {
    /// `Rℒ`, the Laplacian of the balanced graph.
    pub fn balanced_laplacian(&self) -> DMatrix<f64> {
        &self.r_diag * &self.laplacian
    }
}

pub fn spectral_data(g: &NetworkGraph) -> Result<GraphSpectralData> {
    if !is_strongly_connected(g) {
        return Err(Error::NotStronglyConnected);
    }
    let l = laplacian(g);
    let r = perron_row_vector(&l)?;
    let r_diag = DMatrix::from_diagonal(&r);
    // entries r_i·l_ij + l_ji·r_j are exactly symmetric in floating point
    let mirror = &r_diag * &l + l.transpose() * &r_diag;
    let ev = linalg::symmetric_eigenvalues(&mirror);
    let lambda2 = if ev.len() > 1 { ev[1] } else { f64::INFINITY };
    Ok(GraphSpectralData {
        laplacian: l,
        perron_row: r,
        r_diag,
        mirror,
        lambda2,
    })
}
