//! Global closed-loop error dynamics and the analytic certificates built on them.
//!
//! With `e = col(e_1, …, e_N)` the stacked estimation error, the coupled
//! observers give `ė = (T_s N T_sᵀ − γ T_s M (Rℒ ⊗ I)) e`. The error stays in
//! `im T_s`, so writing `e = T_s z` yields the restricted generator
//! `N − γ M (Rℒ ⊗ I) T_s`, which carries the convergence rate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::GraphSpectralData;
use crate::linalg;
use crate::synthesis::ObserverRealization;

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalErrorSystem {
    pub full_matrix: DMatrix<f64>,
    pub restricted_matrix: DMatrix<f64>,
    pub t_s: DMatrix<f64>,
    pub t_p: DMatrix<f64>,
}

impl GlobalErrorSystem {
    /// Worst of `‖full·T_s − T_s·restricted‖` and `‖T_pᵀ·full·T_s‖`.
    pub fn invariance_residual(&self) -> f64 {
        let fts = &self.full_matrix * &self.t_s;
        let commute = (&fts - &self.t_s * &self.restricted_matrix).norm();
        let leak = (self.t_p.transpose() * &fts).norm();
        commute.max(leak)
    }

    /// Eigenvalues of the full matrix, as `(re, im)` pairs.
    pub fn full_spectrum(&self) -> Vec<(f64, f64)> {
        linalg::eigenvalues(&self.full_matrix)
    }

    pub fn restricted_spectrum(&self) -> Vec<(f64, f64)> {
        linalg::eigenvalues(&self.restricted_matrix)
    }
}

pub fn build_error_system(
    realization: &ObserverRealization,
    spectral: &GraphSpectralData,
) -> Result<GlobalErrorSystem> {
    let big_n = realization.nodes.len();
    if big_n == 0 || spectral.laplacian.nrows() != big_n {
        return Err(Error::Dimension(format!(
            "{big_n} observer nodes for a {}-node graph",
            spectral.laplacian.nrows()
        )));
    }
    let n = realization.nodes[0].n();
    if let Some(bad) = realization.nodes.iter().position(|g| g.n() != n) {
        return Err(Error::Dimension(format!(
            "node {} has state dimension {}, node 1 has {n}",
            bad + 1,
            realization.nodes[bad].n()
        )));
    }

    let t_s = linalg::block_diag(&realization.nodes.iter().map(|g| g.t_is.clone()).collect::<Vec<_>>());
    let t_p = linalg::block_diag(
        &realization
            .nodes
            .iter()
            .map(|g| linalg::orthonormal_complement(&g.t_is))
            .collect::<Vec<_>>(),
    );
    let n_blk = linalg::block_diag(&realization.nodes.iter().map(|g| g.n_gain.clone()).collect::<Vec<_>>());
    let m_blk = linalg::block_diag(&realization.nodes.iter().map(|g| g.m_gain.clone()).collect::<Vec<_>>());
    let coupling = spectral
        .balanced_laplacian()
        .kronecker(&DMatrix::<f64>::identity(n, n));

    let gm = &m_blk * &coupling * realization.gamma;
    let restricted_matrix = &n_blk - &gm * &t_s;
    let full_matrix = &t_s * (&n_blk * t_s.transpose() - &gm);
    Ok(GlobalErrorSystem {
        full_matrix,
        restricted_matrix,
        t_s,
        t_p,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateCertificate {
    pub abscissa: f64,
    pub pass: bool,
}

impl RateCertificate {
    /// Distance of the abscissa below `−α`; positive when the rate holds.
    pub fn margin(&self, alpha: f64) -> f64 {
        -alpha - self.abscissa
    }
}

pub fn certify_rate(sys: &GlobalErrorSystem, alpha: f64) -> RateCertificate {
    let abscissa = linalg::spectral_abscissa(&sys.restricted_matrix);
    RateCertificate {
        abscissa,
        pass: abscissa < -alpha,
    }
}

/// `𝒫 = diag(𝒫_i)`, `𝒫_i = I − T_is T_isᵀ + T_is diag(𝒫_ie, I) T_isᵀ`.
pub fn lyapunov_weight(realization: &ObserverRealization) -> DMatrix<f64> {
    let blocks: Vec<_> = realization
        .nodes
        .iter()
        .map(|g| {
            let n = g.n();
            let k = g.order();
            let e = g.p_ie.nrows();
            let mut inner = DMatrix::<f64>::identity(k, k);
            inner.view_mut((0, 0), (e, e)).copy_from(&g.p_ie);
            let proj = &g.t_is * g.t_is.transpose();
            DMatrix::<f64>::identity(n, n) - &proj + &g.t_is * inner * g.t_is.transpose()
        })
        .collect();
    linalg::symmetrize(&linalg::block_diag(&blocks))
}

/// `T_sᵀ(Λ + 2α𝒫)T_s` with `Λ = 𝒫F + Fᵀ𝒫` and `F` the full error matrix.
pub fn lyapunov_matrix(sys: &GlobalErrorSystem, realization: &ObserverRealization, alpha: f64) -> DMatrix<f64> {
    let p = lyapunov_weight(realization);
    let pf = &p * &sys.full_matrix;
    let lambda = &pf + pf.transpose();
    linalg::symmetrize(&(sys.t_s.transpose() * (lambda + p * (2.0 * alpha)) * &sys.t_s))
}

/// Largest eigenvalue of [`lyapunov_matrix`]; `-∞` when the observers have order zero.
pub fn lyapunov_max_eigenvalue(
    sys: &GlobalErrorSystem,
    realization: &ObserverRealization,
    alpha: f64,
) -> Result<f64> {
    let m = lyapunov_matrix(sys, realization, alpha);
    if m.nrows() == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    linalg::max_symmetric_eigenvalue(&m)
}

/// Largest sampled value of `(V̇ + 2αV)/V` along `e = T_s z` for random unit `z`.
pub fn lyapunov_decrease_check<R: Rng + ?Sized>(
    sys: &GlobalErrorSystem,
    realization: &ObserverRealization,
    alpha: f64,
    samples: usize,
    rng: &mut R,
) -> f64 {
    let k = sys.t_s.ncols();
    if k == 0 {
        return f64::NEG_INFINITY;
    }
    let num = lyapunov_matrix(sys, realization, alpha);
    let p = lyapunov_weight(realization);
    let den = sys.t_s.transpose() * p * &sys.t_s;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let mut z = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let norm = z.norm();
        if norm == 0.0 {
            continue;
        }
        z /= norm;
        let q = z.dot(&(&num * &z)) / z.dot(&(&den * &z));
        worst = worst.max(q);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{spectral_data, NetworkGraph};
    use crate::synthesis::NodeGains;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand::rngs::StdRng;

    fn toy_node(n_gain: f64) -> NodeGains {
        // n = 2, p = 1, T = I, second coordinate estimated, Pie = 1
        NodeGains {
            n_gain: dmatrix![n_gain],
            l_gain: dmatrix![0.0],
            m_gain: dmatrix![0.0, 1.0],
            p_out: dmatrix![0.0; 1.0],
            q_out: dmatrix![1.0; 0.0],
            k_mat: dmatrix![1.0; 0.0],
            h_inj: dmatrix![0.0],
            p_ie: dmatrix![1.0],
            t_is: dmatrix![0.0; 1.0],
        }
    }

    fn realization(nodes: Vec<NodeGains>, gamma: f64) -> ObserverRealization {
        let big_n = nodes.len();
        ObserverRealization {
            total_order: nodes.iter().map(NodeGains::order).sum(),
            nodes,
            gamma,
            epsilon: 1.0,
            alpha: 0.0,
            r_vector: DVector::from_element(big_n, 1.0),
        }
    }

    #[test]
    fn single_node_has_no_coupling() {
        let real = realization(vec![toy_node(-2.0)], 5.0);
        let spectral = spectral_data(&NetworkGraph::cycle(1)).unwrap();
        let sys = build_error_system(&real, &spectral).unwrap();
        assert_eq!(sys.restricted_matrix, dmatrix![-2.0]);
        assert_eq!(sys.full_matrix, dmatrix![0.0, 0.0; 0.0, -2.0]);
        assert_eq!(sys.invariance_residual(), 0.0);
        let rate = certify_rate(&sys, 1.0);
        assert!(rate.pass);
        assert_eq!(rate.margin(1.0), 1.0);
    }

    #[test]
    fn zero_gamma_decouples() {
        let real = realization(vec![toy_node(-2.0), toy_node(3.0)], 0.0);
        let spectral = spectral_data(&NetworkGraph::cycle(2)).unwrap();
        let sys = build_error_system(&real, &spectral).unwrap();
        assert_eq!(sys.restricted_matrix, dmatrix![-2.0, 0.0; 0.0, 3.0]);
        assert!(!certify_rate(&sys, 0.0).pass);
    }

    #[test]
    fn coupling_stabilizes_unstable_pair() {
        // restricted = diag(1, 1) − γ [[1, −1], [−1, 1]]
        let real = realization(vec![toy_node(1.0), toy_node(1.0)], 5.0);
        let spectral = spectral_data(&NetworkGraph::cycle(2)).unwrap();
        let sys = build_error_system(&real, &spectral).unwrap();
        assert!((&sys.restricted_matrix - dmatrix![-4.0, 5.0; 5.0, -4.0]).norm() < 1e-14);
        // eigenvalues 1 and −9: the common mode is not corrected by consensus alone
        assert!(!certify_rate(&sys, 0.0).pass);
    }

    #[test]
    fn lyapunov_matrix_for_decoupled_node() {
        let real = realization(vec![toy_node(-2.0)], 0.0);
        let spectral = spectral_data(&NetworkGraph::cycle(1)).unwrap();
        let sys = build_error_system(&real, &spectral).unwrap();
        let m = lyapunov_matrix(&sys, &real, 1.0);
        assert!((m[(0, 0)] + 2.0).abs() < 1e-14);
        let mut rng = StdRng::seed_from_u64(7);
        let q = lyapunov_decrease_check(&sys, &real, 1.0, 16, &mut rng);
        assert!((q + 2.0).abs() < 1e-14);
        assert!(lyapunov_max_eigenvalue(&sys, &real, 2.5).unwrap() > 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let real = realization(vec![toy_node(-1.0)], 1.0);
        let spectral = spectral_data(&NetworkGraph::cycle(2)).unwrap();
        assert!(matches!(build_error_system(&real, &spectral), Err(Error::Dimension(_))));
    }
}
