//! Constructive design of the reduced-order distributed observer.
//!
//! Each node `i` runs an observer of order `n − p_i`
//!
//! ```text
//! ż_i = N_i z_i + L_i y_i + γ r_i M_i Σ_j a_ij (x̂_j − x̂_i)
//! x̂_i = P_i z_i + Q_i y_i
//! ```
//!
//! The pipeline is: factor `C_i = D_i F_i`, decompose `(F_i, A)` orthogonally,
//! compute the Perron vector, pick `ε` and `γ`, place `H_i`, solve for `𝒫_ie`
//! and assemble the gains. The result is then certified independently:
//! cancellation identity, the per-node LMI, the restricted spectral abscissa
//! and the Lyapunov decrease matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, Step, StepExt};
use crate::error_system::{self, GlobalErrorSystem};
use crate::graph::{self, GraphSpectralData, NetworkGraph};
use crate::linalg::{self, FullRankFactorization, NodeDecomposition};
use crate::plant::Plant;

/// Relative bound on the cancellation residual, scaled by `‖A‖`.
pub const CANCELLATION_TOL: f64 = 1e-9;
/// Bound on the invariance identities of the global error matrix.
pub const INVARIANCE_TOL: f64 = 1e-9;

/// Lower end of the γ bisection bracket, in units of `β = γε − 2α`.
pub const BETA_FLOOR: f64 = 1e-6;
const BISECTION_RTOL: f64 = 1e-6;

/// Extra decay beyond `α` requested from the Bass gain, one entry per attempt.
const PLACEMENT_MARGINS: [f64; 6] = [0.5, 1.0, 2.0, 3.0, 4.0, 5.0];
/// Extra decay beyond `α` built into the Riccati injection gain.
const RICCATI_MARGIN: f64 = 0.5;
const RICCATI_MAX_ITER: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisParameters {
    /// Desired error convergence rate.
    pub alpha: f64,
    /// Per-node weights `g_i`; `None` means all ones.
    pub g_weights: Option<Vec<f64>>,
    pub epsilon_fraction: f64,
    pub gamma_safety: f64,
    pub rank_tol: f64,
}

impl Default for SynthesisParameters {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            g_weights: None,
            epsilon_fraction: 0.9,
            gamma_safety: 1.25,
            rank_tol: linalg::DEFAULT_RANK_TOL,
        }
    }
}

impl SynthesisParameters {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    /// Check ranges and resolve the `g_i` for `node_count` nodes.
    pub fn resolve_g(&self, node_count: usize) -> Result<Vec<f64>> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha = {}", self.alpha)));
        }
        if !(self.epsilon_fraction > 0.0 && self.epsilon_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon_fraction = {} not in (0, 1)",
                self.epsilon_fraction
            )));
        }
        if !(self.gamma_safety > 1.0) || !self.gamma_safety.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma_safety = {} must exceed 1",
                self.gamma_safety
            )));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "rank_tol = {} not in (0, 1)",
                self.rank_tol
            )));
        }
        let g = match &self.g_weights {
            None => vec![1.0; node_count],
            Some(g) if g.len() == node_count => g.clone(),
            Some(g) => {
                return Err(Error::InvalidParameter(format!(
                    "{} g weights for {node_count} nodes",
                    g.len()
                )))
            }
        };
        if let Some(bad) = g.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidParameter(format!("g weight {bad} must be positive")));
        }
        Ok(g)
    }
}

/// Gains of one local observer.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGains {
    /// `N_i`, (n−p)×(n−p)
    pub n_gain: DMatrix<f64>,
    /// `L_i`, (n−p)×m
    pub l_gain: DMatrix<f64>,
    /// `M_i`, (n−p)×n
    pub m_gain: DMatrix<f64>,
    /// `P_i = T_is`, n×(n−p)
    pub p_out: DMatrix<f64>,
    /// `Q_i = T_i K_i`, n×m
    pub q_out: DMatrix<f64>,
    /// `K_i` in decomposition coordinates, n×m
    pub k_mat: DMatrix<f64>,
    /// `H_i`, (v−p)×p
    pub h_inj: DMatrix<f64>,
    /// `𝒫_ie`, (v−p)×(v−p)
    pub p_ie: DMatrix<f64>,
    /// `T_is`, n×(n−p)
    pub t_is: DMatrix<f64>,
}

impl NodeGains {
    pub fn n(&self) -> usize {
        self.t_is.nrows()
    }

    pub fn order(&self) -> usize {
        self.t_is.ncols()
    }

    pub fn p_dim(&self) -> usize {
        self.n() - self.order()
    }

    pub fn v_dim(&self) -> usize {
        self.p_dim() + self.p_ie.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.q_out.ncols()
    }

    /// `x̂_i = P_i z_i + Q_i y_i`.
    pub fn estimate(&self, z: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.p_out * z + &self.q_out * y
    }

    /// Observer state that makes `x̂_i = x` for the given plant state.
    pub fn consistent_state(&self, x: &DVector<f64>, c_i: &DMatrix<f64>) -> DVector<f64> {
        self.t_is.transpose() * (x - &self.q_out * (c_i * x))
    }

    /// Check internal dimensions against plant size `n` and output size `m`.
    pub fn check_dimensions(&self, n: usize, m: usize) -> Result<()> {
        let k = self.order();
        let e = self.p_ie.nrows();
        let p = n.checked_sub(k).ok_or_else(|| {
            Error::Dimension(format!("observer order {k} exceeds plant order {n}"))
        })?;
        let expect = [
            ("N", &self.n_gain, (k, k)),
            ("L", &self.l_gain, (k, m)),
            ("M", &self.m_gain, (k, n)),
            ("P", &self.p_out, (n, k)),
            ("Q", &self.q_out, (n, m)),
            ("K", &self.k_mat, (n, m)),
            ("H", &self.h_inj, (e, p)),
            ("Pie", &self.p_ie, (e, e)),
            ("Tis", &self.t_is, (n, k)),
        ];
        for (name, mat, shape) in expect {
            if mat.shape() != shape {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {}x{}",
                    mat.nrows(),
                    mat.ncols(),
                    shape.0,
                    shape.1
                )));
            }
        }
        if e > k {
            return Err(Error::Dimension(format!("Pie is {e}x{e} but order is {k}")));
        }
        Ok(())
    }
}

/// The complete distributed observer.
#[derive(Clone, Debug, PartialEq)]
pub struct ObserverRealization {
    pub nodes: Vec<NodeGains>,
    pub gamma: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub r_vector: DVector<f64>,
    pub total_order: usize,
}

/// Numerical evidence attached to a synthesized observer.
#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub epsilon: f64,
    pub gamma: f64,
    pub restricted_spectral_abscissa: f64,
    pub cancellation_residual_max: f64,
    /// Largest eigenvalue of each node's LMI block; `-∞` for an empty block.
    pub lmi_max_eigenvalues: Vec<f64>,
    pub lyapunov_max_eigenvalue: f64,
    pub invariance_residual: f64,
}

/// Everything the pipeline computed on the way to the realization.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub realization: ObserverRealization,
    pub factorizations: Vec<FullRankFactorization>,
    pub decompositions: Vec<NodeDecomposition>,
    pub spectral: GraphSpectralData,
    pub error_system: GlobalErrorSystem,
    pub certificate: Certificate,
}

/// `Tᵀ(ℒ̂ ⊗ I_n)T + G` with `T = diag(T_i)` and `G_i = diag(g_i I_{v_i}, 0)`.
pub fn coupling_matrix(
    decomps: &[NodeDecomposition],
    spectral: &GraphSpectralData,
    g_weights: &[f64],
) -> Result<DMatrix<f64>> {
    let big_n = spectral.mirror.nrows();
    if decomps.len() != big_n || g_weights.len() != big_n {
        return Err(Error::Dimension(format!(
            "{} decompositions and {} weights for {big_n} nodes",
            decomps.len(),
            g_weights.len()
        )));
    }
    let n = decomps[0].n();
    let t = linalg::block_diag(&decomps.iter().map(|d| d.t_orth.clone()).collect::<Vec<_>>());
    let g = linalg::block_diag(
        &decomps
            .iter()
            .zip(g_weights)
            .map(|(d, &gi)| {
                DMatrix::from_fn(n, n, |r, c| if r == c && r < d.v_dim { gi } else { 0.0 })
            })
            .collect::<Vec<_>>(),
    );
    let lift = spectral.mirror.kronecker(&DMatrix::<f64>::identity(n, n));
    Ok(linalg::symmetrize(&(t.transpose() * lift * &t)) + g)
}

/// `ε = fraction · λ_min(Tᵀ(ℒ̂ ⊗ I)T + G)`.
pub fn compute_epsilon(
    decomps: &[NodeDecomposition],
    spectral: &GraphSpectralData,
    g_weights: &[f64],
    epsilon_fraction: f64,
) -> Result<f64> {
    let m = coupling_matrix(decomps, spectral, g_weights)?;
    let lambda_min = linalg::min_symmetric_eigenvalue(&m)?;
    let scale = m.amax().max(1.0);
    if !(lambda_min > 1e-10 * scale) {
        return Err(Error::CouplingNotPositive(lambda_min));
    }
    Ok(epsilon_fraction * lambda_min)
}

/// Largest eigenvalue of `A_uᵀ + A_u − βI + β⁻¹ A_32 A_32ᵀ`; negative iff the
/// γ condition holds at `β = γε − 2α`. `-∞` for a node without an
/// unobservable block.
pub fn gamma_condition(decomp: &NodeDecomposition, beta: f64) -> f64 {
    let k = decomp.unobservable_dim();
    if k == 0 {
        return f64::NEG_INFINITY;
    }
    let au = &decomp.a_u;
    let m = au + au.transpose() - DMatrix::<f64>::identity(k, k) * beta
        + &decomp.a32 * decomp.a32.transpose() / beta;
    linalg::symmetric_eigenvalues(&m).max()
}

/// Smallest `β` (to bisection accuracy, at least [`BETA_FLOOR`]) satisfying
/// the γ condition for one node. The returned value is itself feasible.
pub fn min_feasible_beta(decomp: &NodeDecomposition) -> f64 {
    if decomp.unobservable_dim() == 0 {
        return BETA_FLOOR;
    }
    let feasible = |b: f64| gamma_condition(decomp, b) < 0.0;
    let mut hi = 1.0;
    while !feasible(hi) {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > BISECTION_RTOL * hi && hi > BETA_FLOOR {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Coupling gain: minimal feasible value over all nodes, inflated by `gamma_safety`.
///
/// Feasible means `γε − 2α > 0`, `γ g_i > 2α` for every node, and the γ
/// condition holds for every node with an unobservable block.
pub fn select_gamma(
    decomps: &[NodeDecomposition],
    epsilon: f64,
    alpha: f64,
    gamma_safety: f64,
    g_weights: &[f64],
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon = {epsilon}")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("alpha = {alpha}")));
    }
    let beta = decomps
        .iter()
        .map(min_feasible_beta)
        .fold(BETA_FLOOR, f64::max);
    let g_min = g_weights.iter().copied().fold(f64::INFINITY, f64::min);
    let mut gamma_min = (beta + 2.0 * alpha) / epsilon;
    if g_min.is_finite() {
        gamma_min = gamma_min.max(2.0 * alpha / g_min);
    }
    Ok(gamma_min * gamma_safety)
}

/// Injection gain `H` with `spectral_abscissa(a22 − H·ea12) ≤ −α − ½`.
///
/// Tries [`modal_injection`] first; otherwise a Riccati gain refined from a
/// Bass gain, or the Bass gain itself.
pub fn place_injection(a22: &DMatrix<f64>, ea12: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let k = a22.nrows();
    let p = ea12.nrows();
    if a22.ncols() != k || ea12.ncols() != k {
        return Err(Error::Dimension(format!(
            "A22 is {}x{}, E·A12 is {}x{}",
            a22.nrows(),
            a22.ncols(),
            p,
            ea12.ncols()
        )));
    }
    if k == 0 {
        return Ok(DMatrix::zeros(0, p));
    }
    let rank = linalg::observable_dimension(a22, ea12, linalg::DEFAULT_RANK_TOL);
    if rank < k {
        return Err(Error::PairUnobservable { rank, n: k });
    }
    let target = -alpha - PLACEMENT_MARGINS[0];
    let meets = |h: &DMatrix<f64>| {
        h.iter().all(|v| v.is_finite()) && linalg::spectral_abscissa(&(a22 - h * ea12)) <= target
    };
    if let Some(h) = modal_injection(a22, ea12, target).filter(|h| meets(h)) {
        return Ok(h);
    }
    riccati_injection(a22, ea12, alpha)
}

/// Successive modal placement: every eigenvalue of `a22` with real part above
/// `target − ⅒` is moved, one real eigenvalue or complex pair at a time, to a
/// point left of `target` by the minimum-norm gain acting on its invariant
/// subspace `W` (`H ← H + W·Y`), which leaves the rest of the spectrum in place.
/// `None` when a step is numerically singular.
pub fn modal_injection(a22: &DMatrix<f64>, ea12: &DMatrix<f64>, target: f64) -> Option<DMatrix<f64>> {
    let k = a22.nrows();
    let p = ea12.nrows();
    let eye = DMatrix::<f64>::identity(k, k);
    let mut h = DMatrix::zeros(k, p);
    for step in 0..2 * k + 2 {
        let closed = a22 - &h * ea12;
        let Some(&(re, im)) = linalg::eigenvalues(&closed)
            .iter()
            .filter(|(re, _)| *re > target - 0.1)
            .max_by(|a, b| a.0.total_cmp(&b.0))
        else {
            return Some(h);
        };
        let goal = target - 0.1 * (1.0 + step as f64);
        let scale = closed.norm().max(1.0);
        let y = if im.abs() <= 1e-9 * scale {
            let w = linalg::trailing_right_singular_vectors(&(&closed - &eye * re), 1);
            let c = ea12 * &w;
            let c2 = c.norm_squared();
            if !(c2 > 0.0) {
                return None;
            }
            let y = c.transpose() * ((re - goal) / c2);
            &w * y
        } else {
            let shifted = &closed - &eye * re;
            let w = linalg::trailing_right_singular_vectors(&(&shifted * &shifted + &eye * (im * im)), 2);
            let lam = w.transpose() * &closed * &w;
            let cw = ea12 * &w;
            let y = pair_gain(&lam, &cw, re - goal, goal, im.abs())?;
            &w * y
        };
        h += y;
    }
    None
}

/// Minimum-norm `Y` (2×p) moving the spectrum of the 2×2 block `lam` to
/// `goal ± i·im` under `lam − Y·cw`: a uniform real shift through `cw⁺`
/// when `cw` has full column rank, otherwise a rank-one gain along the
/// dominant output direction fixed by trace and determinant.
fn pair_gain(lam: &DMatrix<f64>, cw: &DMatrix<f64>, shift: f64, goal: f64, im: f64) -> Option<DMatrix<f64>> {
    let p = cw.nrows();
    let mut best: Option<DMatrix<f64>> = None;
    if p >= 2 && linalg::numerical_rank(cw, 1e-6) == 2 {
        if let Some(pinv) = (cw.transpose() * cw).try_inverse().map(|g| g * cw.transpose()) {
            best = Some(pinv * shift);
        }
    }
    // rank one: Y = y·uᵀ with u the dominant left direction of cw, c = uᵀ·cw
    let u = linalg::trailing_right_singular_vectors(&cw.transpose(), p).column(0).into_owned();
    let c = u.transpose() * cw;
    let adj = DMatrix::from_row_slice(2, 2, &[lam[(1, 1)], -lam[(0, 1)], -lam[(1, 0)], lam[(0, 0)]]);
    let det = lam[(0, 0)] * lam[(1, 1)] - lam[(0, 1)] * lam[(1, 0)];
    let mut sys = DMatrix::zeros(2, 2);
    sys.row_mut(0).copy_from(&c);
    sys.row_mut(1).copy_from(&(&c * &adj));
    let rhs = DVector::from_vec(vec![lam.trace() - 2.0 * goal, det - (goal * goal + im * im)]);
    if let Some(y) = sys.lu().solve(&rhs) {
        let rank_one = &y * u.transpose();
        if best.as_ref().is_none_or(|b| rank_one.norm() < b.norm()) {
            best = Some(rank_one);
        }
    }
    best
}

/// Riccati injection gain.
///
/// `H = X·ea12ᵀ` with `X` the stabilizing solution of the filter Riccati
/// equation `ĀX + XĀᵀ − X·ea12ᵀ·ea12·X + I = 0`, `Ā = a22 + (α + ½)I`,
/// reached by Newton–Kleinman iteration from a Bass gain.
/// Falls back to the Bass gain if the iteration breaks down.
fn riccati_injection(a22: &DMatrix<f64>, ea12: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let k = a22.nrows();
    let bass = bass_injection(a22, ea12, alpha)?;

    let eye = DMatrix::<f64>::identity(k, k);
    let shifted = a22 + &eye * (alpha + RICCATI_MARGIN);
    let mut h = bass.clone();
    for _ in 0..RICCATI_MAX_ITER {
        let closed = &shifted - &h * ea12;
        let Ok(x) = linalg::solve_lyapunov(&closed.transpose(), &(&h * h.transpose() + &eye)) else {
            return Ok(bass);
        };
        let next = x * ea12.transpose();
        let step = (&next - &h).norm();
        h = next;
        if step <= 1e-13 * h.norm() {
            break;
        }
    }
    let abscissa = linalg::spectral_abscissa(&(a22 - &h * ea12));
    if h.iter().all(|v| v.is_finite()) && abscissa < -alpha {
        Ok(h)
    } else {
        Ok(bass)
    }
}

/// Bass injection gain on the dual pair `(a22ᵀ, ea12ᵀ)`.
///
/// For a shift `β` with `−(a22 + βI)` Hurwitz, the solution `X ≻ 0` of
/// `(a22 + βI)ᵀX + X(a22 + βI) = ea12ᵀ·ea12` gives `H = X⁻¹ ea12ᵀ`, and the
/// closed loop has every eigenvalue left of `−β`. The pair must be observable.
fn bass_injection(a22: &DMatrix<f64>, ea12: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let k = a22.nrows();
    if k == 0 {
        return Ok(DMatrix::zeros(0, ea12.nrows()));
    }
    let min_re = linalg::eigenvalues(a22)
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::INFINITY, f64::min);
    let eye = DMatrix::<f64>::identity(k, k);
    let forcing = ea12.transpose() * ea12;
    let target = -alpha;
    let mut best = f64::INFINITY;
    for margin in PLACEMENT_MARGINS {
        let shift = alpha + margin;
        let beta = shift.max(shift - min_re);
        let coeff = -(a22 + &eye * beta);
        let x = match linalg::solve_lyapunov(&coeff, &forcing) {
            Ok(x) => x,
            Err(_) => continue,
        };
        let Some(h) = x.clone().lu().solve(&ea12.transpose()) else {
            continue;
        };
        let abscissa = linalg::spectral_abscissa(&(a22 - &h * ea12));
        if abscissa < target - 0.5 {
            return Ok(h);
        }
        best = best.min(abscissa);
        if abscissa < target && margin == *PLACEMENT_MARGINS.last().unwrap() {
            return Ok(h);
        }
    }
    Err(Error::PlacementFailed {
        abscissa: best,
        target,
    })
}

/// `𝒫_ie ≻ 0` solving
/// `(A22 − H E A12 + αI)ᵀ𝒫 + 𝒫(A22 − H E A12 + αI) + (γ − 2α)I = 0`.
///
/// `gamma` is the node's effective coupling weight `γ·g_i`.
pub fn solve_pie(
    a22: &DMatrix<f64>,
    ea12: &DMatrix<f64>,
    h: &DMatrix<f64>,
    gamma: f64,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let k = a22.nrows();
    if k == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if !(gamma > 2.0 * alpha) {
        return Err(Error::GammaTooSmall {
            gamma,
            two_alpha: 2.0 * alpha,
        });
    }
    if h.shape() != (k, ea12.nrows()) {
        return Err(Error::Dimension(format!(
            "H is {}x{}, expected {}x{}",
            h.nrows(),
            h.ncols(),
            k,
            ea12.nrows()
        )));
    }
    let eye = DMatrix::<f64>::identity(k, k);
    let shifted = a22 - h * ea12 + &eye * alpha;
    let pie = linalg::solve_lyapunov(&shifted, &(&eye * (gamma - 2.0 * alpha)))?;
    let lmin = linalg::min_symmetric_eigenvalue(&pie)?;
    if !(lmin > 0.0) {
        return Err(Error::Singular(format!(
            "Lyapunov solution is not positive definite (lambda_min = {lmin:e})"
        )));
    }
    Ok(pie)
}

fn vstack(blocks: &[&DMatrix<f64>], cols: usize) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Assemble `N_i, L_i, M_i, P_i, Q_i, K_i` from the decomposition, `H_i` and `𝒫_ie`.
///
/// Nodes whose output spans the whole observable subspace (`v_i = p_i`) use
/// the reduced formulas `N_i = A_iu`, `L_i = A_i31 E⁻¹ D†`, `M_i = T_isᵀ`.
pub fn assemble_gains(
    decomp: &NodeDecomposition,
    frf: &FullRankFactorization,
    h: &DMatrix<f64>,
    pie: &DMatrix<f64>,
) -> Result<NodeGains> {
    let n = decomp.n();
    let p = decomp.p_dim;
    let e = decomp.estimated_dim();
    let u = decomp.unobservable_dim();
    let m = frf.d_factor.nrows();
    if frf.rank != p || frf.f_factor.shape() != (p, n) {
        return Err(Error::Dimension(format!(
            "factorization has rank {}, decomposition has p = {p}",
            frf.rank
        )));
    }
    if h.shape() != (e, p) || pie.shape() != (e, e) {
        return Err(Error::Dimension(format!(
            "H is {}x{} and Pie is {}x{}, expected {e}x{p} and {e}x{e}",
            h.nrows(),
            h.ncols(),
            pie.nrows(),
            pie.ncols()
        )));
    }
    let e_inv = decomp.e_inv();
    let d_pinv = frf.d_pinv();
    let t_is = decomp.t_is();

    if decomp.is_output_complete() {
        let k_basis = vstack(&[&e_inv, &DMatrix::zeros(n - p, p)], p);
        let k_mat = k_basis * &d_pinv;
        return Ok(NodeGains {
            n_gain: decomp.a_u.clone(),
            l_gain: &decomp.a31 * &e_inv * &d_pinv,
            m_gain: t_is.transpose(),
            p_out: t_is.clone(),
            q_out: &decomp.t_orth * &k_mat,
            k_mat,
            h_inj: h.clone(),
            p_ie: pie.clone(),
            t_is,
        });
    }

    let k_basis = vstack(&[&e_inv, h, &DMatrix::zeros(u, p)], p);
    let k_mat = k_basis * &d_pinv;

    let mut n_gain = DMatrix::zeros(n - p, n - p);
    n_gain
        .view_mut((0, 0), (e, e))
        .copy_from(&(&decomp.a22 - h * decomp.ea12()));
    n_gain.view_mut((e, 0), (u, e)).copy_from(&decomp.a32);
    n_gain.view_mut((e, e), (u, u)).copy_from(&decomp.a_u);

    let s_t_k = k_mat.rows(p, n - p).into_owned();
    let top = &decomp.a21 - h * &decomp.e_mat * &decomp.a11;
    let l_gain = vstack(&[&top, &decomp.a31], p) * &e_inv * &d_pinv + &n_gain * &s_t_k;

    let pie_inv = pie
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("Pie".into()))?;
    let weight = linalg::block_diag(&[pie_inv, DMatrix::identity(u, u)]);
    let m_gain = weight * t_is.transpose();

    debug_assert_eq!(l_gain.shape(), (n - p, m));
    Ok(NodeGains {
        n_gain,
        l_gain,
        m_gain,
        p_out: t_is.clone(),
        q_out: &decomp.t_orth * &k_mat,
        k_mat,
        h_inj: h.clone(),
        p_ie: pie.clone(),
        t_is,
    })
}

/// Frobenius norm of the state-cancellation identity in decomposition coordinates:
/// `(S L − S N Sᵀ K) D F T + S N Sᵀ + (K D F T − I) TᵀAT`.
pub fn verify_cancellation(
    gains: &NodeGains,
    decomp: &NodeDecomposition,
    frf: &FullRankFactorization,
) -> f64 {
    let n = decomp.n();
    let p = decomp.p_dim;
    let mut s = DMatrix::zeros(n, n - p);
    s.view_mut((p, 0), (n - p, n - p)).fill_with_identity();
    let dft = &frf.d_factor * &frf.f_factor * &decomp.t_orth;
    let ta = transformed_a(decomp);
    let snst = &s * &gains.n_gain * s.transpose();
    let res = (&s * &gains.l_gain - &snst * &gains.k_mat) * &dft + &snst
        + (&gains.k_mat * &dft - DMatrix::<f64>::identity(n, n)) * ta;
    res.norm()
}

/// Orthonormal basis of `im T_isᗮ` rotated onto `F†E`, where `E⁻¹ = K_p D`
/// is read off the stored `K`; this recovers the synthesis `T_p` from a gains
/// file. Falls back to the plain complement when `K_p D` is singular.
fn aligned_output_basis(g: &NodeGains, frf: &FullRankFactorization) -> DMatrix<f64> {
    let t_p = linalg::orthonormal_complement(&g.t_is);
    let p = g.p_dim();
    if g.k_mat.nrows() < p || g.k_mat.ncols() != frf.d_factor.nrows() {
        return t_p;
    }
    let e_inv = g.k_mat.rows(0, p) * &frf.d_factor;
    let Some(e) = e_inv.try_inverse() else {
        return t_p;
    };
    let target = frf.f_pinv() * e;
    linalg::orthogonal_polar(&(t_p.transpose() * target)).map_or(t_p.clone(), |r| t_p * r)
}

/// The same identity mapped back to plant coordinates, using only the gains:
/// `P L C − P N Pᵀ Q C + P N Pᵀ + (Q C − I) A`.
pub fn cancellation_residual(gains: &NodeGains, a: &DMatrix<f64>, c_i: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let p = &gains.p_out;
    let pnp = p * &gains.n_gain * p.transpose();
    let qc = &gains.q_out * c_i;
    let res = p * &gains.l_gain * c_i - &pnp * &qc + &pnp + (qc - DMatrix::<f64>::identity(n, n)) * a;
    res.norm()
}

/// `‖T_ipᵀ(Q_i C_i − I)‖ / max(1, ‖Q_i C_i‖)`: zero iff every estimation error
/// `x̂_i − x` lies in `im T_is`, whatever the plant state.
pub fn output_consistency_residual(gains: &NodeGains, c_i: &DMatrix<f64>) -> f64 {
    let n = gains.n();
    let qc = &gains.q_out * c_i;
    let scale = qc.norm().max(1.0);
    let t = &gains.t_is;
    let leak = &qc - DMatrix::<f64>::identity(n, n);
    (&leak - t * (t.transpose() * &leak)).norm() / scale
}

/// `TᵀAT` rebuilt from the decomposition blocks, with the structural zeros exact.
pub fn transformed_a(decomp: &NodeDecomposition) -> DMatrix<f64> {
    let n = decomp.n();
    let v = decomp.v_dim;
    let mut ta = DMatrix::zeros(n, n);
    ta.view_mut((0, 0), (v, v)).copy_from(&decomp.a_io());
    ta.view_mut((v, 0), (n - v, decomp.p_dim))
        .copy_from(&decomp.a31);
    ta.view_mut((v, decomp.p_dim), (n - v, v - decomp.p_dim))
        .copy_from(&decomp.a32);
    ta.view_mut((v, v), (n - v, n - v)).copy_from(&decomp.a_u);
    ta
}

/// Candidate solution of the per-node LMI.
#[derive(Clone, Debug, PartialEq)]
pub struct LmiCandidate {
    pub p_ie: DMatrix<f64>,
    pub p_iu: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

/// The candidate implied by the constructive design: `𝒫_iu = I`, `W_i = 𝒫_ie H_i`.
pub fn constructive_candidate(decomp: &NodeDecomposition, gains: &NodeGains) -> LmiCandidate {
    let u = decomp.unobservable_dim();
    LmiCandidate {
        p_ie: gains.p_ie.clone(),
        p_iu: DMatrix::identity(u, u),
        w: &gains.p_ie * &gains.h_inj,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmiReport {
    pub pass: bool,
    pub max_eigenvalues: Vec<f64>,
    pub first_violation: Option<usize>,
}

/// The left-hand side of the per-node LMI for one candidate.
pub fn lmi_block(
    candidate: &LmiCandidate,
    decomp: &NodeDecomposition,
    gamma: f64,
    epsilon: f64,
    alpha: f64,
    g: f64,
) -> Result<DMatrix<f64>> {
    let e = decomp.estimated_dim();
    let u = decomp.unobservable_dim();
    let p = decomp.p_dim;
    if candidate.p_ie.shape() != (e, e)
        || candidate.p_iu.shape() != (u, u)
        || candidate.w.shape() != (e, p)
    {
        return Err(Error::Dimension(format!(
            "candidate blocks {:?}, {:?}, {:?} do not match v−p = {e}, n−v = {u}, p = {p}",
            candidate.p_ie.shape(),
            candidate.p_iu.shape(),
            candidate.w.shape()
        )));
    }
    let pie = &candidate.p_ie;
    let piu = &candidate.p_iu;
    let wea = &candidate.w * decomp.ea12();
    let phi = pie * &decomp.a22 + decomp.a22.transpose() * pie - &wea - wea.transpose()
        + pie * (2.0 * alpha);
    let mut block = DMatrix::zeros(e + u, e + u);
    block
        .view_mut((0, 0), (e, e))
        .copy_from(&(phi + DMatrix::<f64>::identity(e, e) * (gamma * g)));
    let off = piu * &decomp.a32;
    block.view_mut((e, 0), (u, e)).copy_from(&off);
    block.view_mut((0, e), (e, u)).copy_from(&off.transpose());
    block.view_mut((e, e), (u, u)).copy_from(
        &(decomp.a_u.transpose() * piu + piu * &decomp.a_u + piu * (2.0 * alpha)),
    );
    block -= DMatrix::<f64>::identity(e + u, e + u) * (gamma * epsilon);
    Ok(linalg::symmetrize(&block))
}

/// Check negative definiteness of every node's LMI block.
pub fn verify_lmi_th1(
    candidates: &[LmiCandidate],
    decomps: &[NodeDecomposition],
    gamma: f64,
    epsilon: f64,
    alpha: f64,
    g_weights: &[f64],
) -> Result<LmiReport> {
    if candidates.len() != decomps.len() || g_weights.len() != decomps.len() {
        return Err(Error::Dimension(format!(
            "{} candidates, {} decompositions, {} weights",
            candidates.len(),
            decomps.len(),
            g_weights.len()
        )));
    }
    let mut max_eigenvalues = Vec::with_capacity(decomps.len());
    for ((cand, d), &g) in candidates.iter().zip(decomps).zip(g_weights) {
        let block = lmi_block(cand, d, gamma, epsilon, alpha, g)?;
        max_eigenvalues.push(linalg::symmetric_eigenvalues(&block).iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let first_violation = max_eigenvalues.iter().position(|&l| !(l < 0.0));
    Ok(LmiReport {
        pass: first_violation.is_none(),
        max_eigenvalues,
        first_violation,
    })
}

/// Run the full design pipeline and certify the result.
pub fn synthesize(plant: &Plant, graph: &NetworkGraph, params: &SynthesisParameters) -> Result<Synthesis> {
    let big_n = plant.node_count();
    if graph.node_count() != big_n {
        return Err(Error::Dimension(format!(
            "graph has {} nodes, output partition has {big_n}",
            graph.node_count()
        )))
        .at(Step::Validation);
    }
    let g_weights = params.resolve_g(big_n).at(Step::Validation)?;
    let alpha = params.alpha;
    let tol = params.rank_tol;
    let a = plant.a();
    let n = plant.n();

    if !graph::is_strongly_connected(graph) {
        return Err(Error::NotStronglyConnected).at(Step::Graph);
    }
    let observable = linalg::observable_dimension(a, plant.c(), tol);
    if observable < n {
        return Err(Error::PlantUnobservable { rank: observable, n }).at(Step::Observability);
    }

    let factorizations = (0..big_n)
        .map(|i| linalg::full_rank_factorize(&plant.c_block(i), tol))
        .collect::<Result<Vec<_>>>()
        .at(Step::Factorization)?;
    let decompositions = factorizations
        .iter()
        .map(|f| linalg::observability_decomposition(a, &f.f_factor, tol))
        .collect::<Result<Vec<_>>>()
        .at(Step::Decomposition)?;

    let spectral = graph::spectral_data(graph).at(Step::Perron)?;
    let epsilon = compute_epsilon(&decompositions, &spectral, &g_weights, params.epsilon_fraction)
        .at(Step::Epsilon)?;
    let gamma = select_gamma(&decompositions, epsilon, alpha, params.gamma_safety, &g_weights)
        .at(Step::Gamma)?;

    let injections = decompositions
        .iter()
        .map(|d| place_injection(&d.a22, &d.ea12(), alpha))
        .collect::<Result<Vec<_>>>()
        .at(Step::Injection)?;
    let pies = decompositions
        .iter()
        .zip(&injections)
        .zip(&g_weights)
        .map(|((d, h), &g)| solve_pie(&d.a22, &d.ea12(), h, gamma * g, alpha))
        .collect::<Result<Vec<_>>>()
        .at(Step::Lyapunov)?;
    let nodes = decompositions
        .iter()
        .zip(&factorizations)
        .zip(injections.iter().zip(&pies))
        .map(|((d, f), (h, pie))| assemble_gains(d, f, h, pie))
        .collect::<Result<Vec<_>>>()
        .at(Step::Assembly)?;

    let total_order = nodes.iter().map(NodeGains::order).sum();
    let realization = ObserverRealization {
        nodes,
        gamma,
        epsilon,
        alpha,
        r_vector: spectral.perron_row.clone(),
        total_order,
    };

    let (error_system, certificate) =
        certify(&realization, &decompositions, &factorizations, &spectral, &g_weights, plant)
            .at(Step::Certification)?;
    Ok(Synthesis {
        realization,
        factorizations,
        decompositions,
        spectral,
        error_system,
        certificate,
    })
}

fn certify(
    realization: &ObserverRealization,
    decomps: &[NodeDecomposition],
    frfs: &[FullRankFactorization],
    spectral: &GraphSpectralData,
    g_weights: &[f64],
    plant: &Plant,
) -> Result<(GlobalErrorSystem, Certificate)> {
    let alpha = realization.alpha;
    let a = plant.a();
    let cancellation_residual_max = realization
        .nodes
        .iter()
        .zip(decomps.iter().zip(frfs))
        .map(|(g, (d, f))| verify_cancellation(g, d, f))
        .fold(0.0, f64::max);
    let bound = CANCELLATION_TOL * a.norm().max(f64::EPSILON);
    if !(cancellation_residual_max <= bound) {
        return Err(Error::Certificate {
            name: "cancellation",
            detail: format!("residual {cancellation_residual_max:e} > {bound:e}"),
        });
    }

    let candidates: Vec<_> = decomps
        .iter()
        .zip(&realization.nodes)
        .map(|(d, g)| constructive_candidate(d, g))
        .collect();
    let lmi = verify_lmi_th1(
        &candidates,
        decomps,
        realization.gamma,
        realization.epsilon,
        alpha,
        g_weights,
    )?;
    if let Some(i) = lmi.first_violation {
        return Err(Error::Certificate {
            name: "lmi",
            detail: format!("node {} max eigenvalue {:e}", i + 1, lmi.max_eigenvalues[i]),
        });
    }

    let sys = error_system::build_error_system(realization, spectral)?;
    let invariance_residual = realization
        .nodes
        .iter()
        .enumerate()
        .map(|(i, g)| output_consistency_residual(g, &plant.c_block(i)))
        .fold(sys.invariance_residual(), f64::max);
    if !(invariance_residual <= INVARIANCE_TOL) {
        return Err(Error::Certificate {
            name: "invariance",
            detail: format!("residual {invariance_residual:e}"),
        });
    }
    let rate = error_system::certify_rate(&sys, alpha);
    if !rate.pass {
        return Err(Error::Certificate {
            name: "rate",
            detail: format!("abscissa {:e} not below {:e}", rate.abscissa, -alpha),
        });
    }
    let lyapunov_max_eigenvalue = error_system::lyapunov_max_eigenvalue(&sys, realization, alpha)?;
    if !(lyapunov_max_eigenvalue < 0.0) {
        return Err(Error::Certificate {
            name: "lyapunov",
            detail: format!("max eigenvalue {lyapunov_max_eigenvalue:e}"),
        });
    }
    let certificate = Certificate {
        epsilon: realization.epsilon,
        gamma: realization.gamma,
        restricted_spectral_abscissa: rate.abscissa,
        cancellation_residual_max,
        lmi_max_eigenvalues: lmi.max_eigenvalues,
        lyapunov_max_eigenvalue,
        invariance_residual,
    };
    Ok((sys, certificate))
}

/// One named check of [`verify_realization`].
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
    pub lmi_max_eigenvalues: Vec<f64>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().find(|c| !c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Re-certify stored gains against a plant and graph, without re-running the design.
///
/// The decomposition blocks are rebuilt from each node's `T_is`, so the
/// checks see exactly the matrices in the realization. `g_weights` defaults
/// to all ones.
pub fn verify_realization(
    realization: &ObserverRealization,
    plant: &Plant,
    graph: &NetworkGraph,
    g_weights: Option<&[f64]>,
    rank_tol: f64,
) -> Result<VerificationReport> {
    let big_n = plant.node_count();
    let n = plant.n();
    if realization.nodes.len() != big_n || graph.node_count() != big_n || realization.r_vector.len() != big_n {
        return Err(Error::Dimension(format!(
            "{} observer nodes, {} graph nodes, {big_n} output blocks",
            realization.nodes.len(),
            graph.node_count()
        )));
    }
    let ones = vec![1.0; big_n];
    let g_weights = g_weights.unwrap_or(&ones);
    if g_weights.len() != big_n {
        return Err(Error::Dimension(format!("{} g weights for {big_n} nodes", g_weights.len())));
    }
    let a = plant.a();
    let mut decomps = Vec::with_capacity(big_n);
    let mut frfs = Vec::with_capacity(big_n);
    for (i, g) in realization.nodes.iter().enumerate() {
        let c_i = plant.c_block(i);
        g.check_dimensions(n, c_i.nrows())
            .map_err(|e| Error::Dimension(format!("node {}: {e}", i + 1)))?;
        let frf = linalg::full_rank_factorize(&c_i, rank_tol)?;
        if frf.rank != g.p_dim() {
            return Err(Error::Dimension(format!(
                "node {}: rank C_i = {} but the observer has order {} (p = {})",
                i + 1,
                frf.rank,
                g.order(),
                g.p_dim()
            )));
        }
        let t_p = aligned_output_basis(g, &frf);
        let mut t = DMatrix::zeros(n, n);
        t.columns_mut(0, g.p_dim()).copy_from(&t_p);
        t.columns_mut(g.p_dim(), g.order()).copy_from(&g.t_is);
        decomps.push(linalg::decomposition_from_basis(a, &frf.f_factor, t, g.p_dim(), g.v_dim())?);
        frfs.push(frf);
    }

    let mut checks = Vec::new();
    let bound = CANCELLATION_TOL * a.norm().max(f64::EPSILON);
    let cancel = realization
        .nodes
        .iter()
        .zip(decomps.iter().zip(&frfs))
        .map(|(g, (d, f))| verify_cancellation(g, d, f))
        .fold(0.0, f64::max);
    checks.push(CheckResult {
        name: "cancellation",
        value: cancel,
        bound,
        pass: cancel <= bound,
    });

    let candidates: Vec<_> = decomps
        .iter()
        .zip(&realization.nodes)
        .map(|(d, g)| constructive_candidate(d, g))
        .collect();
    let lmi = verify_lmi_th1(
        &candidates,
        &decomps,
        realization.gamma,
        realization.epsilon,
        realization.alpha,
        g_weights,
    )?;
    let lmi_worst = lmi.max_eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    checks.push(CheckResult {
        name: "lmi",
        value: lmi_worst,
        bound: 0.0,
        pass: lmi.pass,
    });

    let mut spectral = graph::spectral_data(graph)?;
    spectral.perron_row = realization.r_vector.clone();
    spectral.r_diag = DMatrix::from_diagonal(&realization.r_vector);
    let sys = error_system::build_error_system(realization, &spectral)?;
    let rate = error_system::certify_rate(&sys, realization.alpha);
    checks.push(CheckResult {
        name: "rate",
        value: rate.abscissa,
        bound: -realization.alpha,
        pass: rate.pass,
    });

    let invariance = realization
        .nodes
        .iter()
        .enumerate()
        .map(|(i, g)| output_consistency_residual(g, &plant.c_block(i)))
        .fold(sys.invariance_residual(), f64::max);
    checks.push(CheckResult {
        name: "invariance",
        value: invariance,
        bound: INVARIANCE_TOL,
        pass: invariance <= INVARIANCE_TOL,
    });

    let lyap = error_system::lyapunov_max_eigenvalue(&sys, realization, realization.alpha)?;
    checks.push(CheckResult {
        name: "lyapunov",
        value: lyap,
        bound: 0.0,
        pass: lyap < 0.0,
    });

    Ok(VerificationReport {
        checks,
        lmi_max_eigenvalues: lmi.max_eigenvalues,
    })
}
