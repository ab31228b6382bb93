//! Dense kernels used by the synthesis: full-rank factorization, orthogonal
//! observability decomposition, a Schur-based Lyapunov solver and the
//! eigenvalue tests behind every certificate.
//!
//! Everything works on `DMatrix<f64>`. Zero-sized blocks are legal and show
//! up routinely (a node whose output sees the whole observable subspace has
//! empty `a12`/`a22` blocks, a node with `p = n` has an empty observer).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default relative threshold for numerical rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-10;

/// Thin SVD with singular values sorted in decreasing order.
pub(crate) struct SortedSvd {
    pub(crate) u: DMatrix<f64>,
    pub(crate) sigma: Vec<f64>,
    pub(crate) v_t: DMatrix<f64>,
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD of a tall matrix, `m.nrows() >= m.ncols()`.
///
/// nalgebra's bidiagonal SVD occasionally returns factors that do not
/// reproduce rank-deficient inputs, which corrupts the rank decisions made
/// here. Jacobi rotations keep `U·Σ` and `V` exact up to rounding and resolve
/// small singular values to high relative accuracy.
fn jacobi_svd_tall(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (rows, k) = m.shape();
    let mut w = m.clone();
    let mut v = DMatrix::<f64>::identity(k, k);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let (x, y) = (w[(r, p)], w[(r, q)]);
                    w[(r, p)] = c * x - s * y;
                    w[(r, q)] = s * x + c * y;
                }
                for r in 0..k {
                    let (x, y) = (v[(r, p)], v[(r, q)]);
                    v[(r, p)] = c * x - s * y;
                    v[(r, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = (0..k).map(|j| w.column(j).norm()).collect();
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    // Columns whose singular value is negligible carry no reliable direction;
    // replace them with an orthonormal completion of the others.
    let cutoff = smax * f64::EPSILON * rows.max(k) as f64;
    let kept: Vec<usize> = order.iter().copied().filter(|&j| sigma[j] > cutoff && sigma[j] > 0.0).collect();
    let mut u = DMatrix::zeros(rows, k);
    for (c, &j) in kept.iter().enumerate() {
        u.set_column(c, &(w.column(j) / sigma[j]));
    }
    if kept.len() < k {
        let fill = orthonormal_complement(&u.columns(0, kept.len()).into_owned());
        let need = k - kept.len();
        u.columns_mut(kept.len(), need).copy_from(&fill.columns(0, need));
    }
    let sorted_sigma = order.iter().map(|&j| sigma[j]).collect();
    let sorted_v = DMatrix::from_fn(k, k, |r, c| v[(r, order[c])]);
    (u, sorted_sigma, sorted_v)
}

pub(crate) fn sorted_svd(m: &DMatrix<f64>) -> SortedSvd {
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return SortedSvd {
            u: DMatrix::zeros(m.nrows(), 0),
            sigma: Vec::new(),
            v_t: DMatrix::zeros(0, m.ncols()),
        };
    }
    if m.nrows() >= m.ncols() {
        let (u, sigma, v) = jacobi_svd_tall(m);
        SortedSvd { u, sigma, v_t: v.transpose() }
    } else {
        let (v, sigma, u) = jacobi_svd_tall(&m.transpose());
        SortedSvd { u, sigma, v_t: v.transpose() }
    }
}

/// Number of singular values above `tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let s = sorted_svd(m);
    rank_of(&s.sigma, tol)
}

fn rank_of(sigma: &[f64], tol: f64) -> usize {
    match sigma.first() {
        Some(&smax) if smax > 0.0 => sigma.iter().filter(|&&s| s > tol * smax).count(),
        _ => 0,
    }
}

/// Orthonormal columns spanning the `dim` least significant right singular
/// directions of `m`; an approximate null space when `m` is nearly singular.
pub fn trailing_right_singular_vectors(m: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let n = m.ncols();
    let dim = dim.min(n);
    let s = sorted_svd(m);
    let mut v = DMatrix::zeros(n, n);
    let k = s.v_t.nrows();
    v.columns_mut(0, k).copy_from(&s.v_t.transpose());
    if k < n {
        let fill = orthonormal_complement(&v.columns(0, k).into_owned());
        v.columns_mut(k, n - k).copy_from(&fill);
    }
    v.columns(n - dim, dim).into_owned()
}

/// Largest singular value.
pub fn norm2(m: &DMatrix<f64>) -> f64 {
    sorted_svd(m).sigma.first().copied().unwrap_or(0.0)
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

fn require_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Flip column signs so that the first clearly nonzero entry of every column
/// is positive.
pub fn normalize_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let scale = col.amax();
        if scale == 0.0 {
            continue;
        }
        if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-10 * scale) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Orthogonal factor `UVᵀ` of the polar decomposition of a square matrix;
/// `None` if it is singular.
pub fn orthogonal_polar(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let s = sorted_svd(m);
    if m.nrows() != m.ncols() || rank_of(&s.sigma, DEFAULT_RANK_TOL) < m.nrows() {
        return None;
    }
    Some(s.u * s.v_t)
}

/// Orthonormal basis for the orthogonal complement of the span of the
/// orthonormal columns of `q`.
pub fn orthonormal_complement(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    let k = q.ncols();
    if k == 0 {
        return DMatrix::identity(n, n);
    }
    if k >= n {
        return DMatrix::zeros(n, 0);
    }
    let mut stacked = DMatrix::zeros(n, k + n);
    stacked.columns_mut(0, k).copy_from(q);
    stacked.columns_mut(k, n).fill_with_identity();
    let full_q = stacked.qr().q();
    let mut basis = full_q.columns(k, n - k).into_owned();
    // Householder QR only determines the leading block up to sign; project
    // once more so the complement is clean to machine precision.
    basis -= q * (q.transpose() * &basis);
    let basis = basis.qr().q();
    let mut basis = basis.columns(0, n - k).into_owned();
    normalize_column_signs(&mut basis);
    basis
}

/// Stacked `col(C, CA, …, CA^{n-1})`.
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = c.nrows();
    let mut out = DMatrix::zeros(m * n, n);
    let mut block = c.clone();
    for k in 0..n {
        out.view_mut((k * m, 0), (m, n)).copy_from(&block);
        block = &block * a;
    }
    out
}

/// Orthonormal basis of the observable subspace `(ker O)^⊥` of the pair
/// `(c, a)`, grown Krylov-style from the row space of `c`.
///
/// The first columns of the result span `im cᵀ`; every later group spans the
/// directions added by one more application of `aᵀ`.
fn observable_basis(a: &DMatrix<f64>, c: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, usize) {
    let n = a.nrows();
    let ct = sorted_svd(&c.transpose());
    let p = rank_of(&ct.sigma, tol);
    let mut basis = ct.u.columns(0, p).into_owned();
    let a_scale = a.norm();
    let mut fresh = basis.clone();
    while basis.ncols() < n && fresh.ncols() > 0 && a_scale > 0.0 {
        let mut cand = a.transpose() * &fresh;
        for _ in 0..2 {
            cand -= &basis * (basis.transpose() * &cand);
        }
        let s = sorted_svd(&cand);
        let keep = s
            .sigma
            .iter()
            .filter(|&&sv| sv > tol * a_scale)
            .count()
            .min(n - basis.ncols());
        if keep == 0 {
            break;
        }
        let mut added = s.u.columns(0, keep).into_owned();
        added -= &basis * (basis.transpose() * &added);
        let added = added.qr().q().columns(0, keep).into_owned();
        basis = DMatrix::from_fn(n, basis.ncols() + keep, |r, col| {
            if col < basis.ncols() {
                basis[(r, col)]
            } else {
                added[(r, col - basis.ncols())]
            }
        });
        fresh = added;
    }
    (basis, p)
}

/// Dimension of the observable subspace of `(c, a)`.
pub fn observable_dimension(a: &DMatrix<f64>, c: &DMatrix<f64>, tol: f64) -> usize {
    observable_basis(a, c, tol).0.ncols()
}

/// `C = D·F` with `D` of full column rank and `F` of full row rank.
#[derive(Clone, Debug, PartialEq)]
pub struct FullRankFactorization {
    pub d_factor: DMatrix<f64>,
    pub f_factor: DMatrix<f64>,
    pub rank: usize,
}

impl FullRankFactorization {
    /// `D† = (DᵀD)⁻¹Dᵀ`.
    pub fn d_pinv(&self) -> DMatrix<f64> {
        let dtd = self.d_factor.transpose() * &self.d_factor;
        let inv = dtd
            .try_inverse()
            .expect("full column rank factor has invertible Gram matrix");
        inv * self.d_factor.transpose()
    }

    /// `F† = Fᵀ(FFᵀ)⁻¹`.
    pub fn f_pinv(&self) -> DMatrix<f64> {
        let fft = &self.f_factor * self.f_factor.transpose();
        let inv = fft
            .try_inverse()
            .expect("full row rank factor has invertible Gram matrix");
        self.f_factor.transpose() * inv
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.d_factor * &self.f_factor
    }
}

/// Rank-revealing factorization of a local output matrix.
///
/// A matrix with full row rank is returned as `D = I`, `F = C`. Otherwise the
/// factors come from a thin SVD, `D = U_p Σ_p` and `F = V_pᵀ`.
pub fn full_rank_factorize(c: &DMatrix<f64>, tol: f64) -> Result<FullRankFactorization> {
    let s = sorted_svd(c);
    let rank = rank_of(&s.sigma, tol);
    if rank == 0 {
        return Err(Error::ZeroOutput);
    }
    if rank == c.nrows() {
        return Ok(FullRankFactorization {
            d_factor: DMatrix::identity(rank, rank),
            f_factor: c.clone(),
            rank,
        });
    }
    let mut f_factor = s.v_t.rows(0, rank).into_owned();
    let mut d_factor = DMatrix::from_fn(c.nrows(), rank, |r, k| s.u[(r, k)] * s.sigma[k]);
    for k in 0..rank {
        let row = f_factor.row(k);
        let scale = row.amax();
        if let Some(first) = row.iter().copied().find(|x| x.abs() > 1e-10 * scale) {
            if first < 0.0 {
                f_factor.row_mut(k).neg_mut();
                d_factor.column_mut(k).neg_mut();
            }
        }
    }
    Ok(FullRankFactorization {
        d_factor,
        f_factor,
        rank,
    })
}

/// Orthogonal observability decomposition of `(F_i, A)`:
/// `TᵀAT = [[A11, A12, 0], [A21, A22, 0], [A31, A32, Au]]`, `F T = [E 0 0]`.
#[derive(Clone, Debug)]
pub struct NodeDecomposition {
    pub t_orth: DMatrix<f64>,
    pub a11: DMatrix<f64>,
    pub a12: DMatrix<f64>,
    pub a21: DMatrix<f64>,
    pub a22: DMatrix<f64>,
    pub a31: DMatrix<f64>,
    pub a32: DMatrix<f64>,
    pub a_u: DMatrix<f64>,
    pub e_mat: DMatrix<f64>,
    pub v_dim: usize,
    pub p_dim: usize,
}

impl NodeDecomposition {
    pub fn n(&self) -> usize {
        self.t_orth.nrows()
    }

    /// `v − p`: dimension of the observable part not read directly off the output.
    pub fn estimated_dim(&self) -> usize {
        self.v_dim - self.p_dim
    }

    /// `n − v`: dimension of the unobservable subspace.
    pub fn unobservable_dim(&self) -> usize {
        self.n() - self.v_dim
    }

    /// Observer order `n − p`.
    pub fn order(&self) -> usize {
        self.n() - self.p_dim
    }

    /// True when the output already spans the whole observable subspace.
    pub fn is_output_complete(&self) -> bool {
        self.v_dim == self.p_dim
    }

    pub fn t_ip(&self) -> DMatrix<f64> {
        self.t_orth.columns(0, self.p_dim).into_owned()
    }

    pub fn t_is(&self) -> DMatrix<f64> {
        self.t_orth.columns(self.p_dim, self.order()).into_owned()
    }

    pub fn ea12(&self) -> DMatrix<f64> {
        &self.e_mat * &self.a12
    }

    pub fn e_inv(&self) -> DMatrix<f64> {
        self.e_mat
            .clone()
            .try_inverse()
            .expect("E is nonsingular by construction")
    }

    /// `A_io = [[A11, A12], [A21, A22]]`.
    pub fn a_io(&self) -> DMatrix<f64> {
        let (p, v) = (self.p_dim, self.v_dim);
        let mut out = DMatrix::zeros(v, v);
        out.view_mut((0, 0), (p, p)).copy_from(&self.a11);
        out.view_mut((0, p), (p, v - p)).copy_from(&self.a12);
        out.view_mut((p, 0), (v - p, p)).copy_from(&self.a21);
        out.view_mut((p, p), (v - p, v - p)).copy_from(&self.a22);
        out
    }

    /// `F_io = [E 0]`.
    pub fn f_io(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.p_dim, self.v_dim);
        out.view_mut((0, 0), (self.p_dim, self.p_dim))
            .copy_from(&self.e_mat);
        out
    }

    /// Size of the blocks of `TᵀAT` that the decomposition forces to zero.
    pub fn structural_residual(&self, a: &DMatrix<f64>) -> f64 {
        let ta = self.t_orth.transpose() * a * &self.t_orth;
        let v = self.v_dim;
        ta.view((0, v), (v, self.n() - v)).amax_or_zero()
    }
}

trait AmaxOrZero {
    fn amax_or_zero(&self) -> f64;
}

impl<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::RawStorage<f64, R, C>> AmaxOrZero
    for nalgebra::Matrix<f64, R, C, S>
{
    fn amax_or_zero(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.amax()
        }
    }
}

pub fn observability_decomposition(
    a: &DMatrix<f64>,
    f_i: &DMatrix<f64>,
    tol: f64,
) -> Result<NodeDecomposition> {
    require_square(a, "A")?;
    let n = a.nrows();
    if f_i.ncols() != n {
        return Err(Error::Dimension(format!(
            "F has {} columns, A is {n}x{n}",
            f_i.ncols()
        )));
    }
    let p = f_i.nrows();
    let (observable, rank) = observable_basis(a, f_i, tol);
    if rank != p || p == 0 {
        return Err(Error::RankDeficient { rank, rows: p });
    }
    let v = observable.ncols();
    let unobservable = orthonormal_complement(&observable);

    let mut t = DMatrix::zeros(n, n);
    t.columns_mut(0, v).copy_from(&observable);
    t.columns_mut(v, n - v).copy_from(&unobservable);
    normalize_column_signs(&mut t);
    decomposition_from_basis(a, f_i, t, p, v)
}

/// Read the decomposition blocks off a given orthogonal `T`, whose first `p`
/// columns span `im F_iᵀ` and first `v` columns the observable subspace.
///
/// Used to rebuild the blocks from stored gains; the structural zero blocks
/// are not checked here (see [`NodeDecomposition::structural_residual`]).
pub fn decomposition_from_basis(
    a: &DMatrix<f64>,
    f_i: &DMatrix<f64>,
    t: DMatrix<f64>,
    p: usize,
    v: usize,
) -> Result<NodeDecomposition> {
    let n = a.nrows();
    if t.shape() != (n, n) || f_i.shape() != (p, n) || p > v || v > n {
        return Err(Error::Dimension(format!(
            "basis {}x{}, F {}x{}, p = {p}, v = {v}, n = {n}",
            t.nrows(),
            t.ncols(),
            f_i.nrows(),
            f_i.ncols()
        )));
    }
    let ta = t.transpose() * a * &t;
    let e_mat = f_i * t.columns(0, p);
    if numerical_rank(&e_mat, DEFAULT_RANK_TOL) < p {
        return Err(Error::Singular("E = F·T_p".into()));
    }
    let block = |r0: usize, c0: usize, nr: usize, nc: usize| ta.view((r0, c0), (nr, nc)).into_owned();
    Ok(NodeDecomposition {
        a11: block(0, 0, p, p),
        a12: block(0, p, p, v - p),
        a21: block(p, 0, v - p, p),
        a22: block(p, p, v - p, v - p),
        a31: block(v, 0, n - v, p),
        a32: block(v, p, n - v, v - p),
        a_u: block(v, v, n - v, n - v),
        e_mat,
        t_orth: t,
        v_dim: v,
        p_dim: p,
    })
}

/// Eigenvalues of a general real matrix as `(re, im)` pairs.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<(f64, f64)> {
    if m.is_empty() {
        return Vec::new();
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect()
}

/// Largest real part over the spectrum; `-∞` for an empty matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest modulus over the spectrum.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .into_iter()
        .map(|(re, im)| re.hypot(im))
        .fold(0.0, f64::max)
}

fn checked_symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    require_square(m, "symmetric matrix")?;
    let asym = asymmetry(m);
    let scale = m.amax_or_zero().max(1.0);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(symmetric_eigenvalues(m))
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    DVector::from_vec(ev)
}

/// Smallest eigenvalue of a symmetric matrix; `+∞` for an empty one.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let ev = checked_symmetric_eigenvalues(m)?;
    Ok(ev.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Largest eigenvalue of a symmetric matrix; `-∞` for an empty one.
pub fn max_symmetric_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let ev = checked_symmetric_eigenvalues(m)?;
    Ok(ev.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// `m` (after symmetrization) has every eigenvalue strictly below `-margin`.
pub fn is_negative_definite(m: &DMatrix<f64>, margin: f64) -> bool {
    let ev = symmetric_eigenvalues(m);
    ev.iter().all(|&l| l < -margin)
}

/// Solve `aᵀP + Pa + q = 0` for Hurwitz `a`.
///
/// Bartels–Stewart: reduce `a = U S Uᵀ` to real Schur form, solve the
/// quasi-triangular equation `SᵀY + YS = −UᵀqU` block by block, map back.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_square(a, "Lyapunov coefficient")?;
    let k = a.nrows();
    if q.shape() != (k, k) {
        return Err(Error::Dimension(format!(
            "Lyapunov forcing is {}x{}, coefficient is {k}x{k}",
            q.nrows(),
            q.ncols()
        )));
    }
    if k == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let abscissa = spectral_abscissa(a);
    if !(abscissa < 0.0) {
        return Err(Error::Unstable(abscissa));
    }

    let (u, s) = a.clone().schur().unpack();
    let rhs = -(u.transpose() * q * &u);
    let blocks = schur_blocks(&s);
    let mut y = DMatrix::<f64>::zeros(k, k);

    for &(rk, sk) in &blocks {
        for &(cl, sl) in &blocks {
            let mut r = rhs.view((rk, cl), (sk, sl)).into_owned();
            // Σ_{i<k} S_ikᵀ Y_il
            if rk > 0 {
                r -= s.view((0, rk), (rk, sk)).transpose() * y.view((0, cl), (rk, sl));
            }
            // Σ_{j<l} Y_kj S_jl
            if cl > 0 {
                r -= y.view((rk, 0), (sk, cl)) * s.view((0, cl), (cl, sl));
            }
            let skk = s.view((rk, rk), (sk, sk)).into_owned();
            let sll = s.view((cl, cl), (sl, sl)).into_owned();
            let x = small_sylvester(&skk.transpose(), &sll, &r)?;
            y.view_mut((rk, cl), (sk, sl)).copy_from(&x);
        }
    }
    Ok(symmetrize(&(&u * y * u.transpose())))
}

/// Diagonal block layout `(start, size)` of a real quasi-triangular matrix.
fn schur_blocks(s: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let k = s.nrows();
    let mut out = Vec::new();
    let mut i = 0;
    while i < k {
        if i + 1 < k && s[(i + 1, i)] != 0.0 {
            out.push((i, 2));
            i += 2;
        } else {
            out.push((i, 1));
            i += 1;
        }
    }
    out
}

/// Solve `a X + X b = r` for blocks of size at most 2 by vectorization.
fn small_sylvester(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = (a.nrows(), b.nrows());
    let big = DMatrix::<f64>::identity(n, n).kronecker(a) + b.transpose().kronecker(&DMatrix::<f64>::identity(m, m));
    let rhs = DVector::from_column_slice(r.as_slice());
    let sol = big
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Sylvester block".into()))?;
    Ok(DMatrix::from_column_slice(m, n, sol.as_slice()))
}

/// Relative residual `‖aᵀP + Pa + q‖ / (‖a‖‖P‖ + ‖q‖)`.
pub fn lyapunov_residual(a: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let res = a.transpose() * p + p * a + q;
    let scale = a.norm() * p.norm() + q.norm();
    if scale == 0.0 {
        res.norm()
    } else {
        res.norm() / scale
    }
}
