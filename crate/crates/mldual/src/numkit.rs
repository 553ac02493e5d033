//! Dense complex linear algebra primitives: numerical rank decisions,
//! subspace bases, Hadamard quotients and marginal sums.
//!
//! Everything downstream funnels its rank questions through [`svd_rank`] so
//! that one tolerance convention governs the whole pipeline: a singular
//! value counts toward the rank iff `sigma_k > rel_tol * sigma_1`, with
//! magnitudes below an absolute floor treated as exact zeros.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Dense complex matrix used throughout the crate.
pub type CMat = DMatrix<Complex64>;
/// Dense complex column vector used throughout the crate.
pub type CVec = DVector<Complex64>;

/// Default relative tolerance for numerical rank decisions.
pub const DEFAULT_REL_TOL: f64 = 1e-8;

/// Magnitudes below this floor are treated as exact zeros, so that an all
/// but identically zero matrix reports rank 0 instead of dividing noise by
/// noise.
const ABS_FLOOR: f64 = 1e-300;

/// Which subspace [`subspace_basis`] should return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subspace {
    /// Orthonormal basis of the column space (image).
    ColumnSpace,
    /// Orthonormal basis of the right null space (kernel).
    NullSpace,
}

/// Outcome of a numerical rank decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    /// Number of singular values exceeding `rel_tol * sigma_1`.
    pub rank: usize,
    /// All singular values, sorted in descending order.
    pub singular_values: Vec<f64>,
    /// Relative tolerance the decision was made with.
    pub rel_tol: f64,
    /// Spectral gap `sigma_rank / sigma_{rank+1}`; infinite when the tail is
    /// empty or identically zero. A small gap flags an unreliable decision.
    pub gap: f64,
}

pub(crate) fn validate_finite(a: &CMat) -> Result<()> {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let z = a[(i, j)];
            if !z.re.is_finite() || !z.im.is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Full SVD through the faer backend: descending singular values with full
/// orthonormal factors (`u` is m x m, `v` is n x n, columns of `v` beyond
/// min(m, n) pair with implicit zero singular values). nalgebra's complex
/// SVD can silently mis-converge on some well-conditioned inputs (factors
/// orthonormal but the reconstruction off by ~1e-3), so every consumer of
/// singular values or vectors funnels through this routine instead.
fn svd_full(a: &CMat) -> (CMat, Vec<f64>, CMat) {
    use faer::complex_native::c64;
    let (m, n) = a.shape();
    let fa = faer::Mat::from_fn(m, n, |i, j| c64::new(a[(i, j)].re, a[(i, j)].im));
    let svd = fa.svd();
    let s = svd.s_diagonal();
    let sv_raw: Vec<f64> = (0..s.nrows()).map(|i| s[i].re).collect();
    let back = |fm: faer::MatRef<'_, c64>| {
        CMat::from_fn(fm.nrows(), fm.ncols(), |i, j| {
            Complex64::new(fm[(i, j)].re, fm[(i, j)].im)
        })
    };
    let mut u = back(svd.u());
    let mut v = back(svd.v());
    // faer returns the values in descending order already; enforce it (with
    // the matching column permutation) so a backend change can never
    // silently scramble rank cuts.
    let mut order: Vec<usize> = (0..sv_raw.len()).collect();
    order.sort_by(|&i, &j| sv_raw[j].partial_cmp(&sv_raw[i]).unwrap());
    if order.iter().enumerate().any(|(k, &i)| k != i) {
        let (u0, v0) = (u.clone(), v.clone());
        for (k, &i) in order.iter().enumerate() {
            u.set_column(k, &u0.column(i));
            v.set_column(k, &v0.column(i));
        }
    }
    let sv: Vec<f64> = order.iter().map(|&i| sv_raw[i]).collect();
    (u, sv, v)
}

/// Numerical rank of `a` at relative tolerance `rel_tol` (singular value
/// counts iff `sigma_k > rel_tol * sigma_1`).
///
/// Errors on non-finite entries. The zero matrix (largest singular value
/// below the absolute floor) has rank 0.
pub fn svd_rank(a: &CMat, rel_tol: f64) -> Result<RankReport> {
    validate_finite(a)?;
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::Domain(format!(
            "rank tolerance must lie in (0, 1), got {rel_tol}"
        )));
    }
    let sv: Vec<f64> = if a.nrows() == 0 || a.ncols() == 0 {
        Vec::new()
    } else {
        svd_full(a).1
    };
    let sigma1 = sv.first().copied().unwrap_or(0.0);
    let rank = if sigma1 <= ABS_FLOOR {
        0
    } else {
        sv.iter().take_while(|&&s| s > rel_tol * sigma1).count()
    };
    let gap = if rank == 0 || rank == sv.len() || sv[rank] <= ABS_FLOOR {
        f64::INFINITY
    } else {
        sv[rank - 1] / sv[rank]
    };
    Ok(RankReport {
        rank,
        singular_values: sv,
        rel_tol,
        gap,
    })
}

/// Orthonormal basis (as matrix columns) of the column space or right null
/// space of `a`, with the split between the two decided by [`svd_rank`]'s
/// rule at `rel_tol`.
///
/// The null space of an `m x n` zero matrix is all of `C^n` (identity
/// basis); its column space is an `m x 0` matrix.
pub fn subspace_basis(a: &CMat, which: Subspace, rel_tol: f64) -> Result<CMat> {
    validate_finite(a)?;
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Ok(match which {
            Subspace::ColumnSpace => CMat::zeros(m, 0),
            Subspace::NullSpace => CMat::identity(n, n),
        });
    }
    let (u, sv, v) = svd_full(a);
    let sigma1 = sv.first().copied().unwrap_or(0.0);
    let rank = if sigma1 <= ABS_FLOOR {
        0
    } else {
        sv.iter().take_while(|&&s| s > rel_tol * sigma1).count()
    };
    // `v` is the full n x n right factor: its trailing columns beyond
    // min(m, n) pair with implicit zero singular values, so columns
    // rank..n are exactly the right null space.
    Ok(match which {
        Subspace::ColumnSpace => u.columns(0, rank).into_owned(),
        Subspace::NullSpace => v.columns(rank, n - rank).into_owned(),
    })
}

/// Entrywise quotient `num ./ den`.
///
/// Errors with the offending position if `den` has an exactly zero entry or
/// either matrix has a non-finite one.
pub fn hadamard_div(num: &CMat, den: &CMat) -> Result<CMat> {
    validate_finite(num)?;
    validate_finite(den)?;
    if num.shape() != den.shape() {
        return Err(Error::Dimension(format!(
            "hadamard_div: {:?} vs {:?}",
            num.shape(),
            den.shape()
        )));
    }
    let mut out = num.clone();
    for i in 0..num.nrows() {
        for j in 0..num.ncols() {
            let d = den[(i, j)];
            if d == Complex64::new(0.0, 0.0) {
                return Err(Error::ZeroDivisor { row: i, col: j });
            }
            out[(i, j)] /= d;
        }
    }
    Ok(out)
}

/// Row sums, column sums and grand total of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub row: CVec,
    pub col: CVec,
    pub total: Complex64,
}

/// Marginal sums of `a`: row sums, column sums and the grand total.
pub fn marginals(a: &CMat) -> Result<Marginals> {
    validate_finite(a)?;
    let row = CVec::from_iterator(a.nrows(), a.row_iter().map(|r| r.sum()));
    let col = CVec::from_iterator(a.ncols(), a.column_iter().map(|c| c.sum()));
    let total = row.sum();
    Ok(Marginals { row, col, total })
}

/// Frobenius norm.
pub fn frobenius_norm(a: &CMat) -> f64 {
    a.norm()
}

/// Relative Frobenius distance `|a - b| / max(|a|, |b|)`, the metric used
/// for solution deduplication. Two zero matrices are at distance 0.
pub fn rel_frobenius_distance(a: &CMat, b: &CMat) -> f64 {
    let denom = frobenius_norm(a).max(frobenius_norm(b));
    if denom <= ABS_FLOOR {
        return 0.0;
    }
    (a - b).norm() / denom
}

pub(crate) fn gaussian_complex<R: Rng>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub(crate) fn gaussian_cmat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> CMat {
    // Column-major fill order; fixed here so seeded runs are reproducible.
    CMat::from_fn(rows, cols, |_, _| gaussian_complex(rng))
}

pub(crate) fn gaussian_cvec<R: Rng>(rng: &mut R, n: usize) -> CVec {
    CVec::from_fn(n, |_, _| gaussian_complex(rng))
}

/// Row-major vectorization (matches the JSON entry order).
pub(crate) fn vec_rowmajor(a: &CMat) -> CVec {
    CVec::from_fn(a.nrows() * a.ncols(), |k, _| {
        a[(k / a.ncols(), k % a.ncols())]
    })
}

pub(crate) fn unvec_rowmajor(v: &CVec, rows: usize, cols: usize) -> CMat {
    debug_assert_eq!(v.len(), rows * cols);
    CMat::from_fn(rows, cols, |i, j| v[i * cols + j])
}

/// Real matrix lifted to complex entries.
pub fn cmat_from_real(rows: usize, cols: usize, entries: &[f64]) -> CMat {
    debug_assert_eq!(entries.len(), rows * cols);
    CMat::from_fn(rows, cols, |i, j| {
        Complex64::new(entries[i * cols + j], 0.0)
    })
}
