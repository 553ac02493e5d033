//! The four model families: rank-constrained rectangular, symmetric and
//! alternating matrices, plus the translated alternating family that arises
//! as the dual of the skew case.
//!
//! Conventions fixed here and used everywhere else:
//! - `sym` points and data matrices are stored as the full symmetric matrix
//!   with doubled diagonal (`P_ii = 2 p_ii`), so `P = G Gᵀ` holds verbatim,
//!   the normalization reads "full-entry sum = 2", and entrywise quotients
//!   like `U ./ P` need no special diagonal handling.
//! - `skew` points are alternating with upper-entry sum 1; their data
//!   matrices are symmetric with zero diagonal, and `U_{++}` means the full
//!   sum (= twice the upper sum).
//! - `skew_translated` stores the point `Q'` itself; membership constrains
//!   `rank(S − Q')` and there is no sum normalization.

use std::fmt;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::{
    self, frobenius_norm, gaussian_cmat, marginals, subspace_basis, svd_rank, CMat, CVec,
    Subspace, DEFAULT_REL_TOL,
};
use crate::{Error, Result};

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Rect,
    Sym,
    Skew,
    SkewTranslated,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Rect => "rect",
            ModelKind::Sym => "sym",
            ModelKind::Skew => "skew",
            ModelKind::SkewTranslated => "skew_translated",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rect" => Ok(ModelKind::Rect),
            "sym" => Ok(ModelKind::Sym),
            "skew" => Ok(ModelKind::Skew),
            "skew_translated" | "skew-translated" => Ok(ModelKind::SkewTranslated),
            other => Err(Error::InvalidModel(format!("unknown kind `{other}`"))),
        }
    }
}

/// A model family instance: kind, matrix size and rank.
///
/// For `skew_translated` the `r` field holds the translated rank `s`
/// (the rank of `S − P`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub m: usize,
    pub n: usize,
    pub r: usize,
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ModelKind::Rect => write!(f, "rect({},{},{})", self.m, self.n, self.r),
            _ => write!(f, "{}({},{})", self.kind, self.m, self.r),
        }
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind, m: usize, n: usize, r: usize) -> Result<Self> {
        let spec = ModelSpec { kind, m, n, r };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rect(m: usize, n: usize, r: usize) -> Result<Self> {
        Self::new(ModelKind::Rect, m, n, r)
    }

    pub fn sym(m: usize, r: usize) -> Result<Self> {
        Self::new(ModelKind::Sym, m, m, r)
    }

    pub fn skew(m: usize, r: usize) -> Result<Self> {
        Self::new(ModelKind::Skew, m, m, r)
    }

    pub fn skew_translated(m: usize, s: usize) -> Result<Self> {
        Self::new(ModelKind::SkewTranslated, m, m, s)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        match self.kind {
            ModelKind::Rect => {
                if self.m == 0 || !(1..=self.m).contains(&self.r) || self.m > self.n {
                    return bad(format!("rect requires 1 <= r <= m <= n, got {self}"));
                }
            }
            ModelKind::Sym => {
                if self.n != self.m || self.m == 0 || !(1..=self.m).contains(&self.r) {
                    return bad(format!("sym requires 1 <= r <= m = n, got {self}"));
                }
            }
            ModelKind::Skew => {
                if self.n != self.m || self.r % 2 != 0 || !(2..=self.m).contains(&self.r) {
                    return bad(format!("skew requires even r with 2 <= r <= m = n, got {self}"));
                }
            }
            ModelKind::SkewTranslated => {
                if self.n != self.m || self.r % 2 != 0 || self.m < 2 || self.r > self.m - 2 {
                    return bad(format!(
                        "skew_translated requires even s with 0 <= s <= m-2, got {self}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Dimension of the model as a projective-free affine variety (after the
    /// kind's sum normalization, where there is one).
    pub fn model_dim(&self) -> usize {
        let (m, n, r) = (self.m, self.n, self.r);
        match self.kind {
            ModelKind::Rect => r * (m + n - r) - 1,
            ModelKind::Sym => r * (r + 1) / 2 + r * (m - r) - 1,
            // r(m-r) + r(r-1)/2, written to stay in usize range at r = 0.
            ModelKind::Skew => r * (2 * m - r - 1) / 2 - 1,
            ModelKind::SkewTranslated => r * (2 * m - r - 1) / 2,
        }
    }

    /// Number of free coordinates of a data matrix for this kind
    /// (full grid, upper-with-diagonal, or strict-upper).
    pub fn ambient_dim(&self) -> usize {
        let (m, n) = (self.m, self.n);
        match self.kind {
            ModelKind::Rect => m * n,
            ModelKind::Sym => m * (m + 1) / 2,
            ModelKind::Skew | ModelKind::SkewTranslated => m * (m - 1) / 2,
        }
    }

    /// The dual model: rank `m − r + 1` for rect/sym, the translated family
    /// with `s` = largest even integer `≤ m − r` for skew, and back.
    pub fn dual(&self) -> ModelSpec {
        match self.kind {
            ModelKind::Rect => ModelSpec {
                kind: ModelKind::Rect,
                m: self.m,
                n: self.n,
                r: self.m - self.r + 1,
            },
            ModelKind::Sym => ModelSpec {
                kind: ModelKind::Sym,
                m: self.m,
                n: self.n,
                r: self.m - self.r + 1,
            },
            ModelKind::Skew => {
                let diff = self.m - self.r;
                ModelSpec {
                    kind: ModelKind::SkewTranslated,
                    m: self.m,
                    n: self.n,
                    r: diff - diff % 2,
                }
            }
            ModelKind::SkewTranslated => {
                let diff = self.m - self.r;
                ModelSpec {
                    kind: ModelKind::Skew,
                    m: self.m,
                    n: self.n,
                    r: diff - diff % 2,
                }
            }
        }
    }

    /// Shape and structure validation for a data matrix of this kind:
    /// symmetric for `sym`, symmetric with zero diagonal for skew kinds.
    pub fn validate_data(&self, u: &CMat) -> Result<()> {
        numkit::validate_finite(u)?;
        if u.nrows() != self.m || u.ncols() != self.n {
            return Err(Error::Dimension(format!(
                "data matrix is {}x{}, model {self} needs {}x{}",
                u.nrows(),
                u.ncols(),
                self.m,
                self.n
            )));
        }
        let scale = frobenius_norm(u).max(1e-300);
        match self.kind {
            ModelKind::Rect => {}
            ModelKind::Sym => {
                if (u - u.transpose()).norm() > 1e-12 * scale {
                    return Err(Error::Invalid("sym data matrix must be symmetric".into()));
                }
            }
            ModelKind::Skew | ModelKind::SkewTranslated => {
                if (u - u.transpose()).norm() > 1e-12 * scale {
                    return Err(Error::Invalid(
                        "skew data matrix must be symmetric (symmetrized counts)".into(),
                    ));
                }
                for i in 0..self.m {
                    if u[(i, i)].norm() > 1e-12 * scale {
                        return Err(Error::Invalid(
                            "skew data matrix must have zero diagonal".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Degeneracy screen used by the critical-system assembler: marginals
    /// and the total must be bounded away from zero relative to the scale.
    pub(crate) fn validate_data_generic(&self, u: &CMat) -> Result<()> {
        self.validate_data(u)?;
        let marg = marginals(u)?;
        let scale = frobenius_norm(u).max(1e-300);
        let floor = 1e-10 * scale;
        if marg.total.norm() < floor {
            return Err(Error::Degenerate("data matrix has near-zero total".into()));
        }
        for i in 0..u.nrows() {
            if marg.row[i].norm() < floor {
                return Err(Error::Degenerate(format!("data row {i} has near-zero sum")));
            }
        }
        for j in 0..u.ncols() {
            if marg.col[j].norm() < floor {
                return Err(Error::Degenerate(format!(
                    "data column {j} has near-zero sum"
                )));
            }
        }
        Ok(())
    }
}

/// The alternating matrix with +1 strictly above the diagonal.
pub(crate) fn upper_ones_alternating(m: usize) -> CMat {
    CMat::from_fn(m, m, |i, j| {
        use std::cmp::Ordering::*;
        match i.cmp(&j) {
            Less => Complex64::new(1.0, 0.0),
            Greater => Complex64::new(-1.0, 0.0),
            Equal => Complex64::new(0.0, 0.0),
        }
    })
}

/// A point on a model, stored in the kind's ambient convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPoint {
    pub spec: ModelSpec,
    pub p: CMat,
}

/// Low-rank factors behind a freshly sampled point; consumed by the
/// critical-system sampler to seed its unknown vector.
#[derive(Debug, Clone)]
pub(crate) enum Factors {
    /// P = A · Bᵀ; the sampler re-derives chart coordinates from P itself.
    Rect,
    /// P = G Gᵀ
    Sym { g: CMat },
    /// P = G Σ_r Gᵀ
    Skew { g: CMat },
    /// P = S − H Σ_s Hᵀ; solved through the dual, factor not needed.
    SkewTranslated,
}

/// Block-diagonal standard symplectic form of even size `r`.
pub(crate) fn sigma_block(r: usize) -> CMat {
    let mut s = CMat::zeros(r, r);
    for k in 0..r / 2 {
        s[(2 * k, 2 * k + 1)] = Complex64::new(1.0, 0.0);
        s[(2 * k + 1, 2 * k)] = Complex64::new(-1.0, 0.0);
    }
    s
}

/// Sum the normalization functional of the kind: all entries (rect), all
/// entries halved (sym, so the target is 1), upper entries (skew).
pub(crate) fn normalization_sum(kind: ModelKind, p: &CMat) -> Complex64 {
    match kind {
        ModelKind::Rect => p.sum(),
        ModelKind::Sym => p.sum() * Complex64::new(0.5, 0.0),
        ModelKind::Skew => {
            let mut s = Complex64::new(0.0, 0.0);
            for i in 0..p.nrows() {
                for j in i + 1..p.ncols() {
                    s += p[(i, j)];
                }
            }
            s
        }
        ModelKind::SkewTranslated => Complex64::new(1.0, 0.0),
    }
}

pub(crate) fn random_point_with_factors<R: Rng>(
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<(ModelPoint, Factors)> {
    let (m, n, r) = (spec.m, spec.n, spec.r);
    for _ in 0..100 {
        match spec.kind {
            ModelKind::Rect => {
                let a = gaussian_cmat(rng, m, r);
                let b = gaussian_cmat(rng, n, r);
                let p = &a * b.transpose();
                let s = p.sum();
                if s.norm() < 1e-8 {
                    continue;
                }
                let p = p / s;
                return Ok((ModelPoint { spec: *spec, p }, Factors::Rect));
            }
            ModelKind::Sym => {
                let g = gaussian_cmat(rng, m, r);
                let p = &g * g.transpose();
                let s = p.sum();
                if s.norm() < 1e-8 {
                    continue;
                }
                // Full-entry sum must be 2; scale G by sqrt(2/s).
                let c = (Complex64::new(2.0, 0.0) / s).sqrt();
                let g = g * c;
                let p = &g * g.transpose();
                return Ok((ModelPoint { spec: *spec, p }, Factors::Sym { g }));
            }
            ModelKind::Skew => {
                let g = gaussian_cmat(rng, m, r);
                let p = &g * sigma_block(r) * g.transpose();
                let s = normalization_sum(ModelKind::Skew, &p);
                if s.norm() < 1e-8 {
                    continue;
                }
                let c = (Complex64::new(1.0, 0.0) / s).sqrt();
                let g = g * c;
                let p = &g * sigma_block(r) * g.transpose();
                return Ok((ModelPoint { spec: *spec, p }, Factors::Skew { g }));
            }
            ModelKind::SkewTranslated => {
                let h = gaussian_cmat(rng, m, r);
                let p = upper_ones_alternating(m) - &h * sigma_block(r) * h.transpose();
                return Ok((ModelPoint { spec: *spec, p }, Factors::SkewTranslated));
            }
        }
    }
    Err(Error::Degenerate(
        "random_point: could not normalize after 100 attempts".into(),
    ))
}

/// Sample a generic point of the model from a seeded stream.
pub fn random_point(spec: &ModelSpec, seed: u64) -> Result<ModelPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(random_point_with_factors(spec, &mut rng)?.0)
}

impl ModelPoint {
    /// Membership check: rank condition, sum normalization and nonzero
    /// entries (where the kind requires them), at relative tolerance `tol`.
    pub fn membership(&self, tol: f64) -> Result<()> {
        let spec = &self.spec;
        let p = &self.p;
        numkit::validate_finite(p)?;
        if p.nrows() != spec.m || p.ncols() != spec.n {
            return Err(Error::Dimension(format!(
                "point is {}x{}, expected {}x{}",
                p.nrows(),
                p.ncols(),
                spec.m,
                spec.n
            )));
        }
        let scale = frobenius_norm(p).max(1e-300);
        // Rank condition (on S - P for the translated family).
        let rank_matrix = match spec.kind {
            ModelKind::SkewTranslated => upper_ones_alternating(spec.m) - p,
            _ => p.clone(),
        };
        let rank = svd_rank(&rank_matrix, tol)?.rank;
        if rank != spec.r {
            return Err(Error::Degenerate(format!(
                "rank {} found, expected {} for {spec}",
                rank, spec.r
            )));
        }
        // Structure condition.
        match spec.kind {
            ModelKind::Rect => {}
            ModelKind::Sym => {
                if (p - p.transpose()).norm() > tol * scale {
                    return Err(Error::Degenerate("point is not symmetric".into()));
                }
            }
            ModelKind::Skew | ModelKind::SkewTranslated => {
                if (p + p.transpose()).norm() > tol * scale {
                    return Err(Error::Degenerate("point is not alternating".into()));
                }
            }
        }
        // Sum normalization.
        if spec.kind != ModelKind::SkewTranslated {
            let s = normalization_sum(spec.kind, p);
            if (s - Complex64::new(1.0, 0.0)).norm() > tol * scale.max(1.0) {
                return Err(Error::Degenerate(format!(
                    "normalization sum is {s}, expected 1"
                )));
            }
        }
        // Nonzero entries: everywhere for rect/sym, off-diagonal for the
        // skew kinds (whose diagonal is identically zero).
        let floor = 1e-12 * scale;
        let off_diag_only = matches!(spec.kind, ModelKind::Skew | ModelKind::SkewTranslated);
        for i in 0..spec.m {
            for j in 0..spec.n {
                if off_diag_only && i == j {
                    continue;
                }
                if p[(i, j)].norm() <= floor {
                    return Err(Error::Degenerate(format!(
                        "entry ({i}, {j}) is numerically zero"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn ones_complement_basis(len: usize) -> Result<CMat> {
    let ones = CMat::from_element(1, len, Complex64::new(1.0, 0.0));
    subspace_basis(&ones, Subspace::NullSpace, DEFAULT_REL_TOL)
}

/// Basis of `im(V) ∩ 1⊥` given a basis `V` of the image.
fn image_meet_ones_perp(v: &CMat) -> Result<CMat> {
    let ones = CMat::from_element(1, v.nrows(), Complex64::new(1.0, 0.0));
    let row = &ones * v; // 1 x k
    if row.norm() <= 1e-12 * v.norm().max(1e-300) {
        return Err(Error::Degenerate(
            "image of P lies inside the sum hyperplane".into(),
        ));
    }
    let inner = subspace_basis(&row, Subspace::NullSpace, DEFAULT_REL_TOL)?;
    let product = v * inner;
    // With a redundant spanning input, some combinations can cancel to
    // noise; keep only columns whose norm clears the cancellation floor so
    // downstream pairings never divide noise by noise.
    let floor = 1e-8 * v.norm();
    let kept: Vec<usize> = (0..product.ncols())
        .filter(|&k| product.column(k).norm() > floor)
        .collect();
    let mut out = CMat::zeros(v.nrows(), kept.len());
    for (c, &k) in kept.iter().enumerate() {
        out.set_column(c, &product.column(k));
    }
    Ok(out)
}

fn std_basis(len: usize) -> Vec<CVec> {
    (0..len)
        .map(|k| {
            let mut e = CVec::zeros(len);
            e[k] = Complex64::new(1.0, 0.0);
            e
        })
        .collect()
}

fn columns(m: &CMat) -> Vec<CVec> {
    (0..m.ncols()).map(|k| m.column(k).into_owned()).collect()
}

/// Spanning set of the tangent space at `point`, as ambient matrices built
/// from the rank-one / rank-two generators of the tangent lemmas. The
/// factors are the point's own columns and rows, so every generator is
/// tangent exactly by construction — no estimated orthonormal bases enter.
/// The set is redundant by design; its stacked numerical rank is
/// `model_dim`.
pub fn tangent_basis(point: &ModelPoint) -> Result<Vec<CMat>> {
    let spec = &point.spec;
    let p = &point.p;
    let rank_gate = |mat: &CMat, label: &str| -> Result<()> {
        let rank = svd_rank(mat, DEFAULT_REL_TOL)?.rank;
        if rank != spec.r {
            return Err(Error::Degenerate(format!(
                "{label} rank {rank} differs from spec rank {}",
                spec.r
            )));
        }
        Ok(())
    };
    // Symmetrized factor pairs can cancel to noise when v and w align;
    // dropping those generators loses nothing from a redundant set.
    let keep = |x: &CMat, v: &CVec, w: &CVec| x.norm() > 1e-8 * v.norm() * w.norm();
    let mut out = Vec::new();
    match spec.kind {
        ModelKind::Rect => {
            rank_gate(p, "point")?;
            let row_im = p.transpose();
            let col_cut = image_meet_ones_perp(p)?;
            let row_cut = image_meet_ones_perp(&row_im)?;
            let ones_m = ones_complement_basis(spec.m)?;
            let ones_n = ones_complement_basis(spec.n)?;
            // v w^T with either the row-space or the column-space condition
            // satisfied by construction and a zero entry sum.
            for v in columns(&col_cut) {
                for w in &std_basis(spec.n) {
                    out.push(&v * w.transpose());
                }
            }
            for v in columns(p) {
                for w in columns(&ones_n) {
                    out.push(&v * w.transpose());
                }
            }
            for v in columns(&ones_m) {
                for w in columns(&row_im) {
                    out.push(&v * w.transpose());
                }
            }
            for v in &std_basis(spec.m) {
                for w in columns(&row_cut) {
                    out.push(v * w.transpose());
                }
            }
        }
        ModelKind::Sym => {
            rank_gate(p, "point")?;
            let col_cut = image_meet_ones_perp(p)?;
            let ones_m = ones_complement_basis(spec.m)?;
            for v in columns(&col_cut) {
                for w in &std_basis(spec.m) {
                    let x = &v * w.transpose() + w * v.transpose();
                    if keep(&x, &v, w) {
                        out.push(x);
                    }
                }
            }
            for v in columns(p) {
                for w in columns(&ones_m) {
                    let x = &v * w.transpose() + &w * v.transpose();
                    if keep(&x, &v, &w) {
                        out.push(x);
                    }
                }
            }
        }
        ModelKind::Skew => {
            rank_gate(p, "point")?;
            let s = upper_ones_alternating(spec.m);
            let restricted = p.transpose() * &s * p;
            if svd_rank(&restricted, DEFAULT_REL_TOL)?.rank != spec.r {
                return Err(Error::Degenerate(
                    "skew pairing degenerates on the image of P".into(),
                ));
            }
            // For each image vector v, admissible w span the hyperplane
            // v^T S w = 0, which keeps the upper-entry sum of vw^T - wv^T
            // at zero.
            for v in columns(p) {
                let prod = v.transpose() * &s;
                let vts = CMat::from_fn(1, spec.m, |_, j| prod[(0, j)]);
                let w_basis = subspace_basis(&vts, Subspace::NullSpace, DEFAULT_REL_TOL)?;
                for w in columns(&w_basis) {
                    let x = &v * w.transpose() - &w * v.transpose();
                    if keep(&x, &v, &w) {
                        out.push(x);
                    }
                }
            }
        }
        ModelKind::SkewTranslated => {
            let b = upper_ones_alternating(spec.m) - p;
            rank_gate(&b, "S - P")?;
            for v in columns(&b) {
                for w in &std_basis(spec.m) {
                    let x = &v * w.transpose() - w * v.transpose();
                    if keep(&x, &v, w) {
                        out.push(x);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Stack a tangent spanning set into a (generators x ambient) matrix using
/// row-major vectorization of the full grid.
pub fn stack_tangents(tangents: &[CMat]) -> CMat {
    if tangents.is_empty() {
        return CMat::zeros(0, 0);
    }
    let (m, n) = tangents[0].shape();
    CMat::from_fn(tangents.len(), m * n, |k, idx| {
        tangents[k][(idx / n, idx % n)]
    })
}

/// Principal-branch log-likelihood without input validation; exponents may
/// be complex (internal fiber data). Terms with an exactly zero exponent
/// are skipped.
pub(crate) fn log_likelihood_unchecked(kind: ModelKind, p: &CMat, u: &CMat) -> Complex64 {
    let zero = Complex64::new(0.0, 0.0);
    let half = Complex64::new(0.5, 0.0);
    let mut acc = zero;
    let (m, n) = p.shape();
    match kind {
        ModelKind::Rect => {
            for i in 0..m {
                for j in 0..n {
                    if u[(i, j)] != zero {
                        acc += u[(i, j)] * p[(i, j)].ln();
                    }
                }
            }
        }
        ModelKind::Sym => {
            // Product over i <= j of p_ij^{u_ij} with the stored doubled
            // diagonal: p_ii = P_ii/2, u_ii = U_ii/2.
            for i in 0..m {
                let (ui, pi) = (u[(i, i)] * half, p[(i, i)] * half);
                if ui != zero {
                    acc += ui * pi.ln();
                }
                for j in i + 1..n {
                    if u[(i, j)] != zero {
                        acc += u[(i, j)] * p[(i, j)].ln();
                    }
                }
            }
        }
        ModelKind::Skew | ModelKind::SkewTranslated => {
            for i in 0..m {
                for j in i + 1..n {
                    if u[(i, j)] != zero {
                        acc += u[(i, j)] * p[(i, j)].ln();
                    }
                }
            }
        }
    }
    acc
}

/// Likelihood `ℓ_U` of a model point: the kind's product of entry powers,
/// or its principal-branch logarithm when `log_form` is set.
///
/// The data matrix must be real-valued and structure-compatible; a zero
/// base entry with nonzero exponent is a domain error.
pub fn likelihood(point: &ModelPoint, u: &CMat, log_form: bool) -> Result<Complex64> {
    let spec = &point.spec;
    spec.validate_data(u)?;
    for j in 0..u.ncols() {
        for i in 0..u.nrows() {
            if u[(i, j)].im != 0.0 {
                return Err(Error::Domain(format!(
                    "likelihood exponents must be real; entry ({i}, {j}) is not"
                )));
            }
        }
    }
    let zero = Complex64::new(0.0, 0.0);
    let relevant = |i: usize, j: usize| match spec.kind {
        ModelKind::Rect => true,
        ModelKind::Sym => j >= i,
        ModelKind::Skew | ModelKind::SkewTranslated => j > i,
    };
    for i in 0..spec.m {
        for j in 0..spec.n {
            if relevant(i, j) && point.p[(i, j)] == zero && u[(i, j)] != zero {
                return Err(Error::Domain(format!(
                    "zero base entry ({i}, {j}) with nonzero exponent"
                )));
            }
        }
    }
    if log_form {
        return Ok(log_likelihood_unchecked(spec.kind, &point.p, u));
    }
    // Plain form: an actual per-entry power product, kept separate from the
    // log form so the two serve as independent cross-checks.
    let one = Complex64::new(1.0, 0.0);
    let half = Complex64::new(0.5, 0.0);
    let mut acc = one;
    for i in 0..spec.m {
        for j in 0..spec.n {
            if !relevant(i, j) {
                continue;
            }
            let (base, expo) = if spec.kind == ModelKind::Sym && i == j {
                (point.p[(i, j)] * half, u[(i, j)] * half)
            } else {
                (point.p[(i, j)], u[(i, j)])
            };
            if expo != zero {
                acc *= base.powc(expo);
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rel_frobenius_distance;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn model_dims_match_paper() {
        assert_eq!(ModelSpec::rect(3, 3, 2).unwrap().model_dim(), 7);
        assert_eq!(ModelSpec::sym(4, 2).unwrap().model_dim(), 6);
        assert_eq!(ModelSpec::skew(4, 2).unwrap().model_dim(), 4);
        assert_eq!(ModelSpec::skew_translated(4, 2).unwrap().model_dim(), 5);
        assert_eq!(ModelSpec::skew_translated(4, 0).unwrap().model_dim(), 0);
    }

    #[test]
    fn rect_codimension_identity() {
        // dim + 1 + (m-r)(n-r) = mn over a grid of specs.
        let mut checked = 0;
        for m in 1..=8usize {
            for n in m..=8 {
                for r in 1..=m {
                    let spec = ModelSpec::rect(m, n, r).unwrap();
                    assert_eq!(spec.model_dim() + 1 + (m - r) * (n - r), m * n);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn spec_validation_rejects_bad_shapes() {
        assert!(ModelSpec::rect(4, 3, 2).is_err()); // m > n
        assert!(ModelSpec::rect(3, 3, 0).is_err());
        assert!(ModelSpec::rect(3, 3, 4).is_err());
        assert!(ModelSpec::skew(4, 3).is_err()); // odd rank
        assert!(ModelSpec::skew(4, 0).is_err());
        assert!(ModelSpec::skew_translated(4, 4).is_err()); // s > m-2
        assert!(ModelSpec::skew_translated(4, 2).is_ok());
        assert!(ModelSpec::skew_translated(4, 0).is_ok());
    }

    #[test]
    fn dual_specs_and_involution() {
        let r = ModelSpec::rect(3, 4, 2).unwrap();
        assert_eq!(r.dual().r, 2); // self-dual
        let r = ModelSpec::rect(3, 4, 3).unwrap();
        assert_eq!(r.dual().r, 1);
        assert_eq!(r.dual().dual(), r);
        let s = ModelSpec::sym(4, 2).unwrap();
        assert_eq!(s.dual().r, 3);
        assert_eq!(s.dual().dual(), s);
        let k = ModelSpec::skew(4, 2).unwrap();
        let kd = k.dual();
        assert_eq!(kd.kind, ModelKind::SkewTranslated);
        assert_eq!(kd.r, 2);
        assert_eq!(kd.dual(), k);
        let k5 = ModelSpec::skew(5, 4).unwrap();
        assert_eq!(k5.dual().r, 0);
        assert_eq!(k5.dual().dual(), k5);
    }

    #[test]
    fn random_points_satisfy_membership() {
        for seed in 0..3u64 {
            let p = random_point(&ModelSpec::rect(3, 3, 1).unwrap(), seed).unwrap();
            p.membership(1e-8).unwrap();
            assert!((p.p.sum() - c(1.0, 0.0)).norm() < 1e-12);

            let p = random_point(&ModelSpec::skew(4, 2).unwrap(), seed).unwrap();
            p.membership(1e-8).unwrap();
            assert!(
                (normalization_sum(ModelKind::Skew, &p.p) - c(1.0, 0.0)).norm() < 1e-12
            );
            assert!((&p.p + p.p.transpose()).norm() < 1e-12 * p.p.norm());

            let p = random_point(&ModelSpec::skew_translated(4, 2).unwrap(), seed).unwrap();
            p.membership(1e-8).unwrap();
        }
    }

    #[test]
    fn random_sym_point_has_requested_rank() {
        let p = random_point(&ModelSpec::sym(4, 3).unwrap(), 7).unwrap();
        p.membership(1e-8).unwrap();
        assert_eq!(svd_rank(&p.p, DEFAULT_REL_TOL).unwrap().rank, 3);
        // Full-entry sum 2 under the doubled-diagonal convention.
        assert!((p.p.sum() - c(2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn tangent_rank_rect_3_3_2() {
        let spec = ModelSpec::rect(3, 3, 2).unwrap();
        let point = random_point(&spec, 11).unwrap();
        let tans = tangent_basis(&point).unwrap();
        let stacked = stack_tangents(&tans);
        assert_eq!(svd_rank(&stacked, DEFAULT_REL_TOL).unwrap().rank, 7);
    }

    #[test]
    fn tangent_rank_full_rank_square() {
        let spec = ModelSpec::rect(3, 3, 3).unwrap();
        let point = random_point(&spec, 2).unwrap();
        let stacked = stack_tangents(&tangent_basis(&point).unwrap());
        assert_eq!(svd_rank(&stacked, DEFAULT_REL_TOL).unwrap().rank, 8);
    }

    #[test]
    fn tangent_rank_skew_4_2() {
        let spec = ModelSpec::skew(4, 2).unwrap();
        let point = random_point(&spec, 3).unwrap();
        let stacked = stack_tangents(&tangent_basis(&point).unwrap());
        assert_eq!(svd_rank(&stacked, DEFAULT_REL_TOL).unwrap().rank, 4);
    }

    #[test]
    fn tangent_generators_satisfy_defining_conditions() {
        for (spec, seed) in [
            (ModelSpec::rect(3, 4, 2).unwrap(), 5u64),
            (ModelSpec::sym(4, 2).unwrap(), 6),
            (ModelSpec::skew(4, 2).unwrap(), 7),
        ] {
            let point = random_point(&spec, seed).unwrap();
            let p = &point.p;
            let ker = subspace_basis(p, Subspace::NullSpace, DEFAULT_REL_TOL).unwrap();
            let im = subspace_basis(p, Subspace::ColumnSpace, DEFAULT_REL_TOL).unwrap();
            let proj_off_im = CMat::identity(spec.m, spec.m) - &im * im.adjoint();
            for x in tangent_basis(&point).unwrap() {
                // X * ker(P) stays in im(P).
                if ker.ncols() > 0 {
                    let moved = &x * &ker;
                    let off = &proj_off_im * &moved;
                    assert!(
                        off.norm() <= 1e-9 * x.norm().max(1.0),
                        "{spec}: tangent leaves the image"
                    );
                }
                // The kind's normalization sum stays zero.
                let s = normalization_sum(spec.kind, &x);
                assert!(s.norm() <= 1e-9 * x.norm().max(1.0), "{spec}: sum {s}");
            }
        }
    }

    #[test]
    fn tangent_basis_detects_degeneracy() {
        // A rank-1 symmetric point whose image is orthogonal to the all-ones
        // vector cannot be normalized; build it directly.
        let spec = ModelSpec { kind: ModelKind::Sym, m: 3, n: 3, r: 1 };
        let v = CVec::from_vec(vec![c(1.0, 0.0), c(-1.0, 0.0), c(0.0, 0.0)]);
        let p = &v * v.transpose();
        let point = ModelPoint { spec, p };
        match tangent_basis(&point) {
            Err(Error::Degenerate(_)) => {}
            other => panic!("expected degeneracy error, got {other:?}"),
        }
    }

    #[test]
    fn likelihood_uniform_rect() {
        let spec = ModelSpec::rect(2, 2, 2).unwrap();
        let p = CMat::from_element(2, 2, c(0.25, 0.0));
        let point = ModelPoint { spec, p };
        let u = CMat::from_fn(2, 2, |i, j| c((1 + i * 2 + j) as f64, 0.0));
        let total: f64 = 1.0 + 2.0 + 3.0 + 4.0;
        let expected = 0.25f64.powf(total);
        let got = likelihood(&point, &u, false).unwrap();
        assert!((got - c(expected, 0.0)).norm() < 1e-15 * expected.abs());
        let log = likelihood(&point, &u, true).unwrap();
        assert!((log.exp() - got).norm() < 1e-10 * got.norm());
    }

    #[test]
    fn likelihood_matches_frozen_high_precision_value() {
        // 60-digit evaluation of the running example's likelihood.
        let p = crate::numkit::tests::example_p();
        let spec = ModelSpec::rect(4, 4, 2).unwrap();
        let point = ModelPoint { spec, p };
        let u = CMat::from_fn(4, 4, |i, j| if i == j { c(0.1, 0.0) } else { c(0.05, 0.0) });
        let got = likelihood(&point, &u, false).unwrap();
        let expected = c(0.06421419018538888776900181, 0.0);
        assert!(
            (got - expected).norm() < 1e-13,
            "likelihood {got} vs frozen {expected}"
        );
        let log = likelihood(&point, &u, true).unwrap();
        assert!((log.exp() - expected).norm() < 1e-13);
    }

    #[test]
    fn likelihood_rejects_bad_input() {
        let spec = ModelSpec::rect(2, 2, 1).unwrap();
        let p = CMat::from_element(2, 2, c(0.25, 0.0));
        let mut pz = p.clone();
        pz[(0, 1)] = c(0.0, 0.0);
        let u = CMat::from_element(2, 2, c(1.0, 0.0));
        let point = ModelPoint { spec, p: pz };
        match likelihood(&point, &u, false) {
            Err(Error::Domain(_)) => {}
            other => panic!("expected domain error, got {other:?}"),
        }
        let point = ModelPoint { spec, p };
        let mut uc = u.clone();
        uc[(1, 1)] = c(1.0, 0.5);
        assert!(likelihood(&point, &uc, false).is_err());
    }

    #[test]
    fn data_validation_per_kind() {
        let sym = ModelSpec::sym(3, 2).unwrap();
        let mut u = CMat::from_element(3, 3, c(1.0, 0.0));
        u[(0, 1)] = c(2.0, 0.0);
        assert!(sym.validate_data(&u).is_err()); // asymmetric
        u[(1, 0)] = c(2.0, 0.0);
        assert!(sym.validate_data(&u).is_ok());

        let skew = ModelSpec::skew(4, 2).unwrap();
        let u = CMat::from_element(4, 4, c(1.0, 0.0));
        assert!(skew.validate_data(&u).is_err()); // nonzero diagonal
        let u = CMat::from_fn(4, 4, |i, j| if i == j { c(0.0, 0.0) } else { c(1.0, 0.0) });
        assert!(skew.validate_data(&u).is_ok());
    }

    #[test]
    fn sigma_block_is_standard_form() {
        let s4 = sigma_block(4);
        assert_eq!(s4[(0, 1)], c(1.0, 0.0));
        assert_eq!(s4[(1, 0)], c(-1.0, 0.0));
        assert_eq!(s4[(2, 3)], c(1.0, 0.0));
        assert_eq!(s4[(0, 2)], c(0.0, 0.0));
        assert!(rel_frobenius_distance(&(&s4 * &s4), &(-CMat::identity(4, 4))) < 1e-15);
    }

    #[test]
    fn s_matrix_shape() {
        let s = upper_ones_alternating(4);
        assert_eq!(s[(0, 3)], c(1.0, 0.0));
        assert_eq!(s[(3, 0)], c(-1.0, 0.0));
        assert_eq!(s[(2, 2)], c(0.0, 0.0));
        assert!((&s + s.transpose()).norm() < 1e-15);
    }
}
