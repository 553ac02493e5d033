//! Square polynomial systems for the critical equations of the likelihood
//! on each model family, with analytic Jacobians, plus sampling of
//! start pairs (P, U) from the critical-pair bundle.
//!
//! Unknown layouts (row-major inside each block, multiplier last):
//! - rect: free block `A2` ((m−r)×r) of `A = [I; A2]`, full `B` (n×r), λ.
//!   Equations: `Aᵀ(M − λJ) = 0` (r·n), the bottom m−r rows of
//!   `(M − λJ)B = 0`, and `Σ p − 1 = 0`, with `M = U ./ P`, `P = A Bᵀ`.
//! - sym: `G` (m×r) with `P = G Gᵀ`, λ. The m·r critical equations
//!   `(M̂ − λJ)G = 0` are compressed by a random full-rank projection to
//!   m·r − r(r−1)/2 rows; r(r−1)/2 random affine gauge slices on `G` and the
//!   hyperplane `Σ_full P / 2 − 1 = 0` square the system.
//! - skew: `G` (m×r) with `P = G Σ_r Gᵀ`; same scheme with the symplectic
//!   gauge dimension r(r+1)/2 and hyperplane `⟨S, P⟩/2 − 1 = 0`.
//!
//! The gauge data (projection + slices) is drawn once from a seeded stream
//! and reused across parameter values, so a whole continuation run happens
//! inside one fixed squared family.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::models::{
    log_likelihood_unchecked, random_point_with_factors, sigma_block, tangent_basis,
    upper_ones_alternating, Factors, ModelKind, ModelPoint, ModelSpec,
};
use crate::numkit::{
    gaussian_cmat, gaussian_cvec, subspace_basis, svd_rank, CMat, CVec, Subspace,
    DEFAULT_REL_TOL,
};
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Entry magnitudes below this make the rational equations meaningless.
const ENTRY_FLOOR: f64 = 1e-300;

/// Randomized squaring data for the sym/skew kinds: a full-rank projection
/// of the critical equations and affine gauge slices on vec(G).
#[derive(Debug, Clone)]
struct Gauge {
    /// (mr − g) × mr projection applied to the vectorized critical block.
    proj: Option<CMat>,
    /// g × mr slice functionals and their affine offsets.
    slices: Option<(CMat, CVec)>,
}

/// Gauge orbit dimension cut by slices: 0 for rect (the identity block on A
/// fixes the GL(r) action), r(r−1)/2 for sym (orthogonal), r(r+1)/2 for
/// skew (symplectic).
pub(crate) fn gauge_dim(spec: &ModelSpec) -> usize {
    match spec.kind {
        ModelKind::Rect => 0,
        ModelKind::Sym => spec.r * (spec.r - 1) / 2,
        ModelKind::Skew => spec.r * (spec.r + 1) / 2,
        ModelKind::SkewTranslated => unreachable!("no square system for the translated family"),
    }
}

/// A square system of critical equations at fixed data `U`.
#[derive(Debug, Clone)]
pub struct SquareSystem {
    pub spec: ModelSpec,
    pub u: CMat,
    gauge: Gauge,
    /// Unitary column-space chart for the rect factorization, A = R·[I; A₂]
    /// (None for the other kinds). A random chart keeps the fiber away from
    /// the chart's singular locus, where the identity-block chart inflates
    /// coordinates and equation scales without bound.
    chart: Option<CMat>,
}

impl SquareSystem {
    /// Assemble the critical system for `spec` at data `U`, drawing any
    /// gauge randomness from a fixed default stream. See
    /// [`SquareSystem::assemble_seeded`] for control over the gauge.
    pub fn assemble(spec: &ModelSpec, u: &CMat) -> Result<Self> {
        Self::assemble_seeded(spec, u, 0)
    }

    /// Assemble with an explicit gauge seed (sym/skew; ignored for rect).
    /// Slice offsets are random; to anchor them through a known factor
    /// point use [`SquareSystem::assemble_anchored`].
    pub fn assemble_seeded(spec: &ModelSpec, u: &CMat, gauge_seed: u64) -> Result<Self> {
        Self::build(spec, u, gauge_seed, None)
    }

    /// Assemble with gauge slices passing through the factor matrix `g0`,
    /// so that the corresponding unknown vector satisfies the slices
    /// exactly.
    pub(crate) fn assemble_anchored(
        spec: &ModelSpec,
        u: &CMat,
        gauge_seed: u64,
        g0: &CMat,
    ) -> Result<Self> {
        Self::build(spec, u, gauge_seed, Some(g0))
    }

    fn build(spec: &ModelSpec, u: &CMat, gauge_seed: u64, anchor: Option<&CMat>) -> Result<Self> {
        if spec.kind == ModelKind::SkewTranslated {
            return Err(Error::InvalidModel(
                "the translated family is solved through its dual; no direct system".into(),
            ));
        }
        spec.validate_data_generic(u)?;
        let chart = (spec.kind == ModelKind::Rect).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(gauge_seed);
            gaussian_cmat(&mut rng, spec.m, spec.m).qr().q()
        });
        let gauge = match spec.kind {
            ModelKind::Rect => Gauge {
                proj: None,
                slices: None,
            },
            ModelKind::Sym | ModelKind::Skew => {
                let g = gauge_dim(spec);
                let mr = spec.m * spec.r;
                let mut rng = ChaCha8Rng::seed_from_u64(gauge_seed);
                let proj = (g > 0).then(|| gaussian_cmat(&mut rng, mr - g, mr));
                let slices = (g > 0).then(|| {
                    let rows = gaussian_cmat(&mut rng, g, mr);
                    let offsets = match anchor {
                        Some(g0) => {
                            let v = vec_g(g0);
                            &rows * v
                        }
                        None => gaussian_cvec(&mut rng, g),
                    };
                    (rows, offsets)
                });
                Gauge { proj, slices }
            }
            ModelKind::SkewTranslated => unreachable!(),
        };
        Ok(SquareSystem {
            spec: *spec,
            u: u.clone(),
            gauge,
            chart,
        })
    }

    /// Same gauge and chart, new data matrix: the continuation family.
    pub fn with_data(&self, u: &CMat) -> Result<Self> {
        self.spec.validate_data_generic(u)?;
        Ok(SquareSystem {
            spec: self.spec,
            u: u.clone(),
            gauge: self.gauge.clone(),
            chart: self.chart.clone(),
        })
    }

    /// As `with_data`, but skipping the genericity screen; used mid-path
    /// where transient near-degenerate data is the tracker's business.
    pub(crate) fn with_data_unchecked(&self, u: CMat) -> SquareSystem {
        SquareSystem {
            spec: self.spec,
            u,
            gauge: self.gauge.clone(),
            chart: self.chart.clone(),
        }
    }

    fn rect_chart(&self) -> &CMat {
        self.chart.as_ref().expect("rect system carries a chart")
    }

    pub fn n_unknowns(&self) -> usize {
        let (m, n, r) = (self.spec.m, self.spec.n, self.spec.r);
        match self.spec.kind {
            ModelKind::Rect => (m - r) * r + n * r + 1,
            ModelKind::Sym | ModelKind::Skew => m * r + 1,
            ModelKind::SkewTranslated => unreachable!(),
        }
    }

    /// Rebuild the ambient pair (P, λ) from an unknown vector. No domain
    /// checks: zero entries are allowed here so the tracker can observe
    /// paths approaching coordinate hyperplanes.
    pub fn reconstruct(&self, x: &CVec) -> Result<(CMat, Complex64)> {
        if x.len() != self.n_unknowns() {
            return Err(Error::Dimension(format!(
                "unknown vector has {} entries, system has {}",
                x.len(),
                self.n_unknowns()
            )));
        }
        let (m, n, r) = (self.spec.m, self.spec.n, self.spec.r);
        match self.spec.kind {
            ModelKind::Rect => {
                let (a, b) = rect_factors(x, m, n, r, self.rect_chart());
                Ok((&a * b.transpose(), x[(m - r) * r + n * r]))
            }
            ModelKind::Sym => {
                let g = mat_g(x, m, r);
                Ok((&g * g.transpose(), x[m * r]))
            }
            ModelKind::Skew => {
                let g = mat_g(x, m, r);
                Ok((&g * sigma_block(r) * g.transpose(), x[m * r]))
            }
            ModelKind::SkewTranslated => unreachable!(),
        }
    }

    /// Minimum magnitude over the structural entries of P (all entries for
    /// rect/sym, off-diagonal for skew): the tracker's hyperplane monitor.
    pub fn min_structural_abs(&self, p: &CMat) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                if self.spec.kind == ModelKind::Skew && i == j {
                    continue;
                }
                min = min.min(p[(i, j)].norm());
            }
        }
        min
    }

    /// Residual vector and analytic Jacobian at `x`.
    ///
    /// Errors with a domain error when the reconstructed P has a zero
    /// structural entry (the rational equations leave their domain).
    pub fn evaluate(&self, x: &CVec) -> Result<(CVec, CMat)> {
        match self.spec.kind {
            ModelKind::Rect => self.evaluate_rect(x),
            ModelKind::Sym => self.evaluate_sym(x),
            ModelKind::Skew => self.evaluate_skew(x),
            ModelKind::SkewTranslated => unreachable!(),
        }
    }

    /// Euclidean norm of the residual at `x`.
    pub fn residual_norm(&self, x: &CVec) -> Result<f64> {
        Ok(self.evaluate(x)?.0.norm())
    }

    /// Norm of the FULL (unprojected, unsliced) critical equations plus the
    /// normalization equation: the filter that catches spurious solutions
    /// introduced by randomized squaring, and — for rect — the runtime
    /// check that the rows dropped when squaring also vanish.
    pub fn full_residual(&self, x: &CVec) -> Result<f64> {
        let (m, n, r) = (self.spec.m, self.spec.n, self.spec.r);
        match self.spec.kind {
            ModelKind::Rect => {
                let (a, b) = rect_factors(x, m, n, r, self.rect_chart());
                let lambda = x[(m - r) * r + n * r];
                let p = &a * b.transpose();
                let d = self.quotient_minus(&p, lambda)?;
                let e1 = a.transpose() * &d;
                let e2 = &d * &b; // all m rows, including the r dropped ones
                let e3 = p.sum() - ONE;
                Ok((e1.norm_squared() + e2.norm_squared() + e3.norm_sqr()).sqrt())
            }
            ModelKind::Sym => {
                let g = mat_g(x, m, r);
                let lambda = x[m * r];
                let p = &g * g.transpose();
                let d = self.quotient_minus(&p, lambda)?;
                let f = &d * &g;
                let h = p.sum() * Complex64::new(0.5, 0.0) - ONE;
                Ok((f.norm_squared() + h.norm_sqr()).sqrt())
            }
            ModelKind::Skew => {
                let g = mat_g(x, m, r);
                let lambda = x[m * r];
                let p = &g * sigma_block(r) * g.transpose();
                let d = self.quotient_minus(&p, lambda)?;
                let f = &d * &g;
                let s = upper_ones_alternating(m);
                let h = dot_full(&s, &p) * Complex64::new(0.5, 0.0) - ONE;
                Ok((f.norm_squared() + h.norm_sqr()).sqrt())
            }
            ModelKind::SkewTranslated => unreachable!(),
        }
    }

    /// The kind's quotient-minus-multiplier matrix: `M − λJ` (rect),
    /// `M̂ − λJ` (sym) or `M̃ − λS` (skew), with domain checks.
    fn quotient_minus(&self, p: &CMat, lambda: Complex64) -> Result<CMat> {
        let (m, n) = (self.spec.m, self.spec.n);
        let skew = self.spec.kind == ModelKind::Skew;
        let s = skew.then(|| upper_ones_alternating(m));
        let mut d = CMat::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                if skew && i == j {
                    continue;
                }
                let pij = p[(i, j)];
                if pij.norm() <= ENTRY_FLOOR {
                    return Err(Error::Domain(format!(
                        "reconstructed P has a zero entry at ({i}, {j})"
                    )));
                }
                let sub = match &s {
                    Some(s) => s[(i, j)],
                    None => ONE,
                };
                d[(i, j)] = self.u[(i, j)] / pij - lambda * sub;
            }
        }
        Ok(d)
    }

    fn evaluate_rect(&self, x: &CVec) -> Result<(CVec, CMat)> {
        let (m, n, r) = (self.spec.m, self.spec.n, self.spec.r);
        let q = m - r;
        let nx = self.n_unknowns();
        let chart = self.rect_chart();
        let (a, b) = rect_factors(x, m, n, r, chart);
        let lambda = x[q * r + n * r];
        let p = &a * b.transpose();
        let d = self.quotient_minus(&p, lambda)?;
        // W[i][j] = u_ij / p_ij^2 — the entrywise derivative of M wrt p.
        let w = CMat::from_fn(m, n, |i, j| self.u[(i, j)] / (p[(i, j)] * p[(i, j)]));
        // Chart columns carrying A₂: dA/d(A₂[c][l]) = rb[·][c] e_l^T.
        let rb = chart.columns(r, q).into_owned();
        let rtd = rb.transpose() * &d;

        let idx_a2 = |c: usize, l: usize| c * r + l;
        let idx_b = |j: usize, l: usize| q * r + j * r + l;
        let idx_lambda = q * r + n * r;

        let mut res = CVec::zeros(nx);
        let mut jac = CMat::zeros(nx, nx);

        // E1[k][j] = Σ_i A[i][k] D[i][j], row index k*n + j.
        let e1 = a.transpose() * &d;
        for k in 0..r {
            for j in 0..n {
                let row = k * n + j;
                res[row] = e1[(k, j)];
                for c in 0..q {
                    let mut s = ZERO;
                    for i in 0..m {
                        s += a[(i, k)] * w[(i, j)] * rb[(i, c)];
                    }
                    for l in 0..r {
                        let mut v = -s * b[(j, l)];
                        if l == k {
                            v += rtd[(c, j)];
                        }
                        jac[(row, idx_a2(c, l))] = v;
                    }
                }
                // Only b[j][l] enters E1[k][j] through column j of D.
                for l in 0..r {
                    let mut v = ZERO;
                    for i in 0..m {
                        v -= a[(i, k)] * w[(i, j)] * a[(i, l)];
                    }
                    jac[(row, idx_b(j, l))] = v;
                }
                let mut v = ZERO;
                for i in 0..m {
                    v -= a[(i, k)];
                }
                jac[(row, idx_lambda)] = v;
            }
        }

        // E2[c][k] = Σ_j D[r+c][j] B[j][k], row index rn + c*r + k.
        let db = &d * &b;
        for c in 0..q {
            for k in 0..r {
                let row = r * n + c * r + k;
                res[row] = db[(r + c, k)];
                for l in 0..r {
                    let mut t = ZERO;
                    for j in 0..n {
                        t += w[(r + c, j)] * b[(j, l)] * b[(j, k)];
                    }
                    for cp in 0..q {
                        jac[(row, idx_a2(cp, l))] = -rb[(r + c, cp)] * t;
                    }
                }
                for jp in 0..n {
                    for l in 0..r {
                        let mut v = -w[(r + c, jp)] * a[(r + c, l)] * b[(jp, k)];
                        if l == k {
                            v += d[(r + c, jp)];
                        }
                        jac[(row, idx_b(jp, l))] = v;
                    }
                }
                let mut v = ZERO;
                for j in 0..n {
                    v -= b[(j, k)];
                }
                jac[(row, idx_lambda)] = v;
            }
        }

        // E3 = Σ p − 1.
        let row = r * n + q * r;
        res[row] = p.sum() - ONE;
        for c in 0..q {
            let mut rs = ZERO;
            for i in 0..m {
                rs += rb[(i, c)];
            }
            for l in 0..r {
                let mut v = ZERO;
                for j in 0..n {
                    v += b[(j, l)];
                }
                jac[(row, idx_a2(c, l))] = rs * v;
            }
        }
        for j in 0..n {
            for l in 0..r {
                let mut v = ZERO;
                for i in 0..m {
                    v += a[(i, l)];
                }
                jac[(row, idx_b(j, l))] = v;
            }
        }
        Ok((res, jac))
    }

    fn evaluate_sym(&self, x: &CVec) -> Result<(CVec, CMat)> {
        let (m, r) = (self.spec.m, self.spec.r);
        let nx = m * r + 1;
        let g = mat_g(x, m, r);
        let lambda = x[m * r];
        let p = &g * g.transpose();
        let d = self.quotient_minus(&p, lambda)?;
        let w = CMat::from_fn(m, m, |i, j| self.u[(i, j)] / (p[(i, j)] * p[(i, j)]));

        // Full critical block F = D·G (m×r) and its Jacobian over (G, λ).
        let f = &d * &g;
        let mut jf = CMat::zeros(m * r, nx);
        for i in 0..m {
            for k in 0..r {
                let row = i * r + k;
                for c in 0..m {
                    for l in 0..r {
                        let mut v = ZERO;
                        if l == k {
                            v += d[(i, c)];
                        }
                        if c == i {
                            for j in 0..m {
                                v -= w[(i, j)] * g[(j, l)] * g[(j, k)];
                            }
                        }
                        v -= w[(i, c)] * g[(i, l)] * g[(c, k)];
                        jf[(row, c * r + l)] = v;
                    }
                }
                let mut v = ZERO;
                for j in 0..m {
                    v -= g[(j, k)];
                }
                jf[(row, m * r)] = v;
            }
        }
        let h = p.sum() * Complex64::new(0.5, 0.0) - ONE;
        let mut jh = CVec::zeros(nx);
        for c in 0..m {
            for l in 0..r {
                let mut v = ZERO;
                for j in 0..m {
                    v += g[(j, l)];
                }
                jh[c * r + l] = v;
            }
        }
        Ok(self.squared(f, jf, h, jh, x))
    }

    fn evaluate_skew(&self, x: &CVec) -> Result<(CVec, CMat)> {
        let (m, r) = (self.spec.m, self.spec.r);
        let nx = m * r + 1;
        let g = mat_g(x, m, r);
        let lambda = x[m * r];
        let sigma = sigma_block(r);
        let hmat = &g * &sigma; // H = GΣ, so dP[a][b] = δ_bc H[a][l] − δ_ac H[b][l]
        let p = &hmat * g.transpose();
        let d = self.quotient_minus(&p, lambda)?;
        let s = upper_ones_alternating(m);
        let mut w = CMat::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    w[(i, j)] = self.u[(i, j)] / (p[(i, j)] * p[(i, j)]);
                }
            }
        }

        let f = &d * &g;
        let sg = &s * &g;
        let mut jf = CMat::zeros(m * r, nx);
        for i in 0..m {
            for k in 0..r {
                let row = i * r + k;
                for c in 0..m {
                    for l in 0..r {
                        let mut v = ZERO;
                        if l == k {
                            v += d[(i, c)];
                        }
                        if c != i {
                            v -= w[(i, c)] * hmat[(i, l)] * g[(c, k)];
                        }
                        if c == i {
                            for j in 0..m {
                                if j != i {
                                    v += w[(i, j)] * hmat[(j, l)] * g[(j, k)];
                                }
                            }
                        }
                        jf[(row, c * r + l)] = v;
                    }
                }
                jf[(row, m * r)] = -sg[(i, k)];
            }
        }
        let h = dot_full(&s, &p) * Complex64::new(0.5, 0.0) - ONE;
        let sh = &s * &hmat;
        let mut jh = CVec::zeros(nx);
        for c in 0..m {
            for l in 0..r {
                jh[c * r + l] = -sh[(c, l)];
            }
        }
        Ok(self.squared(f, jf, h, jh, x))
    }

    /// Stack the projected critical block, the gauge slices and the
    /// hyperplane into the square residual/Jacobian.
    fn squared(&self, f: CMat, jf: CMat, h: Complex64, jh: CVec, x: &CVec) -> (CVec, CMat) {
        let (m, r) = (self.spec.m, self.spec.r);
        let nx = m * r + 1;
        let vec_f = CVec::from_fn(m * r, |idx, _| f[(idx / r, idx % r)]);
        let (proj_res, proj_jac) = match &self.gauge.proj {
            Some(pi) => (pi * &vec_f, pi * &jf),
            None => (vec_f, jf),
        };
        let n_proj = proj_res.len();
        let mut res = CVec::zeros(nx);
        let mut jac = CMat::zeros(nx, nx);
        res.rows_mut(0, n_proj).copy_from(&proj_res);
        jac.view_mut((0, 0), (n_proj, nx)).copy_from(&proj_jac);
        if let Some((rows, offsets)) = &self.gauge.slices {
            let gvec = x.rows(0, m * r).into_owned();
            let vals = rows * &gvec - offsets;
            for t in 0..rows.nrows() {
                res[n_proj + t] = vals[t];
                for c in 0..m * r {
                    jac[(n_proj + t, c)] = rows[(t, c)];
                }
            }
        }
        res[nx - 1] = h;
        for c in 0..nx {
            jac[(nx - 1, c)] = jh[c];
        }
        (res, jac)
    }
}

fn rect_factors(x: &CVec, m: usize, n: usize, r: usize, chart: &CMat) -> (CMat, CMat) {
    let q = m - r;
    let mut atilde = CMat::zeros(m, r);
    for k in 0..r {
        atilde[(k, k)] = ONE;
    }
    for c in 0..q {
        for l in 0..r {
            atilde[(r + c, l)] = x[c * r + l];
        }
    }
    let b = CMat::from_fn(n, r, |j, l| x[q * r + j * r + l]);
    (chart * atilde, b)
}

pub(crate) fn mat_g(x: &CVec, m: usize, r: usize) -> CMat {
    CMat::from_fn(m, r, |i, l| x[i * r + l])
}

fn vec_g(g: &CMat) -> CVec {
    let (m, r) = g.shape();
    CVec::from_fn(m * r, |idx, _| g[(idx / r, idx % r)])
}

fn dot_full(a: &CMat, b: &CMat) -> Complex64 {
    let mut acc = ZERO;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(i, j)];
        }
    }
    acc
}

/// A converged critical point in ambient coordinates.
#[derive(Debug, Clone)]
pub struct CriticalPoint {
    pub spec: ModelSpec,
    pub p: CMat,
    pub lambda: Complex64,
    /// Residual of the defining equations (square system for solver output,
    /// tangent-pairing criticality for mapped/dual points).
    pub residual: f64,
    /// Numerical rank of P (of S − P for the translated family).
    pub num_rank: usize,
    /// Set when num_rank differs from the spec's rank.
    pub degenerate: bool,
    /// Principal-branch log-likelihood at the data the point was solved for.
    pub loglik: Complex64,
}

impl CriticalPoint {
    pub(crate) fn from_parts(
        spec: ModelSpec,
        p: CMat,
        lambda: Complex64,
        residual: f64,
        u: &CMat,
    ) -> Result<Self> {
        let rank_matrix = match spec.kind {
            ModelKind::SkewTranslated => upper_ones_alternating(spec.m) - &p,
            _ => p.clone(),
        };
        let num_rank = svd_rank(&rank_matrix, DEFAULT_REL_TOL)?.rank;
        let loglik = log_likelihood_unchecked(spec.kind, &p, u);
        Ok(CriticalPoint {
            degenerate: num_rank != spec.r,
            spec,
            p,
            lambda,
            residual,
            num_rank,
            loglik,
        })
    }

    pub fn model_point(&self) -> ModelPoint {
        ModelPoint {
            spec: self.spec,
            p: self.p.clone(),
        }
    }
}

/// The bilinear critical pairing ⟨X ./ P, U⟩ over the kind's structural
/// entries, normalized by the factors' norms. The maximum over a tangent
/// spanning set is the coordinate-free criticality residual of (P, U);
/// it is the check that works for every kind, including the translated
/// family that has no square system of its own.
pub fn criticality_residual(point: &ModelPoint, u: &CMat) -> Result<f64> {
    let spec = &point.spec;
    spec.validate_data(u)?;
    let skew_kind = matches!(spec.kind, ModelKind::Skew | ModelKind::SkewTranslated);
    let mut quot = CMat::zeros(spec.m, spec.n);
    let mut max = 0.0f64;
    let tangents = tangent_basis(point)?;
    let u_norm = u.norm().max(ENTRY_FLOOR);
    for x in &tangents {
        for i in 0..spec.m {
            for j in 0..spec.n {
                if skew_kind && i == j {
                    quot[(i, j)] = ZERO;
                    continue;
                }
                let pij = point.p[(i, j)];
                if pij.norm() <= ENTRY_FLOOR {
                    return Err(Error::Domain(format!(
                        "point has a zero entry at ({i}, {j})"
                    )));
                }
                quot[(i, j)] = x[(i, j)] / pij;
            }
        }
        let pairing = dot_full(&quot, u);
        let rel = pairing.norm() / (quot.norm().max(ENTRY_FLOOR) * u_norm);
        max = max.max(rel);
    }
    Ok(max)
}

/// A start pair sampled from the critical-pair bundle: a model point, data
/// in its critical fiber, the anchored square system, and the unknown
/// vector solving it.
#[derive(Debug, Clone)]
pub struct FiberSample {
    pub point: CriticalPoint,
    pub u: CMat,
    pub system: SquareSystem,
    pub x0: CVec,
    /// Dimension of the linear fiber {U : (P,U) critical} the data was
    /// drawn from.
    pub fiber_dim: usize,
}

/// Coordinates of the data space per kind: full grid (rect), upper with
/// diagonal (sym), strict upper (skew). Returns the coefficient of each
/// coordinate in the pairing ⟨X ./ P, ·⟩.
fn pairing_coefficients(spec: &ModelSpec, x: &CMat, p: &CMat) -> Result<Vec<Complex64>> {
    let mut coeffs = Vec::with_capacity(spec.ambient_dim());
    let quot = |i: usize, j: usize| -> Result<Complex64> {
        let pij = p[(i, j)];
        if pij.norm() <= ENTRY_FLOOR {
            return Err(Error::Domain(format!("zero entry at ({i}, {j})")));
        }
        Ok(x[(i, j)] / pij)
    };
    match spec.kind {
        ModelKind::Rect => {
            for i in 0..spec.m {
                for j in 0..spec.n {
                    coeffs.push(quot(i, j)?);
                }
            }
        }
        ModelKind::Sym => {
            for i in 0..spec.m {
                coeffs.push(quot(i, i)?);
                for j in i + 1..spec.n {
                    coeffs.push(quot(i, j)? + quot(j, i)?);
                }
            }
        }
        ModelKind::Skew => {
            for i in 0..spec.m {
                for j in i + 1..spec.n {
                    // U is symmetric while X and P are alternating, so both
                    // (i,j) and (j,i) contribute the same term.
                    coeffs.push(quot(i, j)? * Complex64::new(2.0, 0.0));
                }
            }
        }
        ModelKind::SkewTranslated => {
            return Err(Error::InvalidModel(
                "fiber sampling is defined for the directly-solved kinds".into(),
            ))
        }
    }
    Ok(coeffs)
}

/// Rebuild a structured data matrix from its free coordinates.
fn data_from_coords(spec: &ModelSpec, coords: &CVec) -> CMat {
    let mut u = CMat::zeros(spec.m, spec.n);
    let mut k = 0;
    match spec.kind {
        ModelKind::Rect => {
            for i in 0..spec.m {
                for j in 0..spec.n {
                    u[(i, j)] = coords[k];
                    k += 1;
                }
            }
        }
        ModelKind::Sym => {
            for i in 0..spec.m {
                u[(i, i)] = coords[k];
                k += 1;
                for j in i + 1..spec.n {
                    u[(i, j)] = coords[k];
                    u[(j, i)] = coords[k];
                    k += 1;
                }
            }
        }
        ModelKind::Skew => {
            for i in 0..spec.m {
                for j in i + 1..spec.n {
                    u[(i, j)] = coords[k];
                    u[(j, i)] = coords[k];
                    k += 1;
                }
            }
        }
        ModelKind::SkewTranslated => unreachable!(),
    }
    u
}

/// The kind's multiplier identity: λ = u_{++} (rect) or U_{++}/2 (sym,
/// skew), with U_{++} the full-entry sum.
pub fn multiplier_identity(kind: ModelKind, u: &CMat) -> Complex64 {
    match kind {
        ModelKind::Rect => u.sum(),
        ModelKind::Sym | ModelKind::Skew => u.sum() * Complex64::new(0.5, 0.0),
        ModelKind::SkewTranslated => ZERO,
    }
}

/// Sample a start pair from Crit(X): a generic model point P, generic data
/// U in the linear space pairing to zero against the tangent space at P,
/// and the unknown vector for the anchored square system.
pub fn fiber_sample(spec: &ModelSpec, seed: u64) -> Result<FiberSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for _attempt in 0..5 {
        match fiber_sample_once(spec, &mut rng) {
            Ok(s) => return Ok(s),
            Err(e @ Error::Degenerate(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Degenerate("fiber sampling failed".into())))
}

fn fiber_sample_once<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<FiberSample> {
    let (point, factors) = random_point_with_factors(spec, rng)?;
    let tangents = tangent_basis(&point)?;
    let ambient = spec.ambient_dim();
    let mut cmat = CMat::zeros(tangents.len(), ambient);
    for (t, x) in tangents.iter().enumerate() {
        let coeffs = pairing_coefficients(spec, x, &point.p)?;
        for (idx, c) in coeffs.into_iter().enumerate() {
            cmat[(t, idx)] = c;
        }
    }
    let dim = spec.model_dim();
    let rank = svd_rank(&cmat, DEFAULT_REL_TOL)?.rank;
    if rank != dim {
        return Err(Error::Degenerate(format!(
            "tangent pairing rank {rank}, expected {dim}"
        )));
    }
    let null = subspace_basis(&cmat, Subspace::NullSpace, DEFAULT_REL_TOL)?;
    let fiber_dim = ambient - dim;
    if null.ncols() != fiber_dim {
        return Err(Error::Degenerate(format!(
            "fiber dimension {} differs from expected {fiber_dim}",
            null.ncols()
        )));
    }
    let coeffs = gaussian_cvec(rng, fiber_dim);
    let u = data_from_coords(spec, &(&null * coeffs));
    spec.validate_data_generic(&u)?;

    let lambda = multiplier_identity(spec.kind, &u);
    let gauge_seed: u64 = rng.gen();
    let (system, mut x0) = match &factors {
        Factors::Rect => {
            let system = SquareSystem::assemble_seeded(spec, &u, gauge_seed)?;
            let x = system.rect_x_from_point(&point.p)?;
            (system, x)
        }
        Factors::Sym { g } | Factors::Skew { g } => {
            let system = SquareSystem::assemble_anchored(spec, &u, gauge_seed, g)?;
            let mut x = CVec::zeros(system.n_unknowns());
            x.rows_mut(0, spec.m * spec.r).copy_from(&vec_g(g));
            x[spec.m * spec.r] = lambda;
            (system, x)
        }
        Factors::SkewTranslated => unreachable!("no square system for translated kind"),
    };

    // The pair satisfies the system by construction; one Newton step mops
    // up rounding. Anything larger than the bundle tolerance means the
    // sample was degenerate after all.
    x0 = crate::tracker::newton_refine(&system, &x0, 1e-12, 3)
        .map(|(x, _)| x)
        .unwrap_or(x0);
    let residual = system.residual_norm(&x0)?;
    if residual > 1e-10 {
        return Err(Error::Degenerate(format!(
            "fiber sample residual {residual:.3e} exceeds 1e-10"
        )));
    }
    let point = CriticalPoint::from_parts(*spec, point.p, lambda, residual, &u)?;
    Ok(FiberSample {
        point,
        u,
        system,
        x0,
        fiber_dim,
    })
}

impl SquareSystem {
    /// Gauge-fix an ambient rect point into this system's unknown vector:
    /// the column space is expressed in the system chart, B is recovered by
    /// least squares, λ comes from the multiplier identity.
    pub fn rect_x_from_point(&self, p: &CMat) -> Result<CVec> {
        if self.spec.kind != ModelKind::Rect {
            return Err(Error::InvalidModel(
                "rect_x_from_point needs a rect spec".into(),
            ));
        }
        let (m, n, r) = (self.spec.m, self.spec.n, self.spec.r);
        let chart = self.rect_chart();
        let col = subspace_basis(p, Subspace::ColumnSpace, DEFAULT_REL_TOL)?;
        if col.ncols() != r {
            return Err(Error::Degenerate(format!(
                "point has rank {}, spec asks {r}",
                col.ncols()
            )));
        }
        // Want A = chart·[I; A₂] with im(A) = im(col): pull the basis back
        // through the chart and normalize its leading block.
        let dmat = chart
            .clone()
            .lu()
            .solve(&col)
            .ok_or_else(|| Error::Degenerate("chart is singular".into()))?;
        let top = dmat.view((0, 0), (r, r)).into_owned();
        let top_inv = top.try_inverse().ok_or_else(|| {
            Error::Degenerate("leading rows of the chart basis are singular".into())
        })?;
        let y = &dmat * &top_inv; // [I; A2]
        let a = chart * &y;
        // B^T = (A^H A)^{-1} A^H P — exact because P's columns lie in im(A).
        let gram = a.adjoint() * &a;
        let rhs = a.adjoint() * p;
        let bt = gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Degenerate("column basis Gram matrix is singular".into()))?;
        let b = bt.transpose();
        let q = m - r;
        let mut x = CVec::zeros(q * r + n * r + 1);
        for c in 0..q {
            for l in 0..r {
                x[c * r + l] = y[(r + c, l)];
            }
        }
        for j in 0..n {
            for l in 0..r {
                x[q * r + j * r + l] = b[(j, l)];
            }
        }
        x[q * r + n * r] = multiplier_identity(ModelKind::Rect, &self.u);
        Ok(x)
    }
}
