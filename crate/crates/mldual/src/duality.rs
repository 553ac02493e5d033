//! The ML-duality maps between critical points on a rank stratum and on
//! its dual stratum, plus certification of everything the duality
//! predicts: involution, dual ranks, normalization sums, likelihood-product
//! constancy, and the marginal/multiplier lemmas.
//!
//! Maps, in stored coordinates (sym stores doubled diagonals on both P and
//! U; skew data U is symmetric with zero diagonal and U_{++} is its full
//! sum):
//! - rect: Q′ = (R U K) ./ P / (u_{++})³ with R, K the diagonal marginal
//!   matrices; dual rank m − r + 1.
//! - sym: Q_ij = U_{i+} U_ij U_{j+} / P_ij, Q′ = 4Q/(U_{++})³; dual rank
//!   m − r + 1.
//! - skew: Q′ = (2/U_{++}) · (U ./ P) off-diagonal, a point of the
//!   translated family with s = largest even integer ≤ m − r, whose
//!   membership reads rank(S − Q′) = s. The same formula maps back, so the
//!   skew map is literally its own inverse.
//!
//! All three maps are exact algebraic involutions; the mathematical
//! content certified here is that the image lies on the dual model and is
//! critical there.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::critsys::{criticality_residual, multiplier_identity, CriticalPoint};
use crate::models::{
    log_likelihood_unchecked, upper_ones_alternating, ModelKind, ModelPoint, ModelSpec,
};
use crate::monodromy::{solve_for_data, PathFailure, SolutionSet};
use crate::numkit::{marginals, CMat};
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// The alternating matrix S with +1 above the diagonal: the translation
/// point of the dual skew family and the kernel of its rank test.
#[derive(Debug, Clone)]
pub struct SMatrix {
    pub m: usize,
    pub value: CMat,
}

impl SMatrix {
    pub fn new(m: usize) -> Self {
        SMatrix {
            m,
            value: upper_ones_alternating(m),
        }
    }
}

/// A critical point together with its image under the duality map.
#[derive(Debug, Clone)]
pub struct DualPair {
    pub primal: CriticalPoint,
    pub dual: CriticalPoint,
    /// log ℓ_U(primal) + log ℓ_U(dual): the likelihood product in log form,
    /// constant over a complete set up to 2πi branch choices. Kept as a log
    /// because the product itself underflows f64 already for small integer
    /// data.
    pub log_product: Complex64,
    pub dual_spec: ModelSpec,
}

/// The unscaled rect dual matrix Q with q_ij = u_{i+} u_ij u_{+j} / p_ij;
/// its entry sum is (u_{++})³ at critical points.
pub(crate) fn rect_q_unscaled(p: &CMat, u: &CMat) -> Result<CMat> {
    let marg = marginals(u)?;
    let (m, n) = p.shape();
    let mut q = CMat::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            if p[(i, j)] == ZERO {
                return Err(Error::Domain(format!("zero entry at ({i}, {j})")));
            }
            q[(i, j)] = marg.row[i] * u[(i, j)] * marg.col[j] / p[(i, j)];
        }
    }
    Ok(q)
}

/// The unscaled sym dual matrix, in stored coordinates; its entry sum is
/// (U_{++})³/2 at critical points.
pub(crate) fn sym_q_unscaled(p: &CMat, u: &CMat) -> Result<CMat> {
    // Same triple-product form; stored row sums already absorb the
    // doubled-diagonal convention.
    rect_q_unscaled(p, u)
}

/// The skew map (its own inverse): (2/U_{++}) · (U ./ P) off-diagonal.
fn skew_map(p: &CMat, u: &CMat) -> Result<CMat> {
    let total = u.sum();
    let m = p.nrows();
    let mut q = CMat::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            if p[(i, j)] == ZERO {
                return Err(Error::Domain(format!("zero entry at ({i}, {j})")));
            }
            q[(i, j)] = Complex64::new(2.0, 0.0) * u[(i, j)] / (total * p[(i, j)]);
        }
    }
    Ok(q)
}

/// The dual matrix of a model point, in the dual model's stored
/// coordinates.
fn dual_matrix(spec: &ModelSpec, p: &CMat, u: &CMat) -> Result<CMat> {
    match spec.kind {
        ModelKind::Rect => {
            let total = u.sum();
            Ok(rect_q_unscaled(p, u)? / (total * total * total))
        }
        ModelKind::Sym => {
            let total = u.sum();
            let scale = Complex64::new(4.0, 0.0) / (total * total * total);
            Ok(sym_q_unscaled(p, u)? * scale)
        }
        ModelKind::Skew | ModelKind::SkewTranslated => skew_map(p, u),
    }
}

/// Map a critical point to its dual pair. A dual whose numerical rank
/// misses the dual spec's rank is flagged degenerate (not an error): that
/// is exactly the non-generic-data situation the duality is used to
/// detect.
pub fn dualize_point(point: &CriticalPoint, u: &CMat) -> Result<DualPair> {
    let spec = point.spec;
    spec.validate_data(u)?;
    let dual_spec = spec.dual();
    let q = dual_matrix(&spec, &point.p, u)?;

    let lambda = multiplier_identity(dual_spec.kind, u);
    // Criticality of the dual on its own model, via the tangent pairing.
    // For a rank-degenerate image the pairing lives on the stratum the
    // point actually sits on.
    let dual_probe = ModelPoint {
        spec: dual_spec,
        p: q.clone(),
    };
    let residual = match criticality_residual(&dual_probe, u) {
        Ok(r) => r,
        Err(_) => degenerate_residual(&dual_spec, &q, u),
    };
    let dual = CriticalPoint::from_parts(dual_spec, q, lambda, residual, u)?;
    let log_product = log_likelihood_unchecked(spec.kind, &point.p, u)
        + log_likelihood_unchecked(dual_spec.kind, &dual.p, u);
    Ok(DualPair {
        primal: point.clone(),
        dual,
        log_product,
        dual_spec,
    })
}

/// Criticality residual of a rank-degenerate dual, measured on the stratum
/// matching its actual rank; infinity when even that is ill-posed.
fn degenerate_residual(dual_spec: &ModelSpec, q: &CMat, u: &CMat) -> f64 {
    let rank_matrix = match dual_spec.kind {
        ModelKind::SkewTranslated => upper_ones_alternating(dual_spec.m) - q,
        _ => q.clone(),
    };
    let Ok(report) = crate::numkit::svd_rank(&rank_matrix, crate::numkit::DEFAULT_REL_TOL) else {
        return f64::INFINITY;
    };
    let adjusted = match dual_spec.kind {
        ModelKind::Rect => ModelSpec::rect(dual_spec.m, dual_spec.n, report.rank),
        ModelKind::Sym => ModelSpec::sym(dual_spec.m, report.rank),
        ModelKind::Skew => ModelSpec::skew(dual_spec.m, report.rank),
        ModelKind::SkewTranslated => ModelSpec::skew_translated(dual_spec.m, report.rank),
    };
    let Ok(adjusted) = adjusted else {
        return f64::INFINITY;
    };
    let probe = ModelPoint {
        spec: adjusted,
        p: q.clone(),
    };
    criticality_residual(&probe, u).unwrap_or(f64::INFINITY)
}

/// Relative residual of the kind's marginal-proportionality lemma at a
/// critical point: worst 2×2 minor of the stacked marginals plus the
/// closed-form proportionality scalar.
pub fn marginal_lemma_residual(kind: ModelKind, p: &CMat, u: &CMat) -> Result<f64> {
    let pm = marginals(p)?;
    let um = marginals(u)?;
    let mut worst = 0.0f64;
    let minors = |a: &crate::numkit::CVec, b: &crate::numkit::CVec| -> f64 {
        let scale = (a.norm() * b.norm()).max(1e-300);
        let mut w = 0.0f64;
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                w = w.max((a[i] * b[j] - a[j] * b[i]).norm() / scale);
            }
        }
        w
    };
    match kind {
        ModelKind::Rect => {
            worst = worst.max(minors(&pm.row, &um.row));
            worst = worst.max(minors(&pm.col, &um.col));
            // Scalar form: P1 = U1 / u_{++}.
            let scale = um.total;
            for i in 0..pm.row.len() {
                worst = worst.max(
                    (pm.row[i] - um.row[i] / scale).norm() / pm.row[i].norm().max(1e-300),
                );
            }
        }
        ModelKind::Sym => {
            worst = worst.max(minors(&pm.row, &um.row));
            // Scalar form in stored coordinates: P1 = 2·U1/U_{++}.
            let two = Complex64::new(2.0, 0.0);
            for i in 0..pm.row.len() {
                let expect = two * um.row[i] / um.total;
                worst =
                    worst.max((pm.row[i] - expect).norm() / pm.row[i].norm().max(1e-300));
            }
        }
        ModelKind::Skew => {
            // a_i = Σ_{j<i} p_ji + Σ_{j>i} p_ij is proportional to U1 with
            // scalar 2/U_{++}.
            let m = p.nrows();
            let two = Complex64::new(2.0, 0.0);
            for i in 0..m {
                let mut a = ZERO;
                for j in 0..i {
                    a += p[(j, i)];
                }
                for j in i + 1..m {
                    a += p[(i, j)];
                }
                let expect = two * um.row[i] / um.total;
                worst = worst.max((a - expect).norm() / expect.norm().max(1e-300));
            }
        }
        ModelKind::SkewTranslated => {
            return Err(Error::InvalidModel(
                "no marginal lemma for the translated family".into(),
            ))
        }
    }
    Ok(worst)
}

/// Relative residual of the kind's multiplier identity at a critical
/// point.
pub fn multiplier_residual(kind: ModelKind, lambda: Complex64, u: &CMat) -> f64 {
    let expect = multiplier_identity(kind, u);
    if expect == ZERO {
        return lambda.norm();
    }
    (lambda - expect).norm() / expect.norm()
}

/// Set-level match of the dual set against the primal set (self-dual
/// strata only).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelfDualCheck {
    pub matched: usize,
    pub total: usize,
    pub pass: bool,
}

/// Certification of every duality prediction over a complete solution
/// set. All residual fields are relative; `pass` is the conjunction of
/// every check against `tol`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairingReport {
    pub spec: ModelSpec,
    pub dual_spec: ModelSpec,
    pub n_points: usize,
    pub dual_rank_expected: usize,
    pub dual_rank_failures: usize,
    pub max_involution: f64,
    pub max_dual_criticality: f64,
    /// Entry-sum lemma residual: rect Σq = (u_{++})³, sym Σq = (U_{++})³/2;
    /// absent for skew (no such lemma there).
    pub normalization: Option<f64>,
    /// Relative spread of the likelihood product ℓ·ℓ′ over the set,
    /// evaluated in log space. Per-entry branch choices shift each log
    /// product by 2πi·Σ k_ij u_ij, so the full complex comparison (with
    /// imaginary parts wrapped mod 2π) only makes sense for integer data.
    /// Real non-integer data still pins the product magnitude; complex
    /// data leaves nothing branch-free to compare (`None`).
    pub product_spread: Option<f64>,
    pub max_marginal: f64,
    pub max_multiplier: f64,
    pub self_dual: Option<SelfDualCheck>,
    pub tol: f64,
    pub pass: bool,
}

/// Dualize every point of a complete set and check all duality
/// predictions. Failures are carried in the report, never raised.
pub fn verify_pairing(set: &SolutionSet) -> Result<PairingReport> {
    verify_points(&set.spec, &set.u, &set.points)
}

/// [`verify_pairing`] on bare parts, so reloaded solution files can be
/// certified without reconstructing solver state.
pub fn verify_points(spec: &ModelSpec, u: &CMat, points: &[CriticalPoint]) -> Result<PairingReport> {
    if points.is_empty() {
        return Err(Error::Invalid("verify_pairing needs a nonempty set".into()));
    }
    let spec = *spec;
    spec.validate_data(u)?;
    let tol = 1e-8;
    let dual_spec = spec.dual();
    let mut report = PairingReport {
        spec,
        dual_spec,
        n_points: points.len(),
        dual_rank_expected: dual_spec.r,
        dual_rank_failures: 0,
        max_involution: 0.0,
        max_dual_criticality: 0.0,
        normalization: None,
        product_spread: None,
        max_marginal: 0.0,
        max_multiplier: 0.0,
        self_dual: None,
        tol,
        pass: false,
    };

    let mut products = Vec::with_capacity(points.len());
    let mut duals = Vec::with_capacity(points.len());
    let mut worst_norm: Option<f64> = None;
    for point in points {
        let pair = dualize_point(point, u)?;
        if pair.dual.num_rank != dual_spec.r {
            report.dual_rank_failures += 1;
        }
        report.max_dual_criticality = report.max_dual_criticality.max(pair.dual.residual);

        // Involution: dualize the dual, land on the primal.
        let back = dualize_point(&pair.dual, u)?;
        let inv = crate::numkit::rel_frobenius_distance(&back.dual.p, &point.p);
        report.max_involution = report.max_involution.max(inv);

        // Normalization lemma on the unscaled dual sum.
        let total = u.sum();
        let norm_res = match spec.kind {
            ModelKind::Rect => {
                let expect = total * total * total;
                Some((rect_q_unscaled(&point.p, u)?.sum() - expect).norm() / expect.norm())
            }
            ModelKind::Sym => {
                let expect = total * total * total * Complex64::new(0.5, 0.0);
                Some((sym_q_unscaled(&point.p, u)?.sum() - expect).norm() / expect.norm())
            }
            _ => None,
        };
        if let Some(r) = norm_res {
            worst_norm = Some(worst_norm.unwrap_or(0.0).max(r));
        }

        report.max_marginal = report
            .max_marginal
            .max(marginal_lemma_residual(spec.kind, &point.p, u)?);
        report.max_multiplier = report
            .max_multiplier
            .max(multiplier_residual(spec.kind, point.lambda, u));

        products.push(pair.log_product);
        duals.push(pair.dual);
    }
    report.normalization = worst_norm;

    // Log-space comparison. Branch choices shift each log product by
    // 2πi·Σ k_e u_e over the kind's exponents: for integer exponents that
    // is a multiple of 2πi, so wrapping the imaginary difference recovers
    // the true relative deviation |exp(Δ) - 1|. For real non-integer
    // exponents only the magnitude (the real part of the log) is
    // single-valued; for complex data not even that survives, and the
    // check is skipped. Sym weights the stored diagonal by 1/2, skew
    // kinds only ever exponentiate the strict upper triangle.
    let exponents: Vec<Complex64> = match spec.kind {
        ModelKind::Rect => u.iter().copied().collect(),
        ModelKind::Sym => {
            let mut es = Vec::new();
            for i in 0..u.nrows() {
                es.push(u[(i, i)] * Complex64::new(0.5, 0.0));
                for j in i + 1..u.ncols() {
                    es.push(u[(i, j)]);
                }
            }
            es
        }
        ModelKind::Skew | ModelKind::SkewTranslated => {
            let mut es = Vec::new();
            for i in 0..u.nrows() {
                for j in i + 1..u.ncols() {
                    es.push(u[(i, j)]);
                }
            }
            es
        }
    };
    let scale = exponents.iter().map(|z| z.re.abs()).fold(1.0, f64::max);
    let real_data = exponents.iter().all(|z| z.im.abs() <= 1e-12 * scale);
    let integer_data =
        real_data && exponents.iter().all(|z| (z.re - z.re.round()).abs() <= 1e-9);
    let reference = products[0];
    report.product_spread = if !real_data {
        None
    } else {
        Some(
            products
                .iter()
                .map(|lp| {
                    let d = lp - reference;
                    if integer_data {
                        let tau = std::f64::consts::TAU;
                        let im = d.im - tau * (d.im / tau).round();
                        (Complex64::new(d.re, im).exp() - Complex64::new(1.0, 0.0)).norm()
                    } else {
                        (d.re.exp() - 1.0).abs()
                    }
                })
                .fold(0.0, f64::max),
        )
    };

    if dual_spec == spec {
        let matched = duals
            .iter()
            .filter(|d| {
                points
                    .iter()
                    .any(|pt| crate::numkit::rel_frobenius_distance(&d.p, &pt.p) <= 1e-6)
            })
            .count();
        report.self_dual = Some(SelfDualCheck {
            matched,
            total: points.len(),
            pass: matched == points.len(),
        });
    }

    report.pass = report.dual_rank_failures == 0
        && report.max_involution <= tol
        && report.max_dual_criticality <= tol
        && report.normalization.map_or(true, |r| r <= tol)
        && report.product_spread.map_or(true, |s| s <= tol)
        && report.max_marginal <= tol
        && report.max_multiplier <= tol
        && report.self_dual.map_or(true, |s| s.pass);
    Ok(report)
}

/// Result of solving a model through its dual: the solved pairs plus the
/// dual points segregated by rank (regular vs degenerate images).
#[derive(Debug, Clone)]
pub struct DualSolveOutcome {
    pub solved_spec: ModelSpec,
    pub dual_spec: ModelSpec,
    pub u: CMat,
    pub pairs: Vec<DualPair>,
    pub regular: Vec<CriticalPoint>,
    pub degenerate: Vec<CriticalPoint>,
    pub path_failures: Vec<PathFailure>,
}

/// Solve the critical equations on `spec` at `u_target`, then dualize
/// every solution — the prescribed route to the dual stratum's critical
/// points, and the workaround when the dual stratum itself tracks badly.
pub fn dual_solve(spec: &ModelSpec, u_target: &CMat, seed: u64) -> Result<DualSolveOutcome> {
    if spec.kind == ModelKind::SkewTranslated {
        return Err(Error::InvalidModel(
            "solve the skew family directly; its duals are the translated points".into(),
        ));
    }
    let set = solve_for_data(spec, u_target, seed)?;
    let dual_spec = spec.dual();
    let mut outcome = DualSolveOutcome {
        solved_spec: *spec,
        dual_spec,
        u: u_target.clone(),
        pairs: Vec::with_capacity(set.len()),
        regular: Vec::new(),
        degenerate: Vec::new(),
        path_failures: set.path_failures.clone(),
    };
    for point in &set.points {
        let pair = dualize_point(point, u_target)?;
        if pair.dual.degenerate {
            outcome.degenerate.push(pair.dual.clone());
        } else {
            outcome.regular.push(pair.dual.clone());
        }
        outcome.pairs.push(pair);
    }
    Ok(outcome)
}
