//! Predictor–corrector continuation of square-system solutions along
//! segments in data space.
//!
//! The path is the γ-twisted segment U(t) = (1−t)·γ·U_start + t·U_end with
//! a generic unit scalar γ. Scaling data by γ fixes the critical point and
//! scales the multiplier, so the start vector only needs its λ coordinate
//! twisted; the twist bends the segment off the real discriminant.
//!
//! The predictor is explicit Euler on the Davidenko equation. The
//! equations are affine in U, so the exact time derivative is the
//! difference of two residual evaluations and needs no finite differences.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critsys::{mat_g, SquareSystem};
use crate::models::{ModelKind, ModelSpec};
use crate::numkit::{CMat, CVec};
use crate::{Error, Result};

/// Unknown-vector norms beyond this are treated as escape to infinity.
const DIVERGENCE_NORM: f64 = 1e10;
/// Structural entries of P below this magnitude classify the path as
/// hitting a coordinate hyperplane.
const HYPERPLANE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct TrackOptions {
    /// Initial (and maximal) step in the path parameter t ∈ [0, 1].
    pub initial_step: f64,
    pub min_step: f64,
    pub max_newton_iters: usize,
    pub corrector_tol: f64,
    pub max_steps: usize,
    /// Unit segment twist; fixed generic default, or drawn per run via
    /// [`TrackOptions::with_gamma_seed`].
    pub gamma: Complex64,
}

impl Default for TrackOptions {
    fn default() -> Self {
        TrackOptions {
            initial_step: 0.05,
            min_step: 1e-7,
            max_newton_iters: 4,
            corrector_tol: 1e-9,
            max_steps: 10_000,
            gamma: Complex64::from_polar(1.0, 0.8607945251),
        }
    }
}

impl TrackOptions {
    /// Redraw the segment twist from a seeded stream (unit modulus).
    pub fn with_gamma_seed(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        self.gamma = Complex64::from_polar(1.0, angle);
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_step && self.min_step < self.initial_step && self.initial_step <= 0.25)
        {
            return Err(Error::Invalid(format!(
                "step sizes must satisfy 0 < min_step < initial_step <= 0.25, got {} and {}",
                self.min_step, self.initial_step
            )));
        }
        if !(self.corrector_tol > 0.0) || self.max_newton_iters == 0 || self.max_steps == 0 {
            return Err(Error::Invalid(
                "corrector_tol must be positive, iteration budgets nonzero".into(),
            ));
        }
        if (self.gamma.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid("gamma must have unit modulus".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Success,
    Diverged,
    HitCoordinateHyperplane,
    StepUnderflow,
    MaxSteps,
}

impl std::fmt::Display for TrackStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrackStatus::Success => "success",
            TrackStatus::Diverged => "diverged",
            TrackStatus::HitCoordinateHyperplane => "hit_coordinate_hyperplane",
            TrackStatus::StepUnderflow => "step_underflow",
            TrackStatus::MaxSteps => "max_steps",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    pub status: TrackStatus,
    /// Present exactly when status is success; solves the system at U_end
    /// to corrector_tol.
    pub endpoint: Option<CVec>,
    /// Predictor–corrector cycles attempted, including rejected ones.
    pub steps_taken: usize,
    pub final_residual: f64,
    /// Path parameter of the last accepted point (1.0 on success).
    pub t_reached: f64,
}

/// Track one solution of the critical system from `U_start` to `U_end`.
///
/// `x_start` must solve the system at `U_start` to corrector_tol. For the
/// sym/skew kinds the gauge slices are anchored at `x_start`'s factor
/// block, so the whole path runs inside one fixed squared family.
pub fn track_path(
    spec: &ModelSpec,
    u_start: &CMat,
    u_end: &CMat,
    x_start: &CVec,
    opts: &TrackOptions,
) -> Result<TrackResult> {
    let system = match spec.kind {
        ModelKind::Rect => SquareSystem::assemble(spec, u_start)?,
        ModelKind::Sym | ModelKind::Skew => {
            let g0 = mat_g(x_start, spec.m, spec.r);
            SquareSystem::assemble_anchored(spec, u_start, 0, &g0)?
        }
        ModelKind::SkewTranslated => {
            return Err(Error::InvalidModel(
                "the translated family has no direct system; solve its dual".into(),
            ))
        }
    };
    track_path_in(&system, u_end, x_start, opts)
}

/// Core tracking loop over an already-assembled system at the start data.
pub(crate) fn track_path_in(
    system: &SquareSystem,
    u_end: &CMat,
    x_start: &CVec,
    opts: &TrackOptions,
) -> Result<TrackResult> {
    opts.validate()?;
    system.spec.validate_data(u_end)?;
    if x_start.len() != system.n_unknowns() {
        return Err(Error::Dimension(format!(
            "start vector has {} entries, system has {} unknowns",
            x_start.len(),
            system.n_unknowns()
        )));
    }

    let gamma = opts.gamma;
    let u0 = &system.u * gamma;
    // Twisting the data by γ fixes P and scales the multiplier.
    let mut x = x_start.clone();
    let lam_idx = x.len() - 1;
    x[lam_idx] *= gamma;

    let sys_at = |t: f64| {
        let u_t = &u0 * Complex64::new(1.0 - t, 0.0) + u_end * Complex64::new(t, 0.0);
        system.with_data_unchecked(u_t)
    };
    // dU/dt is constant; the equations are affine in U, so
    // dF/dt = F(x; dU) − F(x; 0).
    let sys_du = system.with_data_unchecked(u_end - &u0);
    let sys_zero = system.with_data_unchecked(CMat::zeros(u_end.nrows(), u_end.ncols()));

    let fail = |status: TrackStatus, steps: usize, res: f64, t: f64| TrackResult {
        status,
        endpoint: None,
        steps_taken: steps,
        final_residual: res,
        t_reached: t,
    };

    // The start point is part of the path: classify before settling, so a
    // start already on a coordinate hyperplane reports as such rather than
    // as a corrector failure.
    if let Some(result) = classify_accepted(system, &x, 0, f64::INFINITY, 0.0) {
        return Ok(result);
    }
    // Settle at t = 0 (absorbs rounding from the λ twist).
    let res_start = match correct(&sys_at(0.0), &mut x, opts) {
        Some(r) => r,
        None => return Ok(fail(TrackStatus::Diverged, 0, f64::INFINITY, 0.0)),
    };
    let mut res_now = res_start;

    let mut t = 0.0;
    let mut step = opts.initial_step;
    let mut streak = 0usize;
    let mut steps_taken = 0usize;

    while t < 1.0 {
        if steps_taken >= opts.max_steps {
            return Ok(fail(TrackStatus::MaxSteps, steps_taken, res_now, t));
        }
        steps_taken += 1;

        let rem = 1.0 - t;
        let (dt, is_final) = if rem <= step { (rem, true) } else { (step, false) };
        let t_next = if is_final { 1.0 } else { t + dt };

        // Euler predictor: J(x, t) · v = −dF/dt.
        let predicted = predict(&sys_at(t), &sys_du, &sys_zero, &x, dt);

        // Newton corrector at t_next.
        let accepted = predicted.and_then(|mut xp| {
            let sys_next = sys_at(t_next);
            correct(&sys_next, &mut xp, opts).map(|r| (xp, r))
        });

        match accepted {
            Some((x_new, r)) => {
                x = x_new;
                res_now = r;
                t = t_next;
                streak += 1;
                if streak >= 3 {
                    step = (step * 1.5).min(opts.initial_step);
                    streak = 0;
                }
                if let Some(result) = classify_accepted(system, &x, steps_taken, res_now, t) {
                    return Ok(result);
                }
            }
            None => {
                streak = 0;
                step *= 0.5;
                if step < opts.min_step {
                    return Ok(fail(TrackStatus::StepUnderflow, steps_taken, res_now, t));
                }
            }
        }
    }

    // One extra polish pass at the endpoint; keep it only if it helps.
    let sys_end = sys_at(1.0);
    if let Ok((x_ref, r)) = newton_refine(&sys_end, &x, opts.corrector_tol * 1e-3, 2) {
        if r <= res_now {
            x = x_ref;
            res_now = r;
        }
    }
    Ok(TrackResult {
        status: TrackStatus::Success,
        endpoint: Some(x),
        steps_taken,
        final_residual: res_now,
        t_reached: 1.0,
    })
}

/// Divergence / hyperplane classification at an accepted path point.
fn classify_accepted(
    system: &SquareSystem,
    x: &CVec,
    steps: usize,
    res: f64,
    t: f64,
) -> Option<TrackResult> {
    let status = if x.norm() > DIVERGENCE_NORM || !x.iter().all(|c| c.is_finite()) {
        TrackStatus::Diverged
    } else {
        match system.reconstruct(x) {
            Ok((p, _)) if system.min_structural_abs(&p) < HYPERPLANE_TOL => {
                TrackStatus::HitCoordinateHyperplane
            }
            _ => return None,
        }
    };
    Some(TrackResult {
        status,
        endpoint: None,
        steps_taken: steps,
        final_residual: res,
        t_reached: t,
    })
}

fn predict(
    sys_t: &SquareSystem,
    sys_du: &SquareSystem,
    sys_zero: &SquareSystem,
    x: &CVec,
    dt: f64,
) -> Option<CVec> {
    let (_, jac) = sys_t.evaluate(x).ok()?;
    let f_du = sys_du.evaluate(x).ok()?.0;
    let f_zero = sys_zero.evaluate(x).ok()?.0;
    let df_dt = f_du - f_zero;
    let v = jac.lu().solve(&(-df_dt))?;
    let xp = x + v * Complex64::new(dt, 0.0);
    xp.iter().all(|c| c.is_finite()).then_some(xp)
}

/// In-place Newton correction; returns the achieved residual on success.
fn correct(sys: &SquareSystem, x: &mut CVec, opts: &TrackOptions) -> Option<f64> {
    for _ in 0..opts.max_newton_iters {
        let (res, jac) = sys.evaluate(x).ok()?;
        let r = res.norm();
        if r <= opts.corrector_tol {
            return Some(r);
        }
        let delta = jac.lu().solve(&(-res))?;
        *x += delta;
        if !x.iter().all(|c| c.is_finite()) {
            return None;
        }
    }
    let r = sys.evaluate(x).ok()?.0.norm();
    (r <= opts.corrector_tol).then_some(r)
}

/// Newton's method on a square system, to tolerance `tol` within
/// `max_iters` iterations.
pub fn newton_refine(
    sys: &SquareSystem,
    x: &CVec,
    tol: f64,
    max_iters: usize,
) -> Result<(CVec, f64)> {
    let mut x = x.clone();
    let mut last = f64::INFINITY;
    for i in 0..=max_iters {
        let (res, jac) = sys.evaluate(&x)?;
        last = res.norm();
        if last <= tol {
            return Ok((x, last));
        }
        if i == max_iters {
            break;
        }
        let delta = jac
            .lu()
            .solve(&(-res))
            .ok_or_else(|| Error::Degenerate("jacobian numerically singular".into()))?;
        x += delta;
        if !x.iter().all(|c| c.is_finite()) {
            return Err(Error::NoConvergence {
                residual: f64::INFINITY,
                iters: i + 1,
            });
        }
    }
    Err(Error::NoConvergence {
        residual: last,
        iters: max_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critsys::fiber_sample;
    use crate::numkit::{gaussian_cmat, rel_frobenius_distance};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn structured_direction(spec: &ModelSpec, seed: u64) -> CMat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gaussian_cmat(&mut rng, spec.m, spec.n);
        match spec.kind {
            ModelKind::Rect => g,
            ModelKind::Sym => (&g + g.transpose()) * c(0.5, 0.0),
            ModelKind::Skew | ModelKind::SkewTranslated => {
                let mut s = (&g + g.transpose()) * c(0.5, 0.0);
                for i in 0..spec.m {
                    s[(i, i)] = c(0.0, 0.0);
                }
                s
            }
        }
    }

    /// Express a fiber sample as a start pair for the public `track_path`,
    /// whose rect systems live in the default chart: reconstruct the chart
    /// coordinates from P and return the matching system for read-back.
    fn public_start(spec: &ModelSpec, fs: &crate::critsys::FiberSample) -> (SquareSystem, CVec) {
        match spec.kind {
            ModelKind::Rect => {
                let sys = SquareSystem::assemble(spec, &fs.u).unwrap();
                let x = sys.rect_x_from_point(&fs.point.p).unwrap();
                let x = newton_refine(&sys, &x, 1e-12, 5).map(|(x, _)| x).unwrap_or(x);
                (sys, x)
            }
            _ => (fs.system.clone(), fs.x0.clone()),
        }
    }

    #[test]
    fn identity_path_returns_start() {
        for (spec, seed) in [
            (ModelSpec::rect(3, 3, 2).unwrap(), 7u64),
            (ModelSpec::sym(4, 2).unwrap(), 8),
            (ModelSpec::skew(4, 2).unwrap(), 9),
        ] {
            let fs = fiber_sample(&spec, seed).unwrap();
            let (sys, x0) = public_start(&spec, &fs);
            let result = track_path(&spec, &fs.u, &fs.u, &x0, &TrackOptions::default()).unwrap();
            assert_eq!(result.status, TrackStatus::Success, "{spec}");
            let x_end = result.endpoint.unwrap();
            let (p_end, lam_end) = sys.reconstruct(&x_end).unwrap();
            assert!(
                rel_frobenius_distance(&p_end, &fs.point.p) <= 1e-9,
                "{spec}: end point moved by {}",
                rel_frobenius_distance(&p_end, &fs.point.p)
            );
            assert!((lam_end - fs.point.lambda).norm() <= 1e-9 * fs.point.lambda.norm());
        }
    }

    #[test]
    fn small_perturbation_tracks() {
        let spec = ModelSpec::rect(3, 3, 2).unwrap();
        let fs = fiber_sample(&spec, 11).unwrap();
        let (_, x0) = public_start(&spec, &fs);
        let du = structured_direction(&spec, 100) * c(1e-3, 0.0);
        let u_end = &fs.u + du;
        let result = track_path(&spec, &fs.u, &u_end, &x0, &TrackOptions::default()).unwrap();
        assert_eq!(result.status, TrackStatus::Success);
        assert!(result.final_residual <= 1e-9);
        let sys_end = SquareSystem::assemble(&spec, &u_end).unwrap();
        let x = result.endpoint.unwrap();
        assert!(sys_end.residual_norm(&x).unwrap() <= 1e-9);
        assert!(sys_end.full_residual(&x).unwrap() <= 1e-8);
    }

    #[test]
    fn strict_hyperplane_detection() {
        // Start vector reconstructing P with an entry below 1e-12.
        let spec = ModelSpec::rect(2, 2, 1).unwrap();
        let u = CMat::from_fn(2, 2, |i, j| c(1.0 + (2 * i + j) as f64, 0.2));
        let x = CVec::from_vec(vec![c(1.0, 0.0), c(1e-13, 0.0), c(1.0, 0.0), u.sum()]);
        let result = track_path(&spec, &u, &u, &x, &TrackOptions::default()).unwrap();
        assert_eq!(result.status, TrackStatus::HitCoordinateHyperplane);
        assert!(result.endpoint.is_none());
    }

    #[test]
    fn degenerate_target_fails_with_diagnostics() {
        // The target data has a zero row marginal, so the unique critical
        // point escapes through the coordinate hyperplanes.
        let spec = ModelSpec::rect(2, 2, 1).unwrap();
        let fs = fiber_sample(&spec, 13).unwrap();
        let (_, x0) = public_start(&spec, &fs);
        let u_end = CMat::from_fn(2, 2, |i, j| {
            if i == 0 && j == 1 {
                c(-1.0, 0.0)
            } else {
                c(1.0, 0.0)
            }
        });
        let result = track_path(&spec, &fs.u, &u_end, &x0, &TrackOptions::default()).unwrap();
        assert_ne!(result.status, TrackStatus::Success);
        assert!(result.endpoint.is_none());
        assert!(result.t_reached < 1.0 || result.final_residual > 1e-9);
        assert!(result.t_reached >= 0.0);
    }

    #[test]
    fn newton_refine_examples() {
        let spec = ModelSpec::rect(3, 3, 2).unwrap();
        let fs = fiber_sample(&spec, 17).unwrap();
        // Exact solution: returned unchanged (residual already below tol).
        let (x_same, r) = newton_refine(&fs.system, &fs.x0, 1e-9, 5).unwrap();
        assert!(r <= 1e-9);
        assert!((&x_same - &fs.x0).norm() <= 1e-14 * fs.x0.norm());
        // Perturbed by 1e-4: recovers to 1e-12 within 5 iterations.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise = crate::numkit::gaussian_cvec(&mut rng, fs.x0.len());
        let x_pert = &fs.x0 + noise * c(1e-4, 0.0);
        let (x_back, r) = newton_refine(&fs.system, &x_pert, 1e-12, 5).unwrap();
        assert!(r <= 1e-12);
        let (p_back, _) = fs.system.reconstruct(&x_back).unwrap();
        assert!(rel_frobenius_distance(&p_back, &fs.point.p) <= 1e-8);
        // Far from any solution: explicit non-convergence.
        let x_far = crate::numkit::gaussian_cvec(&mut rng, fs.x0.len()) * c(10.0, 0.0);
        match newton_refine(&fs.system, &x_far, 1e-9, 6) {
            Err(Error::NoConvergence { .. }) | Err(Error::Degenerate(_)) | Err(Error::Domain(_)) => {}
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn gamma_independence_of_endpoints() {
        let spec = ModelSpec::rect(3, 3, 2).unwrap();
        let fs = fiber_sample(&spec, 19).unwrap();
        let (sys, x0) = public_start(&spec, &fs);
        let du = structured_direction(&spec, 200) * c(0.01, 0.0);
        let u_end = &fs.u + du;
        let mut endpoints = Vec::new();
        for gamma_seed in [1u64, 2] {
            let opts = TrackOptions::default().with_gamma_seed(gamma_seed);
            let result = track_path(&spec, &fs.u, &u_end, &x0, &opts).unwrap();
            assert_eq!(result.status, TrackStatus::Success, "gamma seed {gamma_seed}");
            let (p, _) = sys.reconstruct(&result.endpoint.unwrap()).unwrap();
            endpoints.push(p);
        }
        assert!(rel_frobenius_distance(&endpoints[0], &endpoints[1]) <= 1e-7);
    }

    #[test]
    fn deterministic_step_counts() {
        let spec = ModelSpec::sym(4, 2).unwrap();
        let fs = fiber_sample(&spec, 23).unwrap();
        let du = structured_direction(&spec, 300) * c(0.1, 0.0);
        let u_end = &fs.u + du;
        let opts = TrackOptions::default();
        let r1 = track_path(&spec, &fs.u, &u_end, &fs.x0, &opts).unwrap();
        let r2 = track_path(&spec, &fs.u, &u_end, &fs.x0, &opts).unwrap();
        assert_eq!(r1.status, TrackStatus::Success);
        assert_eq!(r1.steps_taken, r2.steps_taken);
        let pa = fs.system.reconstruct(&r1.endpoint.unwrap()).unwrap().0;
        let pb = fs.system.reconstruct(&r2.endpoint.unwrap()).unwrap().0;
        assert!(rel_frobenius_distance(&pa, &pb) <= 1e-13);
    }
}
