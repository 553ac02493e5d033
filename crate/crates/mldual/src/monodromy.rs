//! Monodromy population of critical-point fibers, completeness
//! certification, ML-degree computation, and continuation to user data.
//!
//! Starting from one (P, U) pair on the critical bundle, random triangle
//! loops in data space permute the fiber over the base point; tracking the
//! known solutions around loops and registering unseen endpoints
//! eventually reaches the whole fiber because the bundle is irreducible.
//!
//! Completeness is certified by closure: after the set stops growing,
//! several fresh loops from an independent random stream must map the set
//! into itself (every endpoint lands on a known member and no path fails).
//! The certificate residual is the worst endpoint-to-set distance, so a
//! missing member shows up as a residual far above the dedup tolerance.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::critsys::{fiber_sample, mat_g, CriticalPoint, SquareSystem};
use crate::models::{ModelKind, ModelSpec};
use crate::numkit::{
    gaussian_cmat, rel_frobenius_distance, svd_rank, CMat, CVec, DEFAULT_REL_TOL,
};
use crate::tracker::{newton_refine, track_path_in, TrackOptions, TrackStatus};
use crate::{Error, Result};

/// Decorrelates the loop-vertex stream from the fiber-sample stream.
const LOOP_SALT: u64 = 0x6d6c_6475_616c_0001;
/// Decorrelates the certificate stream from the population stream.
const CERT_SALT: u64 = 0x6d6c_6475_616c_0002;
/// Decorrelates re-twist gammas in `solve_for_data` from everything else.
const RETWIST_SALT: u64 = 0x6d6c_6475_616c_0003;
/// Extra full passes with a fresh twist when the target fiber comes up
/// short (a near-discriminant arc can merge two lifted paths; a different
/// twist takes a different arc).
const SOLVE_RETWISTS: usize = 3;
/// Gauge seed for per-leg anchored systems (sym/skew).
const LEG_GAUGE_SEED: u64 = 1;

#[derive(Debug, Clone, Copy)]
pub struct PopulateOptions {
    pub max_loops: usize,
    pub quiet_target: usize,
    /// Relative Frobenius distance on reconstructed P below which two
    /// solutions are the same point.
    pub dedup_tol: f64,
    /// Acceptance bound on the full (unprojected) critical residual of a
    /// registered point.
    pub full_residual_tol: f64,
    /// Loops in one certification round.
    pub cert_loops: usize,
}

impl Default for PopulateOptions {
    fn default() -> Self {
        PopulateOptions {
            max_loops: 200,
            quiet_target: 10,
            dedup_tol: 1e-6,
            full_residual_tol: 1e-8,
            cert_loops: 3,
        }
    }
}

/// Closure certificate: fresh loops map the set into itself.
#[derive(Debug, Clone, Copy)]
pub struct TraceCertificate {
    pub pass: bool,
    /// Worst endpoint-to-set relative distance over the certificate loops;
    /// far above dedup_tol exactly when the set is not closed.
    pub residual: f64,
    pub failed_paths: usize,
}

/// One member path that did not reach the target in `solve_for_data`.
#[derive(Debug, Clone, Copy)]
pub struct PathFailure {
    /// Index of the start point in the populated generic set.
    pub index: usize,
    pub status: TrackStatus,
    pub t_reached: f64,
    pub final_residual: f64,
}

/// A deduplicated set of critical points over one data matrix.
#[derive(Debug, Clone)]
pub struct SolutionSet {
    pub spec: ModelSpec,
    pub u: CMat,
    pub points: Vec<CriticalPoint>,
    pub(crate) xs: Vec<CVec>,
    pub loops_run: usize,
    pub loops_since_new: usize,
    pub certificate: Option<TraceCertificate>,
    pub path_failures: Vec<PathFailure>,
    pub seed: u64,
    base_system: SquareSystem,
}

impl SolutionSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the member matching P within `tol`, if any.
    pub fn find_match(&self, p: &CMat, tol: f64) -> Option<usize> {
        self.points
            .iter()
            .position(|q| rel_frobenius_distance(&q.p, p) <= tol)
    }

    fn distance_to_set(&self, p: &CMat) -> f64 {
        self.points
            .iter()
            .map(|q| rel_frobenius_distance(&q.p, p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Insert points of `other` that are not already present (same spec and
    /// base data required). Returns how many were inserted.
    pub fn merge_from(&mut self, other: &SolutionSet) -> Result<usize> {
        if other.spec != self.spec {
            return Err(Error::Dimension("merging sets over different specs".into()));
        }
        if rel_frobenius_distance(&other.u, &self.u) > 1e-12 {
            return Err(Error::Dimension(
                "merging sets over different base data".into(),
            ));
        }
        let mut inserted = 0;
        for (point, x) in other.points.iter().zip(&other.xs) {
            if self.find_match(&point.p, DEDUP_TOL_DEFAULT).is_none() {
                self.points.push(point.clone());
                self.xs.push(x.clone());
                inserted += 1;
            }
        }
        Ok(inserted)
    }
}

const DEDUP_TOL_DEFAULT: f64 = 1e-6;

/// Structured Gaussian data-space direction for the kind (symmetric for
/// sym, symmetric zero-diagonal for skew data).
pub(crate) fn random_data_direction<R: Rng>(spec: &ModelSpec, rng: &mut R) -> CMat {
    let g = gaussian_cmat(rng, spec.m, spec.n);
    match spec.kind {
        ModelKind::Rect => g,
        ModelKind::Sym => (&g + g.transpose()) * Complex64::new(0.5, 0.0),
        ModelKind::Skew | ModelKind::SkewTranslated => {
            let mut s = (&g + g.transpose()) * Complex64::new(0.5, 0.0);
            for i in 0..spec.m {
                s[(i, i)] = Complex64::new(0.0, 0.0);
            }
            s
        }
    }
}

/// Progressively finer tracking schedules for a stalled leg. The twist is
/// kept, so every attempt lifts the same data-space path and lands on the
/// same sheet; only the step control changes.
fn retry_ladder(topts: &TrackOptions) -> [TrackOptions; 3] {
    let mut fine = topts.clone();
    fine.min_step = 1e-10;
    fine.max_newton_iters = 8;
    fine.initial_step = 0.02;
    fine.max_steps = topts.max_steps.max(40_000);
    let mut finest = fine.clone();
    finest.initial_step = 0.005;
    [topts.clone(), fine, finest]
}

/// Re-posings of a stalled leg beyond the step-control ladder. Attempt 0
/// keeps the caller's twist and the standard gauge; each later attempt
/// redraws the segment twist (and, for the anchored kinds, the gauge
/// slices) so the lift follows a different arc around whatever pinch the
/// previous attempts stalled on. The legs still join the same waypoints,
/// so endpoints remain fiber points over the final waypoint; a retwisted
/// loop is simply a different monodromy element, which the set-membership
/// bookkeeping is indifferent to.
const LEG_RESCUE_ATTEMPTS: u64 = 3;
const LEG_RESCUE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Track one member along a polyline of data matrices; returns the final
/// unknown vector if every leg succeeds, otherwise the last failure of the
/// first leg that could not be completed.
fn track_legs(
    spec: &ModelSpec,
    base: &SquareSystem,
    waypoints: &[&CMat],
    x: &CVec,
    topts: &TrackOptions,
) -> std::result::Result<CVec, (TrackStatus, f64, f64)> {
    let mut x_cur = x.clone();
    for w in 0..waypoints.len() - 1 {
        let (u_from, u_to) = (waypoints[w], waypoints[w + 1]);
        let mut done = None;
        let mut last_fail = (TrackStatus::Diverged, 0.0, f64::INFINITY);
        'rescue: for attempt in 0..=LEG_RESCUE_ATTEMPTS {
            let system = match spec.kind {
                ModelKind::Rect => base.with_data_unchecked(u_from.clone()),
                _ => {
                    // Anchoring through the current factor keeps x_cur on
                    // the slices exactly, for any slice seed.
                    let g0 = mat_g(&x_cur, spec.m, spec.r);
                    let gauge_seed = LEG_GAUGE_SEED ^ attempt.wrapping_mul(LEG_RESCUE_SALT);
                    match SquareSystem::assemble_anchored(spec, u_from, gauge_seed, &g0) {
                        Ok(s) => s,
                        Err(_) => {
                            last_fail = (TrackStatus::Diverged, 0.0, f64::INFINITY);
                            continue 'rescue;
                        }
                    }
                }
            };
            let retwisted = if attempt == 0 {
                topts.clone()
            } else {
                topts.clone().with_gamma_seed(LEG_RESCUE_SALT ^ attempt)
            };
            for opts in &retry_ladder(&retwisted) {
                match track_path_in(&system, u_to, &x_cur, opts) {
                    Ok(res) if res.status == TrackStatus::Success => {
                        done = Some(res.endpoint.expect("endpoint present on success"));
                        break 'rescue;
                    }
                    Ok(res) => last_fail = (res.status, res.t_reached, res.final_residual),
                    Err(_) => last_fail = (TrackStatus::Diverged, 0.0, f64::INFINITY),
                }
            }
        }
        match done {
            Some(x_end) => x_cur = x_end,
            None => return Err(last_fail),
        }
    }
    Ok(x_cur)
}

fn map_members<T: Send + Sync>(
    xs: &[CVec],
    f: impl Fn(usize, &CVec) -> T + Send + Sync,
) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        xs.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        xs.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Outcome of tracking the whole set around one loop.
struct LoopOutcome {
    /// (endpoint x, reconstructed P, full residual), one per surviving path.
    arrivals: Vec<(CVec, CMat, f64)>,
    failures: usize,
}

fn run_loop(
    set: &SolutionSet,
    v1: &CMat,
    v2: &CMat,
    topts: &TrackOptions,
    popts: &PopulateOptions,
) -> LoopOutcome {
    let waypoints = [&set.u, v1, v2, &set.u];
    let results = map_members(&set.xs, |_i, x| {
        track_legs(&set.spec, &set.base_system, &waypoints, x, topts)
    });
    let mut arrivals = Vec::new();
    let mut failures = 0;
    for r in results {
        match r {
            Ok(x_end) => {
                // Tighten before dedup so registry distances are crisp.
                let x_end = newton_refine(&set.base_system, &x_end, 1e-11, 6)
                    .map(|(x, _)| x)
                    .unwrap_or(x_end);
                match (
                    set.base_system.reconstruct(&x_end),
                    set.base_system.full_residual(&x_end),
                ) {
                    (Ok((p, _)), Ok(full)) if full <= popts.full_residual_tol => {
                        // The fiber over generic data consists of rank-r
                        // points only; a converged endpoint of lower rank is
                        // a slip onto the boundary stratum, i.e. a failed
                        // path, and must not enter the registry.
                        let on_stratum = svd_rank(&p, DEFAULT_REL_TOL)
                            .map(|rep| rep.rank == set.spec.r)
                            .unwrap_or(false);
                        if on_stratum {
                            arrivals.push((x_end, p, full));
                        } else {
                            failures += 1;
                        }
                    }
                    _ => failures += 1,
                }
            }
            Err(_) => failures += 1,
        }
    }
    LoopOutcome { arrivals, failures }
}

/// Register unseen arrivals; returns how many were new.
fn register_arrivals(set: &mut SolutionSet, arrivals: Vec<(CVec, CMat, f64)>, tol: f64) -> usize {
    let mut new_count = 0;
    for (x, p, full) in arrivals {
        if set.find_match(&p, tol).is_none() {
            let lambda = x[x.len() - 1];
            if let Ok(point) = CriticalPoint::from_parts(set.spec, p, lambda, full, &set.u) {
                set.points.push(point);
                set.xs.push(x);
                new_count += 1;
            }
        }
    }
    new_count
}

fn certificate_round(
    set: &SolutionSet,
    rng: &mut ChaCha8Rng,
    topts: &TrackOptions,
    popts: &PopulateOptions,
) -> (TraceCertificate, Vec<(CVec, CMat, f64)>) {
    let scale = Complex64::new(set.u.norm(), 0.0);
    let mut worst = 0.0f64;
    let mut failed = 0usize;
    let mut strays = Vec::new();
    for _ in 0..popts.cert_loops {
        let v1 = random_data_direction(&set.spec, rng) * scale;
        let v2 = random_data_direction(&set.spec, rng) * scale;
        let outcome = run_loop(set, &v1, &v2, topts, popts);
        failed += outcome.failures;
        for (x, p, full) in outcome.arrivals {
            let d = set.distance_to_set(&p);
            worst = worst.max(d);
            if d > popts.dedup_tol {
                strays.push((x, p, full));
            }
        }
    }
    let cert = TraceCertificate {
        pass: failed == 0 && strays.is_empty(),
        residual: worst,
        failed_paths: failed,
    };
    (cert, strays)
}

/// Certify closure of an existing set under fresh monodromy loops.
///
/// Pass means every tracked endpoint landed on a known member (within the
/// dedup tolerance) and no path failed; the residual is the worst
/// endpoint-to-set distance observed.
pub fn trace_test(set: &SolutionSet) -> Result<TraceCertificate> {
    if set.is_empty() {
        return Err(Error::Invalid("trace test needs a nonempty set".into()));
    }
    let popts = PopulateOptions::default();
    for point in &set.points {
        if point.residual > popts.full_residual_tol {
            return Err(Error::Invalid(format!(
                "trace test needs residuals at or below {:.1e}",
                popts.full_residual_tol
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(set.seed ^ CERT_SALT);
    let (cert, _) = certificate_round(set, &mut rng, &TrackOptions::default(), &popts);
    Ok(cert)
}

/// Populate the full fiber over a generic data matrix drawn from `seed`.
///
/// Stops when the set has been quiet for `quiet_target` loops AND a
/// certificate round passes; errors with the loop/point counts when the
/// loop budget is exhausted first.
pub fn populate(spec: &ModelSpec, seed: u64, topts: &TrackOptions) -> Result<SolutionSet> {
    populate_with(spec, seed, topts, &PopulateOptions::default())
}

pub fn populate_with(
    spec: &ModelSpec,
    seed: u64,
    topts: &TrackOptions,
    popts: &PopulateOptions,
) -> Result<SolutionSet> {
    topts.validate()?;
    let fs = fiber_sample(spec, seed)?;
    let mut set = SolutionSet {
        spec: *spec,
        u: fs.u.clone(),
        points: vec![fs.point.clone()],
        xs: vec![fs.x0.clone()],
        loops_run: 0,
        loops_since_new: 0,
        certificate: None,
        path_failures: Vec::new(),
        seed,
        base_system: fs.system.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ LOOP_SALT);
    let mut cert_rng = ChaCha8Rng::seed_from_u64(seed ^ CERT_SALT);
    let scale = Complex64::new(set.u.norm(), 0.0);

    while set.loops_run < popts.max_loops {
        if set.loops_since_new >= popts.quiet_target {
            let (cert, strays) = certificate_round(&set, &mut cert_rng, topts, popts);
            set.loops_run += popts.cert_loops;
            if cert.pass {
                set.certificate = Some(cert);
                return Ok(set);
            }
            // A failed round either surfaced new points (register, keep
            // looping) or path failures (let quiet re-accumulate).
            let found = register_arrivals(&mut set, strays, popts.dedup_tol);
            set.loops_since_new = if found > 0 { 0 } else { set.loops_since_new / 2 };
            continue;
        }
        let v1 = random_data_direction(spec, &mut rng) * scale;
        let v2 = random_data_direction(spec, &mut rng) * scale;
        let outcome = run_loop(&set, &v1, &v2, topts, popts);
        set.loops_run += 1;
        let found = register_arrivals(&mut set, outcome.arrivals, popts.dedup_tol);
        if found > 0 {
            set.loops_since_new = 0;
        } else {
            set.loops_since_new += 1;
        }
    }
    Err(Error::Incomplete {
        loops: set.loops_run,
        found: set.len(),
        last_growth: set.loops_since_new,
    })
}

/// The ML-degree: the common fiber cardinality across independent generic
/// data draws. All runs must agree.
pub fn ml_degree(spec: &ModelSpec, seeds: &[u64]) -> Result<usize> {
    if seeds.len() < 2 {
        return Err(Error::Invalid(
            "ml_degree needs at least two independent seeds".into(),
        ));
    }
    let topts = TrackOptions::default();
    let mut counts = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        counts.push(populate(spec, seed, &topts)?.len());
    }
    if counts.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::SeedDisagreement(counts));
    }
    Ok(counts[0])
}

/// Solve the critical equations at user data by populating a generic fiber
/// and tracking every member to `u_target`. When fewer distinct endpoints
/// arrive than the fiber holds, whole passes are repeated with fresh
/// twists and the endpoints merged (endpoints depend on the target, not on
/// the arc). Failures toward degenerate targets persist across twists and
/// are reported per path from the last pass, not raised.
pub fn solve_for_data(spec: &ModelSpec, u_target: &CMat, seed: u64) -> Result<SolutionSet> {
    solve_for_data_with(
        spec,
        u_target,
        seed,
        &TrackOptions::default(),
        &PopulateOptions::default(),
    )
}

/// [`solve_for_data`] with explicit tracking and population options.
pub fn solve_for_data_with(
    spec: &ModelSpec,
    u_target: &CMat,
    seed: u64,
    topts: &TrackOptions,
    popts: &PopulateOptions,
) -> Result<SolutionSet> {
    spec.validate_data(u_target)?;
    let base_topts = topts.clone();
    let generic = populate_with(spec, seed, &base_topts, popts)?;

    let target_system = generic.base_system.with_data_unchecked(u_target.clone());
    let mut set = SolutionSet {
        spec: *spec,
        u: u_target.clone(),
        points: Vec::new(),
        xs: Vec::new(),
        loops_run: generic.loops_run,
        loops_since_new: generic.loops_since_new,
        certificate: generic.certificate,
        path_failures: Vec::new(),
        seed,
        base_system: target_system.clone(),
    };
    let mut detour_rng = ChaCha8Rng::seed_from_u64(seed ^ RETWIST_SALT);
    let detour_scale = Complex64::new(generic.u.norm(), 0.0);
    for round in 0..=SOLVE_RETWISTS {
        let topts = if round == 0 {
            base_topts.clone()
        } else {
            base_topts
                .clone()
                .with_gamma_seed(seed ^ RETWIST_SALT ^ round as u64)
        };
        // Retwist rounds also detour through a generic complex waypoint so
        // the replacement arc shares nothing with the stalled one.
        let detour = random_data_direction(spec, &mut detour_rng) * detour_scale;
        let waypoints: Vec<&CMat> = if round == 0 {
            vec![&generic.u, u_target]
        } else {
            vec![&generic.u, &detour, u_target]
        };
        let results = map_members(&generic.xs, |_i, x| {
            track_legs(spec, &generic.base_system, &waypoints, x, &topts)
        });
        let mut round_failures = Vec::new();
        for (index, r) in results.into_iter().enumerate() {
            match r {
                Ok(x_end) => {
                    let x_end = newton_refine(&target_system, &x_end, 1e-11, 6)
                        .map(|(x, _)| x)
                        .unwrap_or(x_end);
                    let full = match target_system.full_residual(&x_end) {
                        Ok(f) => f,
                        Err(_) => {
                            round_failures.push(PathFailure {
                                index,
                                status: TrackStatus::HitCoordinateHyperplane,
                                t_reached: 1.0,
                                final_residual: f64::INFINITY,
                            });
                            continue;
                        }
                    };
                    if full > popts.full_residual_tol {
                        round_failures.push(PathFailure {
                            index,
                            status: TrackStatus::Diverged,
                            t_reached: 1.0,
                            final_residual: full,
                        });
                        continue;
                    }
                    if let Ok((p, _)) = target_system.reconstruct(&x_end) {
                        if set.find_match(&p, popts.dedup_tol).is_none() {
                            let lambda = x_end[x_end.len() - 1];
                            if let Ok(point) =
                                CriticalPoint::from_parts(*spec, p, lambda, full, u_target)
                            {
                                set.points.push(point);
                                set.xs.push(x_end);
                            }
                        }
                    }
                }
                Err((status, t_reached, final_residual)) => {
                    round_failures.push(PathFailure {
                        index,
                        status,
                        t_reached,
                        final_residual,
                    });
                }
            }
        }
        set.path_failures = round_failures;
        if set.len() >= generic.len() {
            break;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn populate_rect_3_3_1_single_point() {
        let spec = ModelSpec::rect(3, 3, 1).unwrap();
        let set = populate(&spec, 5, &TrackOptions::default()).unwrap();
        assert_eq!(set.len(), 1);
        let cert = set.certificate.unwrap();
        assert!(cert.pass);
        assert!(cert.residual <= 1e-6);
    }

    #[test]
    fn populate_rect_3_3_2_finds_ten() {
        let spec = ModelSpec::rect(3, 3, 2).unwrap();
        let set = populate(&spec, 1, &TrackOptions::default()).unwrap();
        assert_eq!(set.len(), 10);
        assert!(set.certificate.unwrap().pass);
        for point in &set.points {
            assert!(point.residual <= 1e-8);
            assert_eq!(point.num_rank, 2);
            assert!(!point.degenerate);
            let report = point.model_point().membership(1e-8);
            assert!(report.is_ok(), "membership: {report:?}");
        }
    }

    #[test]
    fn populate_skew_4_2_finds_four() {
        let spec = ModelSpec::skew(4, 2).unwrap();
        let set = populate(&spec, 2, &TrackOptions::default()).unwrap();
        assert_eq!(set.len(), 4);
        assert!(set.certificate.unwrap().pass);
        for point in &set.points {
            assert!(point.residual <= 1e-8);
            assert_eq!(point.num_rank, 2);
        }
    }

    #[test]
    fn trace_test_passes_full_set_fails_ablated() {
        let spec = ModelSpec::rect(3, 3, 2).unwrap();
        let set = populate(&spec, 3, &TrackOptions::default()).unwrap();
        let cert = trace_test(&set).unwrap();
        assert!(cert.pass);
        assert!(cert.residual <= 1e-6);

        let mut ablated = set.clone();
        ablated.points.pop();
        ablated.xs.pop();
        let cert = trace_test(&ablated).unwrap();
        assert!(!cert.pass, "ablated set must fail closure");
        assert!(cert.residual > 1e-3);
    }

    #[test]
    fn merge_with_self_is_identity() {
        let spec = ModelSpec::rect(3, 3, 2).unwrap();
        let set = populate(&spec, 4, &TrackOptions::default()).unwrap();
        let mut merged = set.clone();
        let inserted = merged.merge_from(&set).unwrap();
        assert_eq!(inserted, 0);
        assert_eq!(merged.len(), set.len());
    }

    #[test]
    fn solve_for_data_integer_target() {
        let spec = ModelSpec::rect(3, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let u = CMat::from_fn(3, 3, |_, _| {
            Complex64::new(rng.gen_range(1..=30) as f64, 0.0)
        });
        let set = solve_for_data(&spec, &u, 6).unwrap();
        assert_eq!(set.len(), 10);
        assert!(set.path_failures.is_empty());
        for point in &set.points {
            assert!(point.residual <= 1e-8);
        }
    }

    #[test]
    fn populate_deterministic_per_seed() {
        let spec = ModelSpec::rect(3, 3, 1).unwrap();
        let a = populate(&spec, 9, &TrackOptions::default()).unwrap();
        let b = populate(&spec, 9, &TrackOptions::default()).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.loops_run, b.loops_run);
        for p in &a.points {
            assert!(b.find_match(&p.p, 1e-10).is_some());
        }
    }
}
