//! Command-line front end: solve critical equations, dualize and verify
//! solution files, and tabulate ML-degrees.
//!
//! Exit codes: 0 success / verification pass, 1 verification failure,
//! 2 solver incomplete (trace test or path tracking failed), 3 invalid
//! input.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mldual::critsys::{criticality_residual, fiber_sample};
use mldual::duality::{dualize_point, verify_points, DualPair, PairingReport};
use mldual::jsonio::{
    load_json, load_matrix, save_json, ComplexEntry, DualFile, FiberSampleFile, MatrixJson, Meta,
    SolutionFile,
};
use mldual::models::{ModelKind, ModelSpec};
use mldual::monodromy::{populate_with, solve_for_data_with, PopulateOptions, SolutionSet};
use mldual::numkit::{svd_rank, DEFAULT_REL_TOL};
use mldual::tracker::TrackOptions;
use mldual::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mldual",
    version,
    about = "Critical points of matrix likelihood functions and their dual pairings"
)]
struct Cli {
    /// Cap the worker thread count (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compute all critical points of the likelihood over a data matrix.
    Solve(SolveArgs),
    /// Map every point of a solution file through the duality involution.
    Dualize(DualizeArgs),
    /// Re-derive every certification invariant of a solution file.
    Verify(VerifyArgs),
    /// ML-degree: the critical-fiber cardinality, cross-checked over seeds.
    Degree(DegreeArgs),
    /// CSV table of ML-degrees over a size grid.
    Table(TableArgs),
    /// Sample a model point together with data critical at it.
    FiberSample(FiberArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model family: rect, sym, skew or skew_translated.
    #[arg(long)]
    kind: String,
    /// Row count.
    #[arg(long)]
    m: usize,
    /// Column count (rect only; defaults to --m).
    #[arg(long)]
    n: Option<usize>,
    /// Model rank (the translated rank s for skew_translated).
    #[arg(long)]
    rank: usize,
}

impl ModelArgs {
    fn spec(&self) -> Result<ModelSpec> {
        let kind: ModelKind = self.kind.parse()?;
        if kind != ModelKind::Rect {
            if let Some(n) = self.n {
                if n != self.m {
                    return Err(Error::InvalidModel(format!(
                        "--n {n} conflicts with --m {} for square kind {kind}",
                        self.m
                    )));
                }
            }
        }
        ModelSpec::new(kind, self.m, self.n.unwrap_or(self.m), self.rank)
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Data matrix file: JSON {rows, cols, entries} with entries either
    /// plain reals or [re, im] pairs, row-major.
    #[arg(long, conflicts_with = "generic")]
    data: Option<PathBuf>,
    /// Draw generic complex data from the seed instead of reading a file.
    #[arg(long)]
    generic: bool,
    /// RNG seed (falls back to $MLDUAL_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Two solutions closer than this relative distance are one point.
    #[arg(long)]
    dedup_tol: Option<f64>,
    /// Acceptance bound on the full critical residual of a solution.
    #[arg(long)]
    residual_tol: Option<f64>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DualizeArgs {
    /// Solution file produced by solve.
    #[arg(long)]
    input: PathBuf,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Solution file produced by solve.
    #[arg(long)]
    input: PathBuf,
    /// Bound on the duality invariants (involution, normalization, ...).
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Bound on re-derived criticality residuals.
    #[arg(long, default_value_t = 1e-8)]
    residual_tol: f64,
    /// Also write the full JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DegreeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated seeds; every seed must reproduce the same count.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Also write a JSON provenance report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    /// Model family: rect, sym or skew.
    #[arg(long)]
    kind: String,
    /// Largest row count.
    #[arg(long)]
    max_m: usize,
    /// Largest column count (rect only; defaults to --max-m).
    #[arg(long)]
    max_n: Option<usize>,
    /// Comma-separated seeds; every seed must reproduce each count.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FiberArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// RNG seed (falls back to $MLDUAL_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version land here too; only real usage errors are
            // invalid input.
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::Invalid("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Cmd::Solve(a) => run_solve(a),
        Cmd::Dualize(a) => run_dualize(a),
        Cmd::Verify(a) => run_verify(a),
        Cmd::Degree(a) => run_degree(a),
        Cmd::Table(a) => run_table(a),
        Cmd::FiberSample(a) => run_fiber_sample(a),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("MLDUAL_SEED") {
        Ok(raw) => raw.trim().parse().map_err(|_| {
            Error::Invalid(format!("MLDUAL_SEED must be an unsigned integer, got `{raw}`"))
        }),
        Err(_) => Ok(0),
    }
}

/// Comma-list seeds, else a consecutive run from the resolved base seed.
fn resolve_seeds(flag: Option<Vec<u64>>, count: u64) -> Result<Vec<u64>> {
    match flag {
        Some(seeds) if seeds.is_empty() => Err(Error::Invalid("--seeds must be nonempty".into())),
        Some(seeds) => Ok(seeds),
        None => {
            let base = resolve_seed(None)?;
            Ok((0..count).map(|k| base.wrapping_add(k)).collect())
        }
    }
}

fn emit<T: serde::Serialize>(out: &Option<PathBuf>, value: &T) -> Result<()> {
    match out {
        Some(path) => save_json(path, value),
        None => {
            let text = serde_json::to_string_pretty(value)?;
            println!("{text}");
            Ok(())
        }
    }
}

fn run_solve(a: SolveArgs) -> Result<u8> {
    let spec = a.model.spec()?;
    let seed = resolve_seed(a.seed)?;
    let mut popts = PopulateOptions::default();
    if let Some(tol) = a.dedup_tol {
        popts.dedup_tol = tol;
    }
    if let Some(tol) = a.residual_tol {
        popts.full_residual_tol = tol;
    }
    let topts = TrackOptions::default();

    let set: SolutionSet = match &a.data {
        Some(path) => {
            let u = load_matrix(path)?;
            spec.validate_data(&u)?;
            solve_for_data_with(&spec, &u, seed, &topts, &popts)?
        }
        None => {
            if !a.generic {
                return Err(Error::Invalid(
                    "solve needs --data FILE or --generic".into(),
                ));
            }
            populate_with(&spec, seed, &topts, &popts)?
        }
    };

    let file = SolutionFile::from_set(&set, popts.dedup_tol, popts.full_residual_tol);
    emit(&a.out, &file)?;
    eprintln!("{spec}: {} critical points (seed {seed})", set.len());
    if !set.path_failures.is_empty() {
        eprintln!(
            "solver incomplete: {} start path(s) failed to arrive at the target data",
            set.path_failures.len()
        );
        return Ok(2);
    }
    Ok(0)
}

fn run_dualize(a: DualizeArgs) -> Result<u8> {
    let file: SolutionFile = load_json(&a.input)?;
    let u = file.data()?;
    let points = file.to_points()?;
    let pairs: Vec<DualPair> = points
        .iter()
        .map(|p| dualize_point(p, &u))
        .collect::<Result<_>>()?;
    let dual = DualFile::from_pairs(file.model, &u, &pairs, file.meta.clone())?;
    let degenerate = dual.pairs.iter().filter(|p| p.degenerate).count();
    emit(&a.out, &dual)?;
    eprintln!(
        "{} -> {}: {} pairs, {degenerate} rank-degenerate",
        dual.model,
        dual.dual_model,
        dual.pairs.len()
    );
    Ok(0)
}

struct Check {
    name: &'static str,
    detail: String,
    pass: bool,
}

impl Check {
    fn bound(name: &'static str, value: f64, limit: f64) -> Self {
        Check {
            name,
            detail: format!("{value:.3e} (limit {limit:.1e})"),
            pass: value <= limit,
        }
    }

    fn count(name: &'static str, failures: usize, total: usize) -> Self {
        Check {
            name,
            detail: format!("{failures} of {total} points failed"),
            pass: failures == 0,
        }
    }
}

fn run_verify(a: VerifyArgs) -> Result<u8> {
    let file: SolutionFile = load_json(&a.input)?;
    let u = file.data()?;
    let points = file.to_points()?;
    if points.is_empty() {
        return Err(Error::Invalid("solution file holds no points".into()));
    }

    // Re-derive everything; nothing numeric in the file is trusted.
    let mut checks: Vec<Check> = Vec::new();
    let mut max_primal = 0.0f64;
    let mut primal_failures = 0usize;
    let mut rank_mismatches = 0usize;
    let mut max_stored = 0.0f64;
    for point in &points {
        // A point so corrupt that the residual cannot be formed (for
        // instance, off-model rank) counts as a criticality failure, not
        // an input error.
        match criticality_residual(&point.model_point(), &u) {
            Ok(res) => max_primal = max_primal.max(res),
            Err(_) => primal_failures += 1,
        }
        if svd_rank(&point.p, DEFAULT_REL_TOL)?.rank != point.num_rank {
            rank_mismatches += 1;
        }
        max_stored = max_stored.max(point.residual);
    }
    if primal_failures > 0 {
        checks.push(Check::count("criticality", primal_failures, points.len()));
    } else {
        checks.push(Check::bound("criticality", max_primal, a.residual_tol));
    }
    checks.push(Check::count("rank consistency", rank_mismatches, points.len()));
    checks.push(Check::bound("stored residual", max_stored, a.residual_tol));

    let pairing: Option<PairingReport> = match verify_points(&file.model, &u, &points) {
        Ok(report) => Some(report),
        Err(e) if !e.is_input_error() => {
            checks.push(Check {
                name: "duality derivation",
                detail: format!("failed: {e}"),
                pass: false,
            });
            None
        }
        Err(e) => return Err(e),
    };
    if let Some(report) = &pairing {
        checks.push(Check::count(
            "dual rank",
            report.dual_rank_failures,
            report.n_points,
        ));
        checks.push(Check::bound("involution", report.max_involution, a.tol));
        checks.push(Check::bound(
            "dual criticality",
            report.max_dual_criticality,
            a.residual_tol,
        ));
        if let Some(norm) = report.normalization {
            checks.push(Check::bound("normalization sum", norm, a.tol));
        }
        if let Some(spread) = report.product_spread {
            checks.push(Check::bound("product constancy", spread, a.tol));
        }
        checks.push(Check::bound("marginal minors", report.max_marginal, a.tol));
        checks.push(Check::bound("multiplier", report.max_multiplier, a.tol));
        if let Some(sd) = report.self_dual {
            checks.push(Check::count(
                "self-dual closure",
                sd.total - sd.matched,
                sd.total,
            ));
        }
    }
    if let Some(cert) = &file.certificate {
        checks.push(Check {
            name: "trace certificate",
            detail: format!(
                "residual {:.3e} over {} loops",
                cert.trace_residual, cert.loops
            ),
            pass: cert.pass,
        });
    }

    let pass = checks.iter().all(|c| c.pass);
    for check in &checks {
        println!(
            "{:<18} {} {}",
            check.name,
            if check.pass { "pass" } else { "FAIL" },
            check.detail
        );
    }
    println!("overall: {}", if pass { "pass" } else { "FAIL" });

    if let Some(out) = &a.out {
        let report = serde_json::json!({
            "model": file.model,
            "n_points": points.len(),
            "tol": a.tol,
            "residual_tol": a.residual_tol,
            "checks": checks.iter().map(|c| serde_json::json!({
                "name": c.name,
                "detail": c.detail,
                "pass": c.pass,
            })).collect::<Vec<_>>(),
            "pairing": pairing,
            "input_meta": file.meta,
            "pass": pass,
            "version": env!("CARGO_PKG_VERSION"),
        });
        save_json(out, &report)?;
    }

    if pass {
        Ok(0)
    } else {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
        eprintln!("verification failed: {}", failed.join(", "));
        Ok(1)
    }
}

fn run_degree(a: DegreeArgs) -> Result<u8> {
    let spec = a.model.spec()?;
    let seeds = resolve_seeds(a.seeds, 3)?;
    if seeds.len() < 2 {
        return Err(Error::Invalid(
            "degree needs at least two seeds to cross-check".into(),
        ));
    }
    let topts = TrackOptions::default();
    let popts = PopulateOptions::default();
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let set = populate_with(&spec, seed, &topts, &popts)?;
        let cert = set.certificate.as_ref();
        eprintln!(
            "seed {seed}: {} points in {} loops, trace residual {:.3e}",
            set.len(),
            set.loops_run,
            cert.map_or(f64::NAN, |c| c.residual)
        );
        runs.push(serde_json::json!({
            "seed": seed,
            "count": set.len(),
            "loops": set.loops_run,
            "trace_residual": cert.map(|c| c.residual),
        }));
    }
    let counts: Vec<usize> = runs
        .iter()
        .map(|r| r["count"].as_u64().unwrap() as usize)
        .collect();
    if counts.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::SeedDisagreement(counts));
    }

    println!("{}", counts[0]);
    if let Some(out) = &a.out {
        let report = serde_json::json!({
            "model": spec,
            "ml_degree": counts[0],
            "runs": runs,
            "dedup_tol": popts.dedup_tol,
            "residual_tol": popts.full_residual_tol,
            "version": env!("CARGO_PKG_VERSION"),
        });
        save_json(out, &report)?;
    }
    Ok(0)
}

fn run_table(a: TableArgs) -> Result<u8> {
    let kind: ModelKind = a.kind.parse()?;
    let seeds = resolve_seeds(a.seeds, 2)?;
    if a.max_m == 0 {
        return Err(Error::Invalid("--max-m must be at least 1".into()));
    }
    if kind != ModelKind::Rect && a.max_n.is_some() {
        return Err(Error::Invalid("--max-n only applies to rect".into()));
    }

    // Ranks run over every valid value for the largest row count; smaller
    // rows leave the out-of-range cells empty.
    let ranks: Vec<usize> = match kind {
        ModelKind::Rect | ModelKind::Sym => (1..=a.max_m).collect(),
        ModelKind::Skew => (1..=a.max_m).filter(|r| r % 2 == 0).collect(),
        ModelKind::SkewTranslated => {
            return Err(Error::Invalid(
                "table covers the primal families rect, sym and skew".into(),
            ))
        }
    };
    if ranks.is_empty() {
        return Err(Error::Invalid(format!(
            "no valid ranks for {kind} with --max-m {}",
            a.max_m
        )));
    }

    let mut csv = String::new();
    let rank_header: Vec<String> = ranks.iter().map(|r| format!("r={r}")).collect();
    let sizes: Vec<(usize, usize)> = match kind {
        ModelKind::Rect => {
            csv.push_str(&format!("m,n,{}\n", rank_header.join(",")));
            let max_n = a.max_n.unwrap_or(a.max_m);
            (1..=a.max_m)
                .flat_map(|m| (m..=max_n).map(move |n| (m, n)))
                .collect()
        }
        _ => {
            csv.push_str(&format!("m,{}\n", rank_header.join(",")));
            (1..=a.max_m).map(|m| (m, m)).collect()
        }
    };

    for (m, n) in sizes {
        let mut cells: Vec<String> = match kind {
            ModelKind::Rect => vec![m.to_string(), n.to_string()],
            _ => vec![m.to_string()],
        };
        for &r in &ranks {
            match ModelSpec::new(kind, m, n, r) {
                Ok(spec) => {
                    let degree = mldual::monodromy::ml_degree(&spec, &seeds)?;
                    cells.push(degree.to_string());
                }
                // Rank out of range for this size: structurally empty cell.
                Err(_) => cells.push(String::new()),
            }
        }
        csv.push_str(&cells.join(","));
        csv.push('\n');
        eprintln!("row {} done", cells.join(","));
    }

    match &a.out {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

fn run_fiber_sample(a: FiberArgs) -> Result<u8> {
    let spec = a.model.spec()?;
    let seed = resolve_seed(a.seed)?;
    let popts = PopulateOptions::default();
    let fs = fiber_sample(&spec, seed)?;
    let file = FiberSampleFile {
        model: spec,
        p: MatrixJson::from_cmat(&fs.point.p),
        u: MatrixJson::from_cmat(&fs.u),
        lambda: ComplexEntry(fs.point.lambda),
        residual: fs.point.residual,
        fiber_dim: fs.fiber_dim,
        meta: Some(Meta::new(seed, popts.dedup_tol, popts.full_residual_tol)),
    };
    emit(&a.out, &file)?;
    Ok(0)
}
