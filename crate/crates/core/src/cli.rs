//! Subcommands of the `koopsos` binary and their exit-code contract.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BoundConfig, RunConfig, SystemConfig};
use crate::design::{
    build_design, certificate_check, estimate_roa, sample_sublevel, synthesize, volume_by_sampling,
    CertificateOptions, CertificateReport, FeasibilityStatus, RationalController, RoaEstimate,
    RoaOptions, SynthesisOutcome, MIN_BOUND_CONSTANT,
};
use crate::error::Error;
use crate::koopman::{
    collect, edmd_fit_report, estimate_residual_bound, BoundWeights, LiftedDataset, ResidualBound,
    Surrogate,
};
use crate::sdp;
use crate::sim::{closed_loop_ct, closed_loop_dt, residual_adversary, ResidualMode, System};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;
pub const EXIT_DEGENERATE_ROA: i32 = 5;
pub const EXIT_VERIFY: i32 = 6;

#[derive(Parser, Debug)]
#[command(
    name = "koopsos",
    version,
    about = "Certified rational controllers from Koopman surrogates and SOS programming"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to available parallelism).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Collect the constant-input dataset.
    Collect(CommonArgs),
    /// Fit the surrogate and synthesize a controller.
    Design(CommonArgs),
    /// Feasibility sweep over residual constants and denominator degrees.
    Sweep(CommonArgs),
    /// Estimate the region of attraction of a controller.
    Roa(CommonArgs),
    /// Validate a controller by pointwise checks and simulation.
    Verify(CommonArgs),
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::Spec(_)
            | Error::Parse(_)
            | Error::Dimension(_)
            | Error::Degree(_) => EXIT_CONFIG,
            Error::Collection(_)
            | Error::Integration { .. }
            | Error::Csv(_)
            | Error::DegenerateBound(_) => EXIT_DATA,
            Error::DegenerateRoa(_) => EXIT_DEGENERATE_ROA,
            Error::NoSolution(_) => EXIT_INFEASIBLE,
            Error::Io(_) | Error::Json(_) | Error::Structure(_) => EXIT_IO,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: i32, message: impl Into<String>) -> CliError {
    CliError {
        code,
        message: message.into(),
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Loaded configuration with command-line overrides applied.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub tol: f64,
}

impl Context {
    pub fn new(args: &CommonArgs) -> CliResult<Self> {
        let mut config = RunConfig::load(&args.config)?;
        if let Some(s) = args.seed {
            config.seed = s;
        }
        let out = args
            .out
            .clone()
            .or_else(|| config.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&out)
            .map_err(|e| fail(EXIT_IO, format!("cannot create {}: {e}", out.display())))?;
        let tol = std::env::var(sdp::TOL_ENV_VAR)
            .ok()
            .map(|v| {
                v.parse::<f64>().ok().filter(|t| *t > 0.0).ok_or_else(|| {
                    fail(
                        EXIT_CONFIG,
                        format!("{} must be a positive number", sdp::TOL_ENV_VAR),
                    )
                })
            })
            .transpose()?
            .or(config.solver_tol)
            .unwrap_or(sdp::DEFAULT_TOL);
        Ok(Context { config, out, tol })
    }

    pub fn from_config(config: RunConfig, out: &Path) -> CliResult<Self> {
        fs::create_dir_all(out)
            .map_err(|e| fail(EXIT_IO, format!("cannot create {}: {e}", out.display())))?;
        let tol = config.solver_tol.unwrap_or(sdp::DEFAULT_TOL);
        Ok(Context {
            config,
            out: out.to_path_buf(),
            tol,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn controller_path(&self) -> PathBuf {
        self.config
            .controller
            .clone()
            .unwrap_or_else(|| self.path("controller.json"))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .map_err(|e| fail(EXIT_IO, format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| fail(EXIT_IO, e.to_string()))?;
    write_text(path, &(s + "\n"))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| fail(EXIT_IO, format!("cannot create {}: {e}", path.display())))
}

fn save_dataset(ds: &LiftedDataset, csv_path: &Path, json_path: &Path) -> CliResult<()> {
    ds.write_csv(create(csv_path)?)?;
    write_text(json_path, &(ds.sidecar_json()? + "\n"))
}

fn load_dataset(csv_path: &Path, json_path: &Path) -> CliResult<LiftedDataset> {
    let open = |p: &Path| {
        File::open(p).map_err(|e| fail(EXIT_DATA, format!("cannot open {}: {e}", p.display())))
    };
    LiftedDataset::read(open(csv_path)?, open(json_path)?)
        .map_err(|e| fail(EXIT_DATA, e.to_string()))
}

fn collect_dataset(ctx: &Context, d: usize, seed: u64) -> CliResult<LiftedDataset> {
    let cfg = &ctx.config;
    let sys = cfg.build_system()?;
    collect(&sys, &cfg.region()?, d, cfg.delta_t(), seed, cfg.substeps())
        .map_err(|e| fail(EXIT_DATA, e.to_string()))
}

#[derive(Serialize)]
struct CollectSummary {
    d: usize,
    blocks: usize,
    rejections: usize,
    seed: u64,
    delta_t: f64,
}

pub fn cmd_collect(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config;
    let ds = collect_dataset(ctx, cfg.d(), cfg.seed)?;
    save_dataset(&ds, &ctx.path("dataset.csv"), &ctx.path("dataset.json"))?;
    let summary = CollectSummary {
        d: ds.d(),
        blocks: ds.blocks.len(),
        rejections: ds.rejections,
        seed: ds.seed,
        delta_t: ds.delta_t,
    };
    println!(
        "collected d = {} pairs per block, {} blocks, {} rejections",
        summary.d, summary.blocks, summary.rejections
    );
    Ok(())
}

/// Surrogate used for design: given matrices, the exact building model,
/// or a fit to the stored (or freshly collected) dataset.
pub fn resolve_model(ctx: &Context) -> CliResult<(Surrogate, Option<LiftedDataset>)> {
    let cfg = &ctx.config;
    let dict = cfg.dictionary()?;
    if let Some(m) = &cfg.model {
        return Ok((cfg.known_model(m, &dict)?, None));
    }
    let csv_path = ctx.path("dataset.csv");
    let ds = if csv_path.exists() {
        load_dataset(&csv_path, &ctx.path("dataset.json"))?
    } else if let Some(m) = cfg
        .building_exact_model()
        .filter(|_| cfg.dictionary.is_none())
    {
        log::info!("no dataset found; using the exact building model");
        return Ok((m, None));
    } else {
        collect_dataset(ctx, cfg.d(), cfg.seed)?
    };
    if ds.n() != dict.n() {
        return Err(fail(
            EXIT_CONFIG,
            "dataset dimension differs from the configured system",
        ));
    }
    let fit = edmd_fit_report(&ds, &dict).map_err(|e| match e {
        Error::Spec(msg) => fail(EXIT_DATA, msg),
        other => other.into(),
    })?;
    if fit.rank_deficient() {
        eprintln!(
            "warning: rank-deficient regression {:?} / {:?}",
            fit.ranks, fit.full_ranks
        );
    }
    Ok((fit.surrogate, Some(ds)))
}

pub fn resolve_bound(
    ctx: &Context,
    model: &Surrogate,
    ds: Option<&LiftedDataset>,
) -> CliResult<ResidualBound> {
    let cfg = &ctx.config;
    match cfg.bound() {
        BoundConfig::Fixed { c_x, c_u } => Ok(ResidualBound::fixed(c_x, c_u)?),
        BoundConfig::Empirical {
            safety,
            validation_d,
            validation_seed,
            weight_x,
            weight_u,
        } => {
            let d = validation_d.or(ds.map(|d| d.d())).unwrap_or(cfg.d());
            let seed = validation_seed.unwrap_or(cfg.seed.wrapping_add(1));
            let val = collect_dataset(ctx, d, seed)?;
            let b = estimate_residual_bound(
                model,
                &val,
                safety,
                BoundWeights {
                    w_x: weight_x,
                    w_u: weight_u,
                },
            )
            .map_err(|e| fail(EXIT_DATA, e.to_string()))?;
            if b.degenerate {
                return Err(fail(
                    EXIT_DATA,
                    "empirical residual bound is degenerate (zero residuals)",
                ));
            }
            // The LP may put all weight on one term; the other still has to
            // be positive for the design program.
            let mut b = b;
            for (name, c) in [("c_x", &mut b.c_x), ("c_u", &mut b.c_u)] {
                if *c < MIN_BOUND_CONSTANT {
                    log::warn!("empirical {name} = {c:e} raised to {MIN_BOUND_CONSTANT:e}");
                    *c = MIN_BOUND_CONSTANT;
                }
            }
            Ok(b)
        }
    }
}

#[derive(Serialize)]
struct DesignReport {
    status: FeasibilityStatus,
    solver_status: String,
    solve_time_s: f64,
    alpha: u32,
    c_x: f64,
    c_u: f64,
    block_dim: usize,
    certificate_residual: Option<f64>,
    certificate_min_eig: Option<f64>,
    certificate_margin: Option<f64>,
    rho: Option<f64>,
    p_min_eig: Option<f64>,
    certificate_check: Option<CertificateReport>,
}

fn certificate_options(ctx: &Context, n_points: usize, seed: u64) -> CliResult<CertificateOptions> {
    let v = &ctx.config.verify;
    Ok(CertificateOptions {
        n_samples: n_points,
        region: ctx.config.check_region()?,
        residual_mode: v.residual_mode,
        residual_scale: v.residual_scale,
        psd_tol: v.psd_tol,
        decrease_tol: v.decrease_tol,
        seed,
    })
}

pub fn cmd_design(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config;
    let (model, ds) = resolve_model(ctx)?;
    write_text(&ctx.path("surrogate.json"), &(model.to_json()? + "\n"))?;
    let bound = resolve_bound(ctx, &model, ds.as_ref())?;
    let alpha = cfg.alpha();
    let u_d = cfg.denominator(model.big_n(), alpha)?;
    let design = build_design(&model, &bound, &u_d, cfg.mode, ctx.tol)?;
    let outcome = synthesize(&design, cfg.objective(), ctx.tol)?;
    let mut report = DesignReport {
        status: outcome.status(),
        solver_status: outcome.report().backend_status.clone(),
        solve_time_s: outcome.report().solve_time,
        alpha,
        c_x: bound.c_x,
        c_u: bound.c_u,
        block_dim: design.block_dim(),
        certificate_residual: None,
        certificate_min_eig: None,
        certificate_margin: None,
        rho: None,
        p_min_eig: None,
        certificate_check: None,
    };
    let syn = match outcome {
        SynthesisOutcome::Feasible(s) => s,
        SynthesisOutcome::Infeasible { reason, .. } => {
            write_json(&ctx.path("certificate.json"), &report)?;
            return Err(fail(
                EXIT_INFEASIBLE,
                format!("synthesis infeasible: {reason}"),
            ));
        }
    };
    let ctrl = &syn.controller;
    report.certificate_residual = Some(syn.certificate_residual);
    report.certificate_min_eig = Some(syn.certificate_min_eig);
    report.certificate_margin = Some(syn.certificate_margin);
    report.rho = Some(ctrl.rho);
    report.p_min_eig = Some(sdp::min_eigenvalue(&ctrl.p));
    let check = certificate_check(ctrl, &certificate_options(ctx, 1000, cfg.seed)?)?;
    let passed = check.passed();
    report.certificate_check = Some(check);
    write_text(&ctx.path("controller.json"), &(ctrl.to_json()? + "\n"))?;
    write_json(&ctx.path("certificate.json"), &report)?;
    println!(
        "feasible: alpha = {alpha}, rho = {:.3e}, certificate check {}",
        ctrl.rho,
        if passed { "passed" } else { "FAILED" }
    );
    if !passed {
        return Err(fail(
            EXIT_VERIFY,
            "certificate check found violations; see certificate.json",
        ));
    }
    Ok(())
}

/// One grid point of a feasibility sweep.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct FeasibilityRecord {
    pub alpha: u32,
    pub c_x: f64,
    pub c_u: f64,
    pub status: FeasibilityStatus,
    pub solve_time_s: f64,
    pub objective: f64,
}

/// Solves the design at one point; any error is recorded as unknown.
pub fn sweep_point(
    model: &Surrogate,
    ctx: &Context,
    alpha: u32,
    c_x: f64,
    c_u: f64,
    repeats: usize,
) -> FeasibilityRecord {
    let run = || -> crate::Result<(FeasibilityStatus, f64, f64)> {
        let bound = ResidualBound::fixed(c_x, c_u)?;
        let u_d = ctx
            .config
            .denominator(model.big_n(), alpha)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut times = Vec::with_capacity(repeats);
        let mut last = (FeasibilityStatus::Unknown, 0.0);
        for _ in 0..repeats {
            let start = Instant::now();
            let design = build_design(model, &bound, &u_d, ctx.config.mode, ctx.tol)?;
            let out = synthesize(&design, ctx.config.objective(), ctx.tol)?;
            times.push(start.elapsed().as_secs_f64());
            last = (out.status(), out.report().objective_value);
        }
        Ok((last.0, median(&mut times), last.1))
    };
    match run() {
        Ok((status, t, obj)) => FeasibilityRecord {
            alpha,
            c_x,
            c_u,
            status,
            solve_time_s: t,
            objective: obj,
        },
        Err(e) => {
            log::warn!("sweep point alpha={alpha} c_x={c_x} c_u={c_u} failed: {e}");
            FeasibilityRecord {
                alpha,
                c_x,
                c_u,
                status: FeasibilityStatus::Unknown,
                solve_time_s: f64::NAN,
                objective: f64::NAN,
            }
        }
    }
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AlphaSummary {
    pub alpha: u32,
    pub feasible: usize,
    pub infeasible: usize,
    pub unknown: usize,
    /// Per `c_u` value, the largest feasible `c_x` (absent when none).
    pub boundary: Vec<(f64, Option<f64>)>,
    pub median_solve_time_s: f64,
    pub downward_closed: bool,
}

/// Whether every point dominated by a feasible point is feasible too.
pub fn downward_closed(records: &[FeasibilityRecord]) -> bool {
    records
        .iter()
        .filter(|r| r.status == FeasibilityStatus::Feasible)
        .all(|f| {
            records
                .iter()
                .filter(|r| r.c_x <= f.c_x && r.c_u <= f.c_u)
                .all(|r| r.status != FeasibilityStatus::Infeasible)
        })
}

pub fn summarize_sweep(
    records: &[FeasibilityRecord],
    alphas: &[u32],
    c_u_values: &[f64],
) -> Vec<AlphaSummary> {
    alphas
        .iter()
        .map(|&alpha| {
            let rs: Vec<FeasibilityRecord> = records
                .iter()
                .filter(|r| r.alpha == alpha)
                .cloned()
                .collect();
            let count = |s| rs.iter().filter(|r| r.status == s).count();
            let boundary = c_u_values
                .iter()
                .map(|&cu| {
                    let best = rs
                        .iter()
                        .filter(|r| r.c_u == cu && r.status == FeasibilityStatus::Feasible)
                        .map(|r| r.c_x)
                        .fold(None, |acc: Option<f64>, v| {
                            Some(acc.map_or(v, |a| a.max(v)))
                        });
                    (cu, best)
                })
                .collect();
            let mut times: Vec<f64> = rs
                .iter()
                .filter(|r| r.status == FeasibilityStatus::Feasible)
                .map(|r| r.solve_time_s)
                .collect();
            AlphaSummary {
                alpha,
                feasible: count(FeasibilityStatus::Feasible),
                infeasible: count(FeasibilityStatus::Infeasible),
                unknown: count(FeasibilityStatus::Unknown),
                boundary,
                median_solve_time_s: median(&mut times),
                downward_closed: downward_closed(&rs),
            }
        })
        .collect()
}

/// Runs the grid in parallel; records are sorted by `(alpha, c_x, c_u)`.
pub fn run_sweep(ctx: &Context, model: &Surrogate) -> CliResult<Vec<FeasibilityRecord>> {
    let sw = ctx.config.sweep();
    let cxs = sw.c_x.values()?;
    let cus = sw.c_u.values()?;
    let mut points = Vec::new();
    for &a in &sw.alphas {
        for &cx in &cxs {
            for &cu in &cus {
                points.push((a, cx, cu));
            }
        }
    }
    let mut records: Vec<FeasibilityRecord> = points
        .par_iter()
        .map(|&(a, cx, cu)| sweep_point(model, ctx, a, cx, cu, sw.repeats))
        .collect();
    records.sort_by(|a, b| {
        a.alpha
            .cmp(&b.alpha)
            .then(a.c_x.total_cmp(&b.c_x))
            .then(a.c_u.total_cmp(&b.c_u))
    });
    Ok(records)
}

pub fn cmd_sweep(ctx: &Context) -> CliResult<()> {
    let (model, _) = resolve_model(ctx)?;
    let sw = ctx.config.sweep();
    let records = run_sweep(ctx, &model)?;
    let mut wr = csv::Writer::from_writer(create(&ctx.path("sweep.csv"))?);
    wr.write_record(["alpha", "c_x", "c_u", "status", "solve_time_s", "objective"])
        .map_err(Error::from)?;
    for r in &records {
        wr.write_record([
            r.alpha.to_string(),
            format!("{:e}", r.c_x),
            format!("{:e}", r.c_u),
            r.status.to_string(),
            format!("{:.6}", r.solve_time_s),
            format!("{:e}", r.objective),
        ])
        .map_err(Error::from)?;
    }
    wr.flush().map_err(Error::from)?;
    let summary = summarize_sweep(&records, &sw.alphas, &sw.c_u.values()?);
    write_json(&ctx.path("sweep_summary.json"), &summary)?;
    for s in &summary {
        println!(
            "alpha = {}: {} feasible, {} infeasible, {} unknown, median time {:.4} s",
            s.alpha, s.feasible, s.infeasible, s.unknown, s.median_solve_time_s
        );
    }
    Ok(())
}

fn load_controller(ctx: &Context) -> CliResult<RationalController> {
    let path = ctx.controller_path();
    let text = fs::read_to_string(&path)
        .map_err(|e| fail(EXIT_CONFIG, format!("cannot read {}: {e}", path.display())))?;
    let ctrl = RationalController::from_json(&text)
        .map_err(|e| fail(EXIT_CONFIG, format!("invalid controller: {e}")))?;
    if ctrl.dictionary != ctx.config.dictionary()? {
        return Err(fail(
            EXIT_CONFIG,
            format!(
                "controller dictionary {:?} differs from the configured {:?}",
                ctrl.dictionary.label(),
                ctx.config.dictionary()?.label()
            ),
        ));
    }
    Ok(ctrl)
}

#[derive(Clone, Debug, Serialize)]
pub struct RoaReport {
    #[serde(flatten)]
    pub estimate: RoaEstimate,
    pub omega_volume: f64,
    pub comparison_level: f64,
    pub comparison_volume: f64,
    pub volume_ratio: f64,
    pub fresh_containment_checked: usize,
}

pub fn compute_roa(ctx: &Context, ctrl: &RationalController) -> CliResult<RoaReport> {
    let cfg = &ctx.config;
    let region = cfg.region()?;
    let r = &cfg.roa;
    let est = estimate_roa(
        ctrl,
        &region,
        &RoaOptions {
            n_boundary: r.n_boundary,
            n_containment: r.n_containment,
            margin: r.margin,
            seed: cfg.seed,
            search_factor: 3.0,
        },
    )?;
    let fresh = crate::design::check_containment(
        ctrl,
        &region,
        est.c,
        r.n_containment,
        cfg.seed.wrapping_add(7919),
    )?
    .map_err(|x| {
        fail(
            EXIT_DEGENERATE_ROA,
            format!("fresh containment check failed at {x:?}"),
        )
    })?;
    let dict = &ctrl.dictionary;
    let omega = volume_by_sampling(&region, r.volume_samples, cfg.seed.wrapping_add(1), |x| {
        Ok(ctrl.lyapunov(x)? <= est.c)
    })?;
    let level = r.comparison_level;
    let comparison =
        volume_by_sampling(&region, r.volume_samples, cfg.seed.wrapping_add(2), |x| {
            Ok(dict.lift(x)?.norm_squared() <= level)
        })?;
    Ok(RoaReport {
        omega_volume: omega,
        comparison_level: level,
        comparison_volume: comparison,
        volume_ratio: if comparison > 0.0 {
            omega / comparison
        } else {
            f64::INFINITY
        },
        fresh_containment_checked: fresh,
        estimate: est,
    })
}

fn write_roa_grid(ctx: &Context, ctrl: &RationalController, c: f64) -> CliResult<()> {
    let region = ctx.config.region()?;
    let n = region.dim();
    let res = ctx.config.roa.grid_resolution.max(2);
    let points: Vec<Vec<f64>> = if n <= 2 {
        let axes: Vec<Vec<f64>> = region
            .bounds()
            .iter()
            .map(|&(lo, hi)| {
                (0..res)
                    .map(|k| lo + (hi - lo) * k as f64 / (res - 1) as f64)
                    .collect()
            })
            .collect();
        if n == 1 {
            axes[0].iter().map(|&v| vec![v]).collect()
        } else {
            axes[0]
                .iter()
                .flat_map(|&a| axes[1].iter().map(move |&b| vec![a, b]))
                .collect()
        }
    } else {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ctx.config.seed);
        (0..res * res).map(|_| region.sample(&mut rng)).collect()
    };
    let mut wr = csv::Writer::from_writer(create(&ctx.path("roa_grid.csv"))?);
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.push("V".into());
    header.push("inside".into());
    wr.write_record(&header).map_err(Error::from)?;
    for x in points {
        let v = ctrl.lyapunov(&x)?;
        let mut rec: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
        rec.push(format!("{v:e}"));
        rec.push(if v <= c { "1".into() } else { "0".into() });
        wr.write_record(&rec).map_err(Error::from)?;
    }
    wr.flush().map_err(Error::from)?;
    Ok(())
}

pub fn cmd_roa(ctx: &Context) -> CliResult<()> {
    let ctrl = load_controller(ctx)?;
    let report = compute_roa(ctx, &ctrl)?;
    write_json(&ctx.path("roa.json"), &report)?;
    write_roa_grid(ctx, &ctrl, report.estimate.c)?;
    println!(
        "c = {:.6e}, Omega volume {:.4}, comparison volume {:.4} (ratio {:.1})",
        report.estimate.c, report.omega_volume, report.comparison_volume, report.volume_ratio
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct RunWitness {
    pub x0: Vec<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub certificate: CertificateReport,
    pub dt_runs: usize,
    pub dt_passed: usize,
    pub dt_failures: Vec<RunWitness>,
    pub ct_runs: usize,
    pub ct_passed: usize,
    pub ct_failures: Vec<RunWitness>,
    pub roa_c: Option<f64>,
    pub passed: bool,
}

/// Index of the first step where `V` fails to decrease strictly; exact zero
/// counts as converged.
pub fn first_non_decrease(values: &[f64]) -> Option<usize> {
    values
        .windows(2)
        .position(|w| !(w[1] < w[0] || (w[1] == 0.0 && w[0] == 0.0)))
}

/// Discrete-time runs on the surrogate with residuals of maximal norm.
pub fn verify_dt(ctx: &Context, ctrl: &RationalController) -> CliResult<(usize, Vec<RunWitness>)> {
    let cfg = &ctx.config;
    let v = &cfg.verify;
    let model = ctrl
        .model
        .clone()
        .ok_or_else(|| fail(EXIT_CONFIG, "controller carries no model"))?;
    let bound = ctrl
        .bound
        .clone()
        .ok_or_else(|| fail(EXIT_CONFIG, "controller carries no residual bound"))?;
    let region = cfg.check_region()?;
    let results: Vec<CliResult<Option<RunWitness>>> = (0..v.dt_runs)
        .into_par_iter()
        .map(|k| {
            use rand::SeedableRng;
            let seed = cfg.seed.wrapping_add(1000 + k as u64);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x0 = region.sample(&mut rng);
            let mode = match v.residual_mode {
                ResidualMode::WorstAligned if k % 2 == 1 => ResidualMode::RandomDirection,
                m => m,
            };
            let mut gen =
                residual_adversary(bound.c_x, bound.c_u, mode, Some(ctrl.p_inv.clone()), seed)?
                    .with_scale(v.residual_scale);
            let fb = |z: &DVector<f64>| {
                ctrl.eval_lifted(z)
                    .unwrap_or_else(|_| DVector::from_element(ctrl.m(), f64::NAN))
            };
            let traj = closed_loop_dt(&model, &fb, &x0, v.dt_steps, &mut gen)?;
            let vals: Vec<f64> = traj
                .states
                .iter()
                .map(|z| ctrl.lyapunov_lifted(z))
                .collect();
            if traj.diverged {
                return Ok(Some(RunWitness {
                    x0,
                    detail: format!("diverged after {} steps", traj.len()),
                }));
            }
            Ok(first_non_decrease(&vals).map(|k| RunWitness {
                x0,
                detail: format!(
                    "V did not decrease at step {k}: {:e} -> {:e}",
                    vals[k],
                    vals[k + 1]
                ),
            }))
        })
        .collect();
    let mut failures = Vec::new();
    let mut passed = 0;
    for r in results {
        match r? {
            Some(w) => failures.push(w),
            None => passed += 1,
        }
    }
    Ok((passed, failures))
}

/// Sampled-data runs of the true system from the region of attraction.
pub fn verify_ct(
    ctx: &Context,
    ctrl: &RationalController,
    c: f64,
) -> CliResult<(usize, Vec<RunWitness>)> {
    let cfg = &ctx.config;
    let v = &cfg.verify;
    let System::Continuous(sys) = cfg.build_system()? else {
        return Ok((0, vec![]));
    };
    let region = cfg.region()?;
    let starts = sample_sublevel(ctrl, &region, c, v.ct_runs, cfg.seed.wrapping_add(31))?;
    let dt = cfg.delta_t();
    let horizon = (v.horizon / dt).round() * dt;
    let results: Vec<CliResult<Option<RunWitness>>> = starts
        .into_par_iter()
        .map(|x0| {
            let fb = |x: &[f64]| {
                ctrl.eval(x)
                    .unwrap_or_else(|_| DVector::from_element(ctrl.m(), f64::NAN))
            };
            let traj = closed_loop_ct(&sys, &fb, &x0, dt, horizon, cfg.substeps())?;
            let final_norm = traj.final_state().norm();
            Ok(if traj.diverged || !(final_norm < v.convergence_tol) {
                Some(RunWitness {
                    x0,
                    detail: format!("diverged = {}, |x(T)| = {final_norm:e}", traj.diverged),
                })
            } else {
                None
            })
        })
        .collect();
    let mut failures = Vec::new();
    let mut passed = 0;
    for r in results {
        match r? {
            Some(w) => failures.push(w),
            None => passed += 1,
        }
    }
    Ok((passed, failures))
}

pub fn run_verify(ctx: &Context, ctrl: &RationalController) -> CliResult<VerifyReport> {
    let cfg = &ctx.config;
    let v = &cfg.verify;
    let certificate = certificate_check(ctrl, &certificate_options(ctx, v.n_points, cfg.seed)?)?;
    let (dt_passed, dt_failures) = verify_dt(ctx, ctrl)?;
    let (roa_c, ct_passed, ct_failures) =
        if matches!(cfg.system, SystemConfig::Building { .. }) || v.ct_runs == 0 {
            (None, 0, vec![])
        } else {
            let roa = compute_roa(ctx, ctrl)?;
            let (p, f) = verify_ct(ctx, ctrl, roa.estimate.c)?;
            (Some(roa.estimate.c), p, f)
        };
    let ct_runs = ct_passed + ct_failures.len();
    let passed = certificate.passed() && dt_failures.is_empty() && ct_failures.is_empty();
    Ok(VerifyReport {
        certificate,
        dt_runs: v.dt_runs,
        dt_passed,
        dt_failures,
        ct_runs,
        ct_passed,
        ct_failures,
        roa_c,
        passed,
    })
}

pub fn cmd_verify(ctx: &Context) -> CliResult<()> {
    let ctrl = load_controller(ctx)?;
    let report = run_verify(ctx, &ctrl)?;
    write_json(&ctx.path("verify.json"), &report)?;
    println!(
        "certificate: {}/{} PSD, {}/{} decrease; discrete runs {}/{}; sampled-data runs {}/{}",
        report.certificate.psd_checked - report.certificate.psd_failed,
        report.certificate.psd_checked,
        report.certificate.decrease_checked - report.certificate.decrease_failed,
        report.certificate.decrease_checked,
        report.dt_passed,
        report.dt_runs,
        report.ct_passed,
        report.ct_runs
    );
    if !report.passed {
        for w in report
            .dt_failures
            .iter()
            .chain(&report.ct_failures)
            .take(10)
        {
            eprintln!("witness x0 = {:?}: {}", w.x0, w.detail);
        }
        for w in report
            .certificate
            .psd_violations
            .iter()
            .chain(&report.certificate.decrease_violations)
            .take(10)
        {
            eprintln!("witness x = {:?}: {:e}", w.x, w.value);
        }
        return Err(fail(EXIT_VERIFY, "verification failed; see verify.json"));
    }
    Ok(())
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let (args, f): (&CommonArgs, fn(&Context) -> CliResult<()>) = match &cli.command {
        Command::Collect(a) => (a, cmd_collect),
        Command::Design(a) => (a, cmd_design),
        Command::Sweep(a) => (a, cmd_sweep),
        Command::Roa(a) => (a, cmd_roa),
        Command::Verify(a) => (a, cmd_verify),
    };
    let result = Context::new(args).and_then(|ctx| {
        let jobs = args.jobs.unwrap_or(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| fail(EXIT_IO, e.to_string()))?;
        pool.install(|| f(&ctx))
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
