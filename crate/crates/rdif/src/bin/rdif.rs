//! Command-line front end for the robust DIF pipeline.
//!
//! ## Purpose
//! Batch plumbing around the library: `fit` turns two response-matrix
//! CSVs into a calibration pair, `analyze` turns a pair into a per-item
//! DIF report, and `simulate` runs a simulation design from a JSON
//! config file.
//!
//! ## Design notes
//! * The exit code is a contract for scripts: 0 success, 2 invalid
//!   arguments/input/config, 3 degenerate data or a fit that did not
//!   converge. Clap's own usage errors also exit with 2.
//! * Human-readable text goes to standard error only; machine output
//!   goes to files (and `--version` to standard out), so redirection
//!   never mixes the two.
//!
//! ## Invariants
//! * `--version` prints the bare semver string and nothing else.
//! * Every output file is written to a temp file and renamed into
//!   place, so a failed run never leaves a partial artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rdif::calib::{load_calibration, save_calibration, save_report, write_atomic};
use rdif::dif::{analyze, AnalyzeOptions};
use rdif::irt::{
    fit_2pl, make_pair, FitOptions, IrtError, Mle2pl, ResponseMatrix, SLOPE_MAX, SLOPE_MIN,
};
use rdif::robust::StartStrategy;
use rdif::sim::{
    run_condition, run_sim1, run_sim2, Sim1Config, Sim2Config, SimCondition, SimResult,
};

// ==== Exit-code contract ==================================================

const EXIT_INVALID: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

/// Below this many quadrature nodes the EM fit still runs, but a
/// warning goes to standard error.
const QUAD_SOFT_MIN: usize = 21;

struct Failure {
    code: u8,
    message: String,
}

type CmdResult = Result<(), Failure>;

fn invalid(message: impl ToString) -> Failure {
    Failure {
        code: EXIT_INVALID,
        message: message.to_string(),
    }
}

fn not_converged(message: impl ToString) -> Failure {
    Failure {
        code: EXIT_NOT_CONVERGED,
        message: message.to_string(),
    }
}

// ==== Argument surface ====================================================

#[derive(Parser)]
#[command(
    name = "rdif",
    about = "Robust scaling and DIF detection for two-group 2PL calibrations",
    disable_version_flag = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the robust DIF analysis on a saved calibration pair.
    Analyze(AnalyzeArgs),
    /// Fit a 2PL model per group and assemble a calibration pair.
    Fit(FitArgs),
    /// Run a simulation design from a JSON config file.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Calibration pair to analyze (.json or .csv).
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Flagging level shared by all tests.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Estimate the slope scaling on the log scale.
    #[arg(long)]
    log_slope: bool,
    /// Starting-value strategy for both robust fits.
    #[arg(long, value_enum, default_value_t = StartArg::Med3)]
    start: StartArg,
    /// Separate level used while estimating; tests still run at --alpha.
    #[arg(long, value_name = "A")]
    downtune: Option<f64>,
    /// Report destination (.json or .csv).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum StartArg {
    Med3,
    Median,
    Lts,
    Grid,
}

impl From<StartArg> for StartStrategy {
    fn from(s: StartArg) -> Self {
        match s {
            StartArg::Med3 => StartStrategy::Med3,
            StartArg::Median => StartStrategy::Median,
            StartArg::Lts => StartStrategy::Lts,
            StartArg::Grid => StartStrategy::Grid,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Reference-group response matrix (CSV of 0/1 values).
    #[arg(long, value_name = "FILE")]
    group0: PathBuf,
    /// Focal-group response matrix (CSV of 0/1 values).
    #[arg(long, value_name = "FILE")]
    group1: PathBuf,
    /// Calibration pair destination (.json or .csv).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Number of quadrature nodes for the EM fit.
    #[arg(long, value_name = "N")]
    quad: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Which design to run.
    #[arg(long, value_enum)]
    design: DesignArg,
    /// Design configuration (JSON; missing fields take defaults).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Aggregate results destination (CSV); the per-replication scaling
    /// estimates land in a sibling `<stem>_theta.csv`.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Override the config's replication count.
    #[arg(long, value_name = "N")]
    reps: Option<usize>,
    /// Override the config's seed.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Bound concurrent replications (default: available parallelism).
    #[arg(long, value_name = "K")]
    jobs: Option<usize>,
}

#[derive(Copy, Clone, ValueEnum)]
enum DesignArg {
    /// Breakdown sweep: worst-case intercept DIF on 0..=m/2 items.
    Sim1,
    /// Power grid: one biased item, group size crossed with DIF type.
    Sim2,
    /// A single fully specified condition.
    Condition,
}

// ==== Entry point =========================================================

fn main() -> ExitCode {
    // Version contract: one bare semver line on standard out. Handled
    // before clap so nothing decorates it.
    if std::env::args().nth(1).as_deref() == Some("--version") {
        println!("{}", env!("CARGO_PKG_VERSION"));
        return ExitCode::SUCCESS;
    }
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

// ==== analyze =============================================================

fn cmd_analyze(args: &AnalyzeArgs) -> CmdResult {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(invalid("alpha must be in (0,1)"));
    }
    if let Some(d) = args.downtune {
        if !(d > 0.0 && d < 1.0) {
            return Err(invalid("downtune must be in (0,1)"));
        }
    }
    let pair = load_calibration(&args.input)
        .map_err(|e| invalid(format!("{}: {e}", args.input.display())))?;
    let opts = AnalyzeOptions {
        start: args.start.into(),
        log_slope: args.log_slope,
        downtune_alpha: args.downtune,
        ..AnalyzeOptions::default()
    };
    let report = analyze(&pair, args.alpha, &opts).map_err(invalid)?;
    save_report(&report, &args.out).map_err(|e| invalid(format!("{}: {e}", args.out.display())))?;

    let flagged = report.items.iter().filter(|t| t.flag_joint).count();
    eprintln!(
        "analyzed {} items: theta = {:.4}, sigma = {:.4}, {} flagged at alpha = {}",
        pair.m(),
        report.theta_fit.theta,
        report.sigma_fit.theta,
        flagged,
        args.alpha,
    );
    eprintln!("report written to {}", args.out.display());

    let stuck: Vec<&str> = [
        ("intercept", report.theta_fit.converged),
        ("slope", report.sigma_fit.converged),
    ]
    .iter()
    .filter(|(_, ok)| !ok)
    .map(|(name, _)| *name)
    .collect();
    if !stuck.is_empty() {
        return Err(not_converged(format!(
            "robust fit did not converge for the {} problem; the report carries partial statistics",
            stuck.join(" and "),
        )));
    }
    Ok(())
}

// ==== fit =================================================================

fn cmd_fit(args: &FitArgs) -> CmdResult {
    let mut opts = FitOptions::default();
    if let Some(q) = args.quad {
        opts.quad_points = q;
        if q < QUAD_SOFT_MIN {
            eprintln!(
                "warning: {q} quadrature nodes may be too few for accurate estimates; \
                 consider at least {QUAD_SOFT_MIN}"
            );
        }
    }
    let fit0 = fit_group("group0", &args.group0, &opts)?;
    let fit1 = fit_group("group1", &args.group1, &opts)?;
    let pair = make_pair(&fit0, &fit1).map_err(invalid)?;
    save_calibration(&pair, &args.out)
        .map_err(|e| invalid(format!("{}: {e}", args.out.display())))?;
    eprintln!(
        "fit {} items (group0 n = {}, group1 n = {}); pair written to {}",
        pair.m(),
        pair.n0,
        pair.n1,
        args.out.display(),
    );
    Ok(())
}

fn fit_group(label: &str, path: &Path, opts: &FitOptions) -> Result<Mle2pl, Failure> {
    let tag = |e: &dyn std::fmt::Display| format!("{label} {}: {e}", path.display());
    let data = ResponseMatrix::from_csv(path).map_err(|e| invalid(tag(&e)))?;
    let fit = fit_2pl(&data, opts).map_err(|e| {
        let code = match e {
            IrtError::DegenerateItem { .. } => EXIT_NOT_CONVERGED,
            _ => EXIT_INVALID,
        };
        Failure {
            code,
            message: tag(&e),
        }
    })?;
    if !fit.converged {
        let clamped: Vec<String> = fit
            .a_hat
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a <= SLOPE_MIN || a >= SLOPE_MAX)
            .map(|(i, _)| i.to_string())
            .collect();
        let detail = if clamped.is_empty() {
            String::new()
        } else {
            format!("; slope at bound for item(s) {}", clamped.join(", "))
        };
        return Err(not_converged(format!(
            "{label} {}: EM stopped after {} iterations without converging{detail}",
            path.display(),
            fit.em_iterations,
        )));
    }
    Ok(fit)
}

// ==== simulate ============================================================

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    if let Some(k) = args.jobs {
        if k == 0 {
            return Err(invalid("jobs must be at least 1"));
        }
        // The global pool can only be configured once per process; a
        // second attempt is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global();
    }
    let text = fs::read_to_string(&args.config)
        .map_err(|e| invalid(format!("{}: {e}", args.config.display())))?;
    let parse_err = |e: serde_json::Error| {
        invalid(format!("{}: config parse error: {e}", args.config.display()))
    };

    let result = match args.design {
        DesignArg::Sim1 => {
            let mut cfg: Sim1Config = serde_json::from_str(&text).map_err(parse_err)?;
            if let Some(r) = args.reps {
                cfg.reps = r;
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            run_sim1(&cfg).map_err(invalid)?
        }
        DesignArg::Sim2 => {
            let mut cfg: Sim2Config = serde_json::from_str(&text).map_err(parse_err)?;
            if let Some(r) = args.reps {
                cfg.reps = r;
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            run_sim2(&cfg).map_err(invalid)?
        }
        DesignArg::Condition => {
            let mut cond: SimCondition = serde_json::from_str(&text).map_err(parse_err)?;
            if let Some(r) = args.reps {
                cond.reps = r;
            }
            if let Some(s) = args.seed {
                cond.seed = s;
            }
            let cr = run_condition(&cond).map_err(invalid)?;
            SimResult {
                conditions: vec![cr],
            }
        }
    };

    write_atomic(&args.out, result.to_csv().as_bytes())
        .map_err(|e| invalid(format!("{}: {e}", args.out.display())))?;
    let theta_out = theta_path(&args.out);
    write_atomic(&theta_out, result.theta_csv().as_bytes())
        .map_err(|e| invalid(format!("{}: {e}", theta_out.display())))?;

    let reps: usize = result.conditions.iter().map(|c| c.cond.reps).sum();
    let failures: usize = result.conditions.iter().map(|c| c.failures.len()).sum();
    eprintln!(
        "ran {} condition(s), {} replications total, {} with failures",
        result.conditions.len(),
        reps,
        failures,
    );
    eprintln!(
        "results written to {}, scaling estimates to {}",
        args.out.display(),
        theta_out.display(),
    );
    Ok(())
}

/// `results.csv` -> `results_theta.csv`, preserving the directory.
fn theta_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("results");
    let name = match out.extension().and_then(|s| s.to_str()) {
        Some(ext) => format!("{stem}_theta.{ext}"),
        None => format!("{stem}_theta"),
    };
    out.with_file_name(name)
}
