//! `spread` command line: predict, simulate, validate, sweep.
//!
//! Every flag can also be set through an environment variable with the
//! `SPREAD_` prefix (`SPREAD_SEED`, `SPREAD_THREADS`, ...); flags win.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | a validation check failed (or was inconclusive without `--allow-inconclusive`) |
//! | 2 | subcritical model, `rho(M) <= 1` |
//! | 3 | file could not be read or written |
//! | 4 | invalid config, model or override |
//! | 5 | run-time failure (too few survivors, runaway epidemic, ...) |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::asymptotics::{predictions, CwVariant};
use crate::chain::write_rows_csv;
use crate::error::Error;
use crate::harness::{run_experiment, run_sweep, simulate, ExperimentConfig, Verdict};
use crate::model::ModelSpec;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_SUBCRITICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const EPIDEMICS_FILE: &str = "epidemics.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Parser)]
#[command(name = "spread", version, about = "Multitype spread on the complete graph: predictions and Monte Carlo checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the limit constants for a model.
    Predict(Common),
    /// Run replicate epidemics and write one CSV row per replicate.
    Simulate(Common),
    /// Run the configured checks and write the report.
    Validate(Common),
    /// Evaluate predictions and summary statistics over a parameter grid.
    Sweep(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config (an experiment config, or a bare model for `predict`).
    #[arg(short, long, env = "SPREAD_CONFIG")]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(short, long, env = "SPREAD_OUT", default_value = ".")]
    pub out: PathBuf,
    #[arg(long, env = "SPREAD_SEED")]
    pub seed: Option<u64>,
    /// Replaces every population size in the config.
    #[arg(long, env = "SPREAD_N")]
    pub n: Option<u64>,
    #[arg(long, env = "SPREAD_REPLICATES")]
    pub replicates: Option<usize>,
    /// `proof` or `display`.
    #[arg(long, env = "SPREAD_CW", value_parser = parse_cw)]
    pub cw: Option<CwVariant>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, env = "SPREAD_THREADS")]
    pub threads: Option<usize>,
    /// Use this theta instead of the solved root.
    #[arg(long, env = "SPREAD_THETA")]
    pub theta: Option<f64>,
    /// Treat inconclusive checks as passing.
    #[arg(long, env = "SPREAD_ALLOW_INCONCLUSIVE")]
    pub allow_inconclusive: bool,
}

fn parse_cw(s: &str) -> Result<CwVariant, String> {
    CwVariant::parse(s).map_err(|e| e.to_string())
}

/// Failure carrying the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Subcritical { .. } => EXIT_SUBCRITICAL,
            Error::Io(_) => EXIT_IO,
            Error::Config(_)
            | Error::Normalization(_)
            | Error::NonFiniteMoment(_)
            | Error::EmptySupport
            | Error::InvalidParameter(_)
            | Error::PopulationTooSmall { .. }
            | Error::RebalanceImpossible(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_failure(&path, e))?;
    Ok(path)
}

fn load_config(args: &Common) -> Result<ExperimentConfig, Failure> {
    let text = read(&args.config)?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(Error::from)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.n {
        cfg.n = None;
        cfg.n_values = vec![n];
    }
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if let Some(cw) = args.cw {
        cfg.c_w_variant = cw;
    }
    if let Some(t) = args.theta {
        cfg.theta_override = Some(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `predict` accepts either a full experiment config or a bare model.
fn load_model(args: &Common) -> Result<(ModelSpec, CwVariant), Failure> {
    let text = read(&args.config)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    if value.get("model").is_some() {
        let cfg = load_config(args)?;
        Ok((cfg.model, cfg.c_w_variant))
    } else {
        let spec = ModelSpec::from_json(&text)?;
        Ok((spec, args.cw.unwrap_or_default()))
    }
}

/// Runs one parsed command, writing a human-readable summary to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32, Failure> {
    let started = Instant::now();
    let code = match &cli.command {
        Command::Predict(args) => {
            let (spec, variant) = load_model(args)?;
            let p = predictions(&spec, variant)?;
            let path = write(&args.out, PREDICTIONS_FILE, &p.to_json())?;
            let _ = writeln!(out, "theta = {:.12}  w = {:.12}  rho = {:.6}  sigma_MGW = {:.6}", p.theta, p.w_total, p.rho, p.sigma_mgw);
            for d in &p.degenerate {
                let _ = writeln!(out, "warning: {d}");
            }
            let _ = writeln!(out, "wrote {}", path.display());
            EXIT_OK
        }
        Command::Simulate(args) => {
            let cfg = load_config(args)?;
            let mut rows = Vec::new();
            for (k, n) in cfg.populations()?.into_iter().enumerate() {
                rows.extend(simulate(&cfg, n, k as u64, args.threads)?);
            }
            fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
            let path = args.out.join(EPIDEMICS_FILE);
            let file = fs::File::create(&path).map_err(|e| io_failure(&path, e))?;
            write_rows_csv(file, &rows).map_err(|e| io_failure(&path, e))?;
            let survived = rows.iter().filter(|r| r.survived_flag).count();
            let _ = writeln!(out, "{} replicates, {survived} classified surviving", rows.len());
            let _ = writeln!(out, "wrote {}", path.display());
            EXIT_OK
        }
        Command::Validate(args) => {
            let cfg = load_config(args)?;
            let report = run_experiment(&cfg, args.threads)?;
            let json = write(&args.out, REPORT_JSON_FILE, &report.to_json())?;
            let csv = write(&args.out, REPORT_CSV_FILE, &report.to_csv()?)?;
            for r in &report.records {
                let _ = writeln!(out, "{:<18} n={:<8} {:?}", r.check.name(), r.n, r.verdict);
            }
            let _ = writeln!(out, "{} tests, overall {:?}", report.tests_performed, report.overall);
            let _ = writeln!(out, "wrote {} and {}", json.display(), csv.display());
            match report.overall {
                Verdict::Pass => EXIT_OK,
                Verdict::Inconclusive if args.allow_inconclusive => EXIT_OK,
                _ => EXIT_CHECK_FAILED,
            }
        }
        Command::Sweep(args) => {
            let cfg = load_config(args)?;
            let rows = run_sweep(&cfg, args.threads)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in &rows {
                w.serialize(row).map_err(Error::from)?;
            }
            let bytes = w.into_inner().map_err(|e| Failure { code: EXIT_IO, message: e.to_string() })?;
            let path = write(&args.out, SWEEP_FILE, &String::from_utf8_lossy(&bytes))?;
            let _ = writeln!(out, "{} grid points", rows.len());
            let _ = writeln!(out, "wrote {}", path.display());
            EXIT_OK
        }
    };
    let _ = writeln!(out, "elapsed {:.2} s", started.elapsed().as_secs_f64());
    Ok(code)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
