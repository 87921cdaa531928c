//! `contrastlab` — train two contrastive objectives in lockstep, evaluate
//! the closed-form drift/alignment envelopes, and verify the implementation
//! against its analytic contracts.
//!
//! Every subcommand reads one versioned TOML configuration, tags every
//! artifact with the configuration's SHA-256, and is deterministic given
//! the configuration: identical config and binary reproduce the CSV and
//! JSON payloads byte for byte (the manifest's timestamp is the only
//! run-dependent field).

// Validation guards are written as `!(x > 0.0)` on purpose: unlike `x <= 0.0`,
// the negated form also rejects NaN inputs.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod run;
mod sweep;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use config::{ExperimentConfig, Mode, VerifySection};
use contrastlab::bounds::evaluate_bounds;
use contrastlab::metrics::{linear_cka, rsa};
use contrastlab::verify::run_all_checks;
use ndarray::Array2;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "contrastlab",
    version,
    about = "Coupled contrastive-training laboratory: runs, sweeps, envelopes, verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run (coupled-sim or coupled-encoder) and write its
    /// trace, metrics, bound report, and manifest.
    Run {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's out_dir, then "out").
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a one-axis grid of child runs and aggregate a summary CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Override the parent master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for children (0 = one per core).
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Evaluate the closed-form envelope for one parameter point.
    Bounds {
        #[arg(long)]
        config: PathBuf,
        /// Also write bound_report.json into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the verification suite; exits nonzero iff any check fails.
    Verify {
        /// Optional configuration with a [verify] section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed for all checks (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Trial budget per randomized check (overrides the config).
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for trial evaluation (0 = one per core).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Compare two embedding CSV files (rows = points, columns = dims).
    Metrics {
        /// First embedding CSV.
        a: PathBuf,
        /// Second embedding CSV (same number of rows).
        b: PathBuf,
        /// Also write the comparison JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run { config, seed, out } => cmd_run(&config, seed, out),
        Command::Sweep {
            config,
            seed,
            out,
            workers,
        } => cmd_sweep(&config, seed, out, workers),
        Command::Bounds { config, out } => cmd_bounds(&config, out),
        Command::Verify {
            config,
            seed,
            trials,
            out,
            workers,
        } => cmd_verify(config.as_deref(), seed, trials, out, workers),
        Command::Metrics { a, b, out } => cmd_metrics(&a, &b, out),
    }
}

/// Resolve the output directory: flag, then config, then "out".
fn resolve_out(config: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| {
        config
            .out_dir
            .as_deref()
            .map_or_else(|| PathBuf::from("out"), PathBuf::from)
    })
}

fn override_seed(config: &mut ExperimentConfig, seed: Option<u64>) -> Result<()> {
    if let (Some(seed), Some(train)) = (seed, config.train.as_mut()) {
        if seed > i64::MAX as u64 {
            bail!("--seed must fit a signed 64-bit config integer");
        }
        train.master_seed = seed;
    }
    Ok(())
}

fn cmd_run(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<i32> {
    let mut config = ExperimentConfig::load(path)?;
    if !matches!(config.mode, Mode::CoupledSim | Mode::CoupledEncoder) {
        bail!(
            "run wants a coupled-sim or coupled-encoder config (mode is {}); \
             use the subcommand matching the config's mode",
            config.mode
        );
    }
    override_seed(&mut config, seed)?;
    let out = resolve_out(&config, out);
    let metrics = run::execute(&config, &out)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    eprintln!("artifacts written to {}", out.display());
    Ok(0)
}

fn cmd_sweep(path: &Path, seed: Option<u64>, out: Option<PathBuf>, workers: usize) -> Result<i32> {
    let mut config = ExperimentConfig::load(path)?;
    if config.mode != Mode::Sweep {
        bail!("sweep wants a sweep-mode config (mode is {})", config.mode);
    }
    override_seed(&mut config, seed)?;
    let out = resolve_out(&config, out);
    let summary = sweep::execute(&config, &out, workers)?;
    eprintln!("summary written to {}", summary.display());
    Ok(0)
}

fn cmd_bounds(path: &Path, out: Option<PathBuf>) -> Result<i32> {
    let config = ExperimentConfig::load(path)?;
    if config.mode != Mode::Bounds {
        bail!(
            "bounds wants a bounds-mode config (mode is {})",
            config.mode
        );
    }
    let section = config.bounds.as_ref().context("missing [bounds] section")?;
    let report = evaluate_bounds(&section.to_inputs())?;
    let mut value = serde_json::to_value(&report)?;
    value.as_object_mut().expect("report is an object").insert(
        "config_hash".into(),
        serde_json::Value::String(config.hash()),
    );
    println!("{}", serde_json::to_string_pretty(&value)?);
    if let Some(out) = out {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        run::write_json(&out.join("bound_report.json"), &value)?;
    }
    Ok(0)
}

#[derive(Serialize)]
struct VerifyReport {
    master_seed: u64,
    trials: usize,
    all_passed: bool,
    checks: Vec<contrastlab::verify::CheckReport>,
}

fn cmd_verify(
    path: Option<&Path>,
    seed: Option<u64>,
    trials: Option<usize>,
    out: Option<PathBuf>,
    workers: usize,
) -> Result<i32> {
    let mut section = VerifySection::default();
    let mut out_dir = PathBuf::from("out");
    if let Some(path) = path {
        let config = ExperimentConfig::load(path)?;
        if config.mode != Mode::Verify {
            bail!(
                "verify wants a verify-mode config (mode is {})",
                config.mode
            );
        }
        if let Some(v) = &config.verify {
            section = v.clone();
        }
        out_dir = resolve_out(&config, out);
    } else if let Some(out) = out {
        out_dir = out;
    }
    let master_seed = seed.unwrap_or(section.master_seed);
    let trials = trials.unwrap_or(section.trials);
    if trials == 0 {
        bail!("--trials must be at least 1");
    }

    let mut pool = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        pool = pool.num_threads(workers);
    }
    let pool = pool.build().context("building worker pool")?;
    let checks = pool.install(|| run_all_checks(master_seed, trials));

    for check in &checks {
        println!(
            "{} {:<28} trials={:<6} violations={:<4} worst_margin={:+.3e}",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.trials,
            check.violations,
            check.worst_margin,
        );
    }
    let all_passed = checks.iter().all(|c| c.passed);
    let report = VerifyReport {
        master_seed,
        trials,
        all_passed,
        checks,
    };
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let report_path = out_dir.join("verify_report.json");
    run::write_json(&report_path, &report)?;
    eprintln!("report written to {}", report_path.display());
    Ok(if all_passed { 0 } else { 1 })
}

/// Read an embedding CSV: comment lines (`#`) are skipped, a non-numeric
/// header row before the data is skipped, every remaining row must be a
/// comma-separated float vector of constant width.
fn load_embedding_csv(path: &Path) -> Result<Array2<f64>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<f64> = Vec::new();
    let mut width = 0usize;
    let mut count = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        let cells = match parsed {
            Ok(cells) => cells,
            Err(_) if count == 0 => continue, // header row
            Err(err) => bail!(
                "{}:{}: non-numeric cell in data region: {err}",
                path.display(),
                lineno + 1
            ),
        };
        if count == 0 {
            width = cells.len();
        } else if cells.len() != width {
            bail!(
                "{}:{}: row has {} cells, expected {width}",
                path.display(),
                lineno + 1,
                cells.len()
            );
        }
        rows.extend_from_slice(&cells);
        count += 1;
    }
    if count == 0 || width == 0 {
        bail!("{}: no numeric rows found", path.display());
    }
    Array2::from_shape_vec((count, width), rows).context("assembling embedding matrix")
}

#[derive(Serialize)]
struct MetricsReport {
    rows: usize,
    dim_a: usize,
    dim_b: usize,
    cka: f64,
    rsa: f64,
}

fn cmd_metrics(a: &Path, b: &Path, out: Option<PathBuf>) -> Result<i32> {
    let xa = load_embedding_csv(a)?;
    let xb = load_embedding_csv(b)?;
    if xa.nrows() != xb.nrows() {
        bail!(
            "embeddings disagree on the number of points ({} vs {})",
            xa.nrows(),
            xb.nrows()
        );
    }
    let report = MetricsReport {
        rows: xa.nrows(),
        dim_a: xa.ncols(),
        dim_b: xb.ncols(),
        cka: linear_cka(&xa.view(), &xb.view())?,
        rsa: rsa(&xa.view(), &xb.view())?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = out {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        run::write_json(&out.join("metrics_compare.json"), &report)?;
    }
    Ok(0)
}
