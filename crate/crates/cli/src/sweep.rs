//! Sweep execution: the Cartesian product of one swept axis, optional
//! step-size exponents, and a block of seeds. Every grid point becomes a
//! self-contained child run in its own directory named by the child's
//! configuration hash, so re-running an interrupted sweep recomputes only
//! the children whose artifacts are missing or stale. Child seeds are
//! derived from the parent master seed and the grid coordinates, never from
//! completion order, so the grid is reproducible under any worker count.

use crate::config::{ExperimentConfig, Mode, SweepAxis, SweepSection};
use crate::run::{self, RunMetrics};
use anyhow::{bail, Context, Result};
use contrastlab::schedule::Schedule;
use contrastlab::seedstream::{derive_seed, Domain};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One grid point, fully determined before any child runs.
#[derive(Debug, Clone)]
struct ChildSpec {
    value: f64,
    eta_exponent: Option<f64>,
    seed_index: usize,
    master_seed: u64,
    config: ExperimentConfig,
    hash: String,
    dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChildEntry {
    dir: String,
    config_hash: String,
    value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eta_exponent: Option<f64>,
    seed: usize,
    master_seed: u64,
    /// True when an earlier run's artifacts were reused instead of recomputed.
    reused: bool,
}

#[derive(Serialize)]
struct SweepManifest<'a> {
    config_hash: &'a str,
    binary_version: &'a str,
    created_unix_ms: u128,
    axis: String,
    summary: &'a str,
    children: &'a [ChildEntry],
    config: &'a ExperimentConfig,
}

/// Derive the effective configuration of one child from the sweep parent.
fn child_config(
    base: &ExperimentConfig,
    sweep: &SweepSection,
    value: f64,
    q: Option<f64>,
    master_seed: u64,
) -> ExperimentConfig {
    let mut child = base.clone();
    child.mode = sweep.child_mode;
    child.out_dir = None;
    child.sweep = None;
    child.bounds = None;
    child.verify = None;
    if sweep.child_mode != Mode::CoupledEncoder {
        child.encoder = None;
    }
    match sweep.axis {
        SweepAxis::Classes => {
            child.dataset.as_mut().expect("validated").classes = value as usize;
        }
        SweepAxis::Tau => child.train.as_mut().expect("validated").tau = value,
        SweepAxis::BatchSize => {
            child.train.as_mut().expect("validated").batch_size = value as usize;
        }
    }
    if let Some(q) = q {
        let batch = child.train.as_ref().expect("validated").batch_size as f64;
        let eta = sweep.eta0 * (batch / sweep.ref_batch as f64).powf(q);
        child.train.as_mut().expect("validated").schedule = Schedule::Constant { eta };
    }
    child.train.as_mut().expect("validated").master_seed = master_seed;
    child
}

/// Lay out the full grid in summary order: values ascending, then exponents
/// ascending, then seeds.
fn plan(config: &ExperimentConfig) -> Result<Vec<ChildSpec>> {
    let sweep = config.sweep.as_ref().context("missing [sweep] section")?;
    let parent_seed = config
        .train
        .as_ref()
        .context("missing [train] section")?
        .master_seed;

    let mut values = sweep.values.clone();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let exponents: Vec<Option<f64>> = if sweep.eta_exponents.is_empty() {
        vec![None]
    } else {
        let mut qs = sweep.eta_exponents.clone();
        qs.sort_by(f64::total_cmp);
        qs.dedup();
        qs.into_iter().map(Some).collect()
    };

    let mut specs = Vec::new();
    for (vi, &value) in values.iter().enumerate() {
        for (qi, &q) in exponents.iter().enumerate() {
            for seed_index in 0..sweep.seeds {
                // The child seed must survive a round trip through the
                // config format, whose integers are signed 64-bit.
                let master_seed = derive_seed(
                    parent_seed,
                    Domain::SweepChild,
                    vi as u64,
                    qi as u64,
                    seed_index as u64,
                ) & (i64::MAX as u64);
                let child = child_config(config, sweep, value, q, master_seed);
                child
                    .validate()
                    .with_context(|| format!("child config for {}={value}", sweep.axis))?;
                let hash = child.hash();
                let dir = format!("children/{}", &hash[..16]);
                specs.push(ChildSpec {
                    value,
                    eta_exponent: q,
                    seed_index,
                    master_seed,
                    config: child,
                    hash,
                    dir,
                });
            }
        }
    }
    Ok(specs)
}

/// Check whether a previous run already left valid artifacts for this child:
/// a manifest naming the same configuration hash and a parseable metrics
/// file. Anything less is treated as stale and recomputed.
fn completed_metrics(dir: &Path, hash: &str) -> Option<RunMetrics> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).ok()?).ok()?;
    if manifest.get("config_hash")?.as_str()? != hash {
        return None;
    }
    serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).ok()?).ok()
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

/// Render the aggregate summary: one row per sim child, one row per
/// (child, objective) pair for encoder children, in plan order.
fn summary_csv(axis: SweepAxis, specs: &[ChildSpec], outcomes: &[RunMetrics]) -> Result<String> {
    let mut s = String::new();
    let value_cell = |v: f64| match axis {
        SweepAxis::Classes | SweepAxis::BatchSize => format!("{}", v as usize),
        SweepAxis::Tau => format!("{v}"),
    };
    let is_encoder = matches!(outcomes.first(), Some(RunMetrics::CoupledEncoder(_)));
    if is_encoder {
        writeln!(
            s,
            "{axis},eta_exponent,seed,child,objective,e_t,relative_weight_gap,\
             cka_vs_cl,rsa_vs_cl,loss,nearest_centroid,linear_probe"
        )?;
    } else {
        writeln!(
            s,
            "{axis},eta_exponent,seed,child,terminal_drift,cka,rsa,clip_total,empty_neg_total"
        )?;
    }
    for (spec, metrics) in specs.iter().zip(outcomes) {
        let prefix = format!(
            "{},{},{},{}",
            value_cell(spec.value),
            fmt_cell(spec.eta_exponent),
            spec.seed_index,
            spec.dir
        );
        match metrics {
            RunMetrics::CoupledSim(m) => {
                writeln!(
                    s,
                    "{prefix},{},{},{},{},{}",
                    m.terminal_drift,
                    fmt_cell(m.cka),
                    fmt_cell(m.rsa),
                    m.clip_total,
                    m.empty_neg_total
                )?;
            }
            RunMetrics::CoupledEncoder(m) => {
                for o in &m.objectives {
                    writeln!(
                        s,
                        "{prefix},{},{},{},{},{},{},{},{}",
                        o.objective,
                        o.e_t,
                        o.relative_weight_gap,
                        fmt_cell(o.cka_vs_cl),
                        fmt_cell(o.rsa_vs_cl),
                        fmt_cell(o.loss),
                        o.nearest_centroid,
                        o.linear_probe
                    )?;
                }
            }
        }
    }
    Ok(s)
}

/// Execute the sweep under `out`, reusing completed children, and write
/// `summary.csv` plus a manifest listing every child.
pub fn execute(config: &ExperimentConfig, out: &Path, workers: usize) -> Result<PathBuf> {
    let sweep = config.sweep.as_ref().context("missing [sweep] section")?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let specs = plan(config)?;
    {
        let mut seen = std::collections::BTreeSet::new();
        for spec in &specs {
            if !seen.insert(&spec.hash) {
                bail!("grid points collide: two children share hash {}", spec.hash);
            }
        }
    }

    let mut pool = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        pool = pool.num_threads(workers);
    }
    let pool = pool.build().context("building worker pool")?;

    let results: Result<Vec<(RunMetrics, bool)>> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let dir = out.join(&spec.dir);
                if let Some(metrics) = completed_metrics(&dir, &spec.hash) {
                    return Ok((metrics, true));
                }
                let metrics = run::execute(&spec.config, &dir)
                    .with_context(|| format!("child {} failed", spec.dir))?;
                Ok((metrics, false))
            })
            .collect()
    });
    let results = results?;

    let parent_hash = config.hash();
    let outcomes: Vec<RunMetrics> = results.iter().map(|(m, _)| m.clone()).collect();
    let summary_path = out.join("summary.csv");
    run::write_hashed_csv(
        &summary_path,
        &parent_hash,
        &summary_csv(sweep.axis, &specs, &outcomes)?,
    )?;

    let children: Vec<ChildEntry> = specs
        .iter()
        .zip(&results)
        .map(|(spec, (_, reused))| ChildEntry {
            dir: spec.dir.clone(),
            config_hash: spec.hash.clone(),
            value: spec.value,
            eta_exponent: spec.eta_exponent,
            seed: spec.seed_index,
            master_seed: spec.master_seed,
            reused: *reused,
        })
        .collect();
    let created_unix_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    run::write_json(
        &out.join("manifest.json"),
        &SweepManifest {
            config_hash: &parent_hash,
            binary_version: env!("CARGO_PKG_VERSION"),
            created_unix_ms,
            axis: sweep.axis.to_string(),
            summary: "summary.csv",
            children: &children,
            config,
        },
    )?;
    Ok(summary_path)
}
