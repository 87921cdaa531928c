//! Single-run execution: train per the configuration, then write the trace
//! CSV, terminal metrics, bound report, and manifest into one directory.
//! Every CSV and JSON artifact carries the configuration hash that produced
//! it; the only timestamp lives in the manifest.

use crate::config::{ExperimentConfig, Mode};
use anyhow::{bail, Context, Result};
use contrastlab::bounds::{evaluate_bounds, BoundInputs};
use contrastlab::coupled::run_coupled;
use contrastlab::encoder::{run_coupled_encoders, Objective};
use contrastlab::metrics::{
    centered_gram_of_state, linear_cka_from_grams, linear_probe_accuracy,
    nearest_centroid_accuracy, rdm_vector_of_state, rsa_from_rdms,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const PROBE_EPOCHS: usize = 200;
pub const PROBE_LR: f64 = 0.5;

/// Terminal scalars of one run, persisted as `metrics.json` so re-runs and
/// sweep aggregation can read them back without recomputing the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunMetrics {
    CoupledSim(SimMetrics),
    CoupledEncoder(EncoderMetrics),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimMetrics {
    pub config_hash: String,
    pub terminal_drift: f64,
    /// `None` when the terminal states are too degenerate for the metric.
    pub cka: Option<f64>,
    pub rsa: Option<f64>,
    pub clip_total: usize,
    pub empty_neg_total: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderMetrics {
    pub config_hash: String,
    pub objectives: Vec<ObjectiveMetrics>,
    pub empty_neg_total: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveMetrics {
    pub objective: String,
    pub e_t: f64,
    pub relative_weight_gap: f64,
    /// `None` stands for an undefined (non-finite) measurement.
    pub cka_vs_cl: Option<f64>,
    pub rsa_vs_cl: Option<f64>,
    pub loss: Option<f64>,
    pub nearest_centroid: f64,
    pub linear_probe: f64,
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    binary_version: &'a str,
    created_unix_ms: u128,
    artifacts: &'a [String],
    config: &'a ExperimentConfig,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing JSON artifact")?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_hashed_csv(path: &Path, hash: &str, body: &str) -> Result<()> {
    let text = format!("# config_hash={hash}\n{body}");
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_manifest(
    out: &Path,
    config: &ExperimentConfig,
    hash: &str,
    artifacts: &[String],
) -> Result<()> {
    let created_unix_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            config_hash: hash,
            binary_version: env!("CARGO_PKG_VERSION"),
            created_unix_ms,
            artifacts,
            config,
        },
    )
}

/// Execute a single coupled-sim or coupled-encoder run and write all its
/// artifacts under `out`.
pub fn execute(config: &ExperimentConfig, out: &Path) -> Result<RunMetrics> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let hash = config.hash();
    let mut artifacts: Vec<String> = Vec::new();
    let metrics = match config.mode {
        Mode::CoupledSim => run_sim(config, out, &hash, &mut artifacts)?,
        Mode::CoupledEncoder => run_encoder(config, out, &hash, &mut artifacts)?,
        other => bail!("run executes coupled-sim or coupled-encoder configs (got mode {other})"),
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    artifacts.push("metrics.json".into());
    write_manifest(out, config, &hash, &artifacts)?;
    Ok(metrics)
}

fn run_sim(
    config: &ExperimentConfig,
    out: &Path,
    hash: &str,
    artifacts: &mut Vec<String>,
) -> Result<RunMetrics> {
    let coupled = config.coupled_config()?;
    let trace = run_coupled(&coupled)?;

    let mut body = Vec::new();
    trace.write_csv(&mut body)?;
    write_hashed_csv(
        &out.join("trace.csv"),
        hash,
        std::str::from_utf8(&body).expect("CSV is UTF-8"),
    )?;
    artifacts.push("trace.csv".into());

    let train = config.train.as_ref().expect("validated");
    let report = evaluate_bounds(&BoundInputs {
        classes: coupled.classes,
        batch_size: coupled.batch_size,
        steps: coupled.steps,
        delta: train.bound_delta,
        tau: coupled.tau,
        sum_eta: Some(train.schedule.sum_eta(coupled.steps)),
    })?;
    let mut bound_value = serde_json::to_value(&report)?;
    bound_value
        .as_object_mut()
        .expect("report is an object")
        .insert("config_hash".into(), serde_json::Value::String(hash.into()));
    write_json(&out.join("bound_report.json"), &bound_value)?;
    artifacts.push("bound_report.json".into());

    let ka = centered_gram_of_state(&trace.final_cl);
    let kb = centered_gram_of_state(&trace.final_nscl);
    let cka = linear_cka_from_grams(&ka, &kb).ok();
    let rsa = rsa_from_rdms(
        &rdm_vector_of_state(&trace.final_cl),
        &rdm_vector_of_state(&trace.final_nscl),
    )
    .ok();
    Ok(RunMetrics::CoupledSim(SimMetrics {
        config_hash: hash.to_string(),
        terminal_drift: trace.terminal_drift,
        cka,
        rsa,
        clip_total: trace.clip_total,
        empty_neg_total: trace.empty_neg_total,
    }))
}

fn embedding_csv(x: &Array2<f64>) -> String {
    let mut s = String::new();
    let header: Vec<String> = (0..x.ncols()).map(|d| format!("dim{d}")).collect();
    let _ = writeln!(s, "{}", header.join(","));
    for row in x.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

fn run_encoder(
    config: &ExperimentConfig,
    out: &Path,
    hash: &str,
    artifacts: &mut Vec<String>,
) -> Result<RunMetrics> {
    let encoder = config.encoder_config()?;
    let trace = run_coupled_encoders(&encoder)?;

    let mut body = Vec::new();
    trace.write_csv(&mut body)?;
    write_hashed_csv(
        &out.join("trace.csv"),
        hash,
        std::str::from_utf8(&body).expect("CSV is UTF-8"),
    )?;
    artifacts.push("trace.csv".into());

    let probe_size = config.encoder.as_ref().expect("validated").probe_size;
    let n_probe = if probe_size == 0 {
        trace.probe_labels.len()
    } else {
        probe_size.min(trace.probe_labels.len())
    };
    let probe_labels = &trace.probe_labels[..n_probe];

    let reference = trace
        .final_embeddings
        .iter()
        .find(|(o, _)| *o == Objective::Cl)
        .map(|(_, x)| x)
        .context("runs always include the contrastive reference")?;

    let mut objectives = Vec::new();
    for (obj, x) in &trace.final_embeddings {
        let name = obj.to_string();
        write_hashed_csv(
            &out.join(format!("embeddings_{name}.csv")),
            hash,
            &embedding_csv(x),
        )?;
        artifacts.push(format!("embeddings_{name}.csv"));
        if *obj == Objective::Cl {
            continue;
        }
        let last = trace
            .records
            .iter()
            .rev()
            .find(|r| r.objective == *obj)
            .context("each trained objective records at least once")?;
        let probe = x.slice(ndarray::s![..n_probe, ..]);
        objectives.push(ObjectiveMetrics {
            objective: name,
            e_t: last.e_t,
            relative_weight_gap: last.relative_weight_gap,
            cka_vs_cl: finite_or_none(last.cka_vs_cl),
            rsa_vs_cl: finite_or_none(last.rsa_vs_cl),
            loss: finite_or_none(last.loss),
            nearest_centroid: nearest_centroid_accuracy(&probe, probe_labels)?,
            linear_probe: linear_probe_accuracy(&probe, probe_labels, PROBE_EPOCHS, PROBE_LR)?,
        });
    }
    // the reference itself is probed too, recorded under its own name
    {
        let probe = reference.slice(ndarray::s![..n_probe, ..]);
        objectives.insert(
            0,
            ObjectiveMetrics {
                objective: Objective::Cl.to_string(),
                e_t: 0.0,
                relative_weight_gap: 0.0,
                cka_vs_cl: Some(1.0),
                rsa_vs_cl: Some(1.0),
                loss: trace
                    .records
                    .iter()
                    .rev()
                    .find(|r| r.objective == Objective::Cl)
                    .and_then(|r| finite_or_none(r.loss)),
                nearest_centroid: nearest_centroid_accuracy(&probe, probe_labels)?,
                linear_probe: linear_probe_accuracy(&probe, probe_labels, PROBE_EPOCHS, PROBE_LR)?,
            },
        );
    }

    Ok(RunMetrics::CoupledEncoder(EncoderMetrics {
        config_hash: hash.to_string(),
        objectives,
        empty_neg_total: trace.empty_neg_total,
    }))
}
