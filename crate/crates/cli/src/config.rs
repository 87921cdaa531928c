//! Versioned experiment configuration: a strict TOML schema in which every
//! unknown key is a hard error, plus the canonical content hash that pins a
//! run. The hash is taken over the re-serialized effective configuration
//! (after command-line overrides), so formatting and comments in the input
//! file do not affect identity, while any semantic change does.

use anyhow::{bail, Context, Result};
use contrastlab::bounds::BoundInputs;
use contrastlab::coupled::CoupledConfig;
use contrastlab::encoder::{EncoderConfig, Objective};
use contrastlab::schedule::Schedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    CoupledSim,
    CoupledEncoder,
    Bounds,
    Verify,
    Sweep,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::CoupledSim => "coupled-sim",
            Mode::CoupledEncoder => "coupled-encoder",
            Mode::Bounds => "bounds",
            Mode::Verify => "verify",
            Mode::Sweep => "sweep",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub tau: f64,
    pub steps: usize,
    pub master_seed: u64,
    pub schedule: Schedule,
    /// Failure budget used when the run's bound report is evaluated.
    #[serde(default = "default_delta")]
    pub bound_delta: f64,
}

fn default_delta() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden: usize,
    pub embed_dim: usize,
    pub objectives: Vec<Objective>,
    pub record_every: usize,
    /// Number of probe points scored after training; 0 means all of them.
    #[serde(default)]
    pub probe_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Classes,
    Tau,
    BatchSize,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SweepAxis::Classes => "classes",
            SweepAxis::Tau => "tau",
            SweepAxis::BatchSize => "batch_size",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: usize,
    /// What each grid point runs.
    pub child_mode: Mode,
    /// Optional second axis for the batch-size sweep: the step size of each
    /// child becomes `eta0 * (B / ref_batch)^q` for every exponent q listed.
    #[serde(default)]
    pub eta_exponents: Vec<f64>,
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    #[serde(default = "default_ref_batch")]
    pub ref_batch: usize,
}

fn default_eta0() -> f64 {
    0.05
}

fn default_ref_batch() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub classes: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub delta: f64,
    pub tau: f64,
    #[serde(default)]
    pub sum_eta: Option<f64>,
}

impl BoundsSection {
    pub fn to_inputs(&self) -> BoundInputs {
        BoundInputs {
            classes: self.classes,
            batch_size: self.batch_size,
            steps: self.steps,
            delta: self.delta,
            tau: self.tau,
            sum_eta: self.sum_eta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_verify_seed")]
    pub master_seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            master_seed: default_verify_seed(),
            trials: default_trials(),
        }
    }
}

fn default_verify_seed() -> u64 {
    42
}

fn default_trials() -> usize {
    1000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySection>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            bail!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            );
        }
        if let Some(train) = &self.train {
            if train.steps == 0 {
                bail!("train.steps must be at least 1");
            }
            if train.master_seed > i64::MAX as u64 {
                bail!("train.master_seed must fit a signed 64-bit config integer");
            }
        }
        match self.mode {
            Mode::CoupledSim => {
                self.require("dataset", self.dataset.is_some())?;
                self.require("train", self.train.is_some())?;
            }
            Mode::CoupledEncoder => {
                self.require("dataset", self.dataset.is_some())?;
                self.require("train", self.train.is_some())?;
                self.require("encoder", self.encoder.is_some())?;
            }
            Mode::Bounds => self.require("bounds", self.bounds.is_some())?,
            Mode::Verify => {}
            Mode::Sweep => {
                self.require("dataset", self.dataset.is_some())?;
                self.require("train", self.train.is_some())?;
                self.require("sweep", self.sweep.is_some())?;
                let sweep = self.sweep.as_ref().expect("checked above");
                if sweep.values.is_empty() {
                    bail!("sweep.values must not be empty");
                }
                if sweep.seeds == 0 {
                    bail!("sweep.seeds must be positive");
                }
                match sweep.child_mode {
                    Mode::CoupledSim => {}
                    Mode::CoupledEncoder => self.require("encoder", self.encoder.is_some())?,
                    other => bail!(
                        "sweep.child_mode must be coupled-sim or coupled-encoder (got {other})"
                    ),
                }
                if !sweep.eta_exponents.is_empty() {
                    if sweep.axis != SweepAxis::BatchSize {
                        bail!("sweep.eta_exponents applies only to the batch-size axis");
                    }
                    let schedule = &self.train.as_ref().expect("checked above").schedule;
                    if !matches!(schedule, Schedule::Constant { .. }) {
                        bail!("eta-scaled sweeps need a constant-step schedule");
                    }
                }
                match sweep.axis {
                    SweepAxis::Classes | SweepAxis::BatchSize => {
                        for &v in &sweep.values {
                            if v.fract() != 0.0 || v < 2.0 {
                                bail!(
                                    "sweep.values for the {} axis must be integers >= 2 (got {v})",
                                    sweep.axis
                                );
                            }
                        }
                    }
                    SweepAxis::Tau => {
                        for &v in &sweep.values {
                            if !(v > 0.0) {
                                bail!("sweep.values for the tau axis must be positive (got {v})");
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn require(&self, section: &str, present: bool) -> Result<()> {
        if present {
            Ok(())
        } else {
            bail!("mode {} requires a [{section}] section", self.mode)
        }
    }

    /// Canonical serialization of the effective configuration; its SHA-256
    /// is the identity every artifact carries.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn coupled_config(&self) -> Result<CoupledConfig> {
        let d = self.dataset.as_ref().context("missing [dataset] section")?;
        let t = self.train.as_ref().context("missing [train] section")?;
        Ok(CoupledConfig {
            classes: d.classes,
            per_class: d.per_class,
            dim: d.dim,
            separation: d.separation,
            noise_scale: d.noise_scale,
            batch_size: t.batch_size,
            tau: t.tau,
            steps: t.steps,
            schedule: t.schedule.clone(),
            master_seed: t.master_seed,
        })
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let d = self.dataset.as_ref().context("missing [dataset] section")?;
        let t = self.train.as_ref().context("missing [train] section")?;
        let e = self.encoder.as_ref().context("missing [encoder] section")?;
        Ok(EncoderConfig {
            classes: d.classes,
            per_class: d.per_class,
            dim: d.dim,
            separation: d.separation,
            noise_scale: d.noise_scale,
            batch_size: t.batch_size,
            tau: t.tau,
            steps: t.steps,
            schedule: t.schedule.clone(),
            master_seed: t.master_seed,
            hidden: e.hidden,
            embed_dim: e.embed_dim,
            objectives: e.objectives.clone(),
            record_every: e.record_every,
        })
    }
}
