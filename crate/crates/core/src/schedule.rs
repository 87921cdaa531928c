//! Step-size schedules.
//!
//! Every drift bound in this crate is phrased in terms of the partial sums
//! `sum_t eta_t` and `sum_t eta_t^2` of the schedule, so schedules expose
//! those directly alongside pointwise evaluation. All step sizes must be
//! strictly positive and finite over the horizon they are used for.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A deterministic step-size sequence `eta_t`, `t = 0, 1, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `eta_t = eta`.
    Constant { eta: f64 },
    /// `eta_t = eta0 / (1 + t / t0)`: the classic inverse-time decay whose
    /// partial sums grow logarithmically while `sum eta_t^2` stays bounded.
    InverseT { eta0: f64, t0: f64 },
    /// Linear warmup to `eta_max` over `warmup` steps, then cosine decay
    /// towards zero at `total` (the last step stays strictly positive).
    CosineWarmup {
        eta_max: f64,
        warmup: usize,
        total: usize,
    },
    /// An explicit sequence; step `t` beyond the end is an error.
    Custom { etas: Vec<f64> },
}

impl Schedule {
    /// Step size at step `t`.
    pub fn eta(&self, t: usize) -> f64 {
        match self {
            Schedule::Constant { eta } => *eta,
            Schedule::InverseT { eta0, t0 } => eta0 / (1.0 + t as f64 / t0),
            Schedule::CosineWarmup {
                eta_max,
                warmup,
                total,
            } => {
                if t < *warmup {
                    eta_max * (t + 1) as f64 / *warmup as f64
                } else {
                    let span = (total - warmup).max(1) as f64;
                    let phase = std::f64::consts::PI * (t - warmup) as f64 / span;
                    eta_max * 0.5 * (1.0 + phase.cos())
                }
            }
            Schedule::Custom { etas } => etas[t],
        }
    }

    /// Check that every step size in `0..steps` is strictly positive and
    /// finite (and, for [`Schedule::Custom`], that the sequence is long
    /// enough).
    pub fn validate(&self, steps: usize) -> Result<()> {
        if let Schedule::Custom { etas } = self {
            if etas.len() < steps {
                return Err(Error::invalid(format!(
                    "custom schedule has {} entries but {steps} steps were requested",
                    etas.len()
                )));
            }
        }
        if let Schedule::CosineWarmup { warmup, total, .. } = self {
            if warmup > total || *total == 0 {
                return Err(Error::invalid(format!(
                    "cosine schedule needs warmup <= total and total > 0 (got {warmup}, {total})"
                )));
            }
            if steps > *total {
                return Err(Error::invalid(format!(
                    "cosine schedule covers {total} steps but {steps} were requested"
                )));
            }
        }
        for t in 0..steps {
            let e = self.eta(t);
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::invalid(format!(
                    "step size at t = {t} is {e}; schedules must stay strictly positive"
                )));
            }
        }
        Ok(())
    }

    /// `sum_{t < steps} eta_t`.
    pub fn sum_eta(&self, steps: usize) -> f64 {
        (0..steps).map(|t| self.eta(t)).sum()
    }

    /// `sum_{t < steps} eta_t^2`.
    pub fn sum_eta_sq(&self, steps: usize) -> f64 {
        (0..steps).map(|t| self.eta(t) * self.eta(t)).sum()
    }
}
