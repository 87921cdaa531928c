//! Coupled similarity-space dynamics.
//!
//! Two trajectories evolve a similarity state from the **same** initial
//! cosine matrix under the **same** batch and view randomness — one driven by
//! the full-denominator contrastive gradient, one by the negatives-only
//! gradient. The only source of divergence is the denominator reweighting,
//! so the drift `D_t = ||Sigma_t^CL - Sigma_t^NSCL||_F` measures exactly the
//! effect the reweighting bounds control.
//!
//! One surrogate step: accumulate each anchor's gradient block onto directed
//! state coordinates, symmetrize (`(U + U^T) / 2`), take a gradient step of
//! size `eta_t`, clamp off-diagonal entries back to `[-1, 1]` (counting every
//! clamped unordered pair), and leave the diagonal pinned at 1.

use std::io::Write;
use std::path::Path;

use crate::datagen::{draw_batch, init_view_seed, AugmentationKernel, BatchDraw, Dataset};
use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::simcore::{
    anchors_for_batch, batch_grad, batch_grad_skipping, batch_loss, batch_loss_skipping,
    AnchorView, BatchGrad, SimObjective, SimState,
};
use serde::{Deserialize, Serialize};

/// Configuration of one coupled run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupledConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_scale: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub steps: usize,
    pub schedule: Schedule,
    pub master_seed: u64,
}

impl CoupledConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive (got {})",
                self.tau
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(
                "coupled runs need a batch size of at least 2",
            ));
        }
        self.schedule.validate(self.steps)
    }
}

/// Per-step trace record. `d_t` is the drift **before** the step's update is
/// applied, so `d_0 = 0` always.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub eta_t: f64,
    pub d_t: f64,
    pub loss_cl: f64,
    /// Mean over anchors with at least one negative; NaN if every anchor in
    /// the batch was positive-only.
    pub loss_nscl: f64,
    /// Same-state gradient gap at the CL trajectory's state:
    /// `(1/B) sqrt(sum_i ||g_i^CL - g_i^NSCL||^2)` over the shared batch.
    pub grad_gap: f64,
    /// Unordered entry pairs clamped back into `[-1, 1]` this step, summed
    /// over both trajectories.
    pub clip_events: usize,
    /// Anchors skipped by the negatives-only objective this step.
    pub empty_neg_events: usize,
    /// Smallest per-anchor fraction of different-class keys in the batch.
    pub min_neg_fraction: f64,
}

/// Full trace of a coupled run.
#[derive(Debug, Clone)]
pub struct CoupledTrace {
    pub steps: Vec<StepRecord>,
    /// Drift after the final update.
    pub terminal_drift: f64,
    pub final_cl: SimState,
    pub final_nscl: SimState,
    pub clip_total: usize,
    pub empty_neg_total: usize,
}

impl CoupledTrace {
    /// Serialize the per-step records as CSV with the fixed header
    /// `t,eta_t,d_t,loss_cl,loss_nscl,grad_gap,clip_events,empty_neg_events`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "t,eta_t,d_t,loss_cl,loss_nscl,grad_gap,clip_events,empty_neg_events"
        )?;
        for r in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.t,
                r.eta_t,
                r.d_t,
                r.loss_cl,
                r.loss_nscl,
                r.grad_gap,
                r.clip_events,
                r.empty_neg_events
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Cosine state of the dataset's initial views: two augmented views are drawn
/// per sample with per-(sample, view) keyed seeds, stacked with view 1 of
/// sample `i` at slot `2i` and view 2 at slot `2i + 1`.
pub fn init_sim_state(
    dataset: &Dataset,
    kernel: &AugmentationKernel,
    master_seed: u64,
) -> SimState {
    let n = dataset.len();
    let mut views = ndarray::Array2::<f64>::zeros((2 * n, dataset.dim));
    for i in 0..n {
        for v in 0..2 {
            let seed = init_view_seed(master_seed, i, v);
            let row = kernel.apply(dataset.point(i), seed);
            views.row_mut(2 * i + v).assign(&row);
        }
    }
    SimState::from_views(&views)
}

/// Statistics of one surrogate update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipStats {
    /// Unordered entry pairs that hit the `[-1, 1]` clamp.
    pub clipped_pairs: usize,
}

/// Apply one projected surrogate step `Sigma <- clip(Sigma - eta (U + U^T)/2)`
/// where `U` is the batch gradient accumulated on directed coordinates. The
/// diagonal is never touched; each clamped unordered pair counts as one clip
/// event.
pub fn surrogate_step(state: &mut SimState, grad: &BatchGrad, eta: f64) -> ClipStats {
    let acc = grad.accumulate_directed();
    let mut clipped = 0usize;
    let mut seen = std::collections::BTreeSet::new();
    for (&(a, k), &v) in &acc {
        let (u, w) = if a < k { (a, k) } else { (k, a) };
        if !seen.insert((u, w)) {
            continue; // mirror handled together with its partner below
        }
        let forward = v;
        let mirror = *acc.get(&(k, a)).unwrap_or(&0.0);
        let delta = 0.5 * (forward + mirror);
        let old = state.entries[[u, w]];
        let new = old - eta * delta;
        let clamped = new.clamp(-1.0, 1.0);
        if clamped != new {
            clipped += 1;
        }
        state.entries[[u, w]] = clamped;
        state.entries[[w, u]] = clamped;
    }
    ClipStats {
        clipped_pairs: clipped,
    }
}

/// Position-space gap between two batch gradients over the **same** anchor
/// structure: `(1/B) sqrt(sum_i ||g_i^A - g_i^B||^2)`, with a skipped anchor
/// contributing a zero block.
pub fn update_gap(a: &BatchGrad, b: &BatchGrad) -> Result<f64> {
    if a.batch_size != b.batch_size {
        return Err(Error::ShapeMismatch {
            context: "batch gradients must come from the same batch",
            left: vec![a.batch_size],
            right: vec![b.batch_size],
        });
    }
    use std::collections::BTreeMap;
    type SlotPair<'g> = (Option<&'g [f64]>, Option<&'g [f64]>);
    let mut blocks: BTreeMap<usize, SlotPair<'_>> = BTreeMap::new();
    for blk in &a.anchors {
        blocks.entry(blk.anchor_slot).or_default().0 = Some(&blk.values);
    }
    for blk in &b.anchors {
        blocks.entry(blk.anchor_slot).or_default().1 = Some(&blk.values);
    }
    let mut sq = 0.0;
    for (&slot, &(ga, gb)) in &blocks {
        match (ga, gb) {
            (Some(x), Some(y)) => {
                if x.len() != y.len() {
                    return Err(Error::ShapeMismatch {
                        context: "anchor blocks must have matching key counts",
                        left: vec![slot, x.len()],
                        right: vec![slot, y.len()],
                    });
                }
                sq += x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
            }
            (Some(x), None) => sq += x.iter().map(|u| u * u).sum::<f64>(),
            (None, Some(y)) => sq += y.iter().map(|u| u * u).sum::<f64>(),
            (None, None) => {}
        }
    }
    Ok(sq.sqrt() / a.batch_size as f64)
}

fn min_neg_fraction(anchors: &[AnchorView]) -> f64 {
    anchors
        .iter()
        .map(|a| a.n_negative() as f64 / a.n_keys() as f64)
        .fold(f64::INFINITY, f64::min)
}

/// Run the coupled dynamic. Both trajectories start from the same initial
/// state and see the same batch sequence; only the loss differs.
pub fn run_coupled(config: &CoupledConfig) -> Result<CoupledTrace> {
    config.validate()?;
    let dataset = crate::datagen::make_dataset(
        config.classes,
        config.per_class,
        config.dim,
        config.separation,
        config.master_seed,
    )?;
    let kernel = AugmentationKernel::new(config.noise_scale)?;
    let init = init_sim_state(&dataset, &kernel, config.master_seed);
    let mut state_cl = init.clone();
    let mut state_nscl = init;

    let mut records = Vec::with_capacity(config.steps);
    let mut clip_total = 0usize;
    let mut empty_neg_total = 0usize;

    for t in 0..config.steps {
        let eta = config.schedule.eta(t);
        let batch: BatchDraw =
            draw_batch(&dataset, config.batch_size, t as u64, config.master_seed)?;

        let d_t = state_cl.frob_distance(&state_nscl);
        let anchors_cl = anchors_for_batch(&state_cl, &batch, config.tau)?;
        let anchors_nscl = anchors_for_batch(&state_nscl, &batch, config.tau)?;

        let loss_cl = batch_loss(SimObjective::Cl, &anchors_cl)?;
        let (loss_nscl_opt, _) = batch_loss_skipping(SimObjective::Nscl, &anchors_nscl);
        let loss_nscl = loss_nscl_opt.unwrap_or(f64::NAN);

        let grad_cl = batch_grad(SimObjective::Cl, &anchors_cl)?;
        let grad_nscl = batch_grad_skipping(SimObjective::Nscl, &anchors_nscl);
        // same-state gap: both objectives read the CL trajectory's logits
        let grad_nscl_at_cl = batch_grad_skipping(SimObjective::Nscl, &anchors_cl);
        let grad_gap = update_gap(&grad_cl, &grad_nscl_at_cl)?;

        let empty_neg_events = grad_nscl.skipped;
        let clips = surrogate_step(&mut state_cl, &grad_cl, eta).clipped_pairs
            + surrogate_step(&mut state_nscl, &grad_nscl, eta).clipped_pairs;

        clip_total += clips;
        empty_neg_total += empty_neg_events;
        records.push(StepRecord {
            t,
            eta_t: eta,
            d_t,
            loss_cl,
            loss_nscl,
            grad_gap,
            clip_events: clips,
            empty_neg_events,
            min_neg_fraction: min_neg_fraction(&anchors_cl),
        });
    }

    let terminal_drift = state_cl.frob_distance(&state_nscl);
    Ok(CoupledTrace {
        steps: records,
        terminal_drift,
        final_cl: state_cl,
        final_nscl: state_nscl,
        clip_total,
        empty_neg_total,
    })
}
