//! Small encoder networks trained on contrastive objectives with shared
//! randomness.
//!
//! An encoder is a stack of affine layers (tanh or identity activations)
//! followed by l2 normalization, so pairwise similarities of its outputs are
//! plain dot products. Several copies of the **same initial network** are
//! trained on the **same batch and augmentation stream**, one per objective,
//! and the trace records how far each run drifts from the full-denominator
//! contrastive reference in weight space and in representation space
//! (linear CKA / RSA against the reference on a fixed probe set).
//!
//! Objectives (all at temperature `tau` except the cross-entropy head):
//!
//! * `cl`   — full-denominator contrastive loss, one anchor per batch
//!   sample's first view, all other `2B - 1` views as keys;
//! * `nscl` — same anchors, denominator restricted to different-class keys
//!   (anchors without negatives are skipped and counted);
//! * `dcl`  — decoupled variant: the positive is removed from the
//!   denominator but class labels are not used;
//! * `scl`  — supervised contrastive loss over all `2B` anchors, averaging
//!   the log-score over each anchor's same-class keys;
//! * `ce`   — softmax cross-entropy through a linear classifier head on the
//!   normalized embedding (the head's parameters are trained jointly but
//!   excluded from weight-gap metrics).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::datagen::{draw_batch, make_dataset, AugmentationKernel};
use crate::error::{Error, Result};
use crate::metrics::{linear_cka, rsa};
use crate::schedule::Schedule;
use crate::seedstream::{keyed_rng, Domain};

// ── network ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation value `a = act(z)`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(out, in)` weight matrix.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// An encoder: affine layers, then l2 normalization of the final output.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

fn init_weight(rng: &mut impl Rng, out: usize, input: usize) -> Array2<f64> {
    let std = 1.0 / (input as f64).sqrt();
    Array2::from_shape_fn((out, input), |_| {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        z * std
    })
}

impl EncoderParams {
    /// Fresh network: `hidden == 0` builds a single linear layer
    /// `input -> embed`; otherwise a tanh hidden layer feeds a linear output
    /// layer. Weights are `N(0, 1/fan_in)`, biases zero.
    pub fn new(input_dim: usize, hidden: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        if hidden == 0 {
            layers.push(Layer {
                weight: init_weight(rng, embed_dim, input_dim),
                bias: Array1::zeros(embed_dim),
                activation: Activation::Identity,
            });
        } else {
            layers.push(Layer {
                weight: init_weight(rng, hidden, input_dim),
                bias: Array1::zeros(hidden),
                activation: Activation::Tanh,
            });
            layers.push(Layer {
                weight: init_weight(rng, embed_dim, hidden),
                bias: Array1::zeros(embed_dim),
                activation: Activation::Identity,
            });
        }
        EncoderParams { layers }
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.weight.ncols()).unwrap_or(0)
    }

    /// Normalized embedding of one input row.
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        forward_trace(self, x).f
    }

    /// Normalized embeddings of a stack of input rows.
    pub fn forward_batch(&self, xs: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((xs.nrows(), self.embed_dim()));
        for (i, row) in xs.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.forward(row));
        }
        out
    }

    /// Squared Frobenius norm over all weights and biases.
    pub fn sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.mapv(|v| v * v).sum() + l.bias.mapv(|v| v * v).sum())
            .sum()
    }

    /// Euclidean distance to another encoder of identical shape.
    pub fn distance(&self, other: &EncoderParams) -> f64 {
        let mut sq = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            sq += (&a.weight - &b.weight).mapv(|v| v * v).sum();
            sq += (&a.bias - &b.bias).mapv(|v| v * v).sum();
        }
        sq.sqrt()
    }

    /// `theta <- theta + c * g`.
    pub fn scaled_add(&mut self, c: f64, grads: &ParamGrads) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weight.scaled_add(c, gw);
            layer.bias.scaled_add(c, gb);
        }
    }
}

/// Gradient (or direction) with the same shape as an encoder's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl ParamGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.dim())))
                .collect(),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.mapv(|v| v * v).sum() + b.mapv(|v| v * v).sum())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn scaled_add(&mut self, c: f64, other: &ParamGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.scaled_add(c, ow);
            b.scaled_add(c, ob);
        }
    }
}

// ── forward / backward machinery ──────────────────────────────────────────

/// Intermediate activations of one forward pass: `activations[0]` is the
/// input, `activations[l]` the output of layer `l`; `f` is the normalized
/// final output and `out_norm` the norm it was divided by.
pub struct ForwardTrace {
    pub activations: Vec<Array1<f64>>,
    pub f: Array1<f64>,
    pub out_norm: f64,
}

/// Forward pass keeping the per-layer activations for backpropagation.
pub fn forward_trace(params: &EncoderParams, x: ArrayView1<'_, f64>) -> ForwardTrace {
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    activations.push(x.to_owned());
    for layer in &params.layers {
        let z = layer.weight.dot(activations.last().unwrap()) + &layer.bias;
        activations.push(z.mapv(|v| layer.activation.apply(v)));
    }
    let last = activations.last().unwrap();
    let out_norm = last.dot(last).sqrt().max(1e-12);
    let f = last / out_norm;
    ForwardTrace {
        activations,
        f,
        out_norm,
    }
}

/// Accumulate `d loss / d theta` for one row given `df = d loss / d f`.
/// Normalization backprop: `da = (df - f (f . df)) / ||a||`, then standard
/// affine/activation chain.
pub fn backprop_row(
    params: &EncoderParams,
    trace: &ForwardTrace,
    df: ArrayView1<'_, f64>,
    grads: &mut ParamGrads,
) {
    let f = &trace.f;
    let proj = f.dot(&df);
    let mut da: Array1<f64> = (&df - &(f * proj)) / trace.out_norm;
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let a_out = &trace.activations[l + 1];
        let a_in = &trace.activations[l];
        let dz: Array1<f64> = da
            .iter()
            .zip(a_out.iter())
            .map(|(&g, &a)| g * layer.activation.derivative_from_output(a))
            .collect();
        let (gw, gb) = &mut grads.layers[l];
        for (i, &dzi) in dz.iter().enumerate() {
            gw.row_mut(i).scaled_add(dzi, a_in);
        }
        gb.scaled_add(1.0, &dz);
        if l > 0 {
            da = layer.weight.t().dot(&dz);
        }
    }
}

/// Forward-mode directional derivative of the normalized embedding along a
/// parameter direction: returns `d f(x; theta + eps dir) / d eps` at zero.
pub fn jvp_row(params: &EncoderParams, trace: &ForwardTrace, dir: &ParamGrads) -> Array1<f64> {
    let mut da: Array1<f64> = Array1::zeros(trace.activations[0].len());
    for (l, layer) in params.layers.iter().enumerate() {
        let a_in = &trace.activations[l];
        let a_out = &trace.activations[l + 1];
        let (dw, db) = &dir.layers[l];
        // dz = W da + dW a + db, then through the activation derivative
        let dz = layer.weight.dot(&da) + dw.dot(a_in) + db;
        da = dz
            .iter()
            .zip(a_out.iter())
            .map(|(&g, &a)| g * layer.activation.derivative_from_output(a))
            .collect();
    }
    // d(a/||a||) = (I - f f^T) da / ||a||
    let f = &trace.f;
    let proj = f.dot(&da);
    (&da - &(f * proj)) / trace.out_norm
}

/// Gradient of the pairwise similarity `f(x) . f(y)` with respect to the
/// encoder parameters, together with the similarity itself.
pub fn pair_sim_grad(
    params: &EncoderParams,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> (f64, ParamGrads) {
    let tx = forward_trace(params, x);
    let ty = forward_trace(params, y);
    let sim = tx.f.dot(&ty.f);
    let mut grads = ParamGrads::zeros_like(params);
    backprop_row(params, &tx, ty.f.view(), &mut grads);
    backprop_row(params, &ty, tx.f.view(), &mut grads);
    (sim, grads)
}

/// All pairwise similarities of a view stack and their directional
/// derivatives along `dir`: `sims[u][v] = f_u . f_v` and
/// `dsims[u][v] = d/d eps (f_u . f_v)` at `theta + eps dir`.
pub fn sim_state_and_jvp(
    params: &EncoderParams,
    views: &ArrayView2<'_, f64>,
    dir: &ParamGrads,
) -> (Array2<f64>, Array2<f64>) {
    let n = views.nrows();
    let traces: Vec<ForwardTrace> = views
        .rows()
        .into_iter()
        .map(|r| forward_trace(params, r))
        .collect();
    let dfs: Vec<Array1<f64>> = traces.iter().map(|t| jvp_row(params, t, dir)).collect();
    let mut sims = Array2::zeros((n, n));
    let mut dsims = Array2::zeros((n, n));
    for u in 0..n {
        for v in 0..n {
            sims[[u, v]] = traces[u].f.dot(&traces[v].f);
            dsims[[u, v]] = dfs[u].dot(&traces[v].f) + traces[u].f.dot(&dfs[v]);
        }
    }
    (sims, dsims)
}

// ── objectives ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Cl,
    Nscl,
    Dcl,
    Scl,
    Ce,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Objective::Cl => "cl",
            Objective::Nscl => "nscl",
            Objective::Dcl => "dcl",
            Objective::Scl => "scl",
            Objective::Ce => "ce",
        };
        f.write_str(s)
    }
}

/// Linear classifier head on top of the normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn new(embed_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        ClassifierHead {
            weight: init_weight(rng, classes, embed_dim),
            bias: Array1::zeros(classes),
        }
    }
}

/// Loss value and gradients of one batch under one objective.
pub struct LossGrad {
    pub loss: f64,
    pub grads: ParamGrads,
    pub head_grads: Option<(Array2<f64>, Array1<f64>)>,
    /// Anchors skipped for lack of negatives (negatives-only objective).
    pub skipped: usize,
}

fn row_label(labels: &[usize], row: usize) -> usize {
    labels[row / 2]
}

/// Loss and parameter gradients of a `2B`-view batch. `views` holds the
/// augmented inputs with batch position `s` occupying rows `2s` (anchor
/// view) and `2s + 1` (its positive); `labels` has one entry per position.
///
/// Gradient scaling: anchor-mean over `B` anchors for `cl`/`nscl`/`dcl`
/// (skipped anchors contribute zero without changing the divisor), over all
/// `2B` anchors for `scl`, and over all `2B` views for `ce`.
pub fn loss_and_grad(
    objective: Objective,
    params: &EncoderParams,
    head: Option<&ClassifierHead>,
    views: &ArrayView2<'_, f64>,
    labels: &[usize],
    tau: f64,
) -> Result<LossGrad> {
    let rows = views.nrows();
    if rows == 0 || !rows.is_multiple_of(2) {
        return Err(Error::invalid(
            "views must stack two rows per batch position",
        ));
    }
    let b = rows / 2;
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            context: "one label per batch position",
            left: vec![labels.len()],
            right: vec![b],
        });
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive (got {tau})"
        )));
    }

    let traces: Vec<ForwardTrace> = views
        .rows()
        .into_iter()
        .map(|r| forward_trace(params, r))
        .collect();
    let d = params.embed_dim();
    let mut fmat = Array2::zeros((rows, d));
    for (i, t) in traces.iter().enumerate() {
        fmat.row_mut(i).assign(&t.f);
    }
    let sims = fmat.dot(&fmat.t());

    let mut dfmat = Array2::<f64>::zeros((rows, d));
    let mut loss = 0.0;
    let mut skipped = 0usize;
    let mut head_grads = None;

    // accumulate g = d loss / d s_{rk} into the embedding gradients
    let add_logit_grad = |dfmat: &mut Array2<f64>, r: usize, k: usize, g: f64| {
        let fk = fmat.row(k).to_owned();
        dfmat.row_mut(r).scaled_add(g, &fk);
        let fr = fmat.row(r).to_owned();
        dfmat.row_mut(k).scaled_add(g, &fr);
    };

    match objective {
        Objective::Cl => {
            for s in 0..b {
                let r = 2 * s;
                let pos = r + 1;
                let keys: Vec<usize> = (0..rows).filter(|&k| k != r).collect();
                let logits: Vec<f64> = keys.iter().map(|&k| sims[[r, k]]).collect();
                let p = crate::simcore::softmax_tau(&logits, tau)?;
                let pos_idx = keys.iter().position(|&k| k == pos).unwrap();
                loss += -(p[pos_idx].ln());
                for (i, &k) in keys.iter().enumerate() {
                    let g = (p[i] - if i == pos_idx { 1.0 } else { 0.0 }) / (tau * b as f64);
                    add_logit_grad(&mut dfmat, r, k, g);
                }
            }
            loss /= b as f64;
        }
        Objective::Nscl => {
            let mut used = 0usize;
            for s in 0..b {
                let r = 2 * s;
                let pos = r + 1;
                let negs: Vec<usize> = (0..rows)
                    .filter(|&k| k != r && row_label(labels, k) != labels[s])
                    .collect();
                if negs.is_empty() {
                    skipped += 1;
                    continue;
                }
                let logits: Vec<f64> = negs.iter().map(|&k| sims[[r, k]]).collect();
                let q = crate::simcore::softmax_tau(&logits, tau)?;
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse: f64 = logits
                    .iter()
                    .map(|&l| ((l - m) / tau).exp())
                    .sum::<f64>()
                    .ln();
                loss += -(sims[[r, pos]] - m) / tau + lse;
                used += 1;
                add_logit_grad(&mut dfmat, r, pos, -1.0 / (tau * b as f64));
                for (i, &k) in negs.iter().enumerate() {
                    add_logit_grad(&mut dfmat, r, k, q[i] / (tau * b as f64));
                }
            }
            loss = if used == 0 {
                f64::NAN
            } else {
                loss / used as f64
            };
        }
        Objective::Dcl => {
            for s in 0..b {
                let r = 2 * s;
                let pos = r + 1;
                let keys: Vec<usize> = (0..rows).filter(|&k| k != r && k != pos).collect();
                let logits: Vec<f64> = keys.iter().map(|&k| sims[[r, k]]).collect();
                let p = crate::simcore::softmax_tau(&logits, tau)?;
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse: f64 = logits
                    .iter()
                    .map(|&l| ((l - m) / tau).exp())
                    .sum::<f64>()
                    .ln();
                loss += -(sims[[r, pos]] - m) / tau + lse;
                add_logit_grad(&mut dfmat, r, pos, -1.0 / (tau * b as f64));
                for (i, &k) in keys.iter().enumerate() {
                    add_logit_grad(&mut dfmat, r, k, p[i] / (tau * b as f64));
                }
            }
            loss /= b as f64;
        }
        Objective::Scl => {
            for r in 0..rows {
                let keys: Vec<usize> = (0..rows).filter(|&k| k != r).collect();
                let positives: Vec<usize> = keys
                    .iter()
                    .enumerate()
                    .filter(|(_, &k)| row_label(labels, k) == row_label(labels, r))
                    .map(|(i, _)| i)
                    .collect();
                let logits: Vec<f64> = keys.iter().map(|&k| sims[[r, k]]).collect();
                let p = crate::simcore::softmax_tau(&logits, tau)?;
                let np = positives.len() as f64;
                for &i in &positives {
                    loss += -(p[i].ln()) / np;
                }
                for (i, &k) in keys.iter().enumerate() {
                    let member = if positives.contains(&i) {
                        1.0 / np
                    } else {
                        0.0
                    };
                    let g = (p[i] - member) / (tau * rows as f64);
                    add_logit_grad(&mut dfmat, r, k, g);
                }
            }
            loss /= rows as f64;
        }
        Objective::Ce => {
            let head = head
                .ok_or_else(|| Error::invalid("cross-entropy objective needs a classifier head"))?;
            let classes = head.weight.nrows();
            let mut gw = Array2::<f64>::zeros(head.weight.dim());
            let mut gb = Array1::<f64>::zeros(classes);
            for r in 0..rows {
                let label = row_label(labels, r);
                if label >= classes {
                    return Err(Error::MissingClass { label });
                }
                let logits = head.weight.dot(&fmat.row(r)) + &head.bias;
                let m = logits.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
                let exps = logits.mapv(|v| (v - m).exp());
                let z = exps.sum();
                loss += -(exps[label] / z).ln();
                let mut df = Array1::<f64>::zeros(d);
                for k in 0..classes {
                    let p = exps[k] / z - if k == label { 1.0 } else { 0.0 };
                    let scaled = p / rows as f64;
                    gw.row_mut(k).scaled_add(scaled, &fmat.row(r));
                    gb[k] += scaled;
                    df.scaled_add(scaled, &head.weight.row(k));
                }
                dfmat.row_mut(r).scaled_add(1.0, &df);
            }
            loss /= rows as f64;
            head_grads = Some((gw, gb));
        }
    }

    let mut grads = ParamGrads::zeros_like(params);
    for (r, trace) in traces.iter().enumerate() {
        backprop_row(params, trace, dfmat.row(r), &mut grads);
    }
    Ok(LossGrad {
        loss,
        grads,
        head_grads,
        skipped,
    })
}

// ── coupled encoder runs ──────────────────────────────────────────────────

/// Configuration of a multi-objective coupled encoder run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
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
    /// Hidden width; `0` selects a single linear layer.
    pub hidden: usize,
    pub embed_dim: usize,
    /// Must contain [`Objective::Cl`], the reference all gaps are measured
    /// against.
    pub objectives: Vec<Objective>,
    /// Record a metrics row every this many steps (and always at the end).
    pub record_every: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.objectives.contains(&Objective::Cl) {
            return Err(Error::invalid(
                "objective list must contain the contrastive reference",
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for o in &self.objectives {
            if !seen.insert(o) {
                return Err(Error::invalid(format!("duplicate objective {o}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(
                "encoder runs need a batch size of at least 2",
            ));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every must be positive"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive (got {})",
                self.tau
            )));
        }
        self.schedule.validate(self.steps)
    }
}

/// One metrics row: the state of one objective's run after `epoch + 1`
/// completed steps, measured against the contrastive reference run.
#[derive(Debug, Clone)]
pub struct EncoderStepRecord {
    pub epoch: usize,
    pub objective: Objective,
    /// Weight-space distance to the reference encoder (heads excluded).
    pub e_t: f64,
    /// `e_t` relative to the reference encoder's weight norm.
    pub relative_weight_gap: f64,
    pub cka_vs_cl: f64,
    pub rsa_vs_cl: f64,
    pub loss: f64,
}

/// Trace of a coupled multi-objective encoder run.
pub struct EncoderTrace {
    pub records: Vec<EncoderStepRecord>,
    pub finals: Vec<(Objective, EncoderParams)>,
    /// Probe inputs (the raw dataset points) and their labels.
    pub probe_points: Array2<f64>,
    pub probe_labels: Vec<usize>,
    /// Final probe embeddings per objective.
    pub final_embeddings: Vec<(Objective, Array2<f64>)>,
    pub empty_neg_total: usize,
}

impl EncoderTrace {
    /// CSV with the fixed header
    /// `epoch,objective,e_t,relative_weight_gap,cka_vs_cl,rsa_vs_cl,loss`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "epoch,objective,e_t,relative_weight_gap,cka_vs_cl,rsa_vs_cl,loss"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.objective,
                r.e_t,
                r.relative_weight_gap,
                r.cka_vs_cl,
                r.rsa_vs_cl,
                r.loss
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

struct ObjectiveRun {
    objective: Objective,
    params: EncoderParams,
    head: Option<ClassifierHead>,
    last_loss: f64,
}

/// Train one encoder per objective from a shared initialization on a shared
/// batch/augmentation stream; record weight-space and representation-space
/// gaps against the contrastive reference as training proceeds.
pub fn run_coupled_encoders(config: &EncoderConfig) -> Result<EncoderTrace> {
    config.validate()?;
    let dataset = make_dataset(
        config.classes,
        config.per_class,
        config.dim,
        config.separation,
        config.master_seed,
    )?;
    let kernel = AugmentationKernel::new(config.noise_scale)?;

    let mut init_rng = keyed_rng(config.master_seed, Domain::EncoderInit, 0, 0, 0);
    let shared_init =
        EncoderParams::new(config.dim, config.hidden, config.embed_dim, &mut init_rng);
    let mut head_rng = keyed_rng(config.master_seed, Domain::HeadInit, 0, 0, 0);
    let shared_head = ClassifierHead::new(config.embed_dim, config.classes, &mut head_rng);

    let mut runs: Vec<ObjectiveRun> = config
        .objectives
        .iter()
        .map(|&objective| ObjectiveRun {
            objective,
            params: shared_init.clone(),
            head: (objective == Objective::Ce).then(|| shared_head.clone()),
            last_loss: f64::NAN,
        })
        .collect();

    let probe_points = dataset.points.clone();
    let probe_labels = dataset.labels.clone();

    let mut records = Vec::new();
    let mut empty_neg_total = 0usize;

    for t in 0..config.steps {
        let eta = config.schedule.eta(t);
        let batch = draw_batch(&dataset, config.batch_size, t as u64, config.master_seed)?;
        // shared augmented views: rows (2s, 2s + 1) for batch position s
        let mut views = Array2::zeros((2 * config.batch_size, config.dim));
        for s in 0..config.batch_size {
            for v in 0..2 {
                let row =
                    kernel.apply(dataset.point(batch.base_indices[s]), batch.view_seeds[s][v]);
                views.row_mut(2 * s + v).assign(&row);
            }
        }

        for run in runs.iter_mut() {
            let lg = loss_and_grad(
                run.objective,
                &run.params,
                run.head.as_ref(),
                &views.view(),
                &batch.labels,
                config.tau,
            )?;
            run.params.scaled_add(-eta, &lg.grads);
            if let (Some(head), Some((gw, gb))) = (run.head.as_mut(), lg.head_grads.as_ref()) {
                head.weight.scaled_add(-eta, gw);
                head.bias.scaled_add(-eta, gb);
            }
            run.last_loss = lg.loss;
            if run.objective == Objective::Nscl {
                empty_neg_total += lg.skipped;
            }
        }

        let completed = t + 1;
        if completed % config.record_every == 0 || completed == config.steps {
            let reference = runs
                .iter()
                .find(|r| r.objective == Objective::Cl)
                .expect("validated to contain the reference");
            let ref_params = reference.params.clone();
            let ref_norm = ref_params.sq_norm().sqrt();
            let ref_embed = ref_params.forward_batch(&probe_points.view());
            for run in runs.iter() {
                let e_t = run.params.distance(&ref_params);
                let embed = if run.objective == Objective::Cl {
                    ref_embed.clone()
                } else {
                    run.params.forward_batch(&probe_points.view())
                };
                let cka = linear_cka(&embed.view(), &ref_embed.view()).unwrap_or(f64::NAN);
                let rsa_v = rsa(&embed.view(), &ref_embed.view()).unwrap_or(f64::NAN);
                records.push(EncoderStepRecord {
                    epoch: t,
                    objective: run.objective,
                    e_t,
                    relative_weight_gap: e_t / ref_norm.max(1e-12),
                    cka_vs_cl: cka,
                    rsa_vs_cl: rsa_v,
                    loss: run.last_loss,
                });
            }
        }
    }

    let final_embeddings = runs
        .iter()
        .map(|r| (r.objective, r.params.forward_batch(&probe_points.view())))
        .collect();
    let finals = runs.into_iter().map(|r| (r.objective, r.params)).collect();
    Ok(EncoderTrace {
        records,
        finals,
        probe_points,
        probe_labels,
        final_embeddings,
        empty_neg_total,
    })
}

// ── smoothness constants ──────────────────────────────────────────────────

/// Conservative smoothness constants of the normalized single-linear-layer
/// similarity map over a parameter ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessBounds {
    /// Worst-case pre-normalization output norm floor over the probe inputs
    /// after shrinking by the ball radius.
    pub min_output_norm: f64,
    /// Per-pair similarity gradient bound `2 sqrt(2) / s`.
    pub grad_bound: f64,
    /// Per-pair similarity curvature bound `16 / s^2`.
    pub curvature_bound: f64,
    /// Expansion rate of the batch-loss gradient map:
    /// `(2/tau) H + ((2B - 1)/(2 tau^2)) G^2`.
    pub expansion_bound: f64,
}

/// Closed-form smoothness constants for a **single-linear-layer** encoder on
/// unit-norm inputs, valid for all parameters (weights *and* biases) within
/// Frobenius distance `radius` of `params`. With
/// `s = min_i ||W x_i + b|| - radius > 0`, each pair similarity has gradient
/// norm at most `G = 2 sqrt(2) / s` (a `2/s` weight block and a `2/s` bias
/// block) and curvature at most `H = 16 / s^2`; the batch gradient map then
/// expands at most at rate `(2/tau) H + ((2B - 1)/(2 tau^2)) G^2`. Deeper or
/// nonlinear encoders have no closed form here — measure constants along the
/// trajectory instead.
pub fn estimate_smoothness_bounds(
    params: &EncoderParams,
    inputs: &ArrayView2<'_, f64>,
    radius: f64,
    tau: f64,
    batch_size: usize,
) -> Result<SmoothnessBounds> {
    if params.layers.len() != 1 || params.layers[0].activation != Activation::Identity {
        return Err(Error::invalid(
            "closed-form smoothness bounds exist only for a single linear layer",
        ));
    }
    if !(radius >= 0.0) || !(tau > 0.0) {
        return Err(Error::invalid(
            "radius must be non-negative and tau positive",
        ));
    }
    let layer = &params.layers[0];
    let mut min_norm = f64::INFINITY;
    for x in inputs.rows() {
        let z = layer.weight.dot(&x) + &layer.bias;
        min_norm = min_norm.min(z.dot(&z).sqrt());
    }
    // Frobenius perturbations of (W, b) move ||W x + b|| by at most `radius`
    // on unit inputs, so the floor shrinks by exactly the ball radius.
    let s = min_norm - radius;
    if s <= 0.0 {
        return Err(Error::invalid(format!(
            "output-norm floor {min_norm} does not survive radius {radius}"
        )));
    }
    let g = 2.0 * std::f64::consts::SQRT_2 / s;
    let h = 16.0 / (s * s);
    let expansion = (2.0 / tau) * h + ((2 * batch_size - 1) as f64 / (2.0 * tau * tau)) * g * g;
    Ok(SmoothnessBounds {
        min_output_norm: s,
        grad_bound: g,
        curvature_bound: h,
        expansion_bound: expansion,
    })
}

/// Sampled estimates of the two gradient constants of the batch loss around
/// `params`: `beta_hat` is the largest observed ratio
/// `||grad(w) - grad(v)|| / ||w - v||` over random parameter pairs inside a
/// coordinatewise ball of the given `radius`, and `g_hat` is the largest
/// observed `||d/dw sim(f_w(u), f_w(v))||` over the batch's view pairs at
/// the sampled points. Both are maxima over finitely many samples and
/// therefore **lower** estimates of the true suprema; any bound evaluated
/// with them certifies only the sampled neighborhood.
pub fn estimate_smoothness_constants(
    params: &EncoderParams,
    views: &ArrayView2<'_, f64>,
    labels: &[usize],
    tau: f64,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!(
            "sampling radius must be positive (got {radius})"
        )));
    }
    if samples == 0 {
        return Err(Error::invalid(
            "constant estimation needs at least one sample",
        ));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let perturb = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut p = params.clone();
        for layer in &mut p.layers {
            layer
                .weight
                .mapv_inplace(|w| w + rng.gen_range(-radius..radius));
            layer
                .bias
                .mapv_inplace(|b| b + rng.gen_range(-radius..radius));
        }
        p
    };
    let mut beta_hat = 0.0f64;
    let mut g_hat = 0.0f64;
    for _ in 0..samples {
        let w = perturb(&mut rng);
        let v = perturb(&mut rng);
        let dist = w.distance(&v);
        if dist < 1e-12 {
            return Err(Error::invalid(
                "zero-distance parameter pair has no gradient ratio",
            ));
        }
        let gw = loss_and_grad(Objective::Cl, &w, None, views, labels, tau)?.grads;
        let gv = loss_and_grad(Objective::Cl, &v, None, views, labels, tau)?.grads;
        let mut diff = gw;
        diff.scaled_add(-1.0, &gv);
        beta_hat = beta_hat.max(diff.norm() / dist);
        for u in 0..views.nrows() {
            for r in (u + 1)..views.nrows() {
                let (_, grads) = pair_sim_grad(&w, views.row(u), views.row(r));
                g_hat = g_hat.max(grads.norm());
            }
        }
    }
    Ok((beta_hat, g_hat))
}

// ── checkpoints ───────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"CLAB";
const CHECKPOINT_VERSION: u32 = 1;

/// Save an encoder to a versioned little-endian binary file.
pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for layer in &params.layers {
        w.write_all(&(layer.weight.nrows() as u32).to_le_bytes())?;
        w.write_all(&(layer.weight.ncols() as u32).to_le_bytes())?;
        let act: u8 = match layer.activation {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        };
        w.write_all(&[act])?;
        for &v in layer.weight.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in layer.bias.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or_malformed(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::MalformedFile(format!("checkpoint truncated while reading {what}")))
}

/// Load an encoder saved by [`save_checkpoint`]; weights round-trip
/// bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_malformed(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::MalformedFile("not an encoder checkpoint".into()));
    }
    let mut u32buf = [0u8; 4];
    read_exact_or_malformed(&mut r, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::MalformedFile(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    read_exact_or_malformed(&mut r, &mut u32buf, "layer count")?;
    let n_layers = u32::from_le_bytes(u32buf) as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::MalformedFile(format!(
            "implausible layer count {n_layers}"
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        read_exact_or_malformed(&mut r, &mut u32buf, "rows")?;
        let out = u32::from_le_bytes(u32buf) as usize;
        read_exact_or_malformed(&mut r, &mut u32buf, "cols")?;
        let input = u32::from_le_bytes(u32buf) as usize;
        let mut act = [0u8; 1];
        read_exact_or_malformed(&mut r, &mut act, "activation")?;
        let activation = match act[0] {
            0 => Activation::Identity,
            1 => Activation::Tanh,
            other => {
                return Err(Error::MalformedFile(format!(
                    "unknown activation tag {other}"
                )))
            }
        };
        let mut f64buf = [0u8; 8];
        let mut weight = Array2::zeros((out, input));
        for v in weight.iter_mut() {
            read_exact_or_malformed(&mut r, &mut f64buf, "weights")?;
            *v = f64::from_le_bytes(f64buf);
        }
        let mut bias = Array1::zeros(out);
        for v in bias.iter_mut() {
            read_exact_or_malformed(&mut r, &mut f64buf, "biases")?;
            *v = f64::from_le_bytes(f64buf);
        }
        layers.push(Layer {
            weight,
            bias,
            activation,
        });
    }
    Ok(EncoderParams { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn test_views(b: usize, dim: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut r = rng(seed);
        let views = Array2::from_shape_fn((2 * b, dim), |_| r.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..b).map(|s| s % 2).collect();
        (views, labels)
    }

    #[test]
    fn forward_outputs_are_unit_norm() {
        let mut r = rng(3);
        let params = EncoderParams::new(6, 5, 4, &mut r);
        let x = array![0.3, -0.2, 0.9, 0.0, -0.5, 0.1];
        let f = params.forward(x.view());
        assert_abs_diff_eq!(f.dot(&f), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_linear_encoder_normalizes_its_input() {
        let params = EncoderParams {
            layers: vec![Layer {
                weight: Array2::eye(3),
                bias: Array1::zeros(3),
                activation: Activation::Identity,
            }],
        };
        let x = array![3.0, 0.0, 4.0];
        let f = params.forward(x.view());
        assert_abs_diff_eq!(f[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(f[2], 0.8, epsilon = 1e-12);
    }

    /// Full central finite differences over every parameter coordinate for
    /// every objective, step 1e-5.
    #[test]
    fn objective_gradients_match_finite_differences() {
        let b = 3;
        let (views, labels) = test_views(b, 6, 11);
        let mut r = rng(4);
        let params = EncoderParams::new(6, 5, 4, &mut r);
        let head = ClassifierHead::new(4, 2, &mut r);
        for &objective in &[
            Objective::Cl,
            Objective::Nscl,
            Objective::Dcl,
            Objective::Scl,
            Objective::Ce,
        ] {
            let lg = loss_and_grad(objective, &params, Some(&head), &views.view(), &labels, 0.5)
                .unwrap();
            assert!(lg.loss.is_finite(), "{objective}: loss must be finite");
            let h = 1e-5;
            let mut sq_diff = 0.0;
            let mut sq_fd = 0.0;
            for l in 0..params.layers.len() {
                let coords: Vec<(usize, usize)> = (0..params.layers[l].weight.nrows())
                    .flat_map(|i| (0..params.layers[l].weight.ncols()).map(move |j| (i, j)))
                    .collect();
                for (i, j) in coords {
                    let mut plus = params.clone();
                    plus.layers[l].weight[[i, j]] += h;
                    let mut minus = params.clone();
                    minus.layers[l].weight[[i, j]] -= h;
                    let lp =
                        loss_and_grad(objective, &plus, Some(&head), &views.view(), &labels, 0.5)
                            .unwrap()
                            .loss;
                    let lm =
                        loss_and_grad(objective, &minus, Some(&head), &views.view(), &labels, 0.5)
                            .unwrap()
                            .loss;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = lg.grads.layers[l].0[[i, j]];
                    sq_diff += (fd - an) * (fd - an);
                    sq_fd += fd * fd;
                }
                for i in 0..params.layers[l].bias.len() {
                    let mut plus = params.clone();
                    plus.layers[l].bias[i] += h;
                    let mut minus = params.clone();
                    minus.layers[l].bias[i] -= h;
                    let lp =
                        loss_and_grad(objective, &plus, Some(&head), &views.view(), &labels, 0.5)
                            .unwrap()
                            .loss;
                    let lm =
                        loss_and_grad(objective, &minus, Some(&head), &views.view(), &labels, 0.5)
                            .unwrap()
                            .loss;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = lg.grads.layers[l].1[i];
                    sq_diff += (fd - an) * (fd - an);
                    sq_fd += fd * fd;
                }
            }
            let rel = sq_diff.sqrt() / sq_fd.sqrt().max(1e-12);
            assert!(rel < 1e-6, "{objective}: fd relative error {rel}");
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let b = 3;
        let (views, labels) = test_views(b, 6, 13);
        let mut r = rng(5);
        let params = EncoderParams::new(6, 0, 4, &mut r);
        let head = ClassifierHead::new(4, 2, &mut r);
        let lg = loss_and_grad(
            Objective::Ce,
            &params,
            Some(&head),
            &views.view(),
            &labels,
            0.5,
        )
        .unwrap();
        let (gw, gb) = lg.head_grads.as_ref().unwrap();
        let h = 1e-5;
        for i in 0..2 {
            for j in 0..4 {
                let mut plus = head.clone();
                plus.weight[[i, j]] += h;
                let mut minus = head.clone();
                minus.weight[[i, j]] -= h;
                let lp = loss_and_grad(
                    Objective::Ce,
                    &params,
                    Some(&plus),
                    &views.view(),
                    &labels,
                    0.5,
                )
                .unwrap()
                .loss;
                let lm = loss_and_grad(
                    Objective::Ce,
                    &params,
                    Some(&minus),
                    &views.view(),
                    &labels,
                    0.5,
                )
                .unwrap()
                .loss;
                let fd = (lp - lm) / (2.0 * h);
                assert_abs_diff_eq!(fd, gw[[i, j]], epsilon = 1e-7);
            }
            let mut plus = head.clone();
            plus.bias[i] += h;
            let mut minus = head.clone();
            minus.bias[i] -= h;
            let lp = loss_and_grad(
                Objective::Ce,
                &params,
                Some(&plus),
                &views.view(),
                &labels,
                0.5,
            )
            .unwrap()
            .loss;
            let lm = loss_and_grad(
                Objective::Ce,
                &params,
                Some(&minus),
                &views.view(),
                &labels,
                0.5,
            )
            .unwrap()
            .loss;
            assert_abs_diff_eq!((lp - lm) / (2.0 * h), gb[i], epsilon = 1e-7);
        }
    }

    /// At the identity weight with unit inputs of cosine `c`, the similarity
    /// gradient has closed-form blocks: the weight part
    /// `(y - c x) x^T + (x - c y) y^T` with norm `sqrt(2) (1 - c^2)`, and the
    /// bias part `(y - c x) + (x - c y)` with norm `sqrt(2 (1 - c^2)(1 - c))`.
    #[test]
    fn pair_sim_grad_matches_linear_closed_form() {
        let params = EncoderParams {
            layers: vec![Layer {
                weight: Array2::eye(4),
                bias: Array1::zeros(4),
                activation: Activation::Identity,
            }],
        };
        for &c in &[0.0f64, 0.3, 0.7, -0.4] {
            let x = array![1.0, 0.0, 0.0, 0.0];
            let y = array![c, (1.0 - c * c).sqrt(), 0.0, 0.0];
            let (sim, grads) = pair_sim_grad(&params, x.view(), y.view());
            assert_abs_diff_eq!(sim, c, epsilon = 1e-12);
            let (gw, gb) = &grads.layers[0];
            let w_norm = gw.mapv(|v| v * v).sum().sqrt();
            let b_norm = gb.mapv(|v| v * v).sum().sqrt();
            assert_abs_diff_eq!(w_norm, 2f64.sqrt() * (1.0 - c * c), epsilon = 1e-10);
            assert_abs_diff_eq!(
                b_norm,
                (2.0 * (1.0 - c * c) * (1.0 - c)).sqrt(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn pair_sim_grad_matches_finite_differences_on_mlp() {
        let mut r = rng(8);
        let params = EncoderParams::new(5, 4, 3, &mut r);
        let x = array![0.4, -0.1, 0.8, 0.2, -0.6];
        let y = array![-0.3, 0.9, 0.1, -0.2, 0.5];
        let (_, grads) = pair_sim_grad(&params, x.view(), y.view());
        let h = 1e-5;
        let mut sq_diff = 0.0;
        let mut sq_fd = 0.0;
        for l in 0..params.layers.len() {
            for i in 0..params.layers[l].weight.nrows() {
                for j in 0..params.layers[l].weight.ncols() {
                    let mut plus = params.clone();
                    plus.layers[l].weight[[i, j]] += h;
                    let mut minus = params.clone();
                    minus.layers[l].weight[[i, j]] -= h;
                    let sp = plus.forward(x.view()).dot(&plus.forward(y.view()));
                    let sm = minus.forward(x.view()).dot(&minus.forward(y.view()));
                    let fd = (sp - sm) / (2.0 * h);
                    let an = grads.layers[l].0[[i, j]];
                    sq_diff += (fd - an) * (fd - an);
                    sq_fd += fd * fd;
                }
            }
        }
        let rel = sq_diff.sqrt() / sq_fd.sqrt().max(1e-12);
        assert!(rel < 1e-6, "pair grad fd relative error {rel}");
    }

    /// The forward-mode similarity derivative agrees with central
    /// differences along a random parameter direction.
    #[test]
    fn sim_jvp_matches_directional_differences() {
        let mut r = rng(9);
        let params = EncoderParams::new(5, 4, 3, &mut r);
        let (views, _) = test_views(3, 5, 10);
        let mut dir = ParamGrads::zeros_like(&params);
        for (w, b) in dir.layers.iter_mut() {
            *w = Array2::from_shape_fn(w.dim(), |_| r.gen_range(-1.0..1.0));
            *b = Array1::from_shape_fn(b.dim(), |_| r.gen_range(-1.0..1.0));
        }
        let (sims, dsims) = sim_state_and_jvp(&params, &views.view(), &dir);
        let h = 1e-6;
        let mut plus = params.clone();
        plus.scaled_add(h, &dir);
        let mut minus = params.clone();
        minus.scaled_add(-h, &dir);
        let fp = plus.forward_batch(&views.view());
        let fm = minus.forward_batch(&views.view());
        let sp = fp.dot(&fp.t());
        let sm = fm.dot(&fm.t());
        let mut sq_diff = 0.0;
        let mut sq_fd = 0.0;
        for u in 0..views.nrows() {
            for v in 0..views.nrows() {
                let fd = (sp[[u, v]] - sm[[u, v]]) / (2.0 * h);
                sq_diff += (fd - dsims[[u, v]]) * (fd - dsims[[u, v]]);
                sq_fd += fd * fd;
                assert_abs_diff_eq!(sims[[u, v]], sims[[v, u]], epsilon = 1e-12);
            }
        }
        let rel = sq_diff.sqrt() / sq_fd.sqrt().max(1e-12);
        assert!(rel < 1e-6, "jvp fd relative error {rel}");
    }

    #[test]
    fn nscl_skips_anchors_without_negatives() {
        let b = 2;
        let mut r = rng(12);
        let views = Array2::from_shape_fn((2 * b, 4), |_| r.gen_range(-1.0..1.0));
        let labels = vec![0usize, 0usize]; // single class: every anchor skipped
        let params = EncoderParams::new(4, 0, 3, &mut r);
        let lg =
            loss_and_grad(Objective::Nscl, &params, None, &views.view(), &labels, 0.5).unwrap();
        assert_eq!(lg.skipped, 2);
        assert!(lg.loss.is_nan());
        assert_abs_diff_eq!(lg.grads.norm(), 0.0, epsilon = 1e-15);
    }

    fn small_encoder_config() -> EncoderConfig {
        EncoderConfig {
            classes: 3,
            per_class: 6,
            dim: 8,
            separation: 3.0,
            noise_scale: 0.1,
            batch_size: 6,
            tau: 0.5,
            steps: 30,
            schedule: Schedule::Constant { eta: 0.3 },
            master_seed: 77,
            hidden: 6,
            embed_dim: 4,
            objectives: vec![Objective::Cl, Objective::Nscl, Objective::Ce],
            record_every: 10,
        }
    }

    #[test]
    fn coupled_runs_share_init_and_reference_rows_are_exact() {
        let trace = run_coupled_encoders(&small_encoder_config()).unwrap();
        assert!(!trace.records.is_empty());
        for r in &trace.records {
            if r.objective == Objective::Cl {
                assert_abs_diff_eq!(r.e_t, 0.0, epsilon = 1e-15);
                assert_abs_diff_eq!(r.cka_vs_cl, 1.0, epsilon = 1e-9);
                assert_abs_diff_eq!(r.rsa_vs_cl, 1.0, epsilon = 1e-9);
            }
        }
        // non-reference objectives must drift
        let last_nscl = trace
            .records
            .iter()
            .rfind(|r| r.objective == Objective::Nscl)
            .unwrap();
        assert!(last_nscl.e_t > 0.0);
        assert!(last_nscl.cka_vs_cl <= 1.0 + 1e-12);
        // every recorded gap for a non-reference run is strictly positive
        let nscl_gaps: Vec<f64> = trace
            .records
            .iter()
            .filter(|r| r.objective == Objective::Nscl)
            .map(|r| r.e_t)
            .collect();
        assert!(nscl_gaps.iter().all(|&g| g > 0.0 && g.is_finite()));
    }

    #[test]
    fn coupled_runs_are_deterministic() {
        let config = small_encoder_config();
        let mut a = Vec::new();
        run_coupled_encoders(&config)
            .unwrap()
            .write_csv(&mut a)
            .unwrap();
        let mut b = Vec::new();
        run_coupled_encoders(&config)
            .unwrap()
            .write_csv(&mut b)
            .unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8(a)
            .unwrap()
            .starts_with("epoch,objective,e_t,relative_weight_gap,cka_vs_cl,rsa_vs_cl,loss\n"));
    }

    #[test]
    fn config_validation_requires_the_reference() {
        let mut c = small_encoder_config();
        c.objectives = vec![Objective::Nscl];
        assert!(run_coupled_encoders(&c).is_err());
        let mut c = small_encoder_config();
        c.objectives = vec![Objective::Cl, Objective::Cl];
        assert!(c.validate().is_err());
        let mut c = small_encoder_config();
        c.record_every = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn smoothness_bounds_match_linear_closed_form() {
        let params = EncoderParams {
            layers: vec![Layer {
                weight: Array2::eye(3) * 2.0,
                bias: Array1::zeros(3),
                activation: Activation::Identity,
            }],
        };
        let inputs = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        // ||W x|| = 2 on unit inputs, radius 0.5 -> s = 1.5
        let sb = estimate_smoothness_bounds(&params, &inputs.view(), 0.5, 0.5, 8).unwrap();
        assert_abs_diff_eq!(sb.min_output_norm, 1.5, epsilon = 1e-12);
        let g = 2.0 * 2f64.sqrt() / 1.5;
        assert_abs_diff_eq!(sb.grad_bound, g, epsilon = 1e-12);
        assert_abs_diff_eq!(sb.curvature_bound, 16.0 / 2.25, epsilon = 1e-12);
        let expected = (2.0 / 0.5) * (16.0 / 2.25) + (15.0 / (2.0 * 0.25)) * g * g;
        assert_abs_diff_eq!(sb.expansion_bound, expected, epsilon = 1e-10);
        // measured pair gradients obey the bound inside the ball
        let mut r = rng(14);
        for _ in 0..20 {
            let mut perturbed = params.clone();
            let mut dir = ParamGrads::zeros_like(&params);
            let mut sq = 0.0;
            for (w, b) in dir.layers.iter_mut() {
                *w = Array2::from_shape_fn(w.dim(), |_| r.gen_range(-1.0..1.0));
                *b = Array1::from_shape_fn(b.dim(), |_| r.gen_range(-1.0..1.0));
                sq += w.mapv(|v| v * v).sum() + b.mapv(|v| v * v).sum();
            }
            let scale = 0.5 * r.gen_range(0.0..1.0) / sq.sqrt();
            dir.layers.iter_mut().for_each(|(w, b)| {
                w.mapv_inplace(|v| v * scale);
                b.mapv_inplace(|v| v * scale);
            });
            perturbed.scaled_add(1.0, &dir);
            let (_, g) = pair_sim_grad(&perturbed, inputs.row(0), inputs.row(1));
            assert!(g.norm() <= sb.grad_bound + 1e-9);
        }
    }

    #[test]
    fn smoothness_bounds_reject_unsupported_shapes() {
        let mut r = rng(15);
        let mlp = EncoderParams::new(4, 3, 2, &mut r);
        let inputs = Array2::eye(4);
        assert!(estimate_smoothness_bounds(&mlp, &inputs.view(), 0.1, 0.5, 4).is_err());
        // radius eating the whole norm floor
        let lin = EncoderParams {
            layers: vec![Layer {
                weight: Array2::eye(4) * 0.1,
                bias: Array1::zeros(4),
                activation: Activation::Identity,
            }],
        };
        assert!(estimate_smoothness_bounds(&lin, &inputs.view(), 0.5, 0.5, 4).is_err());
    }

    #[test]
    fn sampled_constants_stay_below_the_linear_closed_form() {
        let params = EncoderParams {
            layers: vec![Layer {
                weight: Array2::eye(3) * 2.0,
                bias: Array1::zeros(3),
                activation: Activation::Identity,
            }],
        };
        let h = 1.0 / 2f64.sqrt();
        let views = array![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [h, h, 0.0],
        ];
        let labels = vec![0usize, 1usize];
        // coordinatewise radius r keeps every sample within Frobenius
        // distance r * sqrt(12) of the center; the closed form must cover
        // that whole ball
        let r = 0.05;
        let ball = r * 12f64.sqrt();
        let sb = estimate_smoothness_bounds(&params, &views.view(), ball, 0.5, 2).unwrap();
        let (beta_hat, g_hat) =
            estimate_smoothness_constants(&params, &views.view(), &labels, 0.5, r, 100, 7).unwrap();
        assert!(beta_hat > 0.0 && g_hat > 0.0);
        assert!(
            beta_hat <= sb.expansion_bound + 1e-9,
            "sampled expansion {beta_hat} above closed form {}",
            sb.expansion_bound
        );
        assert!(
            g_hat <= sb.grad_bound + 1e-9,
            "sampled pair gradient {g_hat} above closed form {}",
            sb.grad_bound
        );
        // same seed, same estimates
        let again =
            estimate_smoothness_constants(&params, &views.view(), &labels, 0.5, r, 100, 7).unwrap();
        assert_eq!((beta_hat, g_hat), again);
    }

    #[test]
    fn sampled_constants_reject_degenerate_sampling() {
        let mut r = rng(31);
        let params = EncoderParams::new(3, 0, 3, &mut r);
        let views = Array2::eye(3).slice(ndarray::s![0..2, ..]).to_owned();
        let labels = vec![0usize];
        assert!(
            estimate_smoothness_constants(&params, &views.view(), &labels, 0.5, 0.0, 10, 1)
                .is_err()
        );
        assert!(
            estimate_smoothness_constants(&params, &views.view(), &labels, 0.5, 0.1, 0, 1).is_err()
        );
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let mut r = rng(16);
        let params = EncoderParams::new(7, 5, 3, &mut r);
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn checkpoints_reject_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad.bin");
        std::fs::write(&bad_magic, b"NOPE....").unwrap();
        assert!(matches!(
            load_checkpoint(&bad_magic),
            Err(Error::MalformedFile(_))
        ));

        let truncated = dir.path().join("trunc.bin");
        let mut r = rng(17);
        let params = EncoderParams::new(4, 3, 2, &mut r);
        let full = dir.path().join("full.bin");
        save_checkpoint(&params, &full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(Error::MalformedFile(_))
        ));

        let bad_version = dir.path().join("ver.bin");
        let mut bytes2 = bytes.clone();
        bytes2[4] = 99;
        std::fs::write(&bad_version, &bytes2).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_version),
            Err(Error::MalformedFile(_))
        ));
    }
}
