//! Similarity-space losses and gradients.
//!
//! Training is modeled directly on a similarity state `Sigma`: a symmetric
//! matrix of cosine values over a fixed set of view slots (two slots per base
//! sample). For an anchor with logit vector `s` over its denominator keys at
//! temperature `tau`:
//!
//! * contrastive (CL):        `loss = -log p_{i'}` with `p = softmax(s / tau)`
//!   over **all** keys, `i'` the anchor's own positive view;
//! * negatives-only (NSCL):   `loss = -s_{i'}/tau + log sum_neg exp(s_j/tau)`,
//!   i.e. the same numerator but a denominator restricted to different-class
//!   keys. Because the numerator index is *not* part of the denominator, this
//!   loss can be negative.
//!
//! Gradients with respect to the logit coordinates:
//!
//! * CL:   `(1/tau) (p - e_{i'})`,
//! * NSCL: `(1/tau) (q - e_{i'})` where `q` is the softmax over the negative
//!   keys only (zero mass on same-class keys).
//!
//! Both have Euclidean norm at most `sqrt(2)/tau`. The batch gradient is the
//! mean of per-anchor gradients placed on disjoint coordinate blocks (each
//! anchor owns its row of touched entries), so its Frobenius norm satisfies
//! the exact Pythagorean identity `||G||^2 = (1/B^2) sum_i ||g_i||^2` and the
//! bound `||G||_F <= (1/tau) sqrt(2/B)`.
//!
//! The CL and NSCL gradients at the same state differ by `(1/tau)(p - q)`,
//! and `||p - q||_1 = 2 alpha` **exactly**, where `alpha` is the positive
//! mass `Z_pos / (Z_pos + Z_neg)` — the quantity the reweighting analysis in
//! [`crate::bounds`] controls.

use ndarray::Array2;
use std::collections::BTreeMap;

use crate::datagen::BatchDraw;
use crate::error::{Error, Result};

/// Which similarity-space objective a computation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimObjective {
    Cl,
    Nscl,
}

// ── similarity state ──────────────────────────────────────────────────────

/// Symmetric matrix of pairwise cosines over `2N` view slots.
/// Slot `2i` is view 1 of base sample `i`, slot `2i + 1` is view 2.
/// Invariants: symmetric, unit diagonal, entries in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub(crate) entries: Array2<f64>,
}

impl SimState {
    /// Build the cosine matrix of a stack of unit-norm view rows.
    pub fn from_views(views: &Array2<f64>) -> SimState {
        let n = views.nrows();
        let mut entries = views.dot(&views.t());
        for u in 0..n {
            entries[[u, u]] = 1.0;
            for v in 0..u {
                let c = entries[[u, v]].clamp(-1.0, 1.0);
                entries[[u, v]] = c;
                entries[[v, u]] = c;
            }
        }
        SimState { entries }
    }

    /// Wrap an explicit matrix, validating the state invariants.
    pub fn from_matrix(entries: Array2<f64>) -> Result<SimState> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::ShapeMismatch {
                context: "similarity state must be square",
                left: vec![entries.nrows()],
                right: vec![entries.ncols()],
            });
        }
        let n = entries.nrows();
        for u in 0..n {
            if (entries[[u, u]] - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "diagonal entry ({u},{u}) = {} is not 1",
                    entries[[u, u]]
                )));
            }
            for v in 0..u {
                let a = entries[[u, v]];
                let b = entries[[v, u]];
                if (a - b).abs() > 1e-12 {
                    return Err(Error::invalid(format!(
                        "state not symmetric at ({u},{v}): {a} vs {b}"
                    )));
                }
                if !(-1.0..=1.0).contains(&a) || !a.is_finite() {
                    return Err(Error::invalid(format!(
                        "entry ({u},{v}) = {a} outside [-1, 1]"
                    )));
                }
            }
        }
        Ok(SimState { entries })
    }

    pub fn n_slots(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.entries[[u, v]]
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Frobenius distance to another state of the same shape.
    pub fn frob_distance(&self, other: &SimState) -> f64 {
        (&self.entries - &other.entries)
            .mapv(|d| d * d)
            .sum()
            .sqrt()
    }
}

// ── anchors ───────────────────────────────────────────────────────────────

/// One anchor's view of a batch: its denominator key slots (ordered, possibly
/// with repeats when a base sample was drawn twice), the class flag of each
/// key, the index of its own positive view, and the logits read off a state.
#[derive(Debug, Clone)]
pub struct AnchorView {
    pub anchor_slot: usize,
    pub tau: f64,
    /// Denominator key slots, `2B - 1` of them under the two-view convention.
    pub key_slots: Vec<usize>,
    /// `same_class[k]` is true when key `k` belongs to the anchor's class.
    pub same_class: Vec<bool>,
    /// Index into `key_slots` of the anchor's own second view.
    pub positive: usize,
    /// Cosine logits, one per key.
    pub logits: Vec<f64>,
}

impl AnchorView {
    pub fn new(
        anchor_slot: usize,
        tau: f64,
        key_slots: Vec<usize>,
        same_class: Vec<bool>,
        positive: usize,
        logits: Vec<f64>,
    ) -> Result<AnchorView> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive (got {tau})"
            )));
        }
        if key_slots.is_empty() {
            return Err(Error::invalid("anchor needs at least one denominator key"));
        }
        if key_slots.len() != same_class.len() || key_slots.len() != logits.len() {
            return Err(Error::ShapeMismatch {
                context: "key slots, class flags and logits must align",
                left: vec![key_slots.len(), same_class.len()],
                right: vec![logits.len()],
            });
        }
        if positive >= key_slots.len() || !same_class[positive] {
            return Err(Error::invalid(
                "positive index must point at a same-class key".to_string(),
            ));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
        Ok(AnchorView {
            anchor_slot,
            tau,
            key_slots,
            same_class,
            positive,
            logits,
        })
    }

    pub fn n_keys(&self) -> usize {
        self.key_slots.len()
    }

    pub fn has_negatives(&self) -> bool {
        self.same_class.iter().any(|&s| !s)
    }

    /// Number of different-class keys.
    pub fn n_negative(&self) -> usize {
        self.same_class.iter().filter(|&&s| !s).count()
    }
}

/// Build the `B` anchor views of a batch against a similarity state.
///
/// Batch position `s` with base index `j` anchors at slot `2j`; its
/// denominator is every view slot of the batch except the anchor slot's own
/// occurrence (`2B - 1` keys), and its positive is its own slot `2j + 1`.
/// Keys are flagged same-class by label; a base sample drawn twice simply
/// contributes its slots again.
pub fn anchors_for_batch(state: &SimState, batch: &BatchDraw, tau: f64) -> Result<Vec<AnchorView>> {
    let b = batch.batch_size();
    let mut anchors = Vec::with_capacity(b);
    for s in 0..b {
        let anchor_slot = 2 * batch.base_indices[s];
        if anchor_slot + 1 >= state.n_slots() {
            return Err(Error::invalid(format!(
                "batch index {} out of range for a state with {} slots",
                batch.base_indices[s],
                state.n_slots()
            )));
        }
        let label = batch.labels[s];
        let mut key_slots = Vec::with_capacity(2 * b - 1);
        let mut same_class = Vec::with_capacity(2 * b - 1);
        let mut positive = 0usize;
        for u in 0..b {
            let base = batch.base_indices[u];
            let same = batch.labels[u] == label;
            if u != s {
                key_slots.push(2 * base);
                same_class.push(same);
            }
            if u == s {
                positive = key_slots.len();
            }
            key_slots.push(2 * base + 1);
            same_class.push(same);
        }
        let logits = key_slots
            .iter()
            .map(|&k| state.get(anchor_slot, k))
            .collect();
        anchors.push(AnchorView::new(
            anchor_slot,
            tau,
            key_slots,
            same_class,
            positive,
            logits,
        )?);
    }
    Ok(anchors)
}

// ── softmax machinery ─────────────────────────────────────────────────────

/// Numerically stable `softmax(logits / tau)`.
pub fn softmax_tau(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty logit vector"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive (got {tau})"
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("softmax input must be finite"));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// The full softmax `p`, the negatives-only softmax `q` (zero mass on
/// same-class keys), the positive mass `alpha`, and the raw partition sums.
#[derive(Debug, Clone)]
pub struct SoftmaxPair {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// `Z_pos / (Z_pos + Z_neg)`: total softmax mass on same-class keys.
    pub alpha: f64,
    pub z_pos: f64,
    pub z_neg: f64,
}

/// Compute the coupled softmax pair of an anchor.
///
/// Identities that hold in exact arithmetic (and to near machine precision
/// here): `q_j = p_j / (1 - alpha)` on negatives, `||p - q||_1 = 2 alpha`.
pub fn softmax_pair(av: &AnchorView) -> Result<SoftmaxPair> {
    if !av.has_negatives() {
        return Err(Error::PositiveOnlyBatch {
            anchor_slot: av.anchor_slot,
        });
    }
    let p = softmax_tau(&av.logits, av.tau)?;
    let alpha: f64 = p
        .iter()
        .zip(&av.same_class)
        .filter(|(_, &s)| s)
        .map(|(&pk, _)| pk)
        .sum();

    // negatives-only softmax with its own shift
    let neg_max = av
        .logits
        .iter()
        .zip(&av.same_class)
        .filter(|(_, &s)| !s)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut q = vec![0.0; av.n_keys()];
    let mut zq = 0.0;
    for ((qk, &logit), &same) in q.iter_mut().zip(&av.logits).zip(&av.same_class) {
        if !same {
            let e = ((logit - neg_max) / av.tau).exp();
            *qk = e;
            zq += e;
        }
    }
    for v in q.iter_mut() {
        *v /= zq;
    }

    // raw partition sums (logits live in [-1, 1], so these stay in range)
    let mut z_pos = 0.0;
    let mut z_neg = 0.0;
    for k in 0..av.n_keys() {
        let e = (av.logits[k] / av.tau).exp();
        if av.same_class[k] {
            z_pos += e;
        } else {
            z_neg += e;
        }
    }

    Ok(SoftmaxPair {
        p,
        q,
        alpha,
        z_pos,
        z_neg,
    })
}

/// `(||p - q||_1, ||p - q||_2)` for a coupled softmax pair.
/// The first component equals `2 alpha` exactly; the second is never larger.
pub fn reweighting_gap(pair: &SoftmaxPair) -> (f64, f64) {
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (pk, qk) in pair.p.iter().zip(&pair.q) {
        let d = (pk - qk).abs();
        l1 += d;
        l2 += d * d;
    }
    (l1, l2.sqrt())
}

// ── losses ────────────────────────────────────────────────────────────────

/// `-log p_{i'}`: cross-entropy of the full softmax against the positive.
pub fn cl_anchor_loss(av: &AnchorView) -> Result<f64> {
    let m = av.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = av
        .logits
        .iter()
        .map(|&l| ((l - m) / av.tau).exp())
        .sum::<f64>()
        .ln();
    Ok(-(av.logits[av.positive] - m) / av.tau + lse)
}

/// `-s_{i'}/tau + log Z_neg`: positive numerator over a negatives-only
/// denominator. May be negative, since the numerator term is not part of the
/// denominator sum.
pub fn nscl_anchor_loss(av: &AnchorView) -> Result<f64> {
    if !av.has_negatives() {
        return Err(Error::PositiveOnlyBatch {
            anchor_slot: av.anchor_slot,
        });
    }
    let neg_max = av
        .logits
        .iter()
        .zip(&av.same_class)
        .filter(|(_, &s)| !s)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = av
        .logits
        .iter()
        .zip(&av.same_class)
        .filter(|(_, &s)| !s)
        .map(|(&l, _)| ((l - neg_max) / av.tau).exp())
        .sum::<f64>()
        .ln();
    Ok(-(av.logits[av.positive] - neg_max) / av.tau + lse)
}

pub fn anchor_loss(obj: SimObjective, av: &AnchorView) -> Result<f64> {
    match obj {
        SimObjective::Cl => cl_anchor_loss(av),
        SimObjective::Nscl => nscl_anchor_loss(av),
    }
}

/// Gradient of the anchor loss with respect to its logit coordinates.
///
/// CL: `(1/tau)(p - e_{i'})`. NSCL: `(1/tau)(q - e_{i'})`, supported on the
/// negative keys plus the positive's numerator coordinate. Both norms are
/// bounded by `sqrt(2)/tau`.
pub fn anchor_grad(obj: SimObjective, av: &AnchorView) -> Result<Vec<f64>> {
    match obj {
        SimObjective::Cl => {
            let p = softmax_tau(&av.logits, av.tau)?;
            let mut g: Vec<f64> = p.iter().map(|&pk| pk / av.tau).collect();
            g[av.positive] -= 1.0 / av.tau;
            Ok(g)
        }
        SimObjective::Nscl => {
            let pair = softmax_pair(av)?;
            let mut g: Vec<f64> = pair.q.iter().map(|&qk| qk / av.tau).collect();
            g[av.positive] -= 1.0 / av.tau;
            Ok(g)
        }
    }
}

/// Mean per-anchor loss over a batch. Strict: an NSCL anchor without
/// negatives is an error here (the coupled runner uses the skipping variant).
pub fn batch_loss(obj: SimObjective, anchors: &[AnchorView]) -> Result<f64> {
    if anchors.is_empty() {
        return Err(Error::invalid("batch_loss over an empty anchor set"));
    }
    let mut sum = 0.0;
    for av in anchors {
        sum += anchor_loss(obj, av)?;
    }
    Ok(sum / anchors.len() as f64)
}

/// Mean loss over the anchors that admit the objective; returns the count of
/// skipped (positive-only) anchors. `None` when every anchor was skipped.
pub fn batch_loss_skipping(obj: SimObjective, anchors: &[AnchorView]) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for av in anchors {
        match anchor_loss(obj, av) {
            Ok(l) => {
                sum += l;
                used += 1;
            }
            Err(Error::PositiveOnlyBatch { .. }) => skipped += 1,
            Err(_) => unreachable!("anchor invariants were validated on construction"),
        }
    }
    if used == 0 {
        (None, skipped)
    } else {
        (Some(sum / used as f64), skipped)
    }
}

// ── batch gradient ────────────────────────────────────────────────────────

/// One anchor's gradient block: values aligned with its key positions.
#[derive(Debug, Clone)]
pub struct AnchorGrad {
    pub anchor_slot: usize,
    pub key_slots: Vec<usize>,
    pub values: Vec<f64>,
}

impl AnchorGrad {
    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Batch gradient `(1/B) sum_i g_i` kept in per-anchor block form.
///
/// Anchor blocks occupy disjoint coordinates (each anchor owns its own row of
/// touched entries), so the Frobenius norm is computed exactly as
/// `(1/B) sqrt(sum_i ||g_i||^2)`.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub batch_size: usize,
    pub anchors: Vec<AnchorGrad>,
    /// NSCL anchors with empty negative sets contribute a zero block.
    pub skipped: usize,
}

impl BatchGrad {
    pub fn frob_norm(&self) -> f64 {
        let s: f64 = self.anchors.iter().map(AnchorGrad::sq_norm).sum();
        s.sqrt() / self.batch_size as f64
    }

    /// Accumulate the blocks onto directed state coordinates
    /// `(anchor_slot, key_slot) -> value / B`, summing collisions. Diagonal
    /// reads (an anchor keyed against its own slot via a duplicate draw) are
    /// dropped: the diagonal of a cosine state is pinned at 1.
    pub fn accumulate_directed(&self) -> BTreeMap<(usize, usize), f64> {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let scale = 1.0 / self.batch_size as f64;
        for a in &self.anchors {
            for (&k, &v) in a.key_slots.iter().zip(&a.values) {
                if k == a.anchor_slot {
                    continue;
                }
                *acc.entry((a.anchor_slot, k)).or_insert(0.0) += v * scale;
            }
        }
        acc
    }
}

/// Strict batch gradient: propagates `PositiveOnlyBatch`.
pub fn batch_grad(obj: SimObjective, anchors: &[AnchorView]) -> Result<BatchGrad> {
    if anchors.is_empty() {
        return Err(Error::invalid("batch_grad over an empty anchor set"));
    }
    let mut blocks = Vec::with_capacity(anchors.len());
    for av in anchors {
        let values = anchor_grad(obj, av)?;
        blocks.push(AnchorGrad {
            anchor_slot: av.anchor_slot,
            key_slots: av.key_slots.clone(),
            values,
        });
    }
    Ok(BatchGrad {
        batch_size: anchors.len(),
        anchors: blocks,
        skipped: 0,
    })
}

/// Batch gradient that skips NSCL anchors without negatives (zero block),
/// reporting how many were skipped.
pub fn batch_grad_skipping(obj: SimObjective, anchors: &[AnchorView]) -> BatchGrad {
    let mut blocks = Vec::with_capacity(anchors.len());
    let mut skipped = 0usize;
    for av in anchors {
        match anchor_grad(obj, av) {
            Ok(values) => blocks.push(AnchorGrad {
                anchor_slot: av.anchor_slot,
                key_slots: av.key_slots.clone(),
                values,
            }),
            Err(Error::PositiveOnlyBatch { .. }) => skipped += 1,
            Err(_) => unreachable!("anchor invariants were validated on construction"),
        }
    }
    BatchGrad {
        batch_size: anchors.len(),
        anchors: blocks,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn two_key_anchor(logits: Vec<f64>, same: Vec<bool>, positive: usize, tau: f64) -> AnchorView {
        let n = logits.len();
        AnchorView::new(0, tau, (1..=n).collect(), same, positive, logits).unwrap()
    }

    #[test]
    fn softmax_matches_closed_form() {
        let p = softmax_tau(&[1.0, -1.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.880_797_077_977_882_4, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.119_202_922_022_117_56, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax_tau(&[], 1.0).is_err());
        assert!(softmax_tau(&[0.0], 0.0).is_err());
        assert!(softmax_tau(&[0.0], -1.0).is_err());
        assert!(softmax_tau(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn cl_loss_matches_closed_form() {
        // s = [1, 0, 0], positive first, tau = 1: -log(e / (e + 2))
        let av = two_key_anchor(vec![1.0, 0.0, 0.0], vec![true, false, false], 0, 1.0);
        assert_abs_diff_eq!(
            cl_anchor_loss(&av).unwrap(),
            0.551_444_713_932_051_1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cl_loss_shrinks_as_temperature_sharpens() {
        // positive logit 1, three negatives at -1: loss = log(1 + 3 e^{-2/tau})
        let mk = |tau| {
            two_key_anchor(
                vec![1.0, -1.0, -1.0, -1.0],
                vec![true, false, false, false],
                0,
                tau,
            )
        };
        let l1 = cl_anchor_loss(&mk(1.0)).unwrap();
        let l05 = cl_anchor_loss(&mk(0.5)).unwrap();
        let l01 = cl_anchor_loss(&mk(0.1)).unwrap();
        assert_abs_diff_eq!(l1, 0.340_752_953_913_131_17, epsilon = 1e-12);
        assert_abs_diff_eq!(l05, 0.053_490_449_705_933_51, epsilon = 1e-12);
        assert_abs_diff_eq!(l01, 6.183_460_848_198_079e-9, epsilon = 1e-15);
        assert!(l1 > l05 && l05 > l01 && l01 > 0.0);
    }

    #[test]
    fn nscl_loss_can_be_negative() {
        // numerator logit 1, single negative at -1, tau = 1:
        // -1/1 + log(e^{-1}) = -2
        let av = two_key_anchor(vec![1.0, -1.0], vec![true, false], 0, 1.0);
        assert_abs_diff_eq!(nscl_anchor_loss(&av).unwrap(), -2.0, epsilon = 1e-12);
    }

    #[test]
    fn nscl_without_negatives_is_rejected() {
        let av = two_key_anchor(vec![0.5, 0.2], vec![true, true], 0, 1.0);
        match nscl_anchor_loss(&av) {
            Err(Error::PositiveOnlyBatch { .. }) => {}
            other => panic!("expected PositiveOnlyBatch, got {other:?}"),
        }
        assert!(matches!(
            softmax_pair(&av),
            Err(Error::PositiveOnlyBatch { .. })
        ));
    }

    #[test]
    fn equal_logits_give_uniform_p_and_alpha_is_the_positive_count_share() {
        let av = two_key_anchor(
            vec![0.3; 6],
            vec![true, true, false, false, false, false],
            0,
            0.7,
        );
        let pair = softmax_pair(&av).unwrap();
        for &pk in &pair.p {
            assert_abs_diff_eq!(pk, 1.0 / 6.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(pair.alpha, 2.0 / 6.0, epsilon = 1e-12);
        let (l1, l2) = reweighting_gap(&pair);
        assert_abs_diff_eq!(l1, 2.0 * pair.alpha, epsilon = 1e-12);
        assert!(l2 <= l1 + 1e-15);
    }

    fn random_anchor(rng: &mut impl Rng, keys: usize, tau: f64) -> AnchorView {
        loop {
            let logits: Vec<f64> = (0..keys).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut same: Vec<bool> = (0..keys).map(|_| rng.gen_bool(0.3)).collect();
            let positive = rng.gen_range(0..keys);
            same[positive] = true;
            if same.iter().any(|&s| !s) {
                return two_key_anchor(logits, same, positive, tau);
            }
        }
    }

    /// Central finite differences of both losses against the analytic
    /// gradients, step 1e-5.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(obj, tau) in &[
            (SimObjective::Cl, 0.5),
            (SimObjective::Cl, 1.0),
            (SimObjective::Nscl, 0.5),
            (SimObjective::Nscl, 0.2),
        ] {
            for _ in 0..5 {
                let av = random_anchor(&mut rng, 9, tau);
                let g = anchor_grad(obj, &av).unwrap();
                let h = 1e-5;
                let mut fd = vec![0.0; av.n_keys()];
                for (k, slot) in fd.iter_mut().enumerate() {
                    let mut plus = av.clone();
                    plus.logits[k] += h;
                    let mut minus = av.clone();
                    minus.logits[k] -= h;
                    *slot = (anchor_loss(obj, &plus).unwrap() - anchor_loss(obj, &minus).unwrap())
                        / (2.0 * h);
                }
                let num: f64 = g
                    .iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                assert!(
                    num / den < 1e-6,
                    "{obj:?} tau={tau}: fd mismatch rel {}",
                    num / den
                );
            }
        }
    }

    #[test]
    fn gradient_norm_bounded_by_sqrt2_over_tau() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let tau = rng.gen_range(0.1..1.5);
            let av = random_anchor(&mut rng, 15, tau);
            for obj in [SimObjective::Cl, SimObjective::Nscl] {
                let g = anchor_grad(obj, &av).unwrap();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(
                    norm <= 2f64.sqrt() / tau + 1e-9,
                    "{obj:?}: ||g|| = {norm} > sqrt(2)/tau"
                );
            }
        }
    }

    #[test]
    fn batch_loss_of_two_anchors_is_their_mean() {
        let a = two_key_anchor(vec![0.9, -0.2, 0.1], vec![true, false, false], 0, 0.5);
        let b = two_key_anchor(vec![0.4, 0.8, -0.6], vec![false, true, false], 1, 0.5);
        // hand evaluation of the two per-anchor CL losses
        let la = {
            let z: f64 = [0.9f64, -0.2, 0.1].iter().map(|s| (s / 0.5).exp()).sum();
            -(0.9 / 0.5) + z.ln()
        };
        let lb = {
            let z: f64 = [0.4f64, 0.8, -0.6].iter().map(|s| (s / 0.5).exp()).sum();
            -(0.8 / 0.5) + z.ln()
        };
        let got = batch_loss(SimObjective::Cl, &[a, b]).unwrap();
        assert_abs_diff_eq!(got, (la + lb) / 2.0, epsilon = 1e-12);
    }

    /// Disjoint anchor blocks force the Pythagorean identity: the norm of the
    /// stacked batch gradient equals the block-sum form to machine precision.
    #[test]
    fn batch_grad_norm_is_pythagorean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let anchors: Vec<AnchorView> = (0..8).map(|_| random_anchor(&mut rng, 15, 0.5)).collect();
        let bg = batch_grad(SimObjective::Cl, &anchors).unwrap();
        // explicit stacked vector over (anchor, position) coordinates
        let mut stacked = Vec::new();
        for a in &bg.anchors {
            for &v in &a.values {
                stacked.push(v / bg.batch_size as f64);
            }
        }
        let direct = stacked.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(bg.frob_norm(), direct, epsilon = 1e-15);
        // and the norm bound (1/tau) sqrt(2/B)
        assert!(bg.frob_norm() <= (1.0 / 0.5) * (2.0 / 8.0f64).sqrt() + 1e-9);
    }

    #[test]
    fn accumulate_directed_sums_collisions_and_skips_diagonal() {
        // one anchor at slot 0 keyed twice against slot 3 and once against
        // its own slot (duplicate-draw shape)
        let av = AnchorView::new(
            0,
            1.0,
            vec![3, 3, 0, 1],
            vec![false, false, true, true],
            3,
            vec![0.1, 0.1, 1.0, 0.9],
        )
        .unwrap();
        let bg = batch_grad(SimObjective::Cl, &[av]).unwrap();
        let acc = bg.accumulate_directed();
        assert!(!acc.contains_key(&(0, 0)), "diagonal read must be dropped");
        let g = &bg.anchors[0].values;
        assert_abs_diff_eq!(acc[&(0, 3)], g[0] + g[1], epsilon = 1e-15);
        assert_abs_diff_eq!(acc[&(0, 1)], g[3], epsilon = 1e-15);
    }

    #[test]
    fn state_validation_catches_broken_invariants() {
        let asym = array![[1.0, 0.5], [0.4, 1.0]];
        assert!(SimState::from_matrix(asym).is_err());
        let off_diag = array![[0.9, 0.0], [0.0, 1.0]];
        assert!(SimState::from_matrix(off_diag).is_err());
        let oob = array![[1.0, 1.5], [1.5, 1.0]];
        assert!(SimState::from_matrix(oob).is_err());
        let ok = array![[1.0, -0.2], [-0.2, 1.0]];
        assert!(SimState::from_matrix(ok).is_ok());
    }

    #[test]
    fn anchors_read_the_state_in_batch_order() {
        use crate::datagen::BatchDraw;
        let views = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.6, 0.8],];
        let state = SimState::from_views(&views);
        let batch = BatchDraw {
            t: 0,
            base_indices: vec![0, 1],
            labels: vec![0, 1],
            view_seeds: vec![[1, 2], [3, 4]],
        };
        let anchors = anchors_for_batch(&state, &batch, 1.0).unwrap();
        assert_eq!(anchors.len(), 2);
        let a0 = &anchors[0];
        assert_eq!(a0.anchor_slot, 0);
        assert_eq!(a0.key_slots, vec![1, 2, 3]);
        assert_eq!(a0.positive, 0);
        assert_eq!(a0.same_class, vec![true, false, false]);
        for (k, &slot) in a0.key_slots.iter().enumerate() {
            assert_eq!(a0.logits[k], state.get(0, slot));
        }
        let a1 = &anchors[1];
        assert_eq!(a1.anchor_slot, 2);
        assert_eq!(a1.key_slots, vec![0, 1, 3]);
        assert_eq!(a1.positive, 2);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution_and_shift_invariant(
            logits in proptest::collection::vec(-3.0f64..3.0, 1..12),
            shift in -2.0f64..2.0,
            tau in 0.05f64..2.0,
        ) {
            let p = softmax_tau(&logits, tau).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let ps = softmax_tau(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&ps) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn reweighting_identities_hold(
            seed in 0u64..5000,
            keys in 3usize..16,
            tau in 0.1f64..1.5,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let av = random_anchor(&mut rng, keys, tau);
            let pair = softmax_pair(&av).unwrap();
            let (l1, l2) = reweighting_gap(&pair);
            // exact identity ||p - q||_1 = 2 alpha
            prop_assert!((l1 - 2.0 * pair.alpha).abs() < 1e-9);
            prop_assert!(l2 <= l1 + 1e-12);
            // restricted renormalization q = p / (1 - alpha) on negatives,
            // stated multiplicatively (q * sum_neg p = p) so that alpha
            // near 1 does not amplify rounding into the comparison
            let neg_mass: f64 = pair
                .p
                .iter()
                .zip(&av.same_class)
                .filter(|(_, &s)| !s)
                .map(|(&pk, _)| pk)
                .sum();
            for k in 0..av.n_keys() {
                if av.same_class[k] {
                    prop_assert!(pair.q[k] == 0.0);
                } else {
                    prop_assert!((pair.q[k] * neg_mass - pair.p[k]).abs() < 1e-12);
                }
            }
            // partition sums against the worst-case logit range
            let n_pos = (av.n_keys() - av.n_negative()) as f64;
            let n_neg = av.n_negative() as f64;
            let lo = (-1.0 / tau).exp();
            let hi = (1.0 / tau).exp();
            prop_assert!(pair.z_pos >= n_pos * lo - 1e-9 && pair.z_pos <= n_pos * hi + 1e-9);
            prop_assert!(pair.z_neg >= n_neg * lo - 1e-9 && pair.z_neg <= n_neg * hi + 1e-9);
        }
    }
}
