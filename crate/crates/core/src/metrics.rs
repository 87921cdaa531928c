//! Representation-similarity metrics.
//!
//! * **Linear CKA** between two embedding sets: the cosine of their centered
//!   Gram matrices, `<Kx, Ky>_F / (||Kx||_F ||Ky||_F)` with `K = H X X^T H`.
//!   Invariant to orthogonal maps and isotropic scaling of either side.
//! * **RSA**: Pearson correlation of the two upper-triangle dissimilarity
//!   vectors with entries `1 - cos(z_u, z_v)`.
//! * **Drift norms** between similarity states (full and off-diagonal).
//! * **Label-aware probes**: nearest-class-centroid accuracy and a linear
//!   softmax probe trained by full-batch gradient descent from zero
//!   initialization.
//!
//! The centered-Gram and dissimilarity entry points also accept similarity
//! states directly, which is how the terminal metric floors are checked: a
//! cosine matrix of unit-norm views *is* the Gram matrix of those views, and
//! the dissimilarity of slots `u < v` is `1 - sigma_uv`.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::simcore::SimState;

// ── grams and CKA ─────────────────────────────────────────────────────────

/// `H K H` for `H = I - (1/n) 1 1^T`: double-center a square matrix.
pub fn double_center(k: &ArrayView2<f64>) -> Array2<f64> {
    let n = k.nrows();
    let row_means = k.mean_axis(Axis(1)).expect("non-empty matrix");
    let col_means = k.mean_axis(Axis(0)).expect("non-empty matrix");
    let total = row_means.sum() / n as f64;
    let mut out = k.to_owned();
    for u in 0..n {
        for v in 0..n {
            out[[u, v]] += total - row_means[u] - col_means[v];
        }
    }
    out
}

/// Centered Gram matrix `H X X^T H` of row embeddings.
pub fn centered_gram(x: &ArrayView2<f64>) -> Array2<f64> {
    let gram = x.dot(&x.t());
    double_center(&gram.view())
}

/// Centered Gram of a similarity state (its entries already form the Gram
/// matrix of unit-norm views).
pub fn centered_gram_of_state(state: &SimState) -> Array2<f64> {
    double_center(&state.entries().view())
}

fn frob_inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a * b).sum()
}

/// Linear CKA of two centered Grams. Errors with the offending side when a
/// Gram has (near-)zero norm — the statistic is undefined there.
pub fn linear_cka_from_grams(kx: &Array2<f64>, ky: &Array2<f64>) -> Result<f64> {
    if kx.dim() != ky.dim() {
        return Err(Error::ShapeMismatch {
            context: "centered Grams must have equal shape",
            left: vec![kx.nrows(), kx.ncols()],
            right: vec![ky.nrows(), ky.ncols()],
        });
    }
    let nx = frob_inner(kx, kx).sqrt();
    let ny = frob_inner(ky, ky).sqrt();
    if nx < 1e-12 {
        return Err(Error::CkaUndefined { which: "first" });
    }
    if ny < 1e-12 {
        return Err(Error::CkaUndefined { which: "second" });
    }
    Ok(frob_inner(kx, ky) / (nx * ny))
}

/// Linear CKA of two row-embedding sets with equal row counts.
pub fn linear_cka(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::ShapeMismatch {
            context: "CKA needs one embedding per shared sample",
            left: vec![x.nrows(), x.ncols()],
            right: vec![y.nrows(), y.ncols()],
        });
    }
    linear_cka_from_grams(&centered_gram(x), &centered_gram(y))
}

// ── RSA ───────────────────────────────────────────────────────────────────

/// Upper-triangle (`u < v`) dissimilarities `1 - cos(x_u, x_v)` of row
/// embeddings, in row-major pair order. Entries lie in `[0, 2]`. Rows of
/// (near-)zero norm have no defined cosine and are rejected.
pub fn rdm_vector(x: &ArrayView2<f64>) -> Result<Vec<f64>> {
    let n = x.nrows();
    let mut norms = Vec::with_capacity(n);
    for row in x.rows() {
        let norm = row.dot(&row).sqrt();
        if norm < 1e-12 {
            return Err(Error::invalid(
                "dissimilarities need nonzero embedding rows",
            ));
        }
        norms.push(norm);
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for u in 0..n {
        for v in (u + 1)..n {
            let cos = x.row(u).dot(&x.row(v)) / (norms[u] * norms[v]);
            d.push(1.0 - cos);
        }
    }
    Ok(d)
}

/// Dissimilarity vector of a cosine state: entries `1 - sigma_uv`, `u < v`.
pub fn rdm_vector_of_state(state: &SimState) -> Vec<f64> {
    let n = state.n_slots();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for u in 0..n {
        for v in (u + 1)..n {
            d.push(1.0 - state.get(u, v));
        }
    }
    d
}

/// Pearson correlation of two equal-length dissimilarity vectors. Errors
/// with the offending side when a vector has (near-)zero variance.
pub fn rsa_from_rdms(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "RSA needs aligned dissimilarity vectors",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    if a.len() < 2 {
        return Err(Error::invalid("RSA needs at least two pairs"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut va = 0.0;
    let mut vb = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    if va.sqrt() < 1e-12 {
        return Err(Error::RsaUndefined { which: "first" });
    }
    if vb.sqrt() < 1e-12 {
        return Err(Error::RsaUndefined { which: "second" });
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// RSA between two row-embedding sets.
pub fn rsa(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::ShapeMismatch {
            context: "RSA needs one embedding per shared sample",
            left: vec![x.nrows(), x.ncols()],
            right: vec![y.nrows(), y.ncols()],
        });
    }
    rsa_from_rdms(&rdm_vector(x)?, &rdm_vector(y)?)
}

/// Population standard deviation of a dissimilarity vector (the spread scale
/// used by the RSA floor).
pub fn rdm_spread(d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

// ── drift norms ───────────────────────────────────────────────────────────

/// Frobenius distance between two similarity states.
pub fn frob_drift(a: &SimState, b: &SimState) -> f64 {
    a.frob_distance(b)
}

/// Frobenius distance restricted to off-diagonal entries. A single
/// symmetric pair differing by `c` contributes `c * sqrt(2)`.
pub fn offdiag_drift(a: &SimState, b: &SimState) -> f64 {
    let n = a.n_slots().min(b.n_slots());
    let mut sq = 0.0;
    for u in 0..n {
        for v in 0..n {
            if u != v {
                let d = a.get(u, v) - b.get(u, v);
                sq += d * d;
            }
        }
    }
    sq.sqrt()
}

// ── label-aware probes ────────────────────────────────────────────────────

fn class_count(labels: &[usize]) -> Result<usize> {
    let c = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    if c < 2 {
        return Err(Error::invalid("probes need at least two classes"));
    }
    for label in 0..c {
        if !labels.contains(&label) {
            return Err(Error::MissingClass { label });
        }
    }
    Ok(c)
}

/// Nearest-class-centroid accuracy: centroids are class means of the rows,
/// each row is assigned to the centroid at smallest Euclidean distance (ties
/// resolved towards the lowest class id), and the assignment is scored
/// against the labels.
pub fn nearest_centroid_accuracy(x: &ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if x.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "one label per embedding row",
            left: vec![x.nrows()],
            right: vec![labels.len()],
        });
    }
    let c = class_count(labels)?;
    let dim = x.ncols();
    let mut centroids = Array2::<f64>::zeros((c, dim));
    let mut counts = vec![0.0f64; c];
    for (i, &l) in labels.iter().enumerate() {
        let mut row = centroids.row_mut(l);
        row += &x.row(i);
        counts[l] += 1.0;
    }
    for (l, &count) in counts.iter().enumerate() {
        let mut row = centroids.row_mut(l);
        row /= count;
    }
    let mut hits = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..c {
            let diff = &x.row(i) - &centroids.row(k);
            let d = diff.dot(&diff);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        if best == l {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Train accuracy of a linear softmax probe (weights and bias initialized to
/// zero) fit by `epochs` steps of full-batch gradient descent at rate `lr`.
/// With zero epochs all logits tie and every row is assigned class 0, so the
/// accuracy equals the prior of class 0. Errors with [`Error::DivergedProbe`]
/// if the cross-entropy stops being finite.
pub fn linear_probe_accuracy(
    x: &ArrayView2<f64>,
    labels: &[usize],
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    if x.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "one label per embedding row",
            left: vec![x.nrows()],
            right: vec![labels.len()],
        });
    }
    let c = class_count(labels)?;
    let n = x.nrows();
    let dim = x.ncols();
    let mut w = Array2::<f64>::zeros((c, dim));
    let mut b = Array1::<f64>::zeros(c);

    for epoch in 0..epochs {
        // logits, softmax, mean cross-entropy and its gradient
        let logits = x.dot(&w.t()) + &b;
        let mut grad_w = Array2::<f64>::zeros((c, dim));
        let mut grad_b = Array1::<f64>::zeros(c);
        let mut loss = 0.0;
        for i in 0..n {
            let row = logits.row(i);
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            loss -= (exps[labels[i]] / z).ln();
            for k in 0..c {
                let p = exps[k] / z - if k == labels[i] { 1.0 } else { 0.0 };
                let mut gw = grad_w.row_mut(k);
                gw.scaled_add(p, &x.row(i));
                grad_b[k] += p;
            }
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::DivergedProbe { epoch, loss });
        }
        grad_w /= n as f64;
        grad_b /= n as f64;
        w.scaled_add(-lr, &grad_w);
        b.scaled_add(-lr, &grad_b);
    }

    let logits = x.dot(&w.t()) + &b;
    let mut hits = 0usize;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}
