//! Synthetic data generation: class-structured points on the unit sphere,
//! a keyed Gaussian augmentation kernel, and batch composition.
//!
//! The generative family is deliberately minimal. `C` class means are drawn
//! uniformly on the unit sphere of `R^m`; each of the `n` points of a class
//! is `normalize(mean + separation^{-1} * g)` with `g` standard Gaussian, so
//! `separation` controls angular class tightness (`separation = inf` collapses
//! every class onto its mean). An augmentation of a point `x` is
//! `normalize(x + noise_scale * g)` with `g` drawn from a keyed stream, so
//! views are reproducible from `(master_seed, key)` alone.
//!
//! Batches are drawn uniformly **with replacement**, which makes per-anchor
//! batch composition i.i.d. across positions — the property the
//! concentration analysis in [`crate::bounds`] relies on.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::seedstream::{derive_seed, keyed_rng, Domain};

/// A balanced labeled dataset of unit-norm points.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Ambient dimension `m`.
    pub dim: usize,
    /// Number of classes `C`.
    pub classes: usize,
    /// Points per class `n`.
    pub per_class: usize,
    /// `N x m` matrix of unit-norm rows, `N = C * n`.
    pub points: Array2<f64>,
    /// Class label of each row, in `0..C`.
    pub labels: Vec<usize>,
    /// `C x m` unit-norm generator means (empirical means when the dataset
    /// was loaded from disk rather than generated).
    pub class_means: Array2<f64>,
}

impl Dataset {
    /// Total number of points `N`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    /// Write as CSV with header `index,label,x0..x{m-1}`.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "index,label")?;
        for j in 0..self.dim {
            write!(f, ",x{j}")?;
        }
        writeln!(f)?;
        for i in 0..self.len() {
            write!(f, "{},{}", i, self.labels[i])?;
            for j in 0..self.dim {
                write!(f, ",{}", self.points[[i, j]])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }

    /// Read back a CSV produced by [`Dataset::to_csv`]. Class means are
    /// recomputed as normalized empirical means.
    pub fn from_csv(path: &Path) -> Result<Dataset> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::MalformedFile("empty dataset file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "index" || cols[1] != "label" {
            return Err(Error::MalformedFile(format!(
                "unexpected dataset header: {header}"
            )));
        }
        let dim = cols.len() - 2;
        let mut rows: Vec<f64> = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(Error::MalformedFile(format!(
                    "row {}: expected {} fields, got {}",
                    lineno + 2,
                    dim + 2,
                    fields.len()
                )));
            }
            let label: usize = fields[1]
                .parse()
                .map_err(|e| Error::MalformedFile(format!("row {}: {e}", lineno + 2)))?;
            labels.push(label);
            for v in &fields[2..] {
                rows.push(
                    v.parse::<f64>()
                        .map_err(|e| Error::MalformedFile(format!("row {}: {e}", lineno + 2)))?,
                );
            }
        }
        let n_rows = labels.len();
        let points = Array2::from_shape_vec((n_rows, dim), rows)
            .map_err(|e| Error::MalformedFile(e.to_string()))?;
        let classes = labels.iter().copied().max().map_or(0, |c| c + 1);
        if classes < 2 {
            return Err(Error::MalformedFile(
                "dataset has fewer than 2 classes".into(),
            ));
        }
        let mut counts = vec![0usize; classes];
        for &l in &labels {
            counts[l] += 1;
        }
        let per_class = counts[0];
        if per_class == 0 || counts.iter().any(|&c| c != per_class) {
            return Err(Error::MalformedFile("dataset is not class-balanced".into()));
        }
        // empirical means, re-normalized
        let mut means = Array2::<f64>::zeros((classes, dim));
        for i in 0..n_rows {
            let l = labels[i];
            for j in 0..dim {
                means[[l, j]] += points[[i, j]];
            }
        }
        for c in 0..classes {
            let norm = means.row(c).dot(&means.row(c)).sqrt();
            if norm <= 0.0 {
                return Err(Error::MalformedFile(format!(
                    "class {c} has a zero empirical mean"
                )));
            }
            for j in 0..dim {
                means[[c, j]] /= norm;
            }
        }
        Ok(Dataset {
            dim,
            classes,
            per_class,
            points,
            labels,
            class_means: means,
        })
    }
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Generate a balanced spherical mixture dataset.
///
/// `separation` is the inverse noise scale of the class clouds and must be
/// positive (`f64::INFINITY` gives zero within-class spread).
pub fn make_dataset(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class == 0 {
        return Err(Error::invalid(format!(
            "need at least 2 classes and 1 point per class (got C={classes}, n={per_class})"
        )));
    }
    if dim < 2 {
        return Err(Error::invalid(format!(
            "ambient dimension must be >= 2 (got {dim})"
        )));
    }
    if !(separation > 0.0) {
        return Err(Error::invalid(format!(
            "separation must be positive (got {separation})"
        )));
    }
    let noise = if separation.is_infinite() {
        0.0
    } else {
        1.0 / separation
    };

    let mut mean_rng = keyed_rng(seed, Domain::Dataset, 0, 0, 0);
    let mut class_means = Array2::<f64>::zeros((classes, dim));
    for c in 0..classes {
        class_means
            .row_mut(c)
            .assign(&unit_gaussian(&mut mean_rng, dim));
    }

    let n_total = classes * per_class;
    let mut points = Array2::<f64>::zeros((n_total, dim));
    let mut labels = Vec::with_capacity(n_total);
    for c in 0..classes {
        for k in 0..per_class {
            let idx = c * per_class + k;
            let mut p = class_means.row(c).to_owned();
            if noise > 0.0 {
                let mut rng = keyed_rng(seed, Domain::Dataset, 1, c as u64, k as u64);
                for j in 0..dim {
                    p[j] += noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let norm = p.dot(&p).sqrt();
            points.row_mut(idx).assign(&(&p / norm));
            labels.push(c);
        }
    }
    Ok(Dataset {
        dim,
        classes,
        per_class,
        points,
        labels,
        class_means,
    })
}

/// Isotropic Gaussian perturbation followed by re-normalization.
#[derive(Debug, Clone, Copy)]
pub struct AugmentationKernel {
    pub noise_scale: f64,
}

impl AugmentationKernel {
    pub fn new(noise_scale: f64) -> Result<Self> {
        if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
            return Err(Error::invalid(format!(
                "noise_scale must be finite and non-negative (got {noise_scale})"
            )));
        }
        Ok(AugmentationKernel { noise_scale })
    }

    /// Produce the view of `x` under the stream identified by `seed`.
    /// The same `(x, seed)` always yields the same view.
    pub fn apply(&self, x: ArrayView1<'_, f64>, seed: u64) -> Array1<f64> {
        if self.noise_scale == 0.0 {
            return x.to_owned();
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = x.to_owned();
        for j in 0..v.len() {
            v[j] += self.noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
        let norm = v.dot(&v).sqrt();
        if norm <= 1e-12 {
            // measure-zero cancellation: fall back to the clean point
            return x.to_owned();
        }
        v / norm
    }
}

use rand_chacha::rand_core::SeedableRng;

/// Key for the reference view of base sample `sample` (drawn once, before
/// any training step).
pub fn init_view_seed(master: u64, sample: usize, view: usize) -> u64 {
    derive_seed(master, Domain::InitView, sample as u64, view as u64, 0)
}

/// One sampled batch: `B` base indices drawn with replacement, plus the
/// derived augmentation seeds for both views of every batch position.
#[derive(Debug, Clone)]
pub struct BatchDraw {
    pub t: u64,
    pub base_indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// `view_seeds[position] = [seed of view 1, seed of view 2]`.
    pub view_seeds: Vec<[u64; 2]>,
}

impl BatchDraw {
    pub fn batch_size(&self) -> usize {
        self.base_indices.len()
    }
}

/// Draw the step-`t` batch: `B` indices uniform with replacement, and one
/// augmentation seed per (position, view). Fully determined by
/// `(dataset, batch_size, t, master_seed)`.
pub fn draw_batch(
    dataset: &Dataset,
    batch_size: usize,
    t: u64,
    master_seed: u64,
) -> Result<BatchDraw> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot draw a batch from an empty dataset"));
    }
    let n = dataset.len();
    let mut rng = keyed_rng(master_seed, Domain::BatchIndices, t, 0, 0);
    let mut base_indices = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    let mut view_seeds = Vec::with_capacity(batch_size);
    for pos in 0..batch_size {
        let idx = rng.gen_range(0..n);
        base_indices.push(idx);
        labels.push(dataset.labels[idx]);
        view_seeds.push([
            derive_seed(master_seed, Domain::StepView, t, pos as u64, 0),
            derive_seed(master_seed, Domain::StepView, t, pos as u64, 1),
        ]);
    }
    Ok(BatchDraw {
        t,
        base_indices,
        labels,
        view_seeds,
    })
}
