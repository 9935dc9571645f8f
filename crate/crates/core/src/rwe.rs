//! Random-weight evaluation.
//!
//! A genome is decoded, its backbone initialized once from a seed and never
//! modified, and the training split pushed through it to obtain pooled
//! features. Only a linear softmax classifier on top of those features is
//! trained. The score is the classifier's top-1 error on the validation split.
//!
//! To reduce the variance of a single fit, the training rows are cut into
//! `folds` parts and one classifier is trained per left-out part. The
//! ensemble averages the classifiers' softmax probabilities.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::genome::Genome;
use crate::netgraph::{decode, DecodeError, NetGraph, ScaleConfig};
use crate::tensor::{forward, init_weights, TensorError, WeightSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RweConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub folds: usize,
    /// Examples per normalization group during feature extraction.
    pub norm_batch: usize,
    /// Standardize features with training-split statistics before fitting.
    pub standardize_features: bool,
    pub seed: u64,
}

impl Default for RweConfig {
    fn default() -> Self {
        RweConfig {
            epochs: 30,
            batch_size: 512,
            lr: 0.25,
            momentum: 0.9,
            folds: 5,
            norm_batch: 512,
            standardize_features: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RweError {
    Decode { genome: String, source: DecodeError },
    Forward { genome: String, source: TensorError },
    Data(&'static str),
}

impl fmt::Display for RweError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RweError::Decode { genome, source } => write!(f, "{genome}: {source}"),
            RweError::Forward { genome, source } => write!(f, "{genome}: forward pass failed: {source}"),
            RweError::Data(msg) => write!(f, "dataset unusable: {msg}"),
        }
    }
}

impl core::error::Error for RweError {}

/// Row-major `rows x dim` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Standardizes every column with the mean and standard deviation of
    /// `fit_rows`; constant columns are only centred.
    pub fn standardize_with(&mut self, stats: &(Vec<f64>, Vec<f64>)) {
        let (mean, std) = stats;
        for row in self.data.chunks_exact_mut(self.dim) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((f64::from(*v) - mean[j]) / std[j]) as f32;
            }
        }
    }

    pub fn column_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let mut mean = vec![0.0f64; self.dim];
        for row in self.data.chunks_exact(self.dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.rows as f64);
        let mut var = vec![0.0f64; self.dim];
        for row in self.data.chunks_exact(self.dim) {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (f64::from(v) - m) * (f64::from(v) - m);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = libm::sqrt(s / self.rows as f64);
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        (mean, std)
    }
}

/// Splits `len` items into `ceil(len / target)` groups of near-equal size.
fn normalization_groups(len: usize, target: usize) -> Vec<core::ops::Range<usize>> {
    if len == 0 {
        return Vec::new();
    }
    let groups = len.div_ceil(target.max(1));
    let base = len / groups;
    let extra = len % groups;
    let mut start = 0;
    (0..groups)
        .map(|g| {
            let size = base + usize::from(g < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// Pooled backbone features for the given examples.
///
/// Examples are processed in normalization groups of near-equal size (about
/// `norm_batch` each, determined only by `indices.len()`), so the result does
/// not depend on how a caller would otherwise batch the data.
pub fn extract_features(
    net: &NetGraph,
    weights: &WeightSet,
    data: &ImageDataset,
    indices: &[usize],
    norm_batch: usize,
) -> Result<FeatureMatrix, TensorError> {
    let dim = net.feature_dim();
    let mut out = Vec::with_capacity(indices.len() * dim);
    for group in normalization_groups(indices.len(), norm_batch) {
        let x = data.batch(&indices[group]);
        let features = forward(net, weights, &x)?;
        out.extend_from_slice(features.data());
    }
    Ok(FeatureMatrix { rows: indices.len(), dim, data: out })
}

/// Softmax regression: `logits = W^T x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    dim: usize,
    classes: usize,
    /// `dim x classes`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearClassifier {
    /// Uniform `(-1/sqrt(dim), 1/sqrt(dim))` initialization of every parameter.
    pub fn random(dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / libm::sqrt(dim.max(1) as f64);
        let mut draw = |len: usize| (0..len).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let weight = draw(dim * classes);
        let bias = draw(classes);
        LinearClassifier { dim, classes, weight, bias }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Writes class probabilities for one feature row into `out`.
    pub fn probabilities(&self, x: &[f32], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (j, &v) in x.iter().enumerate() {
            let v = f64::from(v);
            if v == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(&self.weight[j * self.classes..(j + 1) * self.classes]) {
                *o += w * v;
            }
        }
        softmax_inplace(out);
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let mut p = vec![0.0; self.classes];
        self.probabilities(x, &mut p);
        argmax(&p)
    }
}

fn softmax_inplace(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Learning rate of `epoch` under cosine annealing from `base` to zero.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * epoch as f64 / epochs as f64))
}

/// Outcome of fitting one classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedClassifier {
    pub classifier: LinearClassifier,
    /// Mean cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Fewer than two classes among the training rows.
    pub degenerate: bool,
}

/// Fits a softmax classifier with momentum SGD and cosine-annealed learning
/// rate on the rows where `include` is true. Row order is reshuffled every
/// epoch from `seed`.
pub fn train_classifier(
    features: &FeatureMatrix,
    labels: &[u8],
    include: &[bool],
    classes: usize,
    cfg: &RweConfig,
    seed: u64,
) -> TrainedClassifier {
    assert_eq!(features.rows, labels.len());
    assert_eq!(features.rows, include.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clf = LinearClassifier::random(features.dim, classes, &mut rng);
    let mut rows: Vec<usize> = (0..features.rows).filter(|&i| include[i]).collect();
    let mut seen = vec![false; classes];
    rows.iter().for_each(|&i| seen[usize::from(labels[i])] = true);
    let degenerate = seen.iter().filter(|&&s| s).count() < 2;

    let dim = features.dim;
    let mut vel_w = vec![0.0f64; dim * classes];
    let mut vel_b = vec![0.0f64; classes];
    let mut grad_w = vec![0.0f64; dim * classes];
    let mut grad_b = vec![0.0f64; classes];
    let mut probs = vec![0.0f64; classes];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        rows.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in rows.chunks(batch) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            grad_b.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let x = features.row(i);
                clf.probabilities(x, &mut probs);
                let y = usize::from(labels[i]);
                loss_sum -= libm::log(probs[y].max(1e-300));
                probs[y] -= 1.0;
                for (gb, &p) in grad_b.iter_mut().zip(&probs) {
                    *gb += p;
                }
                for (j, &v) in x.iter().enumerate() {
                    let v = f64::from(v);
                    if v == 0.0 {
                        continue;
                    }
                    for (g, &p) in grad_w[j * classes..(j + 1) * classes].iter_mut().zip(&probs) {
                        *g += p * v;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for ((w, v), g) in clf.weight.iter_mut().zip(&mut vel_w).zip(&grad_w) {
                *v = cfg.momentum * *v + g * scale;
                *w -= lr * *v;
            }
            for ((b, v), g) in clf.bias.iter_mut().zip(&mut vel_b).zip(&grad_b) {
                *v = cfg.momentum * *v + g * scale;
                *b -= lr * *v;
            }
        }
        epoch_losses.push(if rows.is_empty() { 0.0 } else { loss_sum / rows.len() as f64 });
    }
    TrainedClassifier { classifier: clf, epoch_losses, degenerate }
}

/// Fraction of rows whose predicted class differs from the label.
pub fn error_rate(clf: &LinearClassifier, features: &FeatureMatrix, labels: &[u8]) -> f64 {
    let wrong = (0..features.rows).filter(|&i| clf.predict(features.row(i)) != usize::from(labels[i])).count();
    wrong as f64 / features.rows.max(1) as f64
}

/// Result of one random-weight evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub genome: Genome,
    pub rwe_error: f64,
    /// Multiply-accumulates of one forward pass, classifier included.
    pub flops: u64,
    pub params: u64,
    /// Validation error of each fold classifier on its own.
    pub fold_errors: Vec<f64>,
    pub backbone_seed: u64,
    pub classifier_seed: u64,
    /// Fingerprint of the frozen backbone weights.
    pub weights_fingerprint: u64,
    /// Some fold saw fewer than two classes.
    pub degenerate: bool,
    /// Filled in by callers that own a clock.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_seconds: Option<f64>,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Assigns each training row a fold in `0..folds`, balanced and shuffled by `seed`.
pub fn fold_assignment(rows: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; rows];
    for (pos, &row) in order.iter().enumerate() {
        fold[row] = pos % folds;
    }
    fold
}

/// Full random-weight evaluation of `genome` on `data` (which must already
/// carry a train/validation split and be standardized as desired).
pub fn evaluate_rwe(
    genome: &Genome,
    scale: &ScaleConfig,
    data: &ImageDataset,
    cfg: &RweConfig,
) -> Result<EvalReport, RweError> {
    let (c, h, w) = data.image_shape();
    if h != w {
        return Err(RweError::Data("images must be square"));
    }
    if data.train_indices().is_empty() || data.valid_indices().is_empty() {
        return Err(RweError::Data("both splits must be non-empty"));
    }
    if cfg.folds == 0 {
        return Err(RweError::Data("at least one fold is required"));
    }
    let scale = ScaleConfig { resolution: h, in_channels: c, classes: data.classes(), ..scale.clone() };
    let net = decode(genome, &scale)
        .map_err(|source| RweError::Decode { genome: alloc::format!("{genome}"), source })?;
    let backbone_seed = cfg.seed;
    let classifier_seed = splitmix64(cfg.seed ^ 0x5157_4e45_4c43_4c46);
    let weights = init_weights(&net, backbone_seed);
    let fingerprint = weights.fingerprint();

    let forward_err = |source| RweError::Forward { genome: alloc::format!("{genome}"), source };
    let mut train = extract_features(&net, &weights, data, data.train_indices(), cfg.norm_batch).map_err(forward_err)?;
    let mut valid = extract_features(&net, &weights, data, data.valid_indices(), cfg.norm_batch).map_err(forward_err)?;
    if cfg.standardize_features {
        let stats = train.column_stats();
        train.standardize_with(&stats);
        valid.standardize_with(&stats);
    }
    let train_labels: Vec<u8> = data.train_indices().iter().map(|&i| data.labels()[i]).collect();
    let valid_labels: Vec<u8> = data.valid_indices().iter().map(|&i| data.labels()[i]).collect();

    let folds = fold_assignment(train.rows, cfg.folds, classifier_seed);
    let classes = data.classes();
    let mut ensemble = vec![0.0f64; valid.rows * classes];
    let mut fold_errors = Vec::with_capacity(cfg.folds);
    let mut degenerate = false;
    let mut probs = vec![0.0f64; classes];
    for k in 0..cfg.folds {
        let include: Vec<bool> = if cfg.folds == 1 {
            vec![true; train.rows]
        } else {
            folds.iter().map(|&f| f != k).collect()
        };
        let fit = train_classifier(&train, &train_labels, &include, classes, cfg, splitmix64(classifier_seed.wrapping_add(k as u64 + 1)));
        degenerate |= fit.degenerate;
        let mut wrong = 0usize;
        for i in 0..valid.rows {
            fit.classifier.probabilities(valid.row(i), &mut probs);
            if argmax(&probs) != usize::from(valid_labels[i]) {
                wrong += 1;
            }
            for (e, p) in ensemble[i * classes..(i + 1) * classes].iter_mut().zip(&probs) {
                *e += p;
            }
        }
        fold_errors.push(wrong as f64 / valid.rows as f64);
    }
    let wrong = (0..valid.rows)
        .filter(|&i| argmax(&ensemble[i * classes..(i + 1) * classes]) != usize::from(valid_labels[i]))
        .count();
    debug_assert_eq!(weights.fingerprint(), fingerprint);
    Ok(EvalReport {
        genome: genome.clone(),
        rwe_error: wrong as f64 / valid.rows as f64,
        flops: net.count_flops(),
        params: net.count_params(),
        fold_errors,
        backbone_seed,
        classifier_seed,
        weights_fingerprint: fingerprint,
        degenerate,
        wall_seconds: None,
    })
}
