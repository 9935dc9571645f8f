//! In-memory image datasets, deterministic train/validation splits,
//! per-channel standardization, and a synthetic generator for desk-scale runs.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataError {
    /// Pixel buffer length does not match `n * c * h * w`.
    Size { expected: usize, found: usize },
    LabelOutOfRange { index: usize, label: u8, classes: usize },
    Empty,
    BadSplit(&'static str),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Size { expected, found } => write!(f, "expected {expected} pixel values, found {found}"),
            DataError::LabelOutOfRange { index, label, classes } => {
                write!(f, "label {label} of example {index} outside [0, {classes})")
            }
            DataError::Empty => f.write_str("dataset is empty"),
            DataError::BadSplit(msg) => write!(f, "bad split: {msg}"),
        }
    }
}

impl core::error::Error for DataError {}

/// Per-channel affine preprocessing computed on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Labelled images stored as `n x c x h x w` floats, plus a train/validation
/// partition of example indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pixels: Vec<f32>,
    labels: Vec<u8>,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    train: Vec<usize>,
    valid: Vec<usize>,
}

impl ImageDataset {
    /// Builds a dataset with every example in the training split.
    pub fn new(
        pixels: Vec<f32>,
        labels: Vec<u8>,
        (channels, height, width): (usize, usize, usize),
        classes: usize,
    ) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        let expected = labels.len() * channels * height * width;
        if pixels.len() != expected {
            return Err(DataError::Size { expected, found: pixels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| usize::from(l) >= classes) {
            return Err(DataError::LabelOutOfRange { index, label, classes });
        }
        let train = (0..labels.len()).collect();
        Ok(ImageDataset { pixels, labels, channels, height, width, classes, train, valid: Vec::new() })
    }

    /// Shuffles example indices with `seed` and moves the first
    /// `round(valid_fraction * n)` of them to the validation split.
    pub fn with_split(mut self, valid_fraction: f64, seed: u64) -> Result<Self, DataError> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(DataError::BadSplit("validation fraction must lie in [0, 1)"));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_valid = libm::round(valid_fraction * n as f64) as usize;
        if n_valid == n {
            return Err(DataError::BadSplit("no training examples left"));
        }
        let mut valid = order[..n_valid].to_vec();
        let mut train = order[n_valid..].to_vec();
        valid.sort_unstable();
        train.sort_unstable();
        self.train = train;
        self.valid = valid;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(channels, height, width)` of each image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn valid_indices(&self) -> &[usize] {
        &self.valid
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let size = self.channels * self.height * self.width;
        &self.pixels[index * size..(index + 1) * size]
    }

    /// Replaces every label, keeping images and splits.
    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self, DataError> {
        if labels.len() != self.labels.len() {
            return Err(DataError::Size { expected: self.labels.len(), found: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| usize::from(l) >= self.classes) {
            return Err(DataError::LabelOutOfRange { index, label, classes: self.classes });
        }
        self.labels = labels;
        Ok(self)
    }

    /// Per-channel mean and population standard deviation over the training split.
    pub fn train_channel_stats(&self) -> ChannelStats {
        let plane = self.height * self.width;
        let mut mean = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for &i in &self.train {
            for (c, values) in self.image(i).chunks_exact(plane).enumerate() {
                mean[c] += values.iter().map(|&v| f64::from(v)).sum::<f64>();
            }
        }
        let count = (self.train.len() * plane) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        for &i in &self.train {
            for (c, values) in self.image(i).chunks_exact(plane).enumerate() {
                sq[c] += values.iter().map(|&v| { let d = f64::from(v) - mean[c]; d * d }).sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| libm::sqrt(s / count).max(1e-12)).collect();
        ChannelStats { mean, std }
    }

    /// Applies `(x - mean) / std` per channel using training-split statistics.
    pub fn standardized(&self) -> (ImageDataset, ChannelStats) {
        let stats = self.train_channel_stats();
        let mut out = self.clone();
        let plane = self.height * self.width;
        for (k, v) in out.pixels.iter_mut().enumerate() {
            let c = (k / plane) % self.channels;
            *v = ((f64::from(*v) - stats.mean[c]) / stats.std[c]) as f32;
        }
        (out, stats)
    }

    /// Copies the given examples into one `(len, c, h, w)` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::from_vec([indices.len(), self.channels, self.height, self.width], data)
            .expect("sizes agree by construction")
    }
}

/// Parameters of the synthetic class-conditional image generator.
///
/// Each class owns a colour offset and an oriented sinusoidal grating; an
/// image is `0.5 + colour + grating + noise`, clipped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub n: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Amplitude of the per-class colour offset.
    pub colour: f32,
    /// Amplitude of the per-class grating.
    pub texture: f32,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Draw the grating phase per image instead of per class. Removes the
    /// pixel-space linear signal of the texture.
    pub random_phase: bool,
}

impl SynthConfig {
    pub fn blobs(classes: usize, n: usize, resolution: usize, seed: u64) -> Self {
        SynthConfig {
            classes,
            n,
            resolution,
            seed,
            colour: 0.12,
            texture: 0.12,
            noise: 0.25,
            random_phase: false,
        }
    }
}

/// Generates a synthetic dataset with balanced labels (`label = i mod K`).
pub fn synth_blobs(cfg: &SynthConfig) -> Result<ImageDataset, DataError> {
    assert!(cfg.classes >= 2, "need at least two classes");
    assert!(cfg.classes <= 256, "labels are stored as bytes");
    let r = cfg.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let class_colour: Vec<[f32; 3]> = (0..cfg.classes)
        .map(|_| core::array::from_fn(|_| rng.random_range(-1.0f32..1.0)))
        .collect();
    let class_phase: Vec<f32> = (0..cfg.classes).map(|_| rng.random_range(0.0..core::f32::consts::TAU)).collect();
    let mut pixels = Vec::with_capacity(cfg.n * 3 * r * r);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let k = i % cfg.classes;
        let theta = core::f32::consts::PI * k as f32 / cfg.classes as f32;
        let freq = 2.0 + (k % 3) as f32;
        let phase = if cfg.random_phase { rng.random_range(0.0..core::f32::consts::TAU) } else { class_phase[k] };
        let (sin_t, cos_t) = (libm::sinf(theta), libm::cosf(theta));
        for offset in class_colour[k] {
            for y in 0..r {
                for x in 0..r {
                    let u = (x as f32 * cos_t + y as f32 * sin_t) / r as f32;
                    let grating = libm::sinf(core::f32::consts::TAU * freq * u + phase);
                    let noise: f32 = StandardNormal.sample(&mut rng);
                    let v = 0.5 + cfg.colour * offset + cfg.texture * grating + cfg.noise * noise;
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(k as u8);
    }
    ImageDataset::new(pixels, labels, (3, r, r), cfg.classes)
}
