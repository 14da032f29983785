//! Labeled image sets and a seeded synthetic corpus.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with pixel values in `[0, 1]` and one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.batch() != labels.len() {
            return Err(Error::shape("dataset", format!("images {:?}, {} labels", images.shape(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::ClassOutOfRange { class: bad, num_classes });
        }
        Ok(LabeledDataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images = self.images.select_rows(rows)?;
        Ok((images, rows.iter().map(|&r| self.labels[r]).collect()))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(rows)?;
        LabeledDataset::new(images, labels, self.num_classes)
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let rows: Vec<usize> = (0..self.len()).collect();
        let (mean, var) = crate::classwise_bn::subset_moments(&self.images, &rows);
        let std = var.unwrap_or_else(|| vec![1.0; mean.len()]).iter().map(|&v| libm::sqrtf(v).max(1e-3)).collect();
        (mean, std)
    }
}

/// Seeded generator of a multi-modal image classification corpus.
///
/// Each class owns `modes_per_class` prototypes made of coloured Gaussian
/// blobs and one oriented grating. A sample picks a prototype, shifts it by up
/// to `max_shift` pixels, scales its contrast, adds one distractor blob shared
/// across classes and pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub modes_per_class: usize,
    pub blobs_per_mode: usize,
    pub max_shift: f32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            channels: 3,
            height: 32,
            width: 32,
            train_per_class: 500,
            test_per_class: 100,
            modes_per_class: 3,
            blobs_per_mode: 2,
            max_shift: 4.0,
            noise: 0.08,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f32,
    cy: f32,
    inv_two_sigma2: f32,
    color: Vec<f32>,
}

#[derive(Clone, Debug)]
struct Prototype {
    blobs: Vec<Blob>,
    kx: f32,
    ky: f32,
    phase: f32,
    grating: Vec<f32>,
}

fn random_blob(rng: &mut StreamRng, spec: &SyntheticSpec) -> Blob {
    let sigma: f32 = rng.random_range(1.5..4.0);
    Blob {
        cx: rng.random_range(0.2..0.8) * spec.width as f32,
        cy: rng.random_range(0.2..0.8) * spec.height as f32,
        inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
        color: (0..spec.channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

impl Prototype {
    fn random(rng: &mut StreamRng, spec: &SyntheticSpec) -> Self {
        let freq: f32 = rng.random_range(0.25..0.9);
        let angle: f32 = rng.random_range(0.0..core::f32::consts::PI);
        Prototype {
            blobs: (0..spec.blobs_per_mode).map(|_| random_blob(rng, spec)).collect(),
            kx: freq * libm::cosf(angle),
            ky: freq * libm::sinf(angle),
            phase: rng.random_range(0.0..core::f32::consts::TAU),
            grating: (0..spec.channels).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }
}

fn blob_value(b: &Blob, x: f32, y: f32) -> f32 {
    let (dx, dy) = (x - b.cx, y - b.cy);
    libm::expf(-(dx * dx + dy * dy) * b.inv_two_sigma2)
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.channels == 0 || self.height == 0 || self.width == 0 || self.modes_per_class == 0 {
            return Err(Error::invalid("synthetic corpus needs ≥ 2 classes, ≥ 1 mode and non-empty images"));
        }
        if !(self.noise >= 0.0) || !(self.max_shift >= 0.0) {
            return Err(Error::invalid("noise and shift must be non-negative"));
        }
        Ok(())
    }

    /// `(train, test)` splits drawn from the same prototypes.
    pub fn generate(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        self.validate()?;
        let mut proto_rng = rng::stream(self.seed, &[rng::TAG_DATA, 0]);
        let protos: Vec<Vec<Prototype>> = (0..self.num_classes)
            .map(|_| (0..self.modes_per_class).map(|_| Prototype::random(&mut proto_rng, self)).collect())
            .collect();
        let train = self.split(&protos, self.train_per_class, 1)?;
        let test = self.split(&protos, self.test_per_class, 2)?;
        Ok((train, test))
    }

    fn split(&self, protos: &[Vec<Prototype>], per_class: usize, tag: u64) -> Result<LabeledDataset> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let n = per_class * self.num_classes;
        let mut data = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        let noise = Normal::new(0.0f32, self.noise.max(f32::MIN_POSITIVE)).map_err(|e| Error::invalid(format!("{e}")))?;
        for i in 0..per_class {
            for (class, modes) in protos.iter().enumerate() {
                let mut r = rng::stream(self.seed, &[rng::TAG_DATA, tag, class as u64, i as u64]);
                let proto = &modes[r.random_range(0..modes.len())];
                let amp: f32 = r.random_range(0.7..1.3);
                let (sx, sy): (f32, f32) = if self.max_shift > 0.0 {
                    (r.random_range(-self.max_shift..=self.max_shift), r.random_range(-self.max_shift..=self.max_shift))
                } else {
                    (0.0, 0.0)
                };
                let distractor = random_blob(&mut r, self);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let (px, py) = (x as f32 - sx, y as f32 - sy);
                            let mut v: f32 = proto.blobs.iter().map(|b| b.color[ch] * blob_value(b, px, py)).sum();
                            v += proto.grating[ch] * libm::sinf(proto.kx * px + proto.ky * py + proto.phase);
                            v = amp * v + 0.6 * distractor.color[ch] * blob_value(&distractor, x as f32, y as f32);
                            if self.noise > 0.0 {
                                v += noise.sample(&mut r) / 0.25;
                            }
                            data.push((0.5 + 0.25 * v).clamp(0.0, 1.0));
                        }
                    }
                }
                labels.push(class);
            }
        }
        LabeledDataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, self.num_classes)
    }
}
