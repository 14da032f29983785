//! Within-class feature similarity and MMD between feature sets.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `[n × dim]` embeddings with class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::shape("FeatureSet", format!("{} values for {} rows of {dim}", features.len(), labels.len())));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("features"));
        }
        Ok(FeatureSet { features, dim, labels })
    }

    pub fn from_f32(features: &[f32], dim: usize, labels: Vec<usize>) -> Result<Self> {
        Self::new(features.iter().map(|&v| v as f64).collect(), dim, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCosine {
    pub class: usize,
    pub samples: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub per_class: Vec<ClassCosine>,
    pub mean: f64,
    pub std: f64,
    pub warnings: Vec<String>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean cosine similarity over unordered same-class pairs, per class, then
/// mean and population std across classes. Classes with fewer than two
/// samples are skipped with a warning.
pub fn within_class_cosine(fs: &FeatureSet) -> Result<CosineReport> {
    let norms: Vec<f64> = (0..fs.len()).map(|i| dot(fs.row(i), fs.row(i))).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::invalid(format!("feature row {i} has zero norm")));
    }
    let classes = fs.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_class = Vec::new();
    let mut warnings = Vec::new();
    for c in 0..classes {
        let rows: Vec<usize> = (0..fs.len()).filter(|&i| fs.labels[i] == c).collect();
        if rows.len() < 2 {
            if !rows.is_empty() {
                warnings.push(format!("class {c} has {} sample; skipped", rows.len()));
            }
            continue;
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in rows.iter().enumerate() {
            for &j in &rows[a + 1..] {
                total += (dot(fs.row(i), fs.row(j)) / libm::sqrt(norms[i] * norms[j])).clamp(-1.0, 1.0);
                pairs += 1;
            }
        }
        per_class.push(ClassCosine { class: c, samples: rows.len(), mean: total / pairs as f64 });
    }
    if per_class.is_empty() {
        return Err(Error::invalid("no class has two samples"));
    }
    let n = per_class.len() as f64;
    let mean = per_class.iter().map(|c| c.mean).sum::<f64>() / n;
    let var = per_class.iter().map(|c| (c.mean - mean) * (c.mean - mean)).sum::<f64>() / n;
    Ok(CosineReport { per_class, mean, std: libm::sqrt(var), warnings })
}

/// Median pairwise Euclidean distance over the pooled rows of both sets.
pub fn median_bandwidth(a: &FeatureSet, b: &FeatureSet) -> f64 {
    let rows: Vec<&[f64]> = (0..a.len()).map(|i| a.row(i)).chain((0..b.len()).map(|i| b.row(i))).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(libm::sqrt(sq_dist(rows[i], rows[j])));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    let med = if d.len() % 2 == 0 { 0.5 * (d[m - 1] + d[m]) } else { d[m] };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// `k(x, y) = exp(−‖x − y‖² / (2σ²))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    libm::exp(-sq_dist(x, y) / (2.0 * sigma * sigma))
}

fn mean_kernel(a: &FeatureSet, b: &FeatureSet, sigma: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        for j in 0..b.len() {
            total += gaussian_kernel(a.row(i), b.row(j), sigma);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Biased MMD²: `K̂_TT + K̂_SS − 2K̂_TS`, every pair including self-pairs.
/// `sigma = None` picks the median pairwise distance of the pooled sets.
pub fn mmd_squared(real: &FeatureSet, syn: &FeatureSet, sigma: Option<f64>) -> Result<f64> {
    if real.is_empty() || syn.is_empty() {
        return Err(Error::invalid("MMD needs two nonempty sets"));
    }
    if real.dim != syn.dim {
        return Err(Error::shape("mmd_squared", format!("dims {} and {}", real.dim, syn.dim)));
    }
    let sigma = sigma.unwrap_or_else(|| median_bandwidth(real, syn));
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("bandwidth {sigma} must be positive")));
    }
    let v = mean_kernel(real, real, sigma) + mean_kernel(syn, syn, sigma) - 2.0 * mean_kernel(real, syn, sigma);
    Ok(v.max(0.0))
}
