//! Pruned label pools over a [`LabelStore`].
//!
//! A pool keeps a subset of record ids, either whole source epochs or single
//! batches. Training draws its batches from the pool with replacement, so at
//! batch granularity one training epoch recombines batches from different
//! source epochs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::digest::Digest32;
use crate::error::{Error, Result};
use crate::graph::softmax_rows;
use crate::relabel::{record_bytes, LabelStore, StoreHeader, HEADER_BYTES};
use crate::rng;
use crate::validate::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Epoch,
    Batch,
}

impl Granularity {
    pub fn code(self) -> u8 {
        match self {
            Granularity::Epoch => 0,
            Granularity::Batch => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Granularity::Epoch),
            1 => Ok(Granularity::Batch),
            _ => Err(Error::invalid(format!("unknown granularity {c}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "epoch" => Ok(Granularity::Epoch),
            "batch" => Ok(Granularity::Batch),
            _ => Err(Error::invalid(format!("unknown granularity {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPool {
    pub store_hash: Digest32,
    pub granularity: Granularity,
    pub keep_ratio: f64,
    pub seed: u64,
    pub batches_per_epoch: u32,
    pub total_records: u64,
    /// Kept record ids, ascending.
    pub kept: Vec<u64>,
}

impl LabelPool {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Whole store, nothing pruned.
    pub fn full(header: &StoreHeader, granularity: Granularity) -> Self {
        LabelPool {
            store_hash: header.hash(),
            granularity,
            keep_ratio: 1.0,
            seed: 0,
            batches_per_epoch: header.batches_per_epoch,
            total_records: header.num_records(),
            kept: (0..header.num_records()).collect(),
        }
    }

    /// `total / kept`; the paper's `r×`.
    pub fn compression(&self) -> f64 {
        self.total_records as f64 / self.kept.len() as f64
    }

    pub fn contains(&self, id: u64) -> bool {
        self.kept.binary_search(&id).is_ok()
    }

    /// Ids unique, ascending and within the store.
    pub fn validate(&self) -> Result<()> {
        if self.kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("pool ids must be unique and ascending"));
        }
        if let Some(&last) = self.kept.last() {
            if last >= self.total_records {
                return Err(Error::IndexOutOfRange { what: "record", index: last as usize, len: self.total_records as usize });
            }
        }
        if self.granularity == Granularity::Epoch && self.batches_per_epoch > 0 {
            let bpe = self.batches_per_epoch as u64;
            for chunk in self.kept.chunks(bpe as usize) {
                let e = chunk[0] / bpe;
                if chunk.len() != bpe as usize || chunk.iter().enumerate().any(|(i, &id)| id != e * bpe + i as u64) {
                    return Err(Error::invalid("epoch pool must hold whole epochs"));
                }
            }
        }
        Ok(())
    }

    /// Kept whole epochs, for epoch granularity.
    pub fn kept_epochs(&self) -> Vec<u64> {
        let bpe = self.batches_per_epoch.max(1) as u64;
        let mut e: Vec<u64> = self.kept.iter().map(|&id| id / bpe).collect();
        e.dedup();
        e
    }
}

fn keep_count(total: u64, keep_ratio: f64) -> Result<u64> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(format!("keep ratio {keep_ratio} not in (0, 1]")));
    }
    let k = libm::round(keep_ratio * total as f64) as u64;
    if k == 0 {
        return Err(Error::EmptySelection(format!("keep ratio {keep_ratio} of {total} units keeps nothing")));
    }
    Ok(k.min(total))
}

/// Uniform sample without replacement of `round(keep_ratio · units)` epochs or batches.
pub fn prune_random(header: &StoreHeader, granularity: Granularity, keep_ratio: f64, seed: u64) -> Result<LabelPool> {
    let bpe = header.batches_per_epoch as u64;
    let units = match granularity {
        Granularity::Epoch => header.epochs as u64,
        Granularity::Batch => header.num_records(),
    };
    let k = keep_count(units, keep_ratio)?;
    let mut r = rng::stream(seed, &[rng::TAG_PRUNE, granularity.code() as u64]);
    let mut chosen: Vec<u64> = rng::permutation(units as usize, &mut r).into_iter().take(k as usize).map(|u| u as u64).collect();
    chosen.sort_unstable();
    let kept = match granularity {
        Granularity::Batch => chosen,
        Granularity::Epoch => chosen.iter().flat_map(|&e| (e * bpe)..((e + 1) * bpe)).collect(),
    };
    Ok(LabelPool { store_hash: header.hash(), granularity, keep_ratio, seed, batches_per_epoch: header.batches_per_epoch, total_records: header.num_records(), kept })
}

/// Batch-granularity random pruning restricted to `candidates` (a calibrated store).
/// The kept count is still `round(keep_ratio · total records)`.
pub fn prune_random_among(header: &StoreHeader, candidates: &[u64], keep_ratio: f64, seed: u64) -> Result<LabelPool> {
    let k = keep_count(header.num_records(), keep_ratio)? as usize;
    if k > candidates.len() {
        return Err(Error::EmptySelection(format!("{k} records requested, {} remain after calibration", candidates.len())));
    }
    let mut r = rng::stream(seed, &[rng::TAG_PRUNE, 2]);
    let mut kept: Vec<u64> = rng::permutation(candidates.len(), &mut r).into_iter().take(k).map(|i| candidates[i]).collect();
    kept.sort_unstable();
    kept.dedup();
    Ok(LabelPool { store_hash: header.hash(), granularity: Granularity::Batch, keep_ratio, seed, batches_per_epoch: header.batches_per_epoch, total_records: header.num_records(), kept })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Correct,
    Diff,
    DiffSigned,
    CutRatio,
    Confidence,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Correct, Metric::Diff, Metric::DiffSigned, Metric::CutRatio, Metric::Confidence];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Correct => "correct",
            Metric::Diff => "diff",
            Metric::DiffSigned => "diff_signed",
            Metric::CutRatio => "cut_ratio",
            Metric::Confidence => "confidence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "signed_diff" && *m == Metric::DiffSigned))
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    Easy,
    Hard,
    Uniform,
}

impl PruneMode {
    pub const ALL: [PruneMode; 3] = [PruneMode::Easy, PruneMode::Hard, PruneMode::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            PruneMode::Easy => "easy",
            PruneMode::Hard => "hard",
            PruneMode::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PruneMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::invalid(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub record: u64,
    pub metric: Metric,
    pub value: f64,
}

/// Largest and second largest entries of a row.
fn top2(row: &[f32]) -> (f32, f32) {
    let mut a = f32::NEG_INFINITY;
    let mut b = f32::NEG_INFINITY;
    for &v in row {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    (a, if row.len() > 1 { b } else { a })
}

/// Per-record scores from the stored logits. `image_labels` are the class ids
/// of the condensed images. Per-image quantities are averaged over the batch,
/// except `correct` (a count) and `cut_ratio` (one value per batch).
///
/// * `correct`: images whose stored argmax equals their own label.
/// * `diff`: `|top1 − top2|` of the logits.
/// * `diff_signed`: own-label logit minus the largest other logit (a margin).
/// * `cut_ratio`: the batch's λ.
/// * `confidence`: largest softmax probability.
pub fn score_labels(store: &LabelStore, image_labels: &[usize], metric: Metric) -> Result<Vec<LabelScore>> {
    let k = store.header.num_classes as usize;
    let mut out = Vec::with_capacity(store.records.len());
    for (id, rec) in store.records.iter().enumerate() {
        let logits = rec.logits_f32();
        let b = rec.batch_size();
        let label = |i: usize| -> Result<usize> {
            let idx = rec.image_indices[i] as usize;
            let y = *image_labels.get(idx).ok_or(Error::IndexOutOfRange { what: "image", index: idx, len: image_labels.len() })?;
            if y >= k {
                return Err(Error::ClassOutOfRange { class: y, num_classes: k });
            }
            Ok(y)
        };
        let value = match metric {
            Metric::Correct => {
                let mut hits = 0usize;
                for (i, row) in logits.chunks(k).enumerate() {
                    hits += (argmax(row) == label(i)?) as usize;
                }
                hits as f64
            }
            Metric::Diff => logits.chunks(k).map(|row| {
                let (a, b) = top2(row);
                (a - b).abs() as f64
            }).sum::<f64>() / b as f64,
            Metric::DiffSigned => {
                let mut total = 0.0f64;
                for (i, row) in logits.chunks(k).enumerate() {
                    let y = label(i)?;
                    let other = row.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &v)| v).fold(f32::NEG_INFINITY, f32::max);
                    total += if k > 1 { (row[y] - other) as f64 } else { 0.0 };
                }
                total / b as f64
            }
            Metric::CutRatio => rec.aug.lambda as f64,
            Metric::Confidence => {
                let p = softmax_rows(&logits, k, 1.0f32);
                p.chunks(k).map(|row| row.iter().copied().fold(0.0f32, f32::max) as f64).sum::<f64>() / b as f64
            }
        };
        out.push(LabelScore { record: id as u64, metric, value });
    }
    Ok(out)
}

/// Record ids sorted by ascending score, ties by ascending id.
fn ascending(scores: &[LabelScore]) -> Vec<u64> {
    let mut s: Vec<(f64, u64)> = scores.iter().map(|x| (x.value, x.record)).collect();
    s.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    s.into_iter().map(|(_, id)| id).collect()
}

/// Keeps the highest (easy), lowest (hard) or evenly spaced (uniform) scores,
/// ties broken by record id. Always batch granularity.
pub fn prune_by_metric(header: &StoreHeader, scores: &[LabelScore], mode: PruneMode, keep_ratio: f64) -> Result<LabelPool> {
    let total = header.num_records();
    if scores.len() as u64 != total {
        return Err(Error::invalid(format!("{} scores for {total} records", scores.len())));
    }
    let k = keep_count(total, keep_ratio)? as usize;
    let n = scores.len();
    let mut kept: Vec<u64> = match mode {
        PruneMode::Hard => ascending(scores).into_iter().take(k).collect(),
        PruneMode::Easy => {
            let mut s: Vec<(f64, u64)> = scores.iter().map(|x| (x.value, x.record)).collect();
            s.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            s.into_iter().take(k).map(|(_, id)| id).collect()
        }
        PruneMode::Uniform => {
            let order = ascending(scores);
            (0..k).map(|i| order[i * n / k]).collect()
        }
    };
    kept.sort_unstable();
    Ok(LabelPool { store_hash: header.hash(), granularity: Granularity::Batch, keep_ratio, seed: 0, batches_per_epoch: header.batches_per_epoch, total_records: total, kept })
}

/// Drops the `easy_trim` most confident and `hard_trim` least confident
/// records; returns the remaining ids ascending.
pub fn calibrate_pool(confidence: &[LabelScore], easy_trim: f64, hard_trim: f64) -> Result<Vec<u64>> {
    if !(easy_trim >= 0.0 && hard_trim >= 0.0 && easy_trim + hard_trim < 1.0) {
        return Err(Error::invalid(format!("trims ({easy_trim}, {hard_trim}) must be ≥ 0 with sum < 1")));
    }
    let n = confidence.len();
    let drop_easy = libm::floor(easy_trim * n as f64 + 1e-9) as usize;
    let drop_hard = libm::floor(hard_trim * n as f64 + 1e-9) as usize;
    if drop_easy + drop_hard >= n {
        return Err(Error::EmptySelection(format!("trims remove all {n} records")));
    }
    let order = ascending(confidence);
    let mut rest: Vec<u64> = order[drop_hard..n - drop_easy].to_vec();
    rest.sort_unstable();
    Ok(rest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKStrategy {
    /// Residual mass spread evenly over the classes not kept.
    Smoothing,
    /// Kept values rescaled to sum to one.
    Renorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLabel {
    pub indices: Vec<u16>,
    pub values: Vec<f32>,
}

/// Bytes per kept entry: a 2-byte value plus a 2-byte class index.
pub const TOPK_ENTRY_BYTES: usize = 4;

/// Top-`k` quantization of one logit row's softmax.
pub fn quantize_topk(logits: &[f32], k: usize) -> Result<QuantizedLabel> {
    let n = logits.len();
    if k == 0 || k > n || n > u16::MAX as usize + 1 {
        return Err(Error::invalid(format!("top-{k} of {n} classes")));
    }
    let p = softmax_rows(logits, n, 1.0f32);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(QuantizedLabel { indices: order.iter().map(|&i| i as u16).collect(), values: order.iter().map(|&i| p[i]).collect() })
}

/// Top-`k` quantization of every image in a record, with its stored size in bytes.
pub fn quantize_record(record: &crate::relabel::SoftLabelBatch, num_classes: usize, k: usize) -> Result<(Vec<QuantizedLabel>, usize)> {
    let logits = record.logits_f32();
    let q = logits.chunks(num_classes).map(|row| quantize_topk(row, k)).collect::<Result<Vec<_>>>()?;
    let bytes = q.len() * topk_bytes(k);
    Ok((q, bytes))
}

/// Probability vector rebuilt from a quantized label.
pub fn reconstruct_topk(q: &QuantizedLabel, num_classes: usize, strategy: TopKStrategy) -> Vec<f32> {
    let mut out = vec![0.0f32; num_classes];
    let kept: f64 = q.values.iter().map(|&v| v as f64).sum();
    match strategy {
        TopKStrategy::Renorm => {
            for (&i, &v) in q.indices.iter().zip(&q.values) {
                out[i as usize] = (v as f64 / kept) as f32;
            }
        }
        TopKStrategy::Smoothing => {
            let rest = num_classes - q.indices.len();
            let fill = if rest > 0 { ((1.0 - kept).max(0.0) / rest as f64) as f32 } else { 0.0 };
            out.iter_mut().for_each(|v| *v = fill);
            for (&i, &v) in q.indices.iter().zip(&q.values) {
                out[i as usize] = v;
            }
        }
    }
    out
}

/// Stored bytes of one top-`k` label (values and indices).
pub fn topk_bytes(k: usize) -> usize {
    k * TOPK_ENTRY_BYTES
}

/// Full-logit bytes over top-`k` bytes for `num_classes` classes: `N / (2k)`.
pub fn topk_compression(num_classes: usize, k: usize) -> f64 {
    (2 * num_classes) as f64 / topk_bytes(k) as f64
}

/// Record ids for `epochs` training epochs of `batches_per_epoch` batches.
///
/// Batch granularity draws every id uniformly with replacement from the
/// pool. Epoch granularity draws one kept source epoch per training epoch,
/// uniformly with replacement, and replays its batches in order.
pub fn sample_training_stream(pool: &LabelPool, epochs: usize, batches_per_epoch: usize, seed: u64) -> Result<Vec<u64>> {
    if pool.is_empty() {
        return Err(Error::EmptySelection(String::from("cannot sample from an empty pool")));
    }
    let mut out = Vec::with_capacity(epochs * batches_per_epoch);
    match pool.granularity {
        Granularity::Batch => {
            for e in 0..epochs {
                let mut r = rng::stream(seed, &[rng::TAG_STREAM, e as u64]);
                out.extend((0..batches_per_epoch).map(|_| pool.kept[r.random_range(0..pool.kept.len())]));
            }
        }
        Granularity::Epoch => {
            let kept = pool.kept_epochs();
            let bpe = pool.batches_per_epoch.max(1) as u64;
            for e in 0..epochs {
                let mut r = rng::stream(seed, &[rng::TAG_STREAM, e as u64]);
                let src = kept[r.random_range(0..kept.len())];
                out.extend((0..batches_per_epoch as u64).map(|b| src * bpe + b % bpe));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub image_bytes: u64,
    pub label_bytes: u64,
    pub ratio: f64,
    pub kept_records: u64,
    pub total_records: u64,
    pub compression: f64,
}

/// Fixed bytes of a label-store file: header, record count and checksum footer.
pub const STORE_OVERHEAD_BYTES: u64 = HEADER_BYTES as u64 + 8 + 32;

/// Size of a store file holding `records` records: overhead, index table and records.
pub fn store_file_bytes(header: &StoreHeader, records: u64) -> u64 {
    STORE_OVERHEAD_BYTES + records * (8 + header.record_bytes() as u64)
}

/// Storage of the labels a pool keeps against `image_bytes` of condensed images.
pub fn storage_report(header: &StoreHeader, kept_records: u64, image_bytes: u64) -> StorageReport {
    let label_bytes = store_file_bytes(header, kept_records);
    let total = header.num_records();
    StorageReport {
        image_bytes,
        label_bytes,
        ratio: label_bytes as f64 / image_bytes.max(1) as f64,
        kept_records,
        total_records: total,
        compression: if kept_records == 0 { f64::INFINITY } else { total as f64 / kept_records as f64 },
    }
}

/// Projected label bytes per condensed image for a store of `epochs` epochs
/// at the given batch size and class count (f16 logits plus metadata).
pub fn projected_label_bytes_per_image(num_classes: usize, epochs: usize, batch: usize) -> f64 {
    epochs as f64 * (record_bytes(batch, num_classes) + 8) as f64 / batch as f64
}
