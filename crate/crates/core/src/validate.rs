//! Student training from replayed soft labels, and top-1 evaluation.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::mixed_targets;
use crate::classwise_bn::StatsMode;
use crate::data::LabeledDataset;
use crate::digest::Digest32;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::labelpool::{sample_training_stream, LabelPool};
use crate::nn::{Model, NetworkSpec};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::relabel::{data_checksum, generate_epoch, replay_batch, LabelStore, RelabelConfig, SoftLabelBatch};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KdLoss {
    /// `KL(softmax(soft/T) ‖ softmax(student/T))`, scaled by `T²`.
    Kl { temperature: f32 },
    /// `MSE(student, soft) + γ · CE(student, hard)`.
    MseGt { gamma: f32 },
}

impl Default for KdLoss {
    fn default() -> Self {
        KdLoss::Kl { temperature: 1.0 }
    }
}

/// Builds the distillation loss on `logits`. `hard` holds one target row per
/// sample (one-hot or λ-mixed).
pub fn kd_loss_graph(g: &mut Graph<f32>, logits: Var, soft: &[f32], hard: &[f32], kind: KdLoss) -> Result<Var> {
    match kind {
        KdLoss::Kl { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::invalid(format!("temperature {temperature} must be positive")));
            }
            g.kl_div(logits, soft, temperature)
        }
        KdLoss::MseGt { gamma } => {
            let mse = g.mse(logits, soft)?;
            if gamma == 0.0 {
                return Ok(mse);
            }
            let ce = g.soft_cross_entropy(logits, hard)?;
            let ce = g.scale(ce, gamma);
            g.add(mse, ce)
        }
    }
}

/// Scalar value of the distillation loss for logits `[N, K]`.
pub fn kd_loss(student: &Tensor<f32>, soft: &[f32], hard_labels: &[usize], kind: KdLoss) -> Result<f32> {
    let k = student.shape().get(1).copied().unwrap_or(0);
    let mut hard = alloc::vec![0.0f32; student.numel()];
    for (i, &y) in hard_labels.iter().enumerate() {
        if y >= k {
            return Err(Error::ClassOutOfRange { class: y, num_classes: k });
        }
        if i * k + y >= hard.len() {
            return Err(Error::shape("kd_loss", format!("{} labels for logits {:?}", hard_labels.len(), student.shape())));
        }
        hard[i * k + y] = 1.0;
    }
    let mut g = Graph::<f32>::new();
    let z = g.constant(student.clone());
    let loss = kd_loss_graph(&mut g, z, soft, &hard, kind)?;
    Ok(g.scalar(loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub epochs: usize,
    pub lr: f32,
    pub weight_decay: f64,
    pub loss: KdLoss,
    /// `None` uses the store's batches per epoch.
    pub batches_per_epoch: Option<usize>,
    /// Test accuracy every `eval_every` epochs (0: final epoch only).
    pub eval_every: usize,
    /// Input normalization; `None` takes channel statistics of the condensed set.
    pub input_norm: Option<(Vec<f32>, Vec<f32>)>,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig { epochs: 30, lr: 0.001, weight_decay: 0.01, loss: KdLoss::default(), batches_per_epoch: None, eval_every: 0, input_norm: None, seed: 0 }
    }
}

/// Where a student's soft labels come from.
#[derive(Clone, Copy, Debug)]
pub enum LabelSource<'a> {
    /// Records drawn from a pruned pool of a stored corpus.
    Pool { store: &'a LabelStore, pool: &'a LabelPool },
    /// Fresh augmentations and teacher logits for every training epoch.
    OnTheFly { teacher: &'a Model, relabel: &'a RelabelConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f32,
    pub test_accuracy: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub student: Model,
    pub config: StudentConfig,
    pub store_hash: Option<Digest32>,
    pub log: Vec<EpochLog>,
    /// Record ids in consumption order (empty for on-the-fly labels).
    pub consumed: Vec<u64>,
    pub final_accuracy: Option<f32>,
}

fn check_source(source: &LabelSource<'_>, condensed: &LabeledDataset) -> Result<()> {
    match source {
        LabelSource::Pool { store, pool } => {
            if pool.store_hash != store.header.hash() {
                return Err(Error::HashMismatch(format!("pool built for store {}, labels are {}", crate::digest::to_hex(&pool.store_hash), crate::digest::to_hex(&store.header.hash()))));
            }
            if store.header.data_checksum != data_checksum(condensed) {
                return Err(Error::HashMismatch("labels were generated for a different condensed set".into()));
            }
            if store.header.num_classes as usize != condensed.num_classes {
                return Err(Error::shape("train_student", "store and condensed set disagree on classes"));
            }
            pool.validate()?;
            if pool.total_records != store.header.num_records() || store.records.len() as u64 != store.header.num_records() {
                return Err(Error::invalid("pool and store disagree on record count"));
            }
            Ok(())
        }
        LabelSource::OnTheFly { teacher, .. } => {
            if teacher.num_classes() != condensed.num_classes {
                return Err(Error::shape("train_student", "teacher and condensed set disagree on classes"));
            }
            Ok(())
        }
    }
}

/// Trains a student with AdamW and cosine decay. Every batch replays a
/// record's augmentation on the condensed images and fits its logits.
pub fn train_student(condensed: &LabeledDataset, source: LabelSource<'_>, spec: NetworkSpec, cfg: &StudentConfig, test: Option<&LabeledDataset>) -> Result<TrainRun> {
    check_source(&source, condensed)?;
    if spec.input != condensed.sample_shape() || spec.num_classes != condensed.num_classes {
        return Err(Error::shape("train_student", "student spec does not match the condensed set"));
    }
    let mut student = Model::new(spec, rng::derive_seed(cfg.seed, &[rng::TAG_INIT]))?;
    let (mean, std) = match &cfg.input_norm {
        Some(n) => n.clone(),
        None => condensed.channel_stats(),
    };
    student.input_mean = mean;
    student.input_std = std;
    let k = condensed.num_classes;

    let bpe = match (cfg.batches_per_epoch, &source) {
        (Some(b), _) => b,
        (None, LabelSource::Pool { store, .. }) => store.header.batches_per_epoch as usize,
        (None, LabelSource::OnTheFly { relabel, .. }) => condensed.len() / relabel.batch_size.max(1),
    };
    let (stream, store_hash) = match &source {
        LabelSource::Pool { store, pool } => (sample_training_stream(pool, cfg.epochs, bpe, rng::derive_seed(cfg.seed, &[rng::TAG_VALIDATE]))?, Some(store.header.hash())),
        LabelSource::OnTheFly { .. } => (Vec::new(), None),
    };

    let total = cfg.epochs * bpe;
    let mut opt = Adam::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let fresh: Vec<SoftLabelBatch> = match &source {
            LabelSource::OnTheFly { teacher, relabel } => generate_epoch(teacher, condensed, relabel, epoch)?,
            LabelSource::Pool { .. } => Vec::new(),
        };
        let mut epoch_loss = 0.0f64;
        for b in 0..bpe {
            let record = match &source {
                LabelSource::Pool { store, .. } => &store.records[stream[epoch * bpe + b] as usize],
                LabelSource::OnTheFly { .. } => fresh.get(b % fresh.len().max(1)).ok_or_else(|| Error::invalid("condensed set cannot fill one batch"))?,
            };
            let (x, labels) = replay_batch(record, condensed)?;
            let soft = record.logits_f32();
            let hard = mixed_targets(&record.aug, &labels, k)?;
            let lr = cosine_lr(cfg.lr, step, total);
            let loss = student
                .train_step(&student.normalize(&x), &mut opt, lr, |g, fp| kd_loss_graph(g, fp.logits, &soft, &hard, cfg.loss))
                .map_err(|e| match e {
                    Error::NonFinite { context } => Error::NonFinite { context: format!("{context} at epoch {epoch}, batch {b}") },
                    e => e,
                })?;
            epoch_loss += loss as f64;
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        let due = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let test_accuracy = match test {
            Some(t) if due => Some(evaluate(&student, t, StatsMode::Global)?),
            _ => None,
        };
        log.push(EpochLog { epoch, loss: (epoch_loss / bpe.max(1) as f64) as f32, test_accuracy });
    }
    let final_accuracy = match (log.last(), test) {
        (Some(l), _) => l.test_accuracy,
        (None, Some(t)) => Some(evaluate(&student, t, StatsMode::Global)?),
        (None, None) => None,
    };
    Ok(TrainRun { student, config: cfg.clone(), store_hash, log, consumed: stream, final_accuracy })
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate(model: &Model, data: &LabeledDataset, stats: StatsMode) -> Result<f32> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let logits = model.logits(&model.normalize(&data.images), stats)?;
    let k = model.num_classes();
    let hits = logits.data().chunks(k).zip(&data.labels).filter(|(row, &y)| argmax(row) == y).count();
    Ok(hits as f32 / data.len() as f32)
}

/// Index of the largest value; the first one on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
