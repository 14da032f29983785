//! The pipeline phases as plain functions over in-memory artifacts, shared by
//! the subcommands and the end-to-end runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lpld_core::digest::to_hex;
use lpld_core::diversity::{median_bandwidth, mmd_squared, within_class_cosine, CosineReport, FeatureSet};
use lpld_core::labelpool::{self, Granularity, LabelPool, Metric, PruneMode, StorageReport};
use lpld_core::recover::{self, CondensedDataset, GroupLog, RecoverConfig, RecoverMode};
use lpld_core::relabel::{self, LabelStore, RelabelConfig};
use lpld_core::squeeze::{self, EstimateConfig, EstimateReport, TeacherConfig};
use lpld_core::validate::{self, EpochLog, KdLoss, LabelSource, StudentConfig, TrainRun};
use lpld_core::{rng, LabeledDataset, Model, NetworkSpec, StatsMode, SyntheticSpec, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::images;
use crate::parallel::map_indexed;

/// Per-phase seeds derived from the global seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: u64,
    pub data: u64,
    pub teacher: u64,
    pub estimate: u64,
    pub recover: u64,
    pub relabel: u64,
    pub prune: u64,
    pub validate: u64,
}

impl Seeds {
    pub fn derive(global: u64) -> Self {
        let d = |tag| rng::derive_seed(global, &[tag]);
        Seeds {
            global,
            data: d(rng::TAG_DATA),
            teacher: d(rng::TAG_TRAIN),
            estimate: d(rng::TAG_ESTIMATE),
            recover: d(rng::TAG_RECOVER),
            relabel: d(rng::TAG_RELABEL),
            prune: d(rng::TAG_PRUNE),
            validate: d(rng::TAG_VALIDATE),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, u64> {
        [
            ("global", self.global),
            ("data", self.data),
            ("teacher", self.teacher),
            ("estimate", self.estimate),
            ("recover", self.recover),
            ("relabel", self.relabel),
            ("prune", self.prune),
            ("validate", self.validate),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// `synthetic` or an image folder (`train/` and optional `test/`, or class
/// subdirectories directly).
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Dir(PathBuf),
}

impl DataSource {
    pub fn parse(s: &str, synthetic: &SyntheticSpec) -> Self {
        if s == "synthetic" {
            DataSource::Synthetic(synthetic.clone())
        } else {
            DataSource::Dir(PathBuf::from(s))
        }
    }

    pub fn from_config(cfg: &PipelineConfig) -> Self {
        match &cfg.data.dir {
            Some(d) => DataSource::Dir(d.clone()),
            None => DataSource::Synthetic(cfg.data.synthetic.clone()),
        }
    }

    /// `(train, test)`.
    pub fn load(&self, data_seed: u64) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
        match self {
            DataSource::Synthetic(spec) => {
                let spec = SyntheticSpec { seed: rng::derive_seed(data_seed, &[spec.seed]), ..spec.clone() };
                let (train, test) = spec.generate()?;
                Ok((train, Some(test)))
            }
            DataSource::Dir(dir) => {
                let (tr, te) = (dir.join("train"), dir.join("test"));
                if tr.is_dir() {
                    let (train, names) = images::load_image_dir(&tr, None)?;
                    let test = if te.is_dir() {
                        let (test, tnames) = images::load_image_dir(&te, Some(train.sample_shape()[0]))?;
                        if tnames != names {
                            return Err(Error::format("image folder", "train and test class folders differ"));
                        }
                        Some(test)
                    } else {
                        None
                    };
                    Ok((train, test))
                } else {
                    Ok((images::load_image_dir(dir, None)?.0, None))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub net: NetworkSpec,
    pub parameters: usize,
    pub epoch_losses: Vec<f32>,
    pub train_accuracy: f32,
    pub test_accuracy: Option<f32>,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsStorage {
    pub num_classes: usize,
    pub bn_channels: Vec<usize>,
    pub payload_bytes: u64,
    pub header_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqueezeResult {
    pub teacher: TeacherSummary,
    pub estimate: EstimateReport,
    pub storage: StatsStorage,
}

/// Trains the teacher and estimates its class-wise statistics.
pub fn squeeze(train: &LabeledDataset, test: Option<&LabeledDataset>, spec: NetworkSpec, tcfg: &TeacherConfig, ecfg: &EstimateConfig) -> Result<(Model, SqueezeResult)> {
    let t = squeeze::train_teacher(train, spec, tcfg, test)?;
    let mut model = t.model;
    let estimate = squeeze::estimate_class_stats(&mut model, train, ecfg)?;
    let bn_channels = model.spec.bn_channels();
    let (payload_bytes, header_bytes) = squeeze::class_stats_storage(model.num_classes(), &bn_channels);
    let result = SqueezeResult {
        teacher: TeacherSummary {
            net: model.spec.clone(),
            parameters: model.params.numel(),
            epoch_losses: t.epoch_losses,
            train_accuracy: t.train_accuracy,
            test_accuracy: t.test_accuracy,
            fingerprint: to_hex(&model.fingerprint()),
        },
        estimate,
        storage: StatsStorage { num_classes: model.num_classes(), bn_channels, payload_bytes, header_bytes },
    };
    Ok((model, result))
}

pub fn teacher_config(cfg: &PipelineConfig, seed: u64) -> TeacherConfig {
    let t = &cfg.teacher;
    TeacherConfig {
        epochs: t.epochs,
        lr: t.lr,
        batch_size: t.batch_size,
        weight_decay: t.weight_decay,
        augment: if t.augment { TeacherConfig::default().augment } else { None },
        seed,
    }
}

pub fn estimate_config(cfg: &PipelineConfig, seed: u64) -> EstimateConfig {
    let s = &cfg.squeeze;
    EstimateConfig { batch_size: s.batch_size, momentum: s.momentum, epochs: s.epochs, seed, failure_prob: s.failure_prob, delta: s.delta, init_bound: s.init_bound, tolerance: s.tolerance }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: usize,
    pub initial_ce: f32,
    pub final_ce: f32,
    pub initial_bn: f32,
    pub final_bn: f32,
    /// Fraction of 50-iteration windows over which the loss did not rise.
    pub non_increasing_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoverResult {
    pub mode: RecoverMode,
    pub ipc: usize,
    pub iterations: usize,
    pub alpha: f32,
    pub groups: Vec<GroupSummary>,
}

pub fn recover_config(cfg: &PipelineConfig, seed: u64) -> RecoverConfig {
    let r = &cfg.recover;
    RecoverConfig { ipc: r.ipc, iterations: r.iterations, image_lr: r.image_lr, beta1: r.beta1, beta2: r.beta2, alpha: r.alpha, mode: r.mode, seed }
}

/// Synthesizes every group (class or baseline batch) on up to `threads` workers.
pub fn recover(teacher: &Model, cfg: &RecoverConfig, threads: usize) -> Result<(CondensedDataset, Vec<GroupLog>, RecoverResult)> {
    cfg.validate()?;
    let groups = match cfg.mode {
        RecoverMode::Lpld => teacher.num_classes(),
        RecoverMode::Baseline => cfg.ipc,
    };
    let out: Vec<(Tensor<f32>, GroupLog)> = map_indexed(groups, threads, |g| match cfg.mode {
        RecoverMode::Lpld => recover::synthesize_class(teacher, cfg, g),
        RecoverMode::Baseline => recover::synthesize_baseline_batch(teacher, cfg, g),
    })?;
    let (images, logs): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let ds = recover::assemble(teacher, cfg, images)?;
    let result = RecoverResult {
        mode: cfg.mode,
        ipc: cfg.ipc,
        iterations: cfg.iterations,
        alpha: cfg.alpha,
        groups: logs
            .iter()
            .map(|l| GroupSummary {
                group: l.group,
                initial_ce: l.initial_ce,
                final_ce: l.final_ce,
                initial_bn: l.initial_bn,
                final_bn: l.final_bn,
                non_increasing_fraction: recover::non_increasing_window_fraction(&l.losses, 50),
            })
            .collect(),
    };
    Ok((ds, logs, result))
}

pub fn loss_rows(logs: &[GroupLog]) -> Vec<Vec<String>> {
    logs.iter().flat_map(|l| l.losses.iter().enumerate().map(move |(i, v)| vec![l.group.to_string(), i.to_string(), v.to_string()])).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelResult {
    pub records: u64,
    pub epochs: u32,
    pub batches_per_epoch: u32,
    pub batch_size: u32,
    pub record_bytes: usize,
    pub augmentation_bytes: usize,
    pub logit_bytes: usize,
    pub storage: StorageReport,
}

pub fn relabel_config(cfg: &PipelineConfig, seed: u64) -> RelabelConfig {
    RelabelConfig { epochs: cfg.relabel.epochs, batch_size: cfg.relabel.batch_size, aug: cfg.relabel.aug.clone(), seed }
}

/// Generates the label store, one epoch per work unit.
pub fn relabel(teacher: &Model, condensed: &CondensedDataset, cfg: &RelabelConfig, threads: usize) -> Result<LabelStore> {
    let data = condensed.to_dataset()?;
    let header = relabel::store_header(teacher, &data, cfg, condensed.ipc)?;
    let epochs = map_indexed(cfg.epochs, threads, |e| relabel::generate_epoch(teacher, &data, cfg, e))?;
    let store = LabelStore { header, records: epochs.into_iter().flatten().collect() };
    let [_, h, w] = data.sample_shape();
    store.validate(Some((h, w)))?;
    Ok(store)
}

pub fn relabel_result(store: &LabelStore, image_bytes: u64) -> RelabelResult {
    let h = &store.header;
    let (b, k) = (h.batch_size as usize, h.num_classes as usize);
    RelabelResult {
        records: h.num_records(),
        epochs: h.epochs,
        batches_per_epoch: h.batches_per_epoch,
        batch_size: h.batch_size,
        record_bytes: h.record_bytes(),
        augmentation_bytes: relabel::augmentation_bytes(b),
        logit_bytes: relabel::logit_bytes(b, k),
        storage: labelpool::storage_report(h, h.num_records(), image_bytes),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Pruning factor r (keep 1/r).
    pub ratio: f64,
    pub granularity: Granularity,
    /// `None` prunes at random.
    pub metric: Option<Metric>,
    pub mode: PruneMode,
    pub calibrate: Option<(f64, f64)>,
    pub seed: u64,
}

impl PruneSpec {
    pub fn from_config(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        let p = &cfg.prune;
        Ok(PruneSpec {
            ratio: p.ratio,
            granularity: p.granularity,
            metric: if p.metric == "random" { None } else { Some(Metric::parse(&p.metric)?) },
            mode: p.mode,
            calibrate: p.calibrate,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub granularity: Granularity,
    pub metric: String,
    pub mode: Option<PruneMode>,
    pub calibrate: Option<(f64, f64)>,
    pub ratio: f64,
    pub keep_ratio: f64,
    pub kept: u64,
    pub total: u64,
    pub kept_epochs: usize,
    pub storage: StorageReport,
}

/// Class of every condensed image; the sets are grouped by class.
pub fn image_labels(store: &LabelStore) -> Vec<usize> {
    let ipc = store.header.ipc as usize;
    (0..store.header.num_classes as usize * ipc).map(|i| i / ipc).collect()
}

pub fn prune(store: &LabelStore, spec: &PruneSpec, image_bytes: u64) -> Result<(LabelPool, PruneResult)> {
    if !(spec.ratio >= 1.0) {
        return Err(Error::Config(format!("pruning ratio {} must be ≥ 1", spec.ratio)));
    }
    let keep = 1.0 / spec.ratio;
    let h = &store.header;
    let pool = match (spec.metric, spec.calibrate) {
        (Some(_), Some(_)) => return Err(Error::Config("calibration applies to random pruning only".into())),
        (Some(_), None) | (None, Some(_)) if spec.granularity == Granularity::Epoch => {
            return Err(Error::Config("metric-based and calibrated pruning select individual batches; use batch granularity".into()))
        }
        (Some(m), None) => labelpool::prune_by_metric(h, &labelpool::score_labels(store, &image_labels(store), m)?, spec.mode, keep)?,
        (None, Some((e, hard))) => {
            let conf = labelpool::score_labels(store, &image_labels(store), Metric::Confidence)?;
            let candidates = labelpool::calibrate_pool(&conf, e, hard)?;
            labelpool::prune_random_among(h, &candidates, keep, spec.seed)?
        }
        (None, None) => labelpool::prune_random(h, spec.granularity, keep, spec.seed)?,
    };
    let result = PruneResult {
        granularity: pool.granularity,
        metric: spec.metric.map_or("random", Metric::name).to_string(),
        mode: spec.metric.map(|_| spec.mode),
        calibrate: spec.calibrate,
        ratio: spec.ratio,
        keep_ratio: keep,
        kept: pool.len() as u64,
        total: pool.total_records,
        kept_epochs: pool.kept_epochs().len(),
        storage: labelpool::storage_report(h, pool.len() as u64, image_bytes),
    };
    Ok((pool, result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidateResult {
    pub student: NetworkSpec,
    pub loss: KdLoss,
    pub epochs: usize,
    pub final_accuracy: Option<f32>,
    pub log: Vec<EpochLog>,
    pub consumed: usize,
    pub distinct_records: usize,
    pub storage: StorageReport,
}

pub fn student_config(cfg: &PipelineConfig, seed: u64) -> StudentConfig {
    let v = &cfg.validate;
    StudentConfig { epochs: v.epochs, lr: v.lr, weight_decay: v.weight_decay, loss: v.loss, batches_per_epoch: None, eval_every: v.eval_every, input_norm: None, seed }
}

pub fn validate(condensed: &CondensedDataset, store: &LabelStore, pool: &LabelPool, spec: NetworkSpec, cfg: &StudentConfig, test: Option<&LabeledDataset>, image_bytes: u64) -> Result<(TrainRun, ValidateResult)> {
    if pool.store_hash != store.header.hash() {
        return Err(Error::Checksum { path: PathBuf::from("pool"), expected: to_hex(&store.header.hash()), found: to_hex(&pool.store_hash) });
    }
    let data = condensed.to_dataset()?;
    let run = validate::train_student(&data, LabelSource::Pool { store, pool }, spec.clone(), cfg, test)?;
    let mut distinct = run.consumed.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let result = ValidateResult {
        student: spec,
        loss: cfg.loss,
        epochs: cfg.epochs,
        final_accuracy: run.final_accuracy,
        log: run.log.clone(),
        consumed: run.consumed.len(),
        distinct_records: distinct.len(),
        storage: labelpool::storage_report(&store.header, pool.len() as u64, image_bytes),
    };
    Ok((run, result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeResult {
    pub synthetic: CosineReport,
    pub real: CosineReport,
    pub mmd2: f64,
    pub bandwidth: f64,
    pub synthetic_samples: usize,
    pub real_samples: usize,
    pub feature_dim: usize,
}

/// Penultimate teacher features of raw images.
pub fn features(teacher: &Model, data: &LabeledDataset) -> Result<FeatureSet> {
    let out = teacher.eval(&teacher.normalize(&data.images), StatsMode::Global, 256)?;
    let dim = out.features.row_len();
    Ok(FeatureSet::from_f32(out.features.data(), dim, data.labels.clone())?)
}

/// The first `per_class` samples of every class (all when 0).
pub fn per_class_subset(data: &LabeledDataset, per_class: usize) -> Result<LabeledDataset> {
    if per_class == 0 {
        return Ok(data.clone());
    }
    let mut rows: Vec<usize> = (0..data.num_classes).flat_map(|c| data.class_indices(c).into_iter().take(per_class)).collect();
    rows.sort_unstable();
    Ok(data.subset(&rows)?)
}

pub fn analyze(teacher: &Model, real: &LabeledDataset, syn: &LabeledDataset) -> Result<AnalyzeResult> {
    if real.num_classes != syn.num_classes || real.sample_shape() != syn.sample_shape() {
        return Err(Error::Config("real and synthetic images differ in shape or classes".into()));
    }
    let fr = features(teacher, real)?;
    let fs = features(teacher, syn)?;
    let bandwidth = median_bandwidth(&fr, &fs);
    Ok(AnalyzeResult {
        synthetic: within_class_cosine(&fs)?,
        real: within_class_cosine(&fr)?,
        mmd2: mmd_squared(&fr, &fs, Some(bandwidth))?,
        bandwidth,
        synthetic_samples: fs.len(),
        real_samples: fr.len(),
        feature_dim: fs.dim,
    })
}

pub fn cosine_rows(a: &AnalyzeResult) -> Vec<Vec<String>> {
    let real: BTreeMap<usize, f64> = a.real.per_class.iter().map(|c| (c.class, c.mean)).collect();
    a.synthetic
        .per_class
        .iter()
        .map(|c| vec![c.class.to_string(), c.samples.to_string(), c.mean.to_string(), real.get(&c.class).map(|v| v.to_string()).unwrap_or_default()])
        .collect()
}

pub fn epoch_rows(log: &[EpochLog]) -> Vec<Vec<String>> {
    log.iter().map(|e| vec![e.epoch.to_string(), e.loss.to_string(), e.test_accuracy.map(|a| a.to_string()).unwrap_or_default()]).collect()
}

/// Bytes of the exported condensed images (sum of the PNG file sizes).
pub fn condensed_image_bytes(dir: &Path) -> Result<u64> {
    let m = images::read_manifest(dir)?;
    m.samples.iter().try_fold(0u64, |acc, s| {
        let p = dir.join(&s.file);
        Ok(acc + std::fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len())
    })
}

