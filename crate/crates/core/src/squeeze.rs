//! Teacher training and the per-class BatchNorm statistics pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, sample_augmentation, AugConfig, MixKind};
use crate::classwise_bn::{min_class_prob, required_updates, subset_moments, BoundInputs, StatsMode, StatsTarget, UpdateBound};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Model, NetworkSpec};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::rng;
use crate::validate::evaluate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Crop/flip augmentation during training; mixing is ignored.
    pub augment: Option<AugConfig>,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: 15,
            lr: 0.003,
            batch_size: 64,
            weight_decay: 0.0,
            augment: Some(AugConfig { crop_scale: (0.35, 1.0), mix: MixKind::None, ..AugConfig::default() }),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub model: Model,
    pub epoch_losses: Vec<f32>,
    pub train_accuracy: f32,
    pub test_accuracy: Option<f32>,
}

/// Trains `spec` on `train` with Adam and cross-entropy; BN layers run in
/// train mode and their global running statistics follow the batches.
pub fn train_teacher(train: &LabeledDataset, spec: NetworkSpec, cfg: &TeacherConfig, test: Option<&LabeledDataset>) -> Result<TeacherModel> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if train.sample_shape() != spec.input || train.num_classes != spec.num_classes {
        return Err(Error::shape("train_teacher", format!("data {:?}/{} vs network {:?}/{}", train.sample_shape(), train.num_classes, spec.input, spec.num_classes)));
    }
    let mut model = Model::new(spec, rng::derive_seed(cfg.seed, &[rng::TAG_INIT]))?;
    let (mean, std) = train.channel_stats();
    model.input_mean = mean;
    model.input_std = std;
    let mut opt = Adam::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let [_, h, w] = train.sample_shape();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng::stream(cfg.seed, &[rng::TAG_TRAIN, epoch as u64]);
        let batches = rng::epoch_batches(train.len(), cfg.batch_size, false, &mut order_rng);
        let mut acc = 0.0f64;
        for (bi, rows) in batches.iter().enumerate() {
            let (mut x, labels) = train.batch(rows)?;
            if let Some(aug) = &cfg.augment {
                let aug = AugConfig { mix: MixKind::None, ..aug.clone() };
                let mut ar = rng::stream(cfg.seed, &[rng::TAG_AUGMENT, epoch as u64, bi as u64]);
                let rec = sample_augmentation(&mut ar, rows.len(), h, w, &aug)?;
                x = apply_augmentation(&rec, &x)?;
            }
            let x = model.normalize(&x);
            let lr = cosine_lr(cfg.lr, step, total);
            let loss = model
                .train_step(&x, &mut opt, lr, |g, fp| g.cross_entropy(fp.logits, &labels))
                .map_err(|e| Error::NonFinite { context: format!("teacher epoch {epoch} batch {bi}: {e}") })?;
            acc += loss as f64 * rows.len() as f64;
            step += 1;
        }
        epoch_losses.push((acc / train.len() as f64) as f32);
    }
    let train_accuracy = evaluate(&model, train, StatsMode::Global)?;
    let test_accuracy = test.map(|t| evaluate(&model, t, StatsMode::Global)).transpose()?;
    Ok(TeacherModel { model, epoch_losses, train_accuracy, test_accuracy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub batch_size: usize,
    pub momentum: f32,
    pub epochs: usize,
    pub seed: u64,
    /// Parameters of the sufficiency check; `min_pc` and `batch_size` are filled from the data.
    pub failure_prob: f64,
    pub delta: f64,
    pub init_bound: f64,
    pub tolerance: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            batch_size: 32,
            momentum: 0.1,
            epochs: 1,
            seed: 0,
            failure_prob: 0.05,
            delta: 0.2,
            init_bound: 1.0,
            tolerance: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub batches: usize,
    /// Batches in which each class appeared (one class-row update per BN layer each).
    pub class_updates: Vec<u64>,
    /// Classes with no samples; their rows keep the copied global statistics.
    pub absent_classes: Vec<usize>,
    pub bound: Option<UpdateBound>,
    pub sufficient: bool,
    pub warnings: Vec<String>,
}

/// Bound check for an estimation pass over `data` at `cfg`.
pub fn estimation_bound(class_counts: &[usize], cfg: &EstimateConfig) -> Result<UpdateBound> {
    required_updates(&BoundInputs {
        failure_prob: cfg.failure_prob,
        delta: cfg.delta,
        momentum: cfg.momentum as f64,
        init_bound: cfg.init_bound,
        tolerance: cfg.tolerance,
        min_pc: min_class_prob(class_counts)?,
        batch_size: cfg.batch_size as u64,
    })
}

/// One (or more) passes of mixed shuffled batches through the frozen teacher.
///
/// Class rows start as copies of the global statistics. For every batch the
/// teacher runs in eval mode with global statistics; for each class present,
/// in ascending class order, the moments of that class's subset of every BN
/// input update the class row. Weights and global statistics are untouched.
pub fn estimate_class_stats(model: &mut Model, data: &LabeledDataset, cfg: &EstimateConfig) -> Result<EstimateReport> {
    if cfg.batch_size == 0 || data.is_empty() {
        return Err(Error::invalid("estimation needs a non-empty dataset and batch size ≥ 1"));
    }
    if !(cfg.momentum > 0.0 && cfg.momentum < 1.0) {
        return Err(Error::invalid(format!("momentum {} not in (0, 1)", cfg.momentum)));
    }
    let k = model.num_classes();
    if data.num_classes != k {
        return Err(Error::shape("estimate_class_stats", format!("{} data classes vs {k} model classes", data.num_classes)));
    }
    for state in &mut model.bn {
        state.init_classwise(k);
    }
    let counts = data.class_counts();
    let absent_classes: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    let mut warnings = Vec::new();
    let (bound, sufficient) = match estimation_bound(&counts, cfg) {
        Ok(b) => {
            let batches = data.len().div_ceil(cfg.batch_size) * cfg.epochs;
            let ok = batches as u64 >= b.n;
            if !ok {
                warnings.push(format!("{batches} batches < {} required for stable class statistics", b.n));
            }
            if b.convergence_vacuous {
                warnings.push(String::from("tolerance ≥ init bound: convergence term vacuous"));
            }
            (Some(b), ok)
        }
        Err(e) => {
            warnings.push(format!("bound not computed: {e}"));
            (None, false)
        }
    };
    if !absent_classes.is_empty() {
        warnings.push(format!("classes without samples keep global statistics: {absent_classes:?}"));
    }
    let mut class_updates = vec![0u64; k];
    let mut batches = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng::stream(cfg.seed, &[rng::TAG_ESTIMATE, epoch as u64]);
        for rows in rng::epoch_batches(data.len(), cfg.batch_size, false, &mut order_rng) {
            let (x, labels) = data.batch(&rows)?;
            let out = model.eval(&model.normalize(&x), StatsMode::Global, rows.len())?;
            for c in 0..k {
                let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                class_updates[c] += 1;
                for (state, input) in model.bn.iter_mut().zip(&out.bn_inputs) {
                    let (mean, var) = subset_moments(input, &members);
                    state.update_running_momentum(StatsTarget::Class(c), &mean, var.as_deref(), cfg.momentum)?;
                }
            }
            batches += 1;
        }
    }
    Ok(EstimateReport { batches, class_updates, absent_classes, bound, sufficient, warnings })
}

/// Bytes of a serialized class-statistics table, split into payload
/// `2 · num_classes · Σ channels · 4` and header (file header plus per-layer
/// channel count and global statistics).
pub fn class_stats_storage(num_classes: usize, bn_channels: &[usize]) -> (u64, u64) {
    let total: u64 = bn_channels.iter().map(|&c| c as u64).sum();
    let payload = 2 * num_classes as u64 * total * 4;
    let header = 16 + bn_channels.iter().map(|&c| 4 + 8 * c as u64).sum::<u64>();
    (payload, header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::tensor::Tensor;

    fn toy() -> (LabeledDataset, LabeledDataset) {
        SyntheticSpec { num_classes: 3, train_per_class: 30, test_per_class: 10, height: 8, width: 8, ..Default::default() }
            .generate()
            .unwrap()
    }

    fn spec() -> NetworkSpec {
        NetworkSpec::small_cnn([3, 8, 8], &[4], 3)
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let (train, _) = toy();
        let cfg = TeacherConfig { epochs: 0, ..Default::default() };
        let t = train_teacher(&train, spec(), &cfg, None).unwrap();
        assert!(t.epoch_losses.is_empty());
        let fresh = Model::new(spec(), rng::derive_seed(0, &[rng::TAG_INIT])).unwrap();
        assert_eq!(t.model.params, fresh.params);
    }

    #[test]
    fn training_is_deterministic() {
        let (train, _) = toy();
        let cfg = TeacherConfig { epochs: 2, ..Default::default() };
        let a = train_teacher(&train, spec(), &cfg, None).unwrap();
        let b = train_teacher(&train, spec(), &cfg, None).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn separable_two_class_set_is_learned() {
        // class 0 dark, class 1 bright: linearly separable on the mean pixel
        let n = 40;
        let mut r = rng::stream(3, &[]);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            for _ in 0..16 {
                let v: f32 = rand::Rng::random_range(&mut r, 0.0..0.3);
                data.push(if y == 0 { v } else { 0.7 + v });
            }
            labels.push(y);
        }
        let ds = LabeledDataset::new(Tensor::new(vec![n, 1, 4, 4], data).unwrap(), labels, 2).unwrap();
        let spec = NetworkSpec::small_cnn([1, 4, 4], &[2], 2);
        let cfg = TeacherConfig { epochs: 20, batch_size: 8, lr: 0.01, augment: None, ..Default::default() };
        let t = train_teacher(&ds, spec, &cfg, None).unwrap();
        assert!(t.train_accuracy >= 0.99, "{}", t.train_accuracy);
    }

    #[test]
    fn estimation_leaves_weights_and_global_stats_untouched() {
        let (train, _) = toy();
        let cfg = TeacherConfig { epochs: 1, ..Default::default() };
        let mut t = train_teacher(&train, spec(), &cfg, None).unwrap().model;
        let before = t.clone();
        let report = estimate_class_stats(&mut t, &train, &EstimateConfig { batch_size: 16, ..Default::default() }).unwrap();
        assert_eq!(t.params, before.params);
        for (a, b) in t.bn.iter().zip(&before.bn) {
            assert_eq!(a.global_rm, b.global_rm);
            assert_eq!(a.global_rv, b.global_rv);
            assert_eq!(a.classwise_rm.len(), 3 * a.channels);
        }
        assert_eq!(report.batches, 6);
        assert!(report.absent_classes.is_empty());
    }

    #[test]
    fn single_class_matches_global_estimate() {
        // With one class every batch updates the class row with the full-batch moments,
        // exactly what a global EMA over the same batches would do.
        let (train, _) = toy();
        let rows = train.class_indices(0);
        let mut one = train.subset(&rows).unwrap();
        one.labels.iter_mut().for_each(|y| *y = 0);
        let mut model = train_teacher(&train, spec(), &TeacherConfig { epochs: 1, ..Default::default() }, None).unwrap().model;
        let cfg = EstimateConfig { batch_size: 8, ..Default::default() };
        // global replay over the same batch order
        let mut global = model.bn.clone();
        for s in &mut global {
            s.init_classwise(3);
            s.global_rm = s.class_rm(0).to_vec();
            s.global_rv = s.class_rv(0).to_vec();
        }
        let mut order = rng::stream(cfg.seed, &[rng::TAG_ESTIMATE, 0]);
        for b in rng::epoch_batches(one.len(), 8, false, &mut order) {
            let (x, _) = one.batch(&b).unwrap();
            let out = model.eval(&model.normalize(&x), StatsMode::Global, 64).unwrap();
            for (s, inp) in global.iter_mut().zip(&out.bn_inputs) {
                let all: Vec<usize> = (0..b.len()).collect();
                let (m, v) = subset_moments(inp, &all);
                s.update_running(StatsTarget::Global, &m, v.as_deref()).unwrap();
            }
        }
        let one3 = LabeledDataset::new(one.images.clone(), one.labels.clone(), 3).unwrap();
        let report = estimate_class_stats(&mut model, &one3, &cfg).unwrap();
        assert_eq!(report.absent_classes, vec![1, 2]);
        for (s, g) in model.bn.iter().zip(&global) {
            for (a, b) in s.class_rm(0).iter().zip(&g.global_rm) {
                assert!((a - b).abs() < 1e-5);
            }
            // absent classes keep the global copy
            assert_eq!(s.class_rm(1), &s.global_rm[..]);
        }
    }

    #[test]
    fn class_appearances_follow_q() {
        // 4 classes with probabilities (0.1, 0.2, 0.3, 0.4), batch 4: a class shows up
        // in a fraction 1 − (1 − p)^4 of batches. χ² over the four classes.
        let counts = [100usize, 200, 300, 400];
        let mut labels = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            labels.extend(core::iter::repeat(c).take(n));
        }
        let n = labels.len();
        let ds = LabeledDataset::new(Tensor::zeros(&[n, 1, 2, 2]), labels, 4).unwrap();
        let spec = NetworkSpec::small_cnn([1, 2, 2], &[1], 4);
        let mut model = Model::new(spec, 0).unwrap();
        let mut total = vec![0u64; 4];
        let mut batches = 0usize;
        for seed in 0..4 {
            let r = estimate_class_stats(&mut model, &ds, &EstimateConfig { batch_size: 4, seed, ..Default::default() }).unwrap();
            for (t, u) in total.iter_mut().zip(&r.class_updates) {
                *t += u;
            }
            batches += r.batches;
        }
        let mut chi2 = 0.0;
        for (c, &obs) in total.iter().enumerate() {
            let p = counts[c] as f64 / n as f64;
            let expect = batches as f64 * (1.0 - libm::pow(1.0 - p, 4.0));
            chi2 += (obs as f64 - expect) * (obs as f64 - expect) / expect;
        }
        // sampling without replacement only tightens the counts; 13.28 is the 1% point for 4 dof
        assert!(chi2 < 13.28, "chi2 = {chi2}, {total:?}");
    }

    #[test]
    fn storage_formula() {
        assert_eq!(class_stats_storage(10, &[8, 16]), (1920, 16 + 4 + 64 + 4 + 128));
        assert_eq!(class_stats_storage(0, &[8]).0, 0);
    }
}
