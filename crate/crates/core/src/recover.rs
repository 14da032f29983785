//! Pixel-space synthesis of the condensed dataset by inverting the teacher.
//!
//! The objective is cross-entropy toward the target class, computed with the
//! global BN statistics, plus `α` times the BN matching loss
//! `Σ_l ‖μ_l − RM_l‖₂ + ‖σ²_l − RV_l‖₂`. Baseline mode mixes one image of
//! every class per batch and matches global statistics; LPLD mode optimizes
//! the `ipc` images of one class together and matches that class's statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classwise_bn::StatsMode;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{forward_graph, Mode, Model};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoverMode {
    Baseline,
    Lpld,
}

impl RecoverMode {
    pub fn code(self) -> u8 {
        match self {
            RecoverMode::Baseline => 0,
            RecoverMode::Lpld => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoverConfig {
    pub ipc: usize,
    pub iterations: usize,
    pub image_lr: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f32,
    pub mode: RecoverMode,
    pub seed: u64,
}

impl Default for RecoverConfig {
    fn default() -> Self {
        RecoverConfig { ipc: 10, iterations: 400, image_lr: 0.25, beta1: 0.5, beta2: 0.9, alpha: 0.01, mode: RecoverMode::Lpld, seed: 0 }
    }
}

impl RecoverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ipc == 0 || self.iterations == 0 {
            return Err(Error::invalid("ipc and iterations must be at least 1"));
        }
        if !(self.alpha >= 0.0) || !(self.image_lr > 0.0) {
            return Err(Error::invalid("alpha must be ≥ 0 and the image learning rate positive"));
        }
        Ok(())
    }
}

/// Synthesized images in `[0, 1]`, quantized to multiples of 1/255 for lossless export.
#[derive(Clone, Debug, PartialEq)]
pub struct CondensedDataset {
    /// `[num_classes · ipc, C, H, W]`, grouped by class.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ipc: usize,
    pub num_classes: usize,
    pub mode: RecoverMode,
}

impl CondensedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_dataset(&self) -> Result<crate::data::LabeledDataset> {
        crate::data::LabeledDataset::new(self.images.clone(), self.labels.clone(), self.num_classes)
    }

    /// Checks the exactly-`ipc`-per-class, class-grouped layout.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.num_classes * self.ipc || self.images.batch() != self.labels.len() {
            return Err(Error::shape("condensed dataset", format!("{} labels for {} classes × {} ipc", self.labels.len(), self.num_classes, self.ipc)));
        }
        if self.labels.iter().enumerate().any(|(i, &y)| y != i / self.ipc) {
            return Err(Error::invalid("condensed images must be grouped by class"));
        }
        if !self.images.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("condensed pixels must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Optimization trace of one synthesis batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLog {
    /// Class for LPLD groups; batch index for baseline groups.
    pub group: usize,
    pub losses: Vec<f32>,
    pub initial_ce: f32,
    pub final_ce: f32,
    pub initial_bn: f32,
    pub final_bn: f32,
}

/// `Σ_l ‖μ_l − RM_l‖₂ + ‖σ²_l − RV_l‖₂` over aligned layer lists.
pub fn bn_match_loss(batch_stats: &[(Vec<f32>, Vec<f32>)], targets: &[(Vec<f32>, Vec<f32>)]) -> Result<f64> {
    if batch_stats.len() != targets.len() {
        return Err(Error::shape("bn_match_loss", format!("{} layers vs {} targets", batch_stats.len(), targets.len())));
    }
    let norm = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64) * (x as f64 - y as f64)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for ((m, v), (rm, rv)) in batch_stats.iter().zip(targets) {
        if m.len() != rm.len() || v.len() != rv.len() {
            return Err(Error::shape("bn_match_loss", "channel counts differ"));
        }
        total += norm(m, rm) + norm(v, rv);
    }
    Ok(total)
}

/// Matching targets of one group.
fn targets(teacher: &Model, mode: RecoverMode, class: usize) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    teacher
        .bn
        .iter()
        .map(|s| {
            let stats = match mode {
                RecoverMode::Baseline => StatsMode::Global,
                RecoverMode::Lpld => StatsMode::Classwise(class),
            };
            s.running(stats).map(|(m, v)| (m.to_vec(), v.to_vec()))
        })
        .collect()
}

/// CE, BN loss and the pixel gradient at `x` (normalized pixels).
fn objective(teacher: &Model, x: &Tensor<f32>, labels: &[usize], tg: &[(Vec<f32>, Vec<f32>)], alpha: f32, grad: bool) -> Result<(f32, f32, Option<Tensor<f32>>)> {
    let mut g = Graph::<f32>::new();
    let params = teacher.params.register(&mut g, false);
    let xv = g.leaf(x.clone(), grad);
    // The CE logits always come from global statistics, whatever the target statistics.
    let fp = forward_graph(&mut g, &teacher.spec, &params, &teacher.bn, xv, Mode::Eval, StatsMode::Global)?;
    let ce = g.cross_entropy(fp.logits, labels)?;
    let mut bn = None;
    for (tap, (rm, rv)) in fp.taps.iter().zip(tg) {
        let term = g.moment_match(tap.moments, rm, rv)?;
        bn = Some(match bn {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let bn = bn.ok_or_else(|| Error::invalid("teacher has no BN layer"))?;
    let (ce_v, bn_v) = (g.scalar(ce), g.scalar(bn));
    if !grad {
        return Ok((ce_v, bn_v, None));
    }
    let weighted = g.scale(bn, alpha);
    let loss = g.add(ce, weighted)?;
    let mut grads = g.backward(loss)?;
    Ok((ce_v, bn_v, grads.take(xv)))
}

/// Optimizes one batch of images for `labels` against `tg`.
fn optimize_group(teacher: &Model, labels: &[usize], tg: &[(Vec<f32>, Vec<f32>)], cfg: &RecoverConfig, seed_path: &[u64], group: usize) -> Result<(Tensor<f32>, GroupLog)> {
    let [c, h, w] = teacher.spec.input;
    let n = labels.len();
    let mut r = rng::stream(cfg.seed, seed_path);
    let raw = Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| r.random::<f32>()).collect())?;
    let mut x = vec![teacher.normalize(&raw)];
    let mut opt = Adam::new(AdamConfig { beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8, weight_decay: 0.0 });
    let mut losses = Vec::with_capacity(cfg.iterations);
    let (mut initial_ce, mut initial_bn) = (0.0, 0.0);
    for it in 0..cfg.iterations {
        let (ce, bn, grad) = objective(teacher, &x[0], labels, tg, cfg.alpha, true)?;
        let loss = ce + cfg.alpha * bn;
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: format!("recover group {group}, iteration {it}") });
        }
        if it == 0 {
            initial_ce = ce;
            initial_bn = bn;
        }
        losses.push(loss);
        let grad = grad.ok_or(Error::NoGraph)?;
        opt.step(&mut x, &[grad], cfg.image_lr)
            .map_err(|e| Error::NonFinite { context: format!("recover group {group}, iteration {it}: {e}") })?;
    }
    let (final_ce, final_bn, _) = objective(teacher, &x[0], labels, tg, cfg.alpha, false)?;
    let mut out = teacher.denormalize(&x[0]);
    for v in out.data_mut() {
        *v = quantize_pixel(*v);
    }
    Ok((out, GroupLog { group, losses, initial_ce, final_ce, initial_bn, final_bn }))
}

/// Clamps to `[0, 1]` and rounds to the nearest multiple of 1/255.
pub fn quantize_pixel(v: f32) -> f32 {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    libm::roundf(v * 255.0) / 255.0
}

/// The `ipc` images of one class in LPLD mode; independent of every other class.
pub fn synthesize_class(teacher: &Model, cfg: &RecoverConfig, class: usize) -> Result<(Tensor<f32>, GroupLog)> {
    cfg.validate()?;
    if class >= teacher.num_classes() {
        return Err(Error::ClassOutOfRange { class, num_classes: teacher.num_classes() });
    }
    if !teacher.has_class_stats() {
        return Err(Error::MissingClassStats);
    }
    let tg = targets(teacher, RecoverMode::Lpld, class)?;
    optimize_group(teacher, &vec![class; cfg.ipc], &tg, cfg, &[rng::TAG_RECOVER, 1, class as u64], class)
}

/// Baseline batch `b`: one image of every class, global targets.
pub fn synthesize_baseline_batch(teacher: &Model, cfg: &RecoverConfig, b: usize) -> Result<(Tensor<f32>, GroupLog)> {
    cfg.validate()?;
    let tg = targets(teacher, RecoverMode::Baseline, 0)?;
    let labels: Vec<usize> = (0..teacher.num_classes()).collect();
    optimize_group(teacher, &labels, &tg, cfg, &[rng::TAG_RECOVER, 0, b as u64], b)
}

/// Assembles per-group outputs into a class-grouped condensed dataset.
pub fn assemble(teacher: &Model, cfg: &RecoverConfig, groups: Vec<Tensor<f32>>) -> Result<CondensedDataset> {
    let k = teacher.num_classes();
    let [c, h, w] = teacher.spec.input;
    let per = c * h * w;
    let mut data = vec![0.0f32; k * cfg.ipc * per];
    for (g, t) in groups.iter().enumerate() {
        for i in 0..t.batch() {
            let (class, slot) = match cfg.mode {
                RecoverMode::Lpld => (g, i),
                RecoverMode::Baseline => (i, g),
            };
            let dst = (class * cfg.ipc + slot) * per;
            data[dst..dst + per].copy_from_slice(t.row(i));
        }
    }
    let labels = (0..k * cfg.ipc).map(|i| i / cfg.ipc).collect();
    let ds = CondensedDataset { images: Tensor::new(vec![k * cfg.ipc, c, h, w], data)?, labels, ipc: cfg.ipc, num_classes: k, mode: cfg.mode };
    ds.validate()?;
    Ok(ds)
}

/// Runs every group sequentially.
pub fn synthesize(teacher: &Model, cfg: &RecoverConfig) -> Result<(CondensedDataset, Vec<GroupLog>)> {
    cfg.validate()?;
    let groups = match cfg.mode {
        RecoverMode::Lpld => teacher.num_classes(),
        RecoverMode::Baseline => cfg.ipc,
    };
    let mut images = Vec::with_capacity(groups);
    let mut logs = Vec::with_capacity(groups);
    for g in 0..groups {
        let (t, log) = match cfg.mode {
            RecoverMode::Lpld => synthesize_class(teacher, cfg, g)?,
            RecoverMode::Baseline => synthesize_baseline_batch(teacher, cfg, g)?,
        };
        images.push(t);
        logs.push(log);
    }
    Ok((assemble(teacher, cfg, images)?, logs))
}

/// Fraction of `window`-iteration windows over which the loss did not increase.
pub fn non_increasing_window_fraction(losses: &[f32], window: usize) -> f64 {
    if losses.len() <= window {
        return 1.0;
    }
    let n = losses.len() - window;
    let ok = (0..n).filter(|&t| losses[t + window] <= losses[t]).count();
    ok as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classwise_bn::StatsTarget;
    use crate::nn::NetworkSpec;

    fn teacher() -> Model {
        let spec = NetworkSpec::small_cnn([3, 8, 8], &[4, 4], 3);
        let mut m = Model::new(spec, 2).unwrap();
        for s in &mut m.bn {
            s.init_classwise(3);
            for c in 0..3 {
                let mean = vec![0.1 * c as f32; s.channels];
                let var = vec![0.5 + 0.2 * c as f32; s.channels];
                for _ in 0..30 {
                    s.update_running(StatsTarget::Class(c), &mean, Some(&var)).unwrap();
                }
            }
        }
        m
    }

    fn cfg(mode: RecoverMode) -> RecoverConfig {
        RecoverConfig { ipc: 2, iterations: 60, mode, seed: 4, ..Default::default() }
    }

    #[test]
    fn bn_loss_cases() {
        let s = vec![(vec![1.0f32], vec![1.0f32])];
        assert_eq!(bn_match_loss(&s, &s).unwrap(), 0.0);
        assert_eq!(bn_match_loss(&s, &[(vec![0.0], vec![1.0])]).unwrap(), 1.0);
    }

    #[test]
    fn bn_loss_matches_straightline_oracle() {
        let mut r = rng::stream(1, &[]);
        let mut layer = |c: usize| -> (Vec<f32>, Vec<f32>) { ((0..c).map(|_| r.random::<f32>()).collect(), (0..c).map(|_| r.random::<f32>()).collect()) };
        let stats: Vec<_> = [3, 5, 2].iter().map(|&c| layer(c)).collect();
        let tg: Vec<_> = [3, 5, 2].iter().map(|&c| layer(c)).collect();
        let mut want = 0.0f64;
        for l in 0..3 {
            let (mut a, mut b) = (0.0f64, 0.0f64);
            for j in 0..stats[l].0.len() {
                a += ((stats[l].0[j] - tg[l].0[j]) as f64).powi(2);
                b += ((stats[l].1[j] - tg[l].1[j]) as f64).powi(2);
            }
            want += a.sqrt() + b.sqrt();
        }
        assert!((bn_match_loss(&stats, &tg).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn lpld_requires_class_stats() {
        let m = Model::new(NetworkSpec::small_cnn([3, 8, 8], &[4], 3), 0).unwrap();
        assert!(matches!(synthesize(&m, &cfg(RecoverMode::Lpld)), Err(Error::MissingClassStats)));
        assert!(synthesize(&m, &cfg(RecoverMode::Baseline)).is_ok());
    }

    #[test]
    fn pure_ce_inversion_descends() {
        let m = teacher();
        for mode in [RecoverMode::Baseline, RecoverMode::Lpld] {
            let (_, logs) = synthesize(&m, &RecoverConfig { alpha: 0.0, ..cfg(mode) }).unwrap();
            for l in logs {
                assert!(l.final_ce < l.initial_ce, "{mode:?}: {} → {}", l.initial_ce, l.final_ce);
            }
        }
    }

    #[test]
    fn lpld_bn_loss_descends_per_class() {
        let m = teacher();
        let (ds, logs) = synthesize(&m, &RecoverConfig { alpha: 1.0, ..cfg(RecoverMode::Lpld) }).unwrap();
        assert_eq!(logs.len(), 3);
        for l in &logs {
            assert!(l.final_bn < l.initial_bn, "class {}: {} → {}", l.group, l.initial_bn, l.final_bn);
        }
        assert_eq!(ds.labels, vec![0, 0, 1, 1, 2, 2]);
        assert!(ds.images.data().iter().all(|&v| v == quantize_pixel(v)));
    }

    #[test]
    fn classes_are_independent() {
        let m = teacher();
        let c = cfg(RecoverMode::Lpld);
        let (ds, _) = synthesize(&m, &c).unwrap();
        let (alone, _) = synthesize_class(&m, &c, 2).unwrap();
        assert_eq!(alone.data(), &ds.images.data()[4 * 192..]);
    }

    #[test]
    fn baseline_batches_hold_every_class() {
        let m = teacher();
        let (ds, logs) = synthesize(&m, &cfg(RecoverMode::Baseline)).unwrap();
        assert_eq!(logs.len(), 2);
        ds.validate().unwrap();
        let (b1, _) = synthesize_baseline_batch(&m, &cfg(RecoverMode::Baseline), 1).unwrap();
        assert_eq!(b1.row(2), ds.images.row(5));
    }

    #[test]
    fn window_fraction() {
        assert_eq!(non_increasing_window_fraction(&[3.0, 2.0, 1.0, 0.5], 2), 1.0);
        assert_eq!(non_increasing_window_fraction(&[1.0, 2.0, 3.0, 0.5], 1), 1.0 / 3.0);
    }
}
