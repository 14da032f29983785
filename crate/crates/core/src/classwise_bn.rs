//! BatchNorm running statistics, global and per class.
//!
//! Every BN layer keeps the usual global running mean/variance and, once
//! estimated, one running mean/variance row per class. Both follow the same
//! exponential moving average
//!
//! ```text
//! RM ← (1 − ε)·RM + ε·μ      RV ← (1 − ε)·RV + ε·σ²
//! ```
//!
//! and the number of updates needed before every class row is trustworthy is
//! bounded by [`required_updates`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f32 = 0.1;
pub const DEFAULT_EPS: f32 = 1e-5;

/// Which running statistics normalize an evaluation-mode forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    Global,
    Classwise(usize),
}

/// Row addressed by a running-statistics update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsTarget {
    Global,
    Class(usize),
}

/// Running statistics of one BN layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnLayerState {
    pub channels: usize,
    pub global_rm: Vec<f32>,
    pub global_rv: Vec<f32>,
    pub num_classes: usize,
    /// `num_classes × channels`, row-major.
    pub classwise_rm: Vec<f32>,
    pub classwise_rv: Vec<f32>,
    /// Mean updates applied to each class row.
    pub class_updates: Vec<u64>,
    pub momentum: f32,
    pub eps: f32,
}

impl BnLayerState {
    /// Fresh state: RM = 0, RV = 1, no class rows.
    pub fn new(channels: usize, momentum: f32, eps: f32) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::invalid(format!("BN momentum {momentum} not in (0, 1)")));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("BN eps {eps} must be positive")));
        }
        Ok(BnLayerState {
            channels,
            global_rm: vec![0.0; channels],
            global_rv: vec![1.0; channels],
            num_classes: 0,
            classwise_rm: Vec::new(),
            classwise_rv: Vec::new(),
            class_updates: Vec::new(),
            momentum,
            eps,
        })
    }

    pub fn has_class_stats(&self) -> bool {
        self.num_classes > 0
    }

    /// Seeds every class row with a copy of the global statistics.
    pub fn init_classwise(&mut self, num_classes: usize) {
        self.num_classes = num_classes;
        self.classwise_rm = self.global_rm.repeat(num_classes);
        self.classwise_rv = self.global_rv.repeat(num_classes);
        self.class_updates = vec![0; num_classes];
    }

    pub fn class_rm(&self, c: usize) -> &[f32] {
        &self.classwise_rm[c * self.channels..(c + 1) * self.channels]
    }

    pub fn class_rv(&self, c: usize) -> &[f32] {
        &self.classwise_rv[c * self.channels..(c + 1) * self.channels]
    }

    /// Running statistics that normalize an eval pass under `stats`.
    pub fn running(&self, stats: StatsMode) -> Result<(&[f32], &[f32])> {
        match stats {
            StatsMode::Global => Ok((&self.global_rm, &self.global_rv)),
            StatsMode::Classwise(c) => {
                if !self.has_class_stats() {
                    return Err(Error::MissingClassStats);
                }
                if c >= self.num_classes {
                    return Err(Error::ClassOutOfRange { class: c, num_classes: self.num_classes });
                }
                Ok((self.class_rm(c), self.class_rv(c)))
            }
        }
    }

    /// Applies one EMA step to the addressed row. `var == None` updates the mean only.
    pub fn update_running(&mut self, target: StatsTarget, mean: &[f32], var: Option<&[f32]>) -> Result<()> {
        self.update_running_momentum(target, mean, var, self.momentum)
    }

    /// [`BnLayerState::update_running`] with an explicit momentum.
    pub fn update_running_momentum(&mut self, target: StatsTarget, mean: &[f32], var: Option<&[f32]>, momentum: f32) -> Result<()> {
        let c = self.channels;
        if mean.len() != c || var.is_some_and(|v| v.len() != c) {
            return Err(Error::shape("update_running", format!("{c} channels, got {} moments", mean.len())));
        }
        if let Some(v) = var {
            if v.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::invalid("batch variance must be non-negative"));
            }
        }
        let (rm, rv) = match target {
            StatsTarget::Global => (&mut self.global_rm[..], &mut self.global_rv[..]),
            StatsTarget::Class(k) => {
                if k >= self.num_classes {
                    return Err(Error::ClassOutOfRange { class: k, num_classes: self.num_classes });
                }
                self.class_updates[k] += 1;
                (&mut self.classwise_rm[k * c..(k + 1) * c], &mut self.classwise_rv[k * c..(k + 1) * c])
            }
        };
        ema(rm, mean, momentum);
        if let Some(v) = var {
            ema(rv, v, momentum);
        }
        Ok(())
    }
}

/// `running ← (1 − ε)·running + ε·observed`, elementwise.
pub fn ema(running: &mut [f32], observed: &[f32], momentum: f32) {
    for (r, &o) in running.iter_mut().zip(observed) {
        *r = (1.0 - momentum) * *r + momentum * o;
    }
}

/// Result of [`bn_apply`].
#[derive(Clone, Debug, PartialEq)]
pub struct BnOutput {
    pub y: Tensor<f32>,
    /// Batch moments; present in train mode.
    pub batch_mean: Option<Vec<f32>>,
    pub batch_var: Option<Vec<f32>>,
}

/// Reference BatchNorm transform outside the autodiff graph.
///
/// Train mode normalizes by the population moments over `(N × spatial)`;
/// eval mode normalizes by the running statistics selected by `stats`.
pub fn bn_apply(
    state: &BnLayerState,
    gamma: &[f32],
    beta: &[f32],
    x: &Tensor<f32>,
    train: bool,
    stats: StatsMode,
) -> Result<BnOutput> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != state.channels || gamma.len() != state.channels || beta.len() != state.channels {
        return Err(Error::shape("bn_apply", format!("input {shape:?} for {} channels", state.channels)));
    }
    let (n, c, s) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let (mean, var, batch) = if train {
        let rows: Vec<usize> = (0..n).collect();
        let (m, v) = subset_moments(x, &rows);
        let v = v.unwrap_or_else(|| vec![0.0; c]);
        (m.clone(), v.clone(), Some((m, v)))
    } else {
        let (rm, rv) = state.running(stats)?;
        (rm.to_vec(), rv.to_vec(), None)
    };
    let mut out = x.clone();
    let data = out.data_mut();
    for ch in 0..c {
        let scale = gamma[ch] / libm::sqrtf(var[ch] + state.eps);
        for i in 0..n {
            let base = (i * c + ch) * s;
            for v in &mut data[base..base + s] {
                *v = (*v - mean[ch]) * scale + beta[ch];
            }
        }
    }
    let (batch_mean, batch_var) = match batch {
        Some((m, v)) => (Some(m), Some(v)),
        None => (None, None),
    };
    Ok(BnOutput { y: out, batch_mean, batch_var })
}

/// Per-channel moments over the selected samples of an `[N, C, ...]` tensor.
///
/// Sums run in f64 over samples in the given order, spatial positions
/// innermost; the variance is the two-pass population variance. It is `None`
/// when fewer than two elements contribute.
pub fn subset_moments(x: &Tensor<f32>, rows: &[usize]) -> (Vec<f32>, Option<Vec<f32>>) {
    let shape = x.shape();
    let (c, s) = (shape[1], shape[2..].iter().product::<usize>());
    let data = x.data();
    let count = (rows.len() * s) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for &r in rows {
            let base = (r * c + ch) * s;
            for &v in &data[base..base + s] {
                acc += v as f64;
            }
        }
        let mu = acc / count;
        let mut sq = 0.0f64;
        for &r in rows {
            let base = (r * c + ch) * s;
            for &v in &data[base..base + s] {
                let d = v as f64 - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / count) as f32;
    }
    if rows.len() * s < 2 {
        (mean, None)
    } else {
        (mean, Some(var))
    }
}

/// Parameters of the update-count bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Total failure probability T.
    pub failure_prob: f64,
    /// Relative deviation δ of the per-class batch count.
    pub delta: f64,
    /// BN momentum ε.
    pub momentum: f64,
    /// Bound C on the initial deviation of a running statistic.
    pub init_bound: f64,
    /// Convergence tolerance τ.
    pub tolerance: f64,
    /// Smallest class probability min p_c.
    pub min_pc: f64,
    pub batch_size: u64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} not in (0, 1)")))
            }
        };
        open_unit("T", self.failure_prob)?;
        open_unit("delta", self.delta)?;
        open_unit("momentum", self.momentum)?;
        open_unit("min_pc", self.min_pc)?;
        if !(self.init_bound > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::invalid("C and tau must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Output of [`required_updates`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateBound {
    pub min_qc: f64,
    pub n_chernoff: f64,
    pub n_convergence: f64,
    /// Smallest integer satisfying both terms.
    pub n: u64,
    /// Set when τ ≥ C: the convergence term is vacuous and `n` comes from the Chernoff term alone.
    pub convergence_vacuous: bool,
}

/// Probability that a class of probability `min_pc` shows up in a batch of `batch_size` draws.
pub fn class_appearance_prob(min_pc: f64, batch_size: u64) -> f64 {
    // 1 − (1 − p)^B, via log1p/expm1 so tiny p keeps full precision.
    -libm::expm1(batch_size as f64 * libm::log1p(-min_pc))
}

/// Number of batches after which every class's running statistics lie within
/// τ of their target with probability at least 1 − T.
pub fn required_updates(inputs: &BoundInputs) -> Result<UpdateBound> {
    inputs.validate()?;
    let q = class_appearance_prob(inputs.min_pc, inputs.batch_size);
    let n_chernoff = -2.0 * libm::log(inputs.failure_prob / 2.0) / (inputs.delta * inputs.delta * q);
    let n_convergence = libm::log(inputs.init_bound / inputs.tolerance) / ((1.0 - inputs.delta) * inputs.momentum * q);
    let convergence_vacuous = n_convergence <= 0.0;
    let bound = if convergence_vacuous { n_chernoff } else { n_chernoff.max(n_convergence) };
    Ok(UpdateBound { min_qc: q, n_chernoff, n_convergence, n: libm::ceil(bound) as u64, convergence_vacuous })
}

/// Smallest class probability of a label histogram.
pub fn min_class_prob(class_counts: &[usize]) -> Result<f64> {
    let total: usize = class_counts.iter().sum();
    let min = class_counts.iter().copied().min().unwrap_or(0);
    if total == 0 || min == 0 {
        return Err(Error::invalid("every class needs at least one sample"));
    }
    Ok(min as f64 / total as f64)
}

/// Monte-Carlo check of the bound.
///
/// Each trial draws `n` batches of `batch_size` i.i.d. class labels from
/// `class_probs`. Every class starts at deviation `init_bound` from its
/// target, and each batch containing the class shrinks that deviation by
/// `1 − momentum`. Returns the fraction of trials in which all classes end
/// within `tolerance`.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_convergence(
    class_probs: &[f64],
    batch_size: usize,
    momentum: f64,
    init_bound: f64,
    tolerance: f64,
    n: u64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let total: f64 = class_probs.iter().sum();
    if class_probs.is_empty() || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("class probabilities sum to {total}, expected 1")));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be positive"));
    }
    let dist = WeightedIndex::new(class_probs).map_err(|e| Error::invalid(format!("class probabilities: {e}")))?;
    let k = class_probs.len();
    let mut successes = 0usize;
    let mut present = vec![false; k];
    let mut deviation = vec![0.0f64; k];
    for trial in 0..trials {
        let mut rng = rng::stream(seed, &[rng::TAG_MONTE_CARLO, trial as u64]);
        deviation.iter_mut().for_each(|d| *d = init_bound);
        for _ in 0..n {
            present.iter_mut().for_each(|p| *p = false);
            for _ in 0..batch_size {
                present[dist.sample(&mut rng)] = true;
            }
            for (d, &p) in deviation.iter_mut().zip(&present) {
                if p {
                    *d *= 1.0 - momentum;
                }
            }
        }
        if deviation.iter().all(|&d| d <= tolerance) {
            successes += 1;
        }
    }
    Ok(successes as f64 / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_inputs() -> BoundInputs {
        BoundInputs {
            failure_prob: 0.05,
            delta: 0.2,
            momentum: 0.1,
            init_bound: 1.0,
            tolerance: 0.01,
            min_pc: 732.0 / 1_281_167.0,
            batch_size: 256,
        }
    }

    #[test]
    fn appearance_prob_cases() {
        assert!((class_appearance_prob(732.0 / 1_281_167.0, 256) - 0.1361).abs() < 1e-3);
        assert!((class_appearance_prob(0.3, 1) - 0.3).abs() < 1e-15);
        assert!((class_appearance_prob(0.5, 2) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bound_on_imagenet_inputs() {
        let b = required_updates(&reference_inputs()).unwrap();
        assert!((b.n_chernoff - 1355.2).abs() < 0.5, "{}", b.n_chernoff);
        assert!((b.n_convergence - 423.08).abs() < 0.5, "{}", b.n_convergence);
        assert_eq!(b.n, 1356);
        assert!(!b.convergence_vacuous);
    }

    #[test]
    fn bound_is_minimal() {
        let b = required_updates(&reference_inputs()).unwrap();
        let below = (b.n - 1) as f64;
        assert!(below < b.n_chernoff || below < b.n_convergence);
        assert!(b.n as f64 >= b.n_chernoff && b.n as f64 >= b.n_convergence);
    }

    #[test]
    fn bound_monotone_in_delta_and_batch() {
        let base = required_updates(&reference_inputs()).unwrap();
        let wider = required_updates(&BoundInputs { delta: 0.5, ..reference_inputs() }).unwrap();
        assert!(wider.n_chernoff < base.n_chernoff);
        let bigger = required_updates(&BoundInputs { batch_size: 512, ..reference_inputs() }).unwrap();
        assert!(bigger.min_qc > base.min_qc);
        assert!(bigger.n_chernoff < base.n_chernoff && bigger.n_convergence < base.n_convergence);
    }

    #[test]
    fn tolerance_above_init_bound_flags_vacuous_term() {
        let b = required_updates(&BoundInputs { tolerance: 2.0, ..reference_inputs() }).unwrap();
        assert!(b.convergence_vacuous);
        assert_eq!(b.n, libm::ceil(b.n_chernoff) as u64);
    }

    #[test]
    fn bound_rejects_bad_inputs() {
        assert!(required_updates(&BoundInputs { failure_prob: 1.0, ..reference_inputs() }).is_err());
        assert!(required_updates(&BoundInputs { batch_size: 0, ..reference_inputs() }).is_err());
        assert!(required_updates(&BoundInputs { tolerance: 0.0, ..reference_inputs() }).is_err());
    }

    #[test]
    fn one_ema_step() {
        let mut s = BnLayerState::new(1, 0.1, DEFAULT_EPS).unwrap();
        s.update_running(StatsTarget::Global, &[1.0], Some(&[1.0])).unwrap();
        assert!((s.global_rm[0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn ema_closed_form_geometric_decay() {
        let eps = 0.1f64;
        let (mut rm, target, init) = (0.0f64, 1.0f64, 0.0f64);
        for n in 1..=200 {
            rm = (1.0 - eps) * rm + eps * target;
            let closed = (1.0 - eps).powi(n) * (init - target).abs();
            assert!(((rm - target).abs() - closed).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn class_rows_isolated_from_global_updates() {
        let mut s = BnLayerState::new(2, 0.1, DEFAULT_EPS).unwrap();
        s.init_classwise(3);
        let before = (s.classwise_rm.clone(), s.classwise_rv.clone());
        s.update_running(StatsTarget::Global, &[5.0, 5.0], Some(&[2.0, 2.0])).unwrap();
        assert_eq!((s.classwise_rm.clone(), s.classwise_rv.clone()), before);
        let global = (s.global_rm.clone(), s.global_rv.clone());
        s.update_running(StatsTarget::Class(1), &[3.0, 3.0], Some(&[4.0, 4.0])).unwrap();
        assert_eq!((s.global_rm.clone(), s.global_rv.clone()), global);
        assert_eq!(s.class_rm(0), &[0.0, 0.0]);
        assert_eq!(s.class_rm(2), &[0.0, 0.0]);
        assert!(s.class_rm(1)[0] > 0.0);
        assert_eq!(s.class_updates, vec![0, 1, 0]);
    }

    #[test]
    fn class_update_out_of_range() {
        let mut s = BnLayerState::new(1, 0.1, DEFAULT_EPS).unwrap();
        s.init_classwise(2);
        assert!(matches!(
            s.update_running(StatsTarget::Class(2), &[0.0], None),
            Err(Error::ClassOutOfRange { class: 2, num_classes: 2 })
        ));
        assert!(matches!(s.running(StatsMode::Classwise(5)), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn eval_identity_stats() {
        let s = BnLayerState::new(1, 0.1, DEFAULT_EPS).unwrap();
        let x = Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let out = bn_apply(&s, &[1.0], &[0.0], &x, false, StatsMode::Global).unwrap();
        for (y, x) in out.y.data().iter().zip(x.data()) {
            assert_eq!(*y, x * (1.0 / (1.0f32 + DEFAULT_EPS).sqrt()));
        }
        assert!(out.batch_mean.is_none());
    }

    #[test]
    fn train_two_samples_by_hand() {
        let s = BnLayerState::new(1, 0.1, DEFAULT_EPS).unwrap();
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let (gamma, beta) = (2.0f32, 0.5f32);
        let out = bn_apply(&s, &[gamma], &[beta], &x, true, StatsMode::Global).unwrap();
        assert_eq!(out.batch_mean.unwrap(), vec![2.0]);
        assert_eq!(out.batch_var.unwrap(), vec![1.0]);
        let inv = 1.0 / (1.0f32 + DEFAULT_EPS).sqrt();
        assert!((out.y.data()[0] - (-inv * gamma + beta)).abs() < 1e-6);
        assert!((out.y.data()[1] - (inv * gamma + beta)).abs() < 1e-6);
    }

    #[test]
    fn classwise_eval_matches_scalar_oracle() {
        // Two classes, 2 channels, spatial 2x1.
        let x = Tensor::new(vec![4, 2, 2, 1], vec![
            1.0, 2.0, 0.0, 4.0, // class 0
            3.0, 2.0, 2.0, 0.0, // class 0
            -1.0, -2.0, 5.0, 5.5, // class 1
            -3.0, -3.5, 6.0, 7.0, // class 1
        ])
        .unwrap();
        let mut s = BnLayerState::new(2, 0.1, DEFAULT_EPS).unwrap();
        s.init_classwise(2);
        for c in 0..2 {
            let (m, v) = subset_moments(&x, &[2 * c, 2 * c + 1]);
            s.classwise_rm[c * 2..c * 2 + 2].copy_from_slice(&m);
            s.classwise_rv[c * 2..c * 2 + 2].copy_from_slice(&v.unwrap());
        }
        let gamma = [1.5f32, 0.5];
        let beta = [0.1f32, -0.2];
        let batch1 = x.select_rows(&[2, 3]).unwrap();
        let out = bn_apply(&s, &gamma, &beta, &batch1, false, StatsMode::Classwise(1)).unwrap();
        // straight-line oracle: class-1 moments by hand
        let ch0 = [-1.0f64, -2.0, -3.0, -3.5];
        let ch1 = [5.0f64, 5.5, 6.0, 7.0];
        for (ch, vals) in [ch0, ch1].iter().enumerate() {
            let mu = vals.iter().sum::<f64>() / 4.0;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            let idx = [(0, 0), (0, 1), (1, 0), (1, 1)];
            for (k, &(sample, pos)) in idx.iter().enumerate() {
                let y = out.y.data()[(sample * 2 + ch) * 2 + pos] as f64;
                let want = gamma[ch] as f64 * (vals[k] - mu) / (var + DEFAULT_EPS as f64).sqrt() + beta[ch] as f64;
                assert!((y - want).abs() < 1e-5, "ch {ch} k {k}: {y} vs {want}");
            }
        }
    }

    #[test]
    fn subset_moments_skip_degenerate_variance() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let (m, v) = subset_moments(&x, &[1]);
        assert_eq!(m, vec![3.0]);
        assert!(v.is_none());
    }

    #[test]
    fn monte_carlo_zero_updates_fails() {
        let f = monte_carlo_convergence(&[0.5, 0.5], 8, 0.1, 1.0, 0.01, 0, 20, 1).unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn monte_carlo_single_class_matches_closed_form() {
        let (eps, c, tau) = (0.1f64, 1.0f64, 0.01f64);
        let exact = libm::ceil(libm::log(c / tau) / -libm::log(1.0 - eps)) as u64;
        assert_eq!(monte_carlo_convergence(&[1.0], 4, eps, c, tau, exact, 10, 3).unwrap(), 1.0);
        assert_eq!(monte_carlo_convergence(&[1.0], 4, eps, c, tau, exact - 1, 10, 3).unwrap(), 0.0);
    }

    #[test]
    fn monte_carlo_rejects_unnormalized() {
        assert!(monte_carlo_convergence(&[0.5, 0.4], 4, 0.1, 1.0, 0.01, 10, 10, 0).is_err());
    }
}
