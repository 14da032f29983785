//! Central-difference gradient checks in f64.
//!
//! A case is a random small network with every layer kind, random inputs,
//! BN affine parameters and running statistics, and a loss summing every
//! loss the crate defines plus the BN moment-matching terms. The analytic
//! gradient of each input and parameter tensor is compared with central
//! differences by the relative error `‖a − n‖ / (‖a‖ + ‖n‖)`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::classwise_bn::{BnLayerState, StatsMode};
use crate::error::Result;
use crate::graph::Graph;
use crate::nn::{forward_graph, LayerSpec, Mode, NetworkSpec, ParameterSet};
use crate::rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Convolution, pooling, dense and BN on 4-D and 2-D inputs.
pub fn conv_spec() -> NetworkSpec {
    NetworkSpec {
        input: [2, 6, 6],
        num_classes: 3,
        layers: vec![
            LayerSpec::Conv { in_channels: 2, out_channels: 3, kernel: 3, padding: 1 },
            LayerSpec::BatchNorm { channels: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv { in_channels: 3, out_channels: 4, kernel: 2, padding: 0 },
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { in_features: 4, out_features: 5 },
            LayerSpec::BatchNorm { channels: 5 },
            LayerSpec::Dense { in_features: 5, out_features: 3 },
        ],
    }
}

/// Convolution followed by flatten and dense.
pub fn flat_spec() -> NetworkSpec {
    NetworkSpec {
        input: [1, 4, 4],
        num_classes: 3,
        layers: vec![
            LayerSpec::Conv { in_channels: 1, out_channels: 2, kernel: 3, padding: 0 },
            LayerSpec::BatchNorm { channels: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { in_features: 8, out_features: 3 },
        ],
    }
}

pub struct GradCase {
    pub spec: NetworkSpec,
    pub mode: Mode,
    bn: Vec<BnLayerState>,
    x: Tensor<f64>,
    params: ParameterSet<f64>,
    soft: Vec<f64>,
    teacher: Vec<f64>,
    mse_target: Vec<f64>,
    labels: Vec<usize>,
    bn_targets: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Worst tensor of a case.
#[derive(Clone, Debug, PartialEq)]
pub struct GradError {
    pub tensor: String,
    pub relative_error: f64,
}

impl GradCase {
    pub fn random(spec: NetworkSpec, seed: u64, mode: Mode) -> Result<Self> {
        let mut r = rng::stream(seed, &[77]);
        let n = 3;
        let [c, h, w] = spec.input;
        let x = Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect())?;
        let mut params = ParameterSet::<f64>::init(&spec, seed)?;
        // random BN affine parameters so γ ≠ 1 and β ≠ 0 are exercised
        for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
            if t.rank() == 1 && name.ends_with("weight") {
                t.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..1.5));
            }
        }
        let mut bn = Vec::new();
        let mut bn_targets = Vec::new();
        for ch in spec.bn_channels() {
            let mut s = BnLayerState::new(ch, 0.1, 1e-5)?;
            s.global_rm = (0..ch).map(|_| r.random_range(-0.5..0.5)).collect();
            s.global_rv = (0..ch).map(|_| r.random_range(0.5..2.0)).collect();
            bn.push(s);
            bn_targets.push(((0..ch).map(|_| r.random_range(-0.5..0.5)).collect(), (0..ch).map(|_| r.random_range(0.5..2.0)).collect()));
        }
        let k = spec.num_classes;
        let mut soft: Vec<f64> = (0..n * k).map(|_| r.random_range(0.1..1.0)).collect();
        for row in soft.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let teacher = (0..n * k).map(|_| r.random_range(-2.0..2.0)).collect();
        let mse_target = (0..n * k).map(|_| r.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| r.random_range(0..k)).collect();
        Ok(GradCase { spec, mode, bn, x, params, soft, teacher, mse_target, labels, bn_targets })
    }

    /// Loss and, optionally, analytic gradients for `[x, params...]`.
    fn run(&self, x: &Tensor<f64>, params: &ParameterSet<f64>, grads: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone(), true);
        let pv = params.register(&mut g, true);
        let fp = forward_graph(&mut g, &self.spec, &pv, &self.bn, xv, self.mode, StatsMode::Global)?;
        let mut terms = vec![
            g.soft_cross_entropy(fp.logits, &self.soft)?,
            g.cross_entropy(fp.logits, &self.labels)?,
            g.kl_div(fp.logits, &self.teacher, 2.0)?,
            g.mse(fp.logits, &self.mse_target)?,
        ];
        for (tap, (m, v)) in fp.taps.iter().zip(&self.bn_targets) {
            terms.push(g.moment_match(tap.moments, m, v)?);
        }
        let feat_sum = g.mean(fp.features);
        terms.push(g.scale(feat_sum, 0.3));
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.add(loss, t)?;
        }
        let value = g.scalar(loss);
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut gr = g.backward(loss)?;
        let mut out = vec![gr.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()))];
        for (v, t) in pv.iter().zip(&params.tensors) {
            out.push(gr.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())));
        }
        Ok((value, out))
    }

    /// Relative error of the worst input or parameter tensor.
    pub fn max_relative_error(&self) -> Result<GradError> {
        let (_, analytic) = self.run(&self.x, &self.params, true)?;
        let mut worst = GradError { tensor: String::new(), relative_error: 0.0 };
        for (slot, a) in analytic.iter().enumerate() {
            let mut numeric = vec![0.0; a.numel()];
            for (j, num) in numeric.iter_mut().enumerate() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut x = self.x.clone();
                    let mut p = self.params.clone();
                    if slot == 0 {
                        x.data_mut()[j] += delta;
                    } else {
                        p.tensors[slot - 1].data_mut()[j] += delta;
                    }
                    Ok(self.run(&x, &p, false)?.0)
                };
                *num = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            }
            let diff = libm::sqrt(a.data().iter().zip(&numeric).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
            let na = libm::sqrt(a.data().iter().map(|x| x * x).sum::<f64>());
            let nn = libm::sqrt(numeric.iter().map(|x| x * x).sum::<f64>());
            let rel = diff / (na + nn).max(1e-10);
            if rel >= worst.relative_error {
                worst = GradError { tensor: if slot == 0 { "input".to_string() } else { self.params.names[slot - 1].clone() }, relative_error: rel };
            }
        }
        Ok(worst)
    }
}
