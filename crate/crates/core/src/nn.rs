//! Sequential convolutional networks built on [`Graph`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classwise_bn::{BnLayerState, StatsMode, StatsTarget, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::digest::{Digest32, Hasher};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::Adam;
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, padding: usize },
    Dense { in_features: usize, out_features: usize },
    BatchNorm { channels: usize },
    Relu,
    MaxPool { size: usize },
    GlobalAvgPool,
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[channels, height, width]` of one input sample.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Conv → BN → ReLU → MaxPool(2) per entry of `widths`, then flatten and a dense classifier.
    pub fn small_cnn(input: [usize; 3], widths: &[usize], num_classes: usize) -> Self {
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
        for &width in widths {
            layers.push(LayerSpec::Conv { in_channels: c, out_channels: width, kernel: 3, padding: 1 });
            layers.push(LayerSpec::BatchNorm { channels: width });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { size: 2 });
            c = width;
            h /= 2;
            w /= 2;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { in_features: c * h * w, out_features: num_classes });
        NetworkSpec { input, num_classes, layers }
    }

    /// Per-sample output shape of every layer, checking that shapes chain and
    /// the network ends in `[num_classes]` with at least one BN layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.contains(&0) || self.num_classes < 2 {
            return Err(Error::invalid(format!("input {:?} with {} classes", self.input, self.num_classes)));
        }
        let mut shape = self.input.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |what: &str| Error::shape(format!("layer {i}"), format!("{what}: {layer:?} on {shape:?}"));
            shape = match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, padding } => {
                    if shape.len() != 3 || shape[0] != in_channels || kernel == 0 || out_channels == 0 {
                        return Err(bad("conv input"));
                    }
                    if shape[1] + 2 * padding < kernel || shape[2] + 2 * padding < kernel {
                        return Err(bad("kernel exceeds input"));
                    }
                    vec![out_channels, shape[1] + 2 * padding - kernel + 1, shape[2] + 2 * padding - kernel + 1]
                }
                LayerSpec::Dense { in_features, out_features } => {
                    if shape.len() != 1 || shape[0] != in_features || out_features == 0 {
                        return Err(bad("dense input"));
                    }
                    vec![out_features]
                }
                LayerSpec::BatchNorm { channels } => {
                    if shape.is_empty() || shape[0] != channels {
                        return Err(bad("batch norm channels"));
                    }
                    shape
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool { size } => {
                    if shape.len() != 3 || size == 0 || shape[1] < size || shape[2] < size {
                        return Err(bad("max pool"));
                    }
                    vec![shape[0], shape[1] / size, shape[2] / size]
                }
                LayerSpec::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(bad("global pool"));
                    }
                    vec![shape[0]]
                }
                LayerSpec::Flatten => vec![shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| bad("flatten size"))?],
            };
            shapes.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(Error::shape("network output", format!("{shape:?}, expected [{}]", self.num_classes)));
        }
        if self.bn_channels().is_empty() {
            return Err(Error::invalid("network has no BatchNorm layer"));
        }
        Ok(shapes)
    }

    pub fn bn_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::BatchNorm { channels } => Some(channels),
                _ => None,
            })
            .collect()
    }

    /// Names and shapes of all learnable tensors, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                    out.push((format!("L{i}.weight"), vec![out_channels, in_channels, kernel, kernel]));
                    out.push((format!("L{i}.bias"), vec![out_channels]));
                }
                LayerSpec::Dense { in_features, out_features } => {
                    out.push((format!("L{i}.weight"), vec![out_features, in_features]));
                    out.push((format!("L{i}.bias"), vec![out_features]));
                }
                LayerSpec::BatchNorm { channels } => {
                    out.push((format!("L{i}.weight"), vec![channels]));
                    out.push((format!("L{i}.bias"), vec![channels]));
                }
                _ => {}
            }
        }
        out
    }

    /// Flat integer encoding, used by checkpoints and fingerprints.
    pub fn encode(&self) -> Vec<u32> {
        let mut out = vec![self.input[0] as u32, self.input[1] as u32, self.input[2] as u32, self.num_classes as u32];
        for layer in &self.layers {
            let code: [u32; 5] = match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, padding } => {
                    [1, in_channels as u32, out_channels as u32, kernel as u32, padding as u32]
                }
                LayerSpec::Dense { in_features, out_features } => [2, in_features as u32, out_features as u32, 0, 0],
                LayerSpec::BatchNorm { channels } => [3, channels as u32, 0, 0, 0],
                LayerSpec::Relu => [4, 0, 0, 0, 0],
                LayerSpec::MaxPool { size } => [5, size as u32, 0, 0, 0],
                LayerSpec::GlobalAvgPool => [6, 0, 0, 0, 0],
                LayerSpec::Flatten => [7, 0, 0, 0, 0],
            };
            out.extend_from_slice(&code);
        }
        out
    }

    pub fn decode(code: &[u32]) -> Result<Self> {
        if code.len() < 4 || (code.len() - 4) % 5 != 0 {
            return Err(Error::invalid(format!("architecture code of length {}", code.len())));
        }
        let u = |v: u32| v as usize;
        let mut layers = Vec::new();
        for c in code[4..].chunks(5) {
            layers.push(match c[0] {
                1 => LayerSpec::Conv { in_channels: u(c[1]), out_channels: u(c[2]), kernel: u(c[3]), padding: u(c[4]) },
                2 => LayerSpec::Dense { in_features: u(c[1]), out_features: u(c[2]) },
                3 => LayerSpec::BatchNorm { channels: u(c[1]) },
                4 => LayerSpec::Relu,
                5 => LayerSpec::MaxPool { size: u(c[1]) },
                6 => LayerSpec::GlobalAvgPool,
                7 => LayerSpec::Flatten,
                other => return Err(Error::invalid(format!("unknown layer code {other}"))),
            });
        }
        let spec = NetworkSpec { input: [u(code[0]), u(code[1]), u(code[2])], num_classes: u(code[3]), layers };
        spec.validate()?;
        Ok(spec)
    }
}

/// Named learnable tensors of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<F = f32> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParameterSet<F> {
    /// Kaiming-uniform weights (fan-in), uniform `±1/√fan_in` biases, BN γ = 1, β = 0.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let mut rng = rng::stream(seed, &[rng::TAG_INIT, i as u64]);
            let mut uniform = |shape: Vec<usize>, bound: f64| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| F::from_f64(rng.random_range(-bound..bound))).collect();
                Tensor::new(shape, data).expect("shape matches")
            };
            let (w, b) = match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                    let fan_in = (in_channels * kernel * kernel) as f64;
                    let w = uniform(vec![out_channels, in_channels, kernel, kernel], libm::sqrt(6.0 / fan_in));
                    (w, uniform(vec![out_channels], 1.0 / libm::sqrt(fan_in)))
                }
                LayerSpec::Dense { in_features, out_features } => {
                    let fan_in = in_features as f64;
                    let w = uniform(vec![out_features, in_features], libm::sqrt(6.0 / fan_in));
                    (w, uniform(vec![out_features], 1.0 / libm::sqrt(fan_in)))
                }
                LayerSpec::BatchNorm { channels } => {
                    (Tensor::full(&[channels], F::one()), Tensor::zeros(&[channels]))
                }
                _ => continue,
            };
            names.push(format!("L{i}.weight"));
            tensors.push(w);
            names.push(format!("L{i}.bias"));
            tensors.push(b);
        }
        Ok(ParameterSet { names, tensors })
    }

    pub fn cast<G: Real>(&self) -> ParameterSet<G> {
        ParameterSet { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Adds every tensor to `graph` as a leaf.
    pub fn register(&self, graph: &mut Graph<F>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.leaf(t.clone(), requires_grad)).collect()
    }
}

/// One BN layer's taps in a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BnTap {
    pub layer: usize,
    /// Input of the BN layer.
    pub input: Var,
    /// `[2, C]` batch moments of the input.
    pub moments: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Input to the final dense layer.
    pub features: Var,
    pub taps: Vec<BnTap>,
}

/// Records the network on `graph`. `params` come from [`ParameterSet::register`].
///
/// Train mode normalizes by batch moments. Eval mode normalizes by the running
/// statistics that `stats` selects in each `bn` entry.
pub fn forward_graph<F: Real>(
    graph: &mut Graph<F>,
    spec: &NetworkSpec,
    params: &[Var],
    bn: &[BnLayerState],
    x: Var,
    mode: Mode,
    stats: StatsMode,
) -> Result<ForwardPass> {
    let xs = graph.value(x).shape();
    if xs.len() != 4 || xs[1..] != spec.input {
        return Err(Error::shape("network input", format!("{xs:?}, expected [N, {:?}]", spec.input)));
    }
    if bn.len() != spec.bn_channels().len() {
        return Err(Error::invalid(format!("{} BN states for {} BN layers", bn.len(), spec.bn_channels().len())));
    }
    let mut h = x;
    let mut p = 0usize;
    let mut b = 0usize;
    let mut taps = Vec::new();
    let mut features = x;
    let wrap = |i: usize| move |e: Error| Error::Shape { context: format!("layer {i}"), detail: format!("{e}") };
    for (i, layer) in spec.layers.iter().enumerate() {
        h = match *layer {
            LayerSpec::Conv { padding, .. } => {
                let out = graph.conv2d(h, params[p], params[p + 1], padding).map_err(wrap(i))?;
                p += 2;
                out
            }
            LayerSpec::Dense { .. } => {
                features = h;
                let out = graph.dense(h, params[p], params[p + 1]).map_err(wrap(i))?;
                p += 2;
                out
            }
            LayerSpec::BatchNorm { .. } => {
                let (gamma, beta) = (params[p], params[p + 1]);
                p += 2;
                let state = &bn[b];
                b += 1;
                let eps = F::from_f32(state.eps);
                let moments = graph.moments(h).map_err(wrap(i))?;
                let input = h;
                taps.push(BnTap { layer: i, input, moments });
                match mode {
                    Mode::Train => graph.batch_norm(h, moments, gamma, beta, eps).map_err(wrap(i))?,
                    Mode::Eval => {
                        let (rm, rv) = state.running(stats)?;
                        let rm = rm.iter().map(|&v| F::from_f32(v)).collect();
                        let rv = rv.iter().map(|&v| F::from_f32(v)).collect();
                        graph.batch_norm_fixed(h, gamma, beta, rm, rv, eps).map_err(wrap(i))?
                    }
                }
            }
            LayerSpec::Relu => graph.relu(h),
            LayerSpec::MaxPool { size } => graph.max_pool(h, size).map_err(wrap(i))?,
            LayerSpec::GlobalAvgPool => graph.global_avg_pool(h).map_err(wrap(i))?,
            LayerSpec::Flatten => graph.flatten(h),
        };
    }
    Ok(ForwardPass { logits: h, features, taps })
}

/// Evaluation outputs of a batch, detached from any graph.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub logits: Tensor<f32>,
    pub features: Tensor<f32>,
    /// Input of every BN layer.
    pub bn_inputs: Vec<Tensor<f32>>,
}

/// A network with its parameters, BN running statistics and input normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub params: ParameterSet<f32>,
    pub bn: Vec<BnLayerState>,
    pub input_mean: Vec<f32>,
    pub input_std: Vec<f32>,
}

impl Model {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = ParameterSet::init(&spec, seed)?;
        let bn = spec
            .bn_channels()
            .into_iter()
            .map(|c| BnLayerState::new(c, DEFAULT_MOMENTUM, DEFAULT_EPS))
            .collect::<Result<Vec<_>>>()?;
        let c = spec.input[0];
        Ok(Model { spec, params, bn, input_mean: vec![0.0; c], input_std: vec![1.0; c] })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn has_class_stats(&self) -> bool {
        self.bn.iter().all(|s| s.has_class_stats())
    }

    /// Per-channel `(x − mean)/std` of raw `[N, C, H, W]` pixels.
    pub fn normalize(&self, raw: &Tensor<f32>) -> Tensor<f32> {
        let mut out = raw.clone();
        let c = self.input_mean.len();
        let plane = raw.row_len() / c.max(1);
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (j / plane) % c;
            *v = (*v - self.input_mean[ch]) / self.input_std[ch];
        }
        out
    }

    /// Inverse of [`Model::normalize`].
    pub fn denormalize(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let mut out = x.clone();
        let c = self.input_mean.len();
        let plane = x.row_len() / c.max(1);
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (j / plane) % c;
            *v = *v * self.input_std[ch] + self.input_mean[ch];
        }
        out
    }

    /// Eval-mode pass over normalized inputs, in chunks of at most `chunk` samples.
    pub fn eval(&self, x: &Tensor<f32>, stats: StatsMode, chunk: usize) -> Result<EvalOutput> {
        let n = x.batch();
        let chunk = chunk.max(1);
        let mut logits = Vec::new();
        let mut features = Vec::new();
        let mut bn_inputs: Vec<Vec<f32>> = vec![Vec::new(); self.bn.len()];
        let mut shapes = (Vec::new(), Vec::new(), vec![Vec::new(); self.bn.len()]);
        for start in (0..n).step_by(chunk) {
            let rows: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let part = x.select_rows(&rows)?;
            let mut g = Graph::<f32>::new();
            let vars = self.params.register(&mut g, false);
            let xin = g.constant(part);
            let fp = forward_graph(&mut g, &self.spec, &vars, &self.bn, xin, Mode::Eval, stats)?;
            logits.extend_from_slice(g.value(fp.logits).data());
            features.extend_from_slice(g.value(fp.features).data());
            shapes.0 = g.value(fp.logits).shape()[1..].to_vec();
            shapes.1 = g.value(fp.features).shape()[1..].to_vec();
            for (k, tap) in fp.taps.iter().enumerate() {
                bn_inputs[k].extend_from_slice(g.value(tap.input).data());
                shapes.2[k] = g.value(tap.input).shape()[1..].to_vec();
            }
        }
        let with_batch = |s: &[usize]| {
            let mut v = vec![n];
            v.extend_from_slice(s);
            v
        };
        Ok(EvalOutput {
            logits: Tensor::new(with_batch(&shapes.0), logits)?,
            features: Tensor::new(with_batch(&shapes.1), features)?,
            bn_inputs: bn_inputs
                .into_iter()
                .zip(&shapes.2)
                .map(|(d, s)| Tensor::new(with_batch(s), d))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    pub fn logits(&self, x: &Tensor<f32>, stats: StatsMode) -> Result<Tensor<f32>> {
        Ok(self.eval(x, stats, 256)?.logits)
    }

    /// One optimizer step in train mode. `loss_fn` builds the loss on top of the
    /// forward pass; afterwards the global BN running statistics follow the batch moments.
    pub fn train_step<L>(&mut self, x: &Tensor<f32>, opt: &mut Adam, lr: f32, loss_fn: L) -> Result<f32>
    where
        L: FnOnce(&mut Graph<f32>, &ForwardPass) -> Result<Var>,
    {
        let mut g = Graph::<f32>::new();
        let vars = self.params.register(&mut g, true);
        let xin = g.constant(x.clone());
        let fp = forward_graph(&mut g, &self.spec, &vars, &self.bn, xin, Mode::Train, StatsMode::Global)?;
        let loss = loss_fn(&mut g, &fp)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::non_finite("training loss"));
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite { context: format!("gradient of {}", self.params.names[i]) });
        }
        opt.step(&mut self.params.tensors, &grads, lr)?;
        for (state, tap) in self.bn.iter_mut().zip(&fp.taps) {
            let m = g.value(tap.moments).data();
            let c = state.channels;
            state.update_running(StatsTarget::Global, &m[..c], Some(&m[c..]))?;
        }
        Ok(value)
    }

    /// SHA-256 over architecture, parameters and running statistics.
    pub fn fingerprint(&self) -> Digest32 {
        let mut h = Hasher::new();
        h.bytes(b"model");
        for v in self.spec.encode() {
            h.u64(v as u64);
        }
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            h.bytes(name.as_bytes());
            h.f32s(t.data());
        }
        for s in &self.bn {
            h.f32s(&s.global_rm);
            h.f32s(&s.global_rv);
            h.u64(s.num_classes as u64);
            h.f32s(&s.classwise_rm);
            h.f32s(&s.classwise_rv);
        }
        h.f32s(&self.input_mean);
        h.f32s(&self.input_std);
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        NetworkSpec::small_cnn([3, 8, 8], &[4, 6], 5)
    }

    #[test]
    fn small_cnn_shapes() {
        let shapes = tiny().validate().unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![5]);
        assert_eq!(shapes[3], vec![4, 4, 4]);
        assert_eq!(tiny().bn_channels(), vec![4, 6]);
    }

    #[test]
    fn validate_rejects_mismatch_and_missing_bn() {
        let mut s = tiny();
        s.layers[0] = LayerSpec::Conv { in_channels: 2, out_channels: 4, kernel: 3, padding: 1 };
        let err = s.validate().unwrap_err();
        assert!(format!("{err}").contains("layer 0"));
        let no_bn = NetworkSpec {
            input: [1, 2, 2],
            num_classes: 2,
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { in_features: 4, out_features: 2 }],
        };
        assert!(no_bn.validate().is_err());
    }

    #[test]
    fn arch_code_round_trips() {
        let s = tiny();
        assert_eq!(NetworkSpec::decode(&s.encode()).unwrap(), s);
        assert!(NetworkSpec::decode(&[1, 2, 3]).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = ParameterSet::<f32>::init(&tiny(), 3).unwrap();
        let b = ParameterSet::<f32>::init(&tiny(), 3).unwrap();
        let c = ParameterSet::<f32>::init(&tiny(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let shapes = tiny().param_shapes();
        assert_eq!(a.names.len(), shapes.len());
        for ((n, t), (sn, ss)) in a.names.iter().zip(&a.tensors).zip(&shapes) {
            assert_eq!(n, sn);
            assert_eq!(t.shape(), &ss[..]);
        }
    }

    #[test]
    fn eval_chunking_is_exact() {
        let m = Model::new(tiny(), 1).unwrap();
        let mut r = rng::stream(9, &[0]);
        let x = Tensor::new(vec![7, 3, 8, 8], (0..7 * 192).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let a = m.eval(&x, StatsMode::Global, 7).unwrap();
        let b = m.eval(&x, StatsMode::Global, 3).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.features.shape(), &[7, 24]);
        assert_eq!(a.bn_inputs[1].shape(), &[7, 6, 4, 4]);
    }

    #[test]
    fn classwise_eval_needs_stats() {
        let m = Model::new(tiny(), 1).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(matches!(m.logits(&x, StatsMode::Classwise(0)), Err(Error::MissingClassStats)));
    }

    #[test]
    fn normalize_round_trip() {
        let mut m = Model::new(tiny(), 1).unwrap();
        m.input_mean = vec![0.5, 0.4, 0.3];
        m.input_std = vec![0.2, 0.25, 0.3];
        let x = Tensor::full(&[2, 3, 8, 8], 0.7f32);
        let n = m.normalize(&x);
        assert!((n.data()[0] - 1.0).abs() < 1e-6);
        assert!((n.data()[64] - 1.2).abs() < 1e-6);
        let back = m.denormalize(&n);
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fingerprint_tracks_stats() {
        let mut m = Model::new(tiny(), 1).unwrap();
        let f0 = m.fingerprint();
        m.bn[0].global_rm[0] = 0.25;
        assert_ne!(f0, m.fingerprint());
    }
}
