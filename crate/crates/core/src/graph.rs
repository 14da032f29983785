//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] owns every intermediate value. Operations append nodes;
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that depends on a leaf created with `requires_grad`.
//! Only feed-forward graphs are expressible: inputs always precede outputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    Dense { x: Var, w: Var, b: Var },
    Moments { x: Var },
    BatchNorm { x: Var, moments: Var, gamma: Var, beta: Var, eps: F },
    BatchNormFixed { x: Var, gamma: Var, beta: Var, mean: Vec<F>, var: Vec<F>, eps: F },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    SoftCrossEntropy { logits: Var, targets: Vec<F>, probs: Vec<F> },
    KlDiv { logits: Var, teacher: Vec<F>, student: Vec<F>, temperature: F },
    Mse { x: Var, target: Vec<F> },
    MomentMatch { moments: Var, mean: Vec<F>, var: Vec<F> },
    Sum { x: Var },
    Mean { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, k: F },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph<F = f32> {
    nodes: Vec<Node<F>>,
}

/// `[N, C, spatial...]` → `(N, C, prod(spatial))`.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], shape[2..].iter().product()))
}

/// Row-wise softmax of a `[rows, k]` buffer, optionally scaled by `1/temperature`.
pub fn softmax_rows<F: Real>(data: &[F], k: usize, temperature: F) -> Vec<F> {
    let mut out = vec![F::zero(); data.len()];
    for (row, o) in data.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v / temperature));
        let mut total = F::zero();
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = (v / temperature - max).exp();
            total = total + *dst;
        }
        for dst in o.iter_mut() {
            *dst = *dst / total;
        }
    }
    out
}

fn log_softmax_row<F: Real>(row: &[F], temperature: F, out: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v / temperature));
    let lse = row.iter().map(|&v| (v / temperature - max).exp()).sum::<F>().ln() + max;
    for (dst, &v) in out.iter_mut().zip(row) {
        *dst = v / temperature - lse;
    }
}

/// Per-channel population mean and variance over `(N × spatial)`.
fn moments_of<F: Real>(x: &Tensor<F>) -> (Vec<F>, Vec<F>) {
    let (n, c, s) = channel_layout(x.shape()).expect("moments of rank >= 2");
    let data = x.data();
    let m = (n * s) as f64;
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * s;
            acc += data[base..base + s].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = acc / m;
        let mut sq = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * s;
            sq += data[base..base + s].iter().map(|v| {
                let d = v.as_f64() - mu;
                d * d
            }).sum::<f64>();
        }
        mean[ch] = F::from_f64(mu);
        var[ch] = F::from_f64(sq / m);
    }
    (mean, var)
}

fn accumulate<'a, F: Real>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    /// Stride-1 2-D convolution with symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        if self.value(b).numel() != ws[0] {
            return Err(Error::shape("conv2d", format!("bias len {} for {} filters", self.value(b).numel(), ws[0])));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("kernel {k} larger than padded input {xs:?}")));
        }
        let ho = h + 2 * pad - k + 1;
        let wo = wd + 2 * pad - k + 1;
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![F::zero(); n * co * ho * wo];
        for s in 0..n {
            for o in 0..co {
                let plane = &mut out[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
                plane.iter_mut().for_each(|v| *v = bias[o]);
                for i in 0..ci {
                    let inp = &xin[(s * ci + i) * h * wd..(s * ci + i + 1) * h * wd];
                    for ky in 0..k {
                        let (y0, y1) = valid_range(ho, h, ky, pad);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(wo, wd, kx, pad);
                            if x0 >= x1 {
                                continue;
                            }
                            let wv = wt[((o * ci + i) * k + ky) * k + kx];
                            for y in y0..y1 {
                                let yy = y + ky - pad;
                                let orow = &mut plane[y * wo + x0..y * wo + x1];
                                let irow = &inp[yy * wd + x0 + kx - pad..yy * wd + x1 + kx - pad];
                                for (ov, &iv) in orow.iter_mut().zip(irow) {
                                    *ov = *ov + wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, co, ho, wo], out)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, rg))
    }

    /// `x [N, in] · wᵀ [in, out] + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).numel() != ws[0] {
            return Err(Error::shape("dense", format!("input {xs:?}, weight {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![F::zero(); n * dout];
        for s in 0..n {
            let row = &xin[s * din..(s + 1) * din];
            for o in 0..dout {
                let wrow = &wt[o * din..(o + 1) * din];
                let dot = row.iter().zip(wrow).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                out[s * dout + o] = dot + bias[o];
            }
        }
        let value = Tensor::new(vec![n, dout], out)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    /// Per-channel batch moments of `x`, as a `[2, C]` node (mean row, variance row).
    pub fn moments(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let (_, c, _) = channel_layout(shape).ok_or_else(|| Error::shape("moments", format!("{shape:?}")))?;
        let (mean, var) = moments_of(self.value(x));
        let mut data = mean;
        data.extend(var);
        let value = Tensor::new(vec![2, c], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Moments { x }, rg))
    }

    /// BatchNorm normalizing by the moments node (training mode).
    pub fn batch_norm(&mut self, x: Var, moments: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (n, c, s) = channel_layout(self.value(x).shape())
            .ok_or_else(|| Error::shape("batch_norm", format!("{:?}", self.value(x).shape())))?;
        if self.value(moments).numel() != 2 * c || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm", format!("{c} channels, mismatched γ/β/moments")));
        }
        let m = self.value(moments).data();
        let (mean, var) = m.split_at(c);
        let value = self.normalize(x, mean, var, gamma, beta, eps, n, c, s)?;
        let rg = self.needs(&[x, moments, gamma, beta]);
        Ok(self.push(value, Op::BatchNorm { x, moments, gamma, beta, eps }, rg))
    }

    /// BatchNorm normalizing by fixed running statistics (evaluation mode).
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: Vec<F>, var: Vec<F>, eps: F) -> Result<Var> {
        let (n, c, s) = channel_layout(self.value(x).shape())
            .ok_or_else(|| Error::shape("batch_norm", format!("{:?}", self.value(x).shape())))?;
        if mean.len() != c || var.len() != c || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm", format!("{c} channels, mismatched statistics")));
        }
        let value = self.normalize(x, &mean, &var, gamma, beta, eps, n, c, s)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(value, Op::BatchNormFixed { x, gamma, beta, mean, var, eps }, rg))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(&self, x: Var, mean: &[F], var: &[F], gamma: Var, beta: Var, eps: F, n: usize, c: usize, s: usize) -> Result<Tensor<F>> {
        let xin = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![F::zero(); xin.len()];
        for ch in 0..c {
            let inv = F::one() / (var[ch] + eps).sqrt();
            let scale = g[ch] * inv;
            for i in 0..n {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    out[j] = (xin[j] - mean[ch]) * scale + b[ch];
                }
            }
        }
        Tensor::new(self.value(x).shape().to_vec(), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > F::zero() { a } else { F::zero() }).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Non-overlapping `size × size` max pooling; trailing rows/columns are dropped.
    pub fn max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || size == 0 || xs[2] < size || xs[3] < size {
            return Err(Error::shape("max_pool", format!("input {xs:?}, window {size}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / size, w / size);
        let xin = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = base + y * size * w + xo * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let j = base + (y * size + dy) * w + xo * size + dx;
                            if xin[j] > xin[best] {
                                best = j;
                            }
                        }
                    }
                    out.push(xin[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {xs:?}")));
        }
        let (n, c, s) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv = F::one() / F::from_f64(s as f64);
        let data = self.value(x).data().chunks(s).map(|p| p.iter().copied().sum::<F>() * inv).collect();
        let value = Tensor::new(vec![n, c], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// Keeps the leading dimension and flattens the rest.
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let shape = vec![v.batch(), v.row_len()];
        let value = v.clone().reshape(shape).expect("flatten preserves numel");
        let rg = self.needs(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// Mean over rows of `−Σ_k t_k log softmax(z)_k` for target distributions `t`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &[F]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || targets.len() != ls[0] * ls[1] {
            return Err(Error::shape("cross_entropy", format!("logits {ls:?}, {} targets", targets.len())));
        }
        let (n, k) = (ls[0], ls[1]);
        let z = self.value(logits).data();
        let mut logp = vec![F::zero(); k];
        let mut total = F::zero();
        for (row, t) in z.chunks(k).zip(targets.chunks(k)) {
            log_softmax_row(row, F::one(), &mut logp);
            total = total - t.iter().zip(&logp).fold(F::zero(), |a, (&ti, &lp)| a + ti * lp);
        }
        let probs = softmax_rows(z, k, F::one());
        let value = Tensor::scalar(total / F::from_f64(n as f64));
        let rg = self.needs(&[logits]);
        Ok(self.push(value, Op::SoftCrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Cross-entropy against hard class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || labels.len() != ls[0] {
            return Err(Error::shape("cross_entropy", format!("logits {ls:?}, {} labels", labels.len())));
        }
        let k = ls[1];
        let mut t = vec![F::zero(); ls[0] * k];
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::ClassOutOfRange { class: y, num_classes: k });
            }
            t[i * k + y] = F::one();
        }
        self.soft_cross_entropy(logits, &t)
    }

    /// `T²/N · Σ KL(softmax(teacher/T) ‖ softmax(logits/T))`.
    pub fn kl_div(&mut self, logits: Var, teacher_logits: &[F], temperature: F) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || teacher_logits.len() != ls[0] * ls[1] {
            return Err(Error::shape("kl_div", format!("logits {ls:?}, {} teacher values", teacher_logits.len())));
        }
        let (n, k) = (ls[0], ls[1]);
        let z = self.value(logits).data();
        let teacher = softmax_rows(teacher_logits, k, temperature);
        let student = softmax_rows(z, k, temperature);
        let mut lt = vec![F::zero(); k];
        let mut ls_ = vec![F::zero(); k];
        let mut total = F::zero();
        for ((tz, sz), pt) in teacher_logits.chunks(k).zip(z.chunks(k)).zip(teacher.chunks(k)) {
            log_softmax_row(tz, temperature, &mut lt);
            log_softmax_row(sz, temperature, &mut ls_);
            for j in 0..k {
                total = total + pt[j] * (lt[j] - ls_[j]);
            }
        }
        let value = Tensor::scalar(total * temperature * temperature / F::from_f64(n as f64));
        let rg = self.needs(&[logits]);
        Ok(self.push(value, Op::KlDiv { logits, teacher, student, temperature }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[F]) -> Result<Var> {
        let v = self.value(x);
        if v.numel() != target.len() {
            return Err(Error::shape("mse", format!("{} values vs {} targets", v.numel(), target.len())));
        }
        let total = v.data().iter().zip(target).fold(F::zero(), |a, (&p, &t)| a + (p - t) * (p - t));
        let value = Tensor::scalar(total / F::from_f64(v.numel() as f64));
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Mse { x, target: target.to_vec() }, rg))
    }

    /// `‖μ − mean‖₂ + ‖σ² − var‖₂` for a moments node.
    pub fn moment_match(&mut self, moments: Var, mean: &[F], var: &[F]) -> Result<Var> {
        let m = self.value(moments).data();
        let c = m.len() / 2;
        if mean.len() != c || var.len() != c || m.len() != 2 * c {
            return Err(Error::shape("moment_match", format!("{c} channels vs targets {}/{}", mean.len(), var.len())));
        }
        let dm = m[..c].iter().zip(mean).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>().sqrt();
        let dv = m[c..].iter().zip(var).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>().sqrt();
        let value = Tensor::scalar(dm + dv);
        let rg = self.needs(&[moments]);
        Ok(self.push(value, Op::MomentMatch { moments, mean: mean.to_vec(), var: var.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / F::from_f64(v.numel() as f64));
        let rg = self.needs(&[x]);
        self.push(value, Op::Mean { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * k).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale { x, k }, rg)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let root = &self.nodes[loss.0];
        if !root.requires_grad {
            return Err(Error::NoGraph);
        }
        if root.value.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", root.value.shape())));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    out[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Conv2d { x, w, b, pad } => {
                    conv2d_backward(nodes, &mut grads, &g, *x, *w, *b, *pad);
                }
                Op::Dense { x, w, b } => {
                    let xs = nodes[x.0].value.shape();
                    let (n, din) = (xs[0], xs[1]);
                    let dout = nodes[w.0].value.shape()[0];
                    let xin = nodes[x.0].value.data();
                    let wt = nodes[w.0].value.data();
                    if let Some(gx) = accumulate(&mut grads, nodes, *x) {
                        for s in 0..n {
                            for o in 0..dout {
                                let go = g[s * dout + o];
                                let wrow = &wt[o * din..(o + 1) * din];
                                for (dst, &wv) in gx[s * din..(s + 1) * din].iter_mut().zip(wrow) {
                                    *dst = *dst + go * wv;
                                }
                            }
                        }
                    }
                    if let Some(gw) = accumulate(&mut grads, nodes, *w) {
                        for s in 0..n {
                            let row = &xin[s * din..(s + 1) * din];
                            for o in 0..dout {
                                let go = g[s * dout + o];
                                for (dst, &xv) in gw[o * din..(o + 1) * din].iter_mut().zip(row) {
                                    *dst = *dst + go * xv;
                                }
                            }
                        }
                    }
                    if let Some(gb) = accumulate(&mut grads, nodes, *b) {
                        for s in 0..n {
                            for o in 0..dout {
                                gb[o] = gb[o] + g[s * dout + o];
                            }
                        }
                    }
                }
                Op::Moments { x } => {
                    let xv = &nodes[x.0].value;
                    let (n, c, s) = channel_layout(xv.shape()).expect("checked at record time");
                    let mean = &node.value.data()[..c];
                    let inv_m = F::one() / F::from_f64((n * s) as f64);
                    let two = F::from_f64(2.0);
                    let xin = xv.data();
                    if let Some(gx) = accumulate(&mut grads, nodes, *x) {
                        for ch in 0..c {
                            let (gm, gv) = (g[ch], g[c + ch]);
                            for i in 0..n {
                                let base = (i * c + ch) * s;
                                for j in base..base + s {
                                    gx[j] = gx[j] + gm * inv_m + gv * two * (xin[j] - mean[ch]) * inv_m;
                                }
                            }
                        }
                    }
                }
                Op::BatchNorm { x, moments, gamma, beta, eps } => {
                    let xv = &nodes[x.0].value;
                    let (n, c, s) = channel_layout(xv.shape()).expect("checked at record time");
                    let m = nodes[moments.0].value.data();
                    let (mean, var) = m.split_at(c);
                    let gam = nodes[gamma.0].value.data();
                    let xin = xv.data();
                    let mut gmom = vec![F::zero(); 2 * c];
                    let mut ggam = vec![F::zero(); c];
                    let mut gbet = vec![F::zero(); c];
                    let half = F::from_f64(0.5);
                    let mut gx_local = vec![F::zero(); xin.len()];
                    for ch in 0..c {
                        let inv = F::one() / (var[ch] + *eps).sqrt();
                        let (mut sum_g, mut sum_gc) = (F::zero(), F::zero());
                        for i in 0..n {
                            let base = (i * c + ch) * s;
                            for j in base..base + s {
                                let centered = xin[j] - mean[ch];
                                sum_g = sum_g + g[j];
                                sum_gc = sum_gc + g[j] * centered;
                                gx_local[j] = g[j] * gam[ch] * inv;
                            }
                        }
                        ggam[ch] = sum_gc * inv;
                        gbet[ch] = sum_g;
                        gmom[ch] = -gam[ch] * inv * sum_g;
                        gmom[c + ch] = -half * gam[ch] * sum_gc * inv * inv * inv;
                    }
                    add_into(&mut grads, nodes, *x, &gx_local);
                    add_into(&mut grads, nodes, *moments, &gmom);
                    add_into(&mut grads, nodes, *gamma, &ggam);
                    add_into(&mut grads, nodes, *beta, &gbet);
                }
                Op::BatchNormFixed { x, gamma, beta, mean, var, eps } => {
                    let xv = &nodes[x.0].value;
                    let (n, c, s) = channel_layout(xv.shape()).expect("checked at record time");
                    let gam = nodes[gamma.0].value.data();
                    let xin = xv.data();
                    let mut ggam = vec![F::zero(); c];
                    let mut gbet = vec![F::zero(); c];
                    let want_x = nodes[x.0].requires_grad;
                    let mut gx_local = if want_x { vec![F::zero(); xin.len()] } else { Vec::new() };
                    for ch in 0..c {
                        let inv = F::one() / (var[ch] + *eps).sqrt();
                        for i in 0..n {
                            let base = (i * c + ch) * s;
                            for j in base..base + s {
                                ggam[ch] = ggam[ch] + g[j] * (xin[j] - mean[ch]) * inv;
                                gbet[ch] = gbet[ch] + g[j];
                                if want_x {
                                    gx_local[j] = g[j] * gam[ch] * inv;
                                }
                            }
                        }
                    }
                    if want_x {
                        add_into(&mut grads, nodes, *x, &gx_local);
                    }
                    add_into(&mut grads, nodes, *gamma, &ggam);
                    add_into(&mut grads, nodes, *beta, &gbet);
                }
                Op::Relu { x } => {
                    let xin = nodes[x.0].value.data();
                    if let Some(gx) = accumulate(&mut grads, nodes, *x) {
                        for ((dst, &gv), &xv) in gx.iter_mut().zip(&g).zip(xin) {
                            if xv > F::zero() {
                                *dst = *dst + gv;
                            }
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if let Some(gx) = accumulate(&mut grads, nodes, *x) {
                        for (&j, &gv) in argmax.iter().zip(&g) {
                            gx[j] = gx[j] + gv;
                        }
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let xs = nodes[x.0].value.shape();
                    let s = xs[2] * xs[3];
                    let inv = F::one() / F::from_f64(s as f64);
                    if let Some(gx) = accumulate(&mut grads, nodes, *x) {
                        for (plane, &gv) in gx.chunks_mut(s).zip(&g) {
                            plane.iter_mut().for_each(|d| *d = *d + gv * inv);
                        }
                    }
                }
                Op::Reshape { x } => add_into(&mut grads, nodes, *x, &g),
                Op::SoftCrossEntropy { logits, targets, probs } => {
                    let ls = nodes[logits.0].value.shape();
                    let (n, k) = (ls[0], ls[1]);
                    let scale = g[0] / F::from_f64(n as f64);
                    if let Some(gz) = accumulate(&mut grads, nodes, *logits) {
                        for r in 0..n {
                            let t = &targets[r * k..(r + 1) * k];
                            let mass = t.iter().copied().sum::<F>();
                            for j in 0..k {
                                let d = &mut gz[r * k + j];
                                *d = *d + scale * (probs[r * k + j] * mass - t[j]);
                            }
                        }
                    }
                }
                Op::KlDiv { logits, teacher, student, temperature } => {
                    let ls = nodes[logits.0].value.shape();
                    let n = ls[0];
                    let k = ls[1];
                    let scale = g[0] * *temperature / F::from_f64(n as f64);
                    if let Some(gz) = accumulate(&mut grads, nodes, *logits) {
                        for r in 0..n {
                            let pt = &teacher[r * k..(r + 1) * k];
                            let mass = pt.iter().copied().sum::<F>();
                            for j in 0..k {
                                let d = &mut gz[r * k + j];
                                *d = *d + scale * (student[r * k + j] * mass - pt[j]);
                            }
                        }
                    }
                }
                Op::Mse { x, target } => {
                    let xin = nodes[x.0].value.data();
                    let scale = g[0] * F::from_f64(2.0) / F::from_f64(xin.len() as f64);
                    if let Some(gx) = accumulate(&mut grads, nodes, *x) {
                        for ((dst, &p), &t) in gx.iter_mut().zip(xin).zip(target) {
                            *dst = *dst + scale * (p - t);
                        }
                    }
                }
                Op::MomentMatch { moments, mean, var } => {
                    let m = nodes[moments.0].value.data();
                    let c = mean.len();
                    let mut gm = vec![F::zero(); 2 * c];
                    for (half, target) in [(0usize, mean), (c, var)] {
                        let norm = (0..c).map(|j| (m[half + j] - target[j]) * (m[half + j] - target[j])).sum::<F>().sqrt();
                        if norm > F::zero() {
                            for j in 0..c {
                                gm[half + j] = g[0] * (m[half + j] - target[j]) / norm;
                            }
                        }
                    }
                    add_into(&mut grads, nodes, *moments, &gm);
                }
                Op::Sum { x } => {
                    if let Some(gx) = accumulate(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|d| *d = *d + g[0]);
                    }
                }
                Op::Mean { x } => {
                    let len = nodes[x.0].value.numel();
                    let gv = g[0] / F::from_f64(len as f64);
                    if let Some(gx) = accumulate(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|d| *d = *d + gv);
                    }
                }
                Op::Add { a, b } => {
                    add_into(&mut grads, nodes, *a, &g);
                    add_into(&mut grads, nodes, *b, &g);
                }
                Op::Scale { x, k } => {
                    if let Some(gx) = accumulate(&mut grads, nodes, *x) {
                        for (d, &gv) in gx.iter_mut().zip(&g) {
                            *d = *d + *k * gv;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn add_into<F: Real>(grads: &mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var, g: &[F]) {
    if let Some(dst) = accumulate(grads, nodes, v) {
        for (d, &s) in dst.iter_mut().zip(g) {
            *d = *d + s;
        }
    }
}

/// Output positions `[lo, hi)` whose tap `offset` lands inside an input of length `len`.
fn valid_range(out_len: usize, len: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(offset);
    let hi = (len + pad).saturating_sub(offset).min(out_len);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<F: Real>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], g: &[F], x: Var, w: Var, b: Var, pad: usize) {
    let xs = nodes[x.0].value.shape();
    let ws = nodes[w.0].value.shape();
    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[0], ws[2]);
    let ho = h + 2 * pad - k + 1;
    let wo = wd + 2 * pad - k + 1;
    let xin = nodes[x.0].value.data();
    let wt = nodes[w.0].value.data();

    if let Some(gb) = accumulate(grads, nodes, b) {
        for s in 0..n {
            for o in 0..co {
                let plane = &g[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
                gb[o] = gb[o] + plane.iter().copied().sum::<F>();
            }
        }
    }
    if let Some(gw) = accumulate(grads, nodes, w) {
        for s in 0..n {
            for o in 0..co {
                let gplane = &g[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
                for i in 0..ci {
                    let inp = &xin[(s * ci + i) * h * wd..(s * ci + i + 1) * h * wd];
                    for ky in 0..k {
                        let (y0, y1) = valid_range(ho, h, ky, pad);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(wo, wd, kx, pad);
                            if x0 >= x1 {
                                continue;
                            }
                            let mut acc = F::zero();
                            for y in y0..y1 {
                                let yy = y + ky - pad;
                                let grow = &gplane[y * wo + x0..y * wo + x1];
                                let irow = &inp[yy * wd + x0 + kx - pad..yy * wd + x1 + kx - pad];
                                acc = grow.iter().zip(irow).fold(acc, |a, (&gv, &iv)| a + gv * iv);
                            }
                            let idx = ((o * ci + i) * k + ky) * k + kx;
                            gw[idx] = gw[idx] + acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gx) = accumulate(grads, nodes, x) {
        for s in 0..n {
            for o in 0..co {
                let gplane = &g[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
                for i in 0..ci {
                    let gin = &mut gx[(s * ci + i) * h * wd..(s * ci + i + 1) * h * wd];
                    for ky in 0..k {
                        let (y0, y1) = valid_range(ho, h, ky, pad);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(wo, wd, kx, pad);
                            if x0 >= x1 {
                                continue;
                            }
                            let wv = wt[((o * ci + i) * k + ky) * k + kx];
                            for y in y0..y1 {
                                let yy = y + ky - pad;
                                let grow = &gplane[y * wo + x0..y * wo + x1];
                                let irow = &mut gin[yy * wd + x0 + kx - pad..yy * wd + x1 + kx - pad];
                                for (dst, &gv) in irow.iter_mut().zip(grow) {
                                    *dst = *dst + wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 3], &[1., -2., 3., 0.5, 4., -1.]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_mse_is_analytic() {
        let mut g = Graph::<f64>::new();
        let xs = [1.0, 2.0, -3.0, 0.5];
        let ts = [0.0, 2.5, -1.0, 1.5];
        let x = g.param(t(&[4], &xs));
        let l = g.mse(x, &ts).unwrap();
        let grads = g.backward(l).unwrap();
        let gx = grads.get(x).unwrap().data();
        for i in 0..4 {
            assert!((gx[i] - 2.0 * (xs[i] - ts[i]) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_without_graph_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1., 2.]));
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap_err(), Error::NoGraph);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = [1000.0f32, -5.0, 3.0, 0.0, 0.0, 0.0];
        let p = softmax_rows(&z, 3, 1.0);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn moment_match_zero_at_equality_has_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 1], &[1.0, 3.0]));
        let m = g.moments(x).unwrap();
        let l = g.moment_match(m, &[2.0], &[1.0]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_padding_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 5, 5]));
        let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = g.constant(Tensor::full(&[4], 1.5));
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 5, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.5));
        let y = g.conv2d(x, w, b, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 3, 3]);
    }
}
