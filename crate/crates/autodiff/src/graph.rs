//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value plus whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so the
//! insertion order is already a topological order.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvDims, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n−1) variance, used for running-statistic updates.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    ConvT2d { x: usize, w: usize, b: Option<usize>, stride: usize, k: usize },
    MaxPool2 { x: usize, argmax: Vec<u32> },
    Relu { x: usize },
    Sigmoid { x: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Concat { parts: Vec<(usize, usize)> },
    GlobalAvgPool { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    ScaleChannels { x: usize, s: usize },
    ScaleSpatial { x: usize, a: usize },
    Upsample { x: usize, factor: usize },
    Sum { x: usize },
    Mean { x: usize },
    Bce { pred: usize, target: Vec<T>, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the graph's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn v(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// 2D convolution with zero padding. Kernel F×C×k×k, optional bias F.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, dilation: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, c, h, wd) = self.v(x).dims4(OP)?;
        let (f, kc, kh, kw) = self.v(w).dims4(OP)?;
        if kh != kw || kh == 0 {
            return shape_err(OP, format!("kernel must be square and non-empty, got {kh}×{kw}"));
        }
        if kc != c {
            return shape_err(OP, format!("input has {c} channels, kernel expects {kc}"));
        }
        if stride == 0 || dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: "stride and dilation must be ≥ 1".into(),
            });
        }
        if let Some(b) = b {
            if self.v(b).shape() != [f] {
                return shape_err(OP, format!("bias shape {:?}, expected [{f}]", self.v(b).shape()));
            }
        }
        let geom = ConvGeom { k: kh, stride, pad: padding, dilation };
        let (ho, wo) = match (geom.out_size(h), geom.out_size(wd)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(TensorError::EmptyOutput {
                    op: OP,
                    detail: format!("input {h}×{wd}, k={kh}, stride={stride}, pad={padding}, dil={dilation}"),
                })
            }
        };
        let dims = ConvDims { n, c, h, w: wd, f, ho, wo };
        let out = kernels::conv2d_forward(
            self.v(x).data(),
            self.v(w).data(),
            b.map(|b| self.v(b).data()),
            &dims,
            geom,
        );
        let value = Tensor::new(vec![n, f, ho, wo], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(OP, value, Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), geom }, &inputs)
    }

    /// Transposed convolution ("up-convolution"). Kernel Cin×Cout×k×k, output
    /// spatial size `(H−1)·stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (n, c, h, wd) = self.v(x).dims4(OP)?;
        let (kc, f, kh, kw) = self.v(w).dims4(OP)?;
        if kh != kw || kh == 0 {
            return shape_err(OP, format!("kernel must be square and non-empty, got {kh}×{kw}"));
        }
        if kc != c {
            return shape_err(OP, format!("input has {c} channels, kernel expects {kc}"));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: "stride must be ≥ 1".into(),
            });
        }
        if let Some(b) = b {
            if self.v(b).shape() != [f] {
                return shape_err(OP, format!("bias shape {:?}, expected [{f}]", self.v(b).shape()));
            }
        }
        if h == 0 || wd == 0 {
            return Err(TensorError::EmptyOutput {
                op: OP,
                detail: "empty input".into(),
            });
        }
        let (ho, wo) = ((h - 1) * stride + kh, (wd - 1) * stride + kh);
        let dims = ConvDims { n, c, h, w: wd, f, ho, wo };
        let out = kernels::conv_t_forward(
            self.v(x).data(),
            self.v(w).data(),
            b.map(|b| self.v(b).data()),
            &dims,
            stride,
            kh,
        );
        let value = Tensor::new(vec![n, f, ho, wo], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(
            OP,
            value,
            Op::ConvT2d { x: x.0, w: w.0, b: b.map(|b| b.0), stride, k: kh },
            &inputs,
        )
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first maximum in
    /// row-major window order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let (n, c, h, w) = self.v(x).dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(OP, format!("spatial dims must be even, got {h}×{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.v(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(OP, value, Op::MaxPool2 { x: x.0, argmax }, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.v(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu { x: x.0 }, &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.v(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", value, Op::Sigmoid { x: x.0 }, &[x.0])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    fn bn_check(&self, op: &'static str, x: Var, params: &[Var]) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.v(x).dims4(op)?;
        for &p in params {
            if self.v(p).shape() != [c] {
                return shape_err(op, format!("per-channel tensor {:?}, expected [{c}]", self.v(p).shape()));
            }
        }
        Ok((n, c, h * w))
    }

    /// Training-mode batch norm: normalizes each channel over N×H×W with the
    /// batch's own (biased) statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        const OP: &str = "batch_norm_train";
        let (n, c, hw) = self.bn_check(OP, x, &[gamma, beta])?;
        let m = n * hw;
        if m == 0 {
            return shape_err(OP, "empty batch");
        }
        let mf = T::from_usize(m).unwrap();
        let src = self.v(x).data();
        let (g, b) = (self.v(gamma).data(), self.v(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut stats = BatchStats {
            mean: vec![T::zero(); c],
            var: vec![T::zero(); c],
        };
        for ch in 0..c {
            let plane = |s: usize| s * c * hw + ch * hw;
            let mut sum = T::zero();
            for s in 0..n {
                sum = sum + src[plane(s)..plane(s) + hw].iter().copied().sum::<T>();
            }
            let mean = sum / mf;
            let mut sq = T::zero();
            for s in 0..n {
                for &v in &src[plane(s)..plane(s) + hw] {
                    sq = sq + (v - mean) * (v - mean);
                }
            }
            let var = sq / mf;
            let istd = T::one() / (var + eps).sqrt();
            for s in 0..n {
                for i in plane(s)..plane(s) + hw {
                    xhat[i] = (src[i] - mean) * istd;
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
            inv_std[ch] = istd;
            stats.mean[ch] = mean;
            stats.var[ch] = if m > 1 { sq / T::from_usize(m - 1).unwrap() } else { T::zero() };
        }
        let value = Tensor::new(self.v(x).shape().to_vec(), out)?;
        let var = self.push(
            OP,
            value,
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, train: true },
            &[x.0, gamma.0, beta.0],
        )?;
        Ok((var, stats))
    }

    /// Inference-mode batch norm with fixed running statistics: an affine map
    /// per channel. Running statistics receive no gradient.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: Var, var: Var, eps: T) -> Result<Var> {
        const OP: &str = "batch_norm_eval";
        let (n, c, hw) = self.bn_check(OP, x, &[gamma, beta, mean, var])?;
        let src = self.v(x).data();
        let (g, b) = (self.v(gamma).data(), self.v(beta).data());
        let (mu, vr) = (self.v(mean).data(), self.v(var).data());
        let inv_std: Vec<T> = vr.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (src[i] - mu[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let value = Tensor::new(self.v(x).shape().to_vec(), out)?;
        self.push(
            OP,
            value,
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, train: false },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Channel-wise concatenation; parts keep their order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: OP,
            detail: "no inputs".into(),
        })?;
        let (n, _, h, w) = self.v(*first).dims4(OP)?;
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.v(p).dims4(OP)?;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err(OP, format!("{:?} vs {:?}", self.v(p).shape(), self.v(*first).shape()));
            }
            meta.push((p.0, pc));
        }
        let total: usize = meta.iter().map(|m| m.1).sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for &(idx, pc) in &meta {
                let d = self.nodes[idx].value.data();
                out.extend_from_slice(&d[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], out)?;
        let inputs: Vec<usize> = meta.iter().map(|m| m.0).collect();
        self.push(OP, value, Op::Concat { parts: meta }, &inputs)
    }

    /// Per-channel spatial mean: N×C×H×W → N×C×1×1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "global_avg_pool";
        let (n, c, h, w) = self.v(x).dims4(OP)?;
        let hw = h * w;
        if hw == 0 {
            return shape_err(OP, "empty spatial extent");
        }
        let denom = T::from_usize(hw).unwrap();
        let out = self
            .v(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        self.push(OP, value, Op::GlobalAvgPool { x: x.0 }, &[x.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.v(a), self.v(b))?;
        let data = self.v(a).data().iter().zip(self.v(b).data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(self.v(a).shape().to_vec(), data)?;
        self.push("add", value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.v(a), self.v(b))?;
        let data = self.v(a).data().iter().zip(self.v(b).data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(self.v(a).shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.v(x).map(|v| v * c);
        self.push("scale", value, Op::Scale { x: x.0, c }, &[x.0])
    }

    /// `x[n,c,:,:] * s[n,c]` for `s` of shape N×C×1×1.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        const OP: &str = "scale_channels";
        let (n, c, h, w) = self.v(x).dims4(OP)?;
        if self.v(s).shape() != [n, c, 1, 1] {
            return shape_err(OP, format!("gate {:?} for input {:?}", self.v(s).shape(), self.v(x).shape()));
        }
        let hw = h * w;
        let gate = self.v(s).data();
        let data = self
            .v(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gate[i / hw])
            .collect();
        let value = Tensor::new(vec![n, c, h, w], data)?;
        self.push(OP, value, Op::ScaleChannels { x: x.0, s: s.0 }, &[x.0, s.0])
    }

    /// `x[n,c,y,x] * a[n,0,y,x]`: one spatial map broadcast over channels.
    pub fn scale_spatial(&mut self, x: Var, a: Var) -> Result<Var> {
        const OP: &str = "scale_spatial";
        let (n, c, h, w) = self.v(x).dims4(OP)?;
        if self.v(a).shape() != [n, 1, h, w] {
            return shape_err(OP, format!("map {:?} for input {:?}", self.v(a).shape(), self.v(x).shape()));
        }
        let hw = h * w;
        let map = self.v(a).data();
        let data = self
            .v(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * map[(i / (c * hw)) * hw + i % hw])
            .collect();
        let value = Tensor::new(vec![n, c, h, w], data)?;
        self.push(OP, value, Op::ScaleSpatial { x: x.0, a: a.0 }, &[x.0, a.0])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        const OP: &str = "upsample_nearest";
        if factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: "factor must be ≥ 1".into(),
            });
        }
        let (n, c, h, w) = self.v(x).dims4(OP)?;
        let (ho, wo) = (h * factor, w * factor);
        let src = self.v(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for y in 0..ho {
                let row = &src[plane * h * w + (y / factor) * w..][..w];
                for xx in 0..wo {
                    out.push(row[xx / factor]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(OP, value, Op::Upsample { x: x.0, factor }, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.v(x).sum());
        self.push("sum", value, Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.v(x).len();
        if n == 0 {
            return shape_err("mean", "empty tensor");
        }
        let value = Tensor::scalar(self.v(x).sum() / T::from_usize(n).unwrap());
        self.push("mean", value, Op::Mean { x: x.0 }, &[x.0])
    }

    /// Mean pixel-wise binary cross-entropy of probabilities against a fixed
    /// target. Probabilities are clamped to `[eps, 1−eps]` before the log;
    /// clamped entries receive zero gradient.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        const OP: &str = "bce";
        same_shape(OP, self.v(pred), target)?;
        let n = target.len();
        if n == 0 {
            return shape_err(OP, "empty tensor");
        }
        let (lo, hi) = (eps, T::one() - eps);
        let total: T = self
            .v(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.max(lo).min(hi);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum();
        let value = Tensor::scalar(total / T::from_usize(n).unwrap());
        self.push(
            OP,
            value,
            Op::Bce { pred: pred.0, target: target.data().to_vec(), eps },
            &[pred.0],
        )
    }

    /// Hash of every discrete decision taken in the forward pass (ReLU
    /// signs, pooling winners, BCE clamping). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.nodes[*x].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                Op::Bce { pred, eps, .. } => {
                    for &p in self.nodes[*pred].value.data() {
                        (p < *eps || p > T::one() - *eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode pass from a scalar loss. Every leaf that requires a
    /// gradient receives one (zeros when it does not influence the loss).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], idx: usize, shape: &[usize], data: Vec<T>) -> Result<()> {
        if !self.nodes[idx].requires_grad {
            return Ok(());
        }
        let t = Tensor::new(shape.to_vec(), data)?;
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&t)?,
            slot @ None => *slot = Some(t),
        }
        Ok(())
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (n, c, h, wd) = xv.dims4("conv2d")?;
                let (_, f, ho, wo) = out.dims4("conv2d")?;
                let dims = ConvDims { n, c, h, w: wd, f, ho, wo };
                let (dx, dw, db) = kernels::conv2d_backward(xv.data(), wv.data(), gd, &dims, *geom, self.needs(*x));
                if self.needs(*x) {
                    self.accumulate(grads, *x, xv.shape(), dx)?;
                }
                self.accumulate(grads, *w, wv.shape(), dw)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, &[f], db)?;
                }
            }
            Op::ConvT2d { x, w, b, stride, k } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (n, c, h, wd) = xv.dims4("conv_transpose2d")?;
                let (_, f, ho, wo) = out.dims4("conv_transpose2d")?;
                let dims = ConvDims { n, c, h, w: wd, f, ho, wo };
                let (dx, dw, db) = kernels::conv_t_backward(xv.data(), wv.data(), gd, &dims, *stride, *k, self.needs(*x));
                if self.needs(*x) {
                    self.accumulate(grads, *x, xv.shape(), dx)?;
                }
                self.accumulate(grads, *w, wv.shape(), dw)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, &[f], db)?;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = &self.nodes[*x].value;
                let mut dx = vec![T::zero(); xv.len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src as usize] = dx[src as usize] + gv;
                }
                self.accumulate(grads, *x, xv.shape(), dx)?;
            }
            Op::Relu { x } => {
                let xv = &self.nodes[*x].value;
                let dx = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, xv.shape(), dx)?;
            }
            Op::Sigmoid { x } => {
                let dx = out.data().iter().zip(gd).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, out.shape(), dx)?;
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, h, w) = out.dims4("batch_norm")?;
                let hw = h * w;
                let m = T::from_usize(n * hw).unwrap();
                let gam = self.nodes[*gamma].value.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); out.len()];
                for ch in 0..c {
                    let idx = |s: usize| (s * c + ch) * hw;
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for s in 0..n {
                        for j in idx(s)..idx(s) + hw {
                            sg = sg + gd[j];
                            sgx = sgx + gd[j] * xhat[j];
                        }
                    }
                    dgamma[ch] = sgx;
                    dbeta[ch] = sg;
                    let scale = gam[ch] * inv_std[ch];
                    for s in 0..n {
                        for j in idx(s)..idx(s) + hw {
                            dx[j] = if *train {
                                scale * (gd[j] - sg / m - xhat[j] * sgx / m)
                            } else {
                                scale * gd[j]
                            };
                        }
                    }
                }
                self.accumulate(grads, *x, out.shape(), dx)?;
                self.accumulate(grads, *gamma, &[c], dgamma)?;
                self.accumulate(grads, *beta, &[c], dbeta)?;
            }
            Op::Concat { parts } => {
                let (n, total, h, w) = out.dims4("concat_channels")?;
                let hw = h * w;
                let mut offset = 0;
                for &(idx, pc) in parts {
                    if self.needs(idx) {
                        let mut dx = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let start = (s * total + offset) * hw;
                            dx.extend_from_slice(&gd[start..start + pc * hw]);
                        }
                        self.accumulate(grads, idx, &[n, pc, h, w], dx)?;
                    }
                    offset += pc;
                }
            }
            Op::GlobalAvgPool { x } => {
                let xv = &self.nodes[*x].value;
                let (_, _, h, w) = xv.dims4("global_avg_pool")?;
                let hw = h * w;
                let denom = T::from_usize(hw).unwrap();
                let dx = (0..xv.len()).map(|j| gd[j / hw] / denom).collect();
                self.accumulate(grads, *x, xv.shape(), dx)?;
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, out.shape(), gd.to_vec())?;
                self.accumulate(grads, *b, out.shape(), gd.to_vec())?;
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.needs(*a) {
                    let da = gd.iter().zip(bv).map(|(&gv, &q)| gv * q).collect();
                    self.accumulate(grads, *a, out.shape(), da)?;
                }
                if self.needs(*b) {
                    let db = gd.iter().zip(av).map(|(&gv, &p)| gv * p).collect();
                    self.accumulate(grads, *b, out.shape(), db)?;
                }
            }
            Op::Scale { x, c } => {
                let dx = gd.iter().map(|&gv| gv * *c).collect();
                self.accumulate(grads, *x, out.shape(), dx)?;
            }
            Op::ScaleChannels { x, s } => {
                let (_, _, h, w) = out.dims4("scale_channels")?;
                let hw = h * w;
                let xv = self.nodes[*x].value.data();
                let sv = &self.nodes[*s].value;
                if self.needs(*x) {
                    let dx = gd.iter().enumerate().map(|(j, &gv)| gv * sv.data()[j / hw]).collect();
                    self.accumulate(grads, *x, out.shape(), dx)?;
                }
                if self.needs(*s) {
                    let ds = gd
                        .chunks(hw)
                        .zip(xv.chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, sv.shape(), ds)?;
                }
            }
            Op::ScaleSpatial { x, a } => {
                let (n, c, h, w) = out.dims4("scale_spatial")?;
                let hw = h * w;
                let xv = self.nodes[*x].value.data();
                let av = self.nodes[*a].value.data();
                if self.needs(*x) {
                    let dx = gd
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * av[(j / (c * hw)) * hw + j % hw])
                        .collect();
                    self.accumulate(grads, *x, out.shape(), dx)?;
                }
                if self.needs(*a) {
                    let mut da = vec![T::zero(); n * hw];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for p in 0..hw {
                                da[s * hw + p] = da[s * hw + p] + gd[base + p] * xv[base + p];
                            }
                        }
                    }
                    self.accumulate(grads, *a, &[n, 1, h, w], da)?;
                }
            }
            Op::Upsample { x, factor } => {
                let xv = &self.nodes[*x].value;
                let (_, _, h, w) = xv.dims4("upsample_nearest")?;
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); xv.len()];
                for (plane, gp) in gd.chunks(ho * wo).enumerate() {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let j = plane * h * w + (y / factor) * w + xx / factor;
                            dx[j] = dx[j] + gp[y * wo + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, xv.shape(), dx)?;
            }
            Op::Sum { x } => {
                let xv = &self.nodes[*x].value;
                self.accumulate(grads, *x, xv.shape(), vec![gd[0]; xv.len()])?;
            }
            Op::Mean { x } => {
                let xv = &self.nodes[*x].value;
                let v = gd[0] / T::from_usize(xv.len()).unwrap();
                self.accumulate(grads, *x, xv.shape(), vec![v; xv.len()])?;
            }
            Op::Bce { pred, target, eps } => {
                let pv = &self.nodes[*pred].value;
                let n = T::from_usize(pv.len()).unwrap();
                let (lo, hi) = (*eps, T::one() - *eps);
                let scale = gd[0] / n;
                let dp = pv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p < lo || p > hi {
                            T::zero()
                        } else {
                            scale * (-t / p + (T::one() - t) / (T::one() - p))
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, pv.shape(), dp)?;
            }
        }
        Ok(())
    }
}
