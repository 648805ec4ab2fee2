//! Reusable network blocks. Each block owns indices into the model's
//! [`ParamStore`](super::ParamStore) and runs against a [`Fwd`] context.

use scseg_autodiff::{Real, Var};

use super::params::{Builder, Fwd, StatUpdate};
use crate::error::{Error, Result};

pub(crate) const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv {
    weight: usize,
    bias: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv {
    pub fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize, k: usize) -> Self {
        Self::with_geometry(b, name, in_ch, out_ch, k, 1, k / 2, 1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_geometry(
        b: &mut Builder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        b.scoped(name, |b| Self {
            weight: b.he_uniform("weight", vec![out_ch, in_ch, k, k], in_ch * k * k),
            bias: b.constant("bias", vec![out_ch], 0.0, true),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            dilation,
        })
    }

    /// Unscoped stride-1 conv with every bias set to `bias`.
    pub(crate) fn with_init(b: &mut Builder, in_ch: usize, out_ch: usize, k: usize, bias: f64) -> Self {
        Self {
            weight: b.he_uniform("weight", vec![out_ch, in_ch, k, k], in_ch * k * k),
            bias: b.constant("bias", vec![out_ch], bias, true),
            in_ch,
            out_ch,
            k,
            stride: 1,
            pad: k / 2,
            dilation: 1,
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        Ok(cx.g.conv2d(x, w, Some(b), self.stride, self.pad, self.dilation)?)
    }

    pub fn param_indices(&self) -> [usize; 2] {
        [self.weight, self.bias]
    }
}

/// k=2, stride-2 transposed convolution ("up-convolution").
#[derive(Clone, Debug)]
pub struct UpConv {
    weight: usize,
    bias: usize,
}

impl UpConv {
    pub fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize) -> Self {
        b.scoped(name, |b| Self {
            weight: b.he_uniform("weight", vec![in_ch, out_ch, 2, 2], in_ch),
            bias: b.constant("bias", vec![out_ch], 0.0, true),
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        Ok(cx.g.conv_transpose2d(x, w, Some(b), 2)?)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

impl Norm {
    pub fn new(b: &mut Builder, name: &str, ch: usize) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.constant("gamma", vec![ch], 1.0, true),
            beta: b.constant("beta", vec![ch], 0.0, true),
            running_mean: b.constant("running_mean", vec![ch], 0.0, false),
            running_var: b.constant("running_var", vec![ch], 1.0, false),
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let eps = T::from_f64_lossy(BN_EPS);
        let (gamma, beta) = (cx.p(self.gamma), cx.p(self.beta));
        if cx.train {
            let (y, stats) = cx.g.batch_norm_train(x, gamma, beta, eps)?;
            cx.updates.push(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
            Ok(y)
        } else {
            let (m, v) = (cx.p(self.running_mean), cx.p(self.running_var));
            Ok(cx.g.batch_norm_eval(x, gamma, beta, m, v, eps)?)
        }
    }

    pub fn beta_index(&self) -> usize {
        self.beta
    }
}

/// conv → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv,
    norm: Norm,
}

impl ConvNormRelu {
    pub fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize, k: usize) -> Self {
        Self::dilated(b, name, in_ch, out_ch, k, 1)
    }

    pub fn dilated(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize, k: usize, dilation: usize) -> Self {
        b.scoped(name, |b| Self {
            conv: Conv::with_geometry(b, "conv", in_ch, out_ch, k, 1, dilation * (k / 2), dilation),
            norm: Norm::new(b, "bn", out_ch),
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.norm.forward(cx, y)?;
        Ok(cx.g.relu(y)?)
    }
}

/// Two 3×3 conv–norm–ReLU stages; spatial size preserved.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    first: ConvNormRelu,
    second: ConvNormRelu,
    pub out_ch: usize,
}

impl DoubleConv {
    pub fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize) -> Self {
        b.scoped(name, |b| Self {
            first: ConvNormRelu::new(b, "conv1", in_ch, out_ch, 3),
            second: ConvNormRelu::new(b, "conv2", out_ch, out_ch, 3),
            out_ch,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let y = self.first.forward(cx, x)?;
        self.second.forward(cx, y)
    }
}

/// `out = F(x) + proj(x)` with `F = conv3×3(stride)–BN–ReLU–conv3×3–BN`.
/// The projection is a strided 1×1 conv when channels or stride change and
/// the identity otherwise.
#[derive(Clone, Debug)]
pub struct Residual {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    proj: Option<Conv>,
    pub out_ch: usize,
}

impl Residual {
    pub fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        b.scoped(name, |b| Self {
            conv1: Conv::with_geometry(b, "conv1", in_ch, out_ch, 3, stride, 1, 1),
            norm1: Norm::new(b, "bn1", out_ch),
            conv2: Conv::new(b, "conv2", out_ch, out_ch, 3),
            norm2: Norm::new(b, "bn2", out_ch),
            proj: (in_ch != out_ch || stride != 1)
                .then(|| Conv::with_geometry(b, "proj", in_ch, out_ch, 1, stride, 0, 1)),
            out_ch,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.norm1.forward(cx, y)?;
        let y = cx.g.relu(y)?;
        let y = self.conv2.forward(cx, y)?;
        let y = self.norm2.forward(cx, y)?;
        let shortcut = match &self.proj {
            Some(p) => p.forward(cx, x)?,
            None => x,
        };
        Ok(cx.g.add(y, shortcut)?)
    }

    /// Parameters of the residual branch `F` (convolutions and BN shifts).
    pub fn branch_param_indices(&self) -> Vec<usize> {
        let mut v = Vec::new();
        v.extend(self.conv1.param_indices());
        v.extend(self.conv2.param_indices());
        v.push(self.norm1.beta_index());
        v.push(self.norm2.beta_index());
        v
    }

    pub fn has_projection(&self) -> bool {
        self.proj.is_some()
    }
}

/// Squeeze (global average pool) and excitation (two 1×1 layers) producing a
/// per-channel sigmoid gate.
#[derive(Clone, Debug)]
pub struct SqueezeExcitation {
    reduce: Conv,
    expand: Conv,
}

impl SqueezeExcitation {
    pub fn new(b: &mut Builder, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = channels / reduction.max(1);
        if reduction == 0 || hidden < 1 {
            return Err(Error::InvalidSpec(format!(
                "squeeze-excitation: {channels} channels / reduction {reduction} < 1"
            )));
        }
        Ok(b.scoped(name, |b| Self {
            reduce: Conv::new(b, "reduce", channels, hidden, 1),
            expand: Conv::new(b, "expand", hidden, channels, 1),
        }))
    }

    pub fn gate<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let s = cx.g.global_avg_pool(x)?;
        let s = self.reduce.forward(cx, s)?;
        let s = cx.g.relu(s)?;
        let s = self.expand.forward(cx, s)?;
        Ok(cx.g.sigmoid(s)?)
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let gate = self.gate(cx, x)?;
        Ok(cx.g.scale_channels(x, gate)?)
    }

    pub fn param_indices(&self) -> Vec<usize> {
        [self.reduce.param_indices(), self.expand.param_indices()].concat()
    }
}

/// Additive attention gate: `α = σ(ψ(ReLU(Wx·skip + up(Wg·gate))))`,
/// output `α ⊙ skip` with a single-channel α broadcast over channels.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    wx: Conv,
    wg: Conv,
    psi: Conv,
}

impl AttentionGate {
    pub fn new(b: &mut Builder, name: &str, skip_ch: usize, gate_ch: usize, inter_ch: usize) -> Result<Self> {
        if inter_ch < 1 {
            return Err(Error::InvalidSpec("attention gate: inter_ch must be ≥ 1".into()));
        }
        Ok(b.scoped(name, |b| Self {
            wx: Conv::new(b, "wx", skip_ch, inter_ch, 1),
            wg: Conv::new(b, "wg", gate_ch, inter_ch, 1),
            psi: Conv::new(b, "psi", inter_ch, 1, 1),
        }))
    }

    /// Returns the attention map α (N×1×H×W).
    pub fn coefficients<T: Real>(&self, cx: &mut Fwd<T>, skip: Var, gate: Var) -> Result<Var> {
        let (_, _, sh, sw) = cx.g.value(skip).dims4("attention_gate")?;
        let (_, _, gh, gw) = cx.g.value(gate).dims4("attention_gate")?;
        if gh == 0 || sh % gh != 0 || sw % gw.max(1) != 0 || sh / gh != sw / gw {
            return Err(Error::InvalidArgument(format!(
                "attention gate: gate {gh}×{gw} cannot be upsampled to skip {sh}×{sw}"
            )));
        }
        let theta = self.wx.forward(cx, skip)?;
        let phi = self.wg.forward(cx, gate)?;
        let phi = cx.g.upsample_nearest(phi, sh / gh)?;
        let f = cx.g.add(theta, phi)?;
        let f = cx.g.relu(f)?;
        let a = self.psi.forward(cx, f)?;
        Ok(cx.g.sigmoid(a)?)
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, skip: Var, gate: Var) -> Result<Var> {
        let alpha = self.coefficients(cx, skip, gate)?;
        Ok(cx.g.scale_spatial(skip, alpha)?)
    }

    pub fn param_indices(&self) -> Vec<usize> {
        [self.wx.param_indices(), self.wg.param_indices(), self.psi.param_indices()].concat()
    }
}

/// Atrous spatial pyramid pooling: parallel dilated 3×3 branches (each with
/// `out_ch` channels, padding = rate), concatenated and fused by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct Aspp {
    branches: Vec<ConvNormRelu>,
    fuse: ConvNormRelu,
}

impl Aspp {
    pub fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize, rates: &[usize]) -> Result<Self> {
        if rates.is_empty() || rates.contains(&0) {
            return Err(Error::InvalidSpec(format!("aspp: rates must be non-empty and ≥ 1, got {rates:?}")));
        }
        Ok(b.scoped(name, |b| Self {
            branches: rates
                .iter()
                .enumerate()
                .map(|(i, &r)| ConvNormRelu::dilated(b, &format!("branch{i}"), in_ch, out_ch, 3, r))
                .collect(),
            fuse: ConvNormRelu::new(b, "fuse", out_ch * rates.len(), out_ch, 1),
        }))
    }

    pub fn concat_channels(&self) -> usize {
        self.branches.iter().map(|br| br.conv.out_ch).sum()
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|br| br.forward(cx, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = cx.g.concat_channels(&outs)?;
        self.fuse.forward(cx, cat)
    }
}

/// Densely connected block: every layer sees the concatenation of the block
/// input and all earlier layer outputs; the block returns all of them.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<ConvNormRelu>,
    pub out_ch: usize,
}

impl DenseBlock {
    pub fn new(b: &mut Builder, name: &str, in_ch: usize, growth: usize, layers: usize) -> Result<Self> {
        if growth < 1 || layers < 1 {
            return Err(Error::InvalidSpec("dense block: growth and layers must be ≥ 1".into()));
        }
        Ok(b.scoped(name, |b| Self {
            layers: (0..layers)
                .map(|l| ConvNormRelu::new(b, &format!("layer{l}"), in_ch + l * growth, growth, 3))
                .collect(),
            out_ch: in_ch + growth * layers,
        }))
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let mut features = vec![x];
        for layer in &self.layers {
            let input = if features.len() == 1 {
                x
            } else {
                cx.g.concat_channels(&features)?
            };
            features.push(layer.forward(cx, input)?);
        }
        Ok(cx.g.concat_channels(&features)?)
    }
}

/// 1×1 conv–norm–ReLU halving the channel count (floor, at least 1).
#[derive(Clone, Debug)]
pub struct Transition {
    inner: ConvNormRelu,
    pub out_ch: usize,
}

impl Transition {
    pub fn new(b: &mut Builder, name: &str, in_ch: usize) -> Self {
        let out_ch = (in_ch / 2).max(1);
        Self {
            inner: ConvNormRelu::new(b, name, in_ch, out_ch, 1),
            out_ch,
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        self.inner.forward(cx, x)
    }
}
