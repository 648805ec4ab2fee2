//! The five encoder-decoder architectures.

use scseg_autodiff::{Real, Var};

use super::blocks::{AttentionGate, Aspp, Conv, DenseBlock, DoubleConv, Residual, SqueezeExcitation, Transition, UpConv};
use super::params::{Builder, Fwd};
use super::spec::{ModelSpec, Variant};
use crate::error::Result;

/// Plain U-net trunk. `extra_in[i]` adds channels injected at encoder level
/// `i`, which is how the second network of a bridged pair receives the first
/// network's decoder features.
#[derive(Clone, Debug)]
pub struct UNetTrunk {
    enc: Vec<DoubleConv>,
    bridge: DoubleConv,
    ups: Vec<UpConv>,
    dec: Vec<DoubleConv>,
}

pub struct TrunkOutput {
    pub features: Var,
    /// Decoder output at each level, index 0 = full resolution.
    pub decoder: Vec<Var>,
}

impl UNetTrunk {
    fn new(b: &mut Builder, spec: &ModelSpec, in_ch: usize, extra_in: &[usize]) -> Self {
        let d = spec.depth;
        let c = |i| spec.channels(i);
        let enc = (0..d)
            .map(|i| {
                let prev = if i == 0 { in_ch } else { c(i - 1) };
                DoubleConv::new(b, &format!("enc{i}"), prev + extra_in.get(i).copied().unwrap_or(0), c(i))
            })
            .collect();
        let bridge = DoubleConv::new(b, "bridge", c(d - 1), c(d));
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for i in (0..d).rev() {
            ups.push(UpConv::new(b, &format!("up{i}"), c(i + 1), c(i)));
            dec.push(DoubleConv::new(b, &format!("dec{i}"), 2 * c(i), c(i)));
        }
        Self { enc, bridge, ups, dec }
    }

    fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var, inject: &[Var], tag: &str) -> Result<TrunkOutput> {
        let mut skips = Vec::new();
        let mut h = x;
        for (i, block) in self.enc.iter().enumerate() {
            if i > 0 {
                h = cx.g.max_pool2d(h)?;
            }
            if let Some(&extra) = inject.get(i) {
                h = cx.g.concat_channels(&[h, extra])?;
            }
            h = block.forward(cx, h)?;
            cx.record(format!("{tag}enc{i}"), h);
            skips.push(h);
        }
        h = cx.g.max_pool2d(h)?;
        h = self.bridge.forward(cx, h)?;
        let mut decoder = vec![h; self.enc.len()];
        for (step, (up, block)) in self.ups.iter().zip(&self.dec).enumerate() {
            let level = self.enc.len() - 1 - step;
            let u = up.forward(cx, h)?;
            let cat = cx.g.concat_channels(&[skips[level], u])?;
            h = block.forward(cx, cat)?;
            cx.record(format!("{tag}dec{level}"), h);
            decoder[level] = h;
        }
        Ok(TrunkOutput { features: h, decoder })
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Plain(DoubleConv),
    Res(Residual),
}

impl Stage {
    fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        match self {
            Stage::Plain(b) => b.forward(cx, x),
            Stage::Res(b) => b.forward(cx, x),
        }
    }
}

/// Shared body of U-net+ (double-conv stages, max-pool downsampling) and
/// ResU-net++ (residual stages, strided downsampling): squeeze-excitation on
/// encoder outputs, attention gates on skips, ASPP at the bridge and before
/// the head.
#[derive(Clone, Debug)]
pub struct AttentionTrunk {
    residual: bool,
    enc: Vec<Stage>,
    se: Vec<SqueezeExcitation>,
    bridge: Stage,
    bridge_aspp: Aspp,
    att: Vec<AttentionGate>,
    ups: Vec<UpConv>,
    dec: Vec<Stage>,
    out_aspp: Aspp,
}

impl AttentionTrunk {
    fn new(b: &mut Builder, spec: &ModelSpec, residual: bool) -> Result<Self> {
        let d = spec.depth;
        let c = |i| spec.channels(i);
        let stage = |b: &mut Builder, name: &str, i: usize, o: usize, stride: usize| {
            if residual {
                Stage::Res(Residual::new(b, name, i, o, stride))
            } else {
                Stage::Plain(DoubleConv::new(b, name, i, o))
            }
        };
        let mut enc = Vec::new();
        let mut se = Vec::new();
        for i in 0..d {
            let prev = if i == 0 { 1 } else { c(i - 1) };
            enc.push(stage(b, &format!("enc{i}"), prev, c(i), if i == 0 { 1 } else { 2 }));
            se.push(SqueezeExcitation::new(b, &format!("se{i}"), c(i), spec.se_reduction)?);
        }
        let bridge = stage(b, "bridge", c(d - 1), c(d), 2);
        let bridge_aspp = Aspp::new(b, "bridge_aspp", c(d), c(d), &spec.aspp_rates)?;
        let (mut att, mut ups, mut dec) = (Vec::new(), Vec::new(), Vec::new());
        for i in (0..d).rev() {
            att.push(AttentionGate::new(b, &format!("att{i}"), c(i), c(i + 1), (c(i) / 2).max(1))?);
            ups.push(UpConv::new(b, &format!("up{i}"), c(i + 1), c(i)));
            dec.push(stage(b, &format!("dec{i}"), 2 * c(i), c(i), 1));
        }
        let out_aspp = Aspp::new(b, "out_aspp", c(0), c(0), &spec.aspp_rates)?;
        Ok(Self {
            residual,
            enc,
            se,
            bridge,
            bridge_aspp,
            att,
            ups,
            dec,
            out_aspp,
        })
    }

    fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let mut skips = Vec::new();
        let mut h = x;
        for (i, (stage, se)) in self.enc.iter().zip(&self.se).enumerate() {
            if i > 0 && !self.residual {
                h = cx.g.max_pool2d(h)?;
            }
            let e = stage.forward(cx, h)?;
            cx.record(format!("enc{i}"), e);
            h = se.forward(cx, e)?;
            cx.record(format!("se{i}"), h);
            skips.push(h);
        }
        if !self.residual {
            h = cx.g.max_pool2d(h)?;
        }
        h = self.bridge.forward(cx, h)?;
        h = self.bridge_aspp.forward(cx, h)?;
        for (step, ((att, up), stage)) in self.att.iter().zip(&self.ups).zip(&self.dec).enumerate() {
            let level = self.enc.len() - 1 - step;
            let gated = att.forward(cx, skips[level], h)?;
            cx.record(format!("att{level}"), gated);
            let u = up.forward(cx, h)?;
            let cat = cx.g.concat_channels(&[gated, u])?;
            h = stage.forward(cx, cat)?;
        }
        self.out_aspp.forward(cx, h)
    }

    pub fn residual_blocks(&self) -> Vec<&Residual> {
        self.enc
            .iter()
            .chain(std::iter::once(&self.bridge))
            .chain(&self.dec)
            .filter_map(|s| match s {
                Stage::Res(r) => Some(r),
                Stage::Plain(_) => None,
            })
            .collect()
    }

    pub fn gating_param_indices(&self) -> Vec<usize> {
        self.se
            .iter()
            .flat_map(|s| s.param_indices())
            .chain(self.att.iter().flat_map(|a| a.param_indices()))
            .collect()
    }
}

/// U-net with dense blocks followed by channel-halving transitions.
#[derive(Clone, Debug)]
pub struct DenseTrunk {
    stem: super::blocks::ConvNormRelu,
    enc: Vec<(DenseBlock, Transition)>,
    bridge: (DenseBlock, Transition),
    ups: Vec<UpConv>,
    dec: Vec<(DenseBlock, Transition)>,
    pub out_ch: usize,
}

impl DenseTrunk {
    fn new(b: &mut Builder, spec: &ModelSpec) -> Result<Self> {
        let (g, l) = (spec.growth_rate, spec.layers_per_dense_block);
        let stem = super::blocks::ConvNormRelu::new(b, "stem", 1, spec.base_channels, 3);
        let mut ch = spec.base_channels;
        let mut enc = Vec::new();
        let mut skip_ch = Vec::new();
        for i in 0..spec.depth {
            let dense = DenseBlock::new(b, &format!("enc{i}.dense"), ch, g, l)?;
            let trans = Transition::new(b, &format!("enc{i}.transition"), dense.out_ch);
            ch = trans.out_ch;
            skip_ch.push(ch);
            enc.push((dense, trans));
        }
        let dense = DenseBlock::new(b, "bridge.dense", ch, g, l)?;
        let trans = Transition::new(b, "bridge.transition", dense.out_ch);
        ch = trans.out_ch;
        let bridge = (dense, trans);
        let (mut ups, mut dec) = (Vec::new(), Vec::new());
        for i in (0..spec.depth).rev() {
            ups.push(UpConv::new(b, &format!("up{i}"), ch, skip_ch[i]));
            let dense = DenseBlock::new(b, &format!("dec{i}.dense"), 2 * skip_ch[i], g, l)?;
            let trans = Transition::new(b, &format!("dec{i}.transition"), dense.out_ch);
            ch = trans.out_ch;
            dec.push((dense, trans));
        }
        Ok(Self {
            stem,
            enc,
            bridge,
            ups,
            dec,
            out_ch: ch,
        })
    }

    fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(cx, x)?;
        let mut skips = Vec::new();
        for (i, (dense, trans)) in self.enc.iter().enumerate() {
            h = dense.forward(cx, h)?;
            h = trans.forward(cx, h)?;
            cx.record(format!("enc{i}"), h);
            skips.push(h);
            h = cx.g.max_pool2d(h)?;
        }
        h = self.bridge.0.forward(cx, h)?;
        h = self.bridge.1.forward(cx, h)?;
        for (step, (up, (dense, trans))) in self.ups.iter().zip(&self.dec).enumerate() {
            let level = self.enc.len() - 1 - step;
            let u = up.forward(cx, h)?;
            let cat = cx.g.concat_channels(&[skips[level], u])?;
            h = dense.forward(cx, cat)?;
            h = trans.forward(cx, h)?;
        }
        Ok(h)
    }
}

/// Two stacked U-nets. Decoder output of the first network at level L is
/// concatenated into the encoder input of the second network at level L.
#[derive(Clone, Debug)]
pub struct BridgedTrunk {
    first: UNetTrunk,
    second: UNetTrunk,
}

impl BridgedTrunk {
    fn new(b: &mut Builder, spec: &ModelSpec) -> Self {
        let first = b.scoped("u1", |b| UNetTrunk::new(b, spec, 1, &[]));
        let extra: Vec<usize> = (0..spec.depth).map(|i| spec.channels(i)).collect();
        let second = b.scoped("u2", |b| UNetTrunk::new(b, spec, 1, &extra));
        Self { first, second }
    }

    fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let a = self.first.forward(cx, x, &[], "u1.")?;
        let b = self.second.forward(cx, x, &a.decoder, "u2.")?;
        Ok(b.features)
    }
}

#[derive(Clone, Debug)]
pub enum Trunk {
    UNet(UNetTrunk),
    Attention(AttentionTrunk),
    Dense(DenseTrunk),
    Bridged(BridgedTrunk),
}

impl Trunk {
    pub(crate) fn build(b: &mut Builder, spec: &ModelSpec) -> Result<(Self, usize)> {
        Ok(match spec.variant {
            Variant::UNet => (Trunk::UNet(UNetTrunk::new(b, spec, 1, &[])), spec.base_channels),
            Variant::UNetPlus => (Trunk::Attention(AttentionTrunk::new(b, spec, false)?), spec.base_channels),
            Variant::ResUNetPP => (Trunk::Attention(AttentionTrunk::new(b, spec, true)?), spec.base_channels),
            Variant::DenseUNet => {
                let t = DenseTrunk::new(b, spec)?;
                let ch = t.out_ch;
                (Trunk::Dense(t), ch)
            }
            Variant::BridgedUNet => (Trunk::Bridged(BridgedTrunk::new(b, spec)), spec.base_channels),
        })
    }

    pub(crate) fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        match self {
            Trunk::UNet(t) => Ok(t.forward(cx, x, &[], "")?.features),
            Trunk::Attention(t) => t.forward(cx, x),
            Trunk::Dense(t) => t.forward(cx, x),
            Trunk::Bridged(t) => t.forward(cx, x),
        }
    }

    /// Total encoder levels across all stacked networks.
    pub fn encoder_levels(&self) -> usize {
        match self {
            Trunk::UNet(t) => t.enc.len(),
            Trunk::Attention(t) => t.enc.len(),
            Trunk::Dense(t) => t.enc.len(),
            Trunk::Bridged(t) => t.first.enc.len() + t.second.enc.len(),
        }
    }

    /// Feature connections from one stacked network into the next.
    pub fn inter_network_connections(&self) -> usize {
        match self {
            Trunk::Bridged(t) => t.second.enc.len(),
            _ => 0,
        }
    }
}

/// 1×1 output conv whose bias starts at the log-odds of `prior`, so the
/// initial prediction matches the expected foreground fraction.
pub(crate) fn head(b: &mut Builder, in_ch: usize, prior: f64) -> Conv {
    b.scoped("head", |b| Conv::with_init(b, in_ch, 1, 1, (prior / (1.0 - prior)).ln()))
}
