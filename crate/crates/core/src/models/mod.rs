//! Encoder-decoder segmentation networks built from reusable blocks.

mod arch;
pub mod blocks;
mod check;
mod params;
mod spec;

use scseg_autodiff::{Graph, Real, Tensor, Var};

pub use arch::Trunk;
pub use blocks::BN_MOMENTUM;
pub use check::{grad_check_params, CheckLoss};
pub use params::{Builder, Fwd, ParamEntry, ParamStore, StatUpdate};
pub use spec::{ModelSpec, Variant};

use crate::error::{Error, Result};

/// A constructed network. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    trunk: Trunk,
    head: blocks::Conv,
}

/// Builds the network described by `spec` with He-initialized weights drawn
/// from a generator seeded by `seed`.
pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<(Model, ParamStore<T>)> {
    spec.validate()?;
    let mut b = Builder::new(seed);
    let (trunk, out_ch) = Trunk::build(&mut b, spec)?;
    let head = arch::head(&mut b, out_ch, spec.output_prior);
    let store = b.finish()?;
    Ok((
        Model {
            spec: spec.clone(),
            trunk,
            head,
        },
        store,
    ))
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    /// Maps an N×1×S×S batch to N×1×S×S probabilities.
    pub fn forward<T: Real>(&self, cx: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = cx.g.value(x).dims4("model input")?;
        let s = self.spec.input_size;
        if c != 1 || h != s || w != s {
            return Err(Error::InvalidArgument(format!(
                "model expects N×1×{s}×{s} input, got {:?}",
                cx.g.value(x).shape()
            )));
        }
        let features = self.trunk.forward(cx, x)?;
        let logits = self.head.forward(cx, features)?;
        cx.record("logits", logits);
        Ok(cx.g.sigmoid(logits)?)
    }

    /// Inference-mode forward with running batch-norm statistics.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = store.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let mut cx = Fwd::new(&mut g, params, false);
        let y = self.forward(&mut cx, x)?;
        Ok(g.value(y).clone())
    }
}
