//! Finite-difference checks of blocks and whole networks against their
//! parameter stores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scseg_autodiff::{grad_check, GradCheckConfig, GradCheckReport, Graph, Tensor, TensorError, Var};

use super::params::{Fwd, ParamStore};
use crate::error::{Error, Result};

/// Scalar built from a block's output.
#[derive(Clone, Debug)]
pub enum CheckLoss {
    /// `Σ w ⊙ y` with fixed pseudo-random weights.
    Projection { seed: u64 },
    /// Mean BCE of probabilities against a fixed binary target.
    Bce { target: Tensor<f64> },
}

fn to_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "model",
            detail: other.to_string(),
        },
    }
}

/// Gradient check of `forward` with respect to the free `inputs` and every
/// entry of `store`, in training mode.
///
/// `forward` receives the context (parameters bound in store order) and the
/// input variables.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    forward: F,
    loss: &CheckLoss,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Fwd<f64>, &[Var]) -> Result<Var>,
{
    let mut all: Vec<Tensor<f64>> = inputs.to_vec();
    all.extend(store.entries().iter().map(|e| e.tensor.clone()));
    let n_inputs = inputs.len();
    let report = grad_check(
        |g: &mut Graph<f64>, vars: &[Var]| {
            let params = vars[n_inputs..].to_vec();
            let mut cx = Fwd::new(g, params, true);
            let y = forward(&mut cx, &vars[..n_inputs]).map_err(to_tensor_error)?;
            match loss {
                CheckLoss::Projection { seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    let w = Tensor::from_fn(cx.g.value(y).shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
                    let wv = cx.g.constant(w);
                    let p = cx.g.mul(y, wv)?;
                    cx.g.sum(p)
                }
                CheckLoss::Bce { target } => cx.g.bce(y, target, 1e-7),
            }
        },
        &all,
        cfg,
    )?;
    Ok(report)
}
