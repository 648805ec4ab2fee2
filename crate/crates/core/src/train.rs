//! Binary cross-entropy training with Adam and validation-Dice early
//! stopping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scseg_autodiff::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_stats::dice;
use crate::models::{Fwd, Model, ParamStore, Variant, BN_MOMENTUM};
use crate::plane::{Image, Mask};
use crate::preprocess::SlicePair;

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Mean pixel-wise binary cross-entropy of `pred` against `target`.
pub fn bce_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    Ok(g.bce(pred, target, T::from_f64(BCE_EPS).expect("representable"))?)
}

/// Fraction of pixels where `pred ≥ 0.5` agrees with the binary target.
pub fn pixel_accuracy<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "accuracy over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    let half = T::from_f64(0.5).expect("representable");
    let hits = pred
        .iter()
        .zip(target)
        .filter(|(&p, &t)| (p >= half) == (t >= half))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !(open(self.beta1) && open(self.beta2)) || !(self.eps > 0.0) || !(self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "adam: need 0 < beta1, beta2 < 1, eps > 0 and lr ≥ 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// First and second moments for every store entry, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One Adam update of every trainable entry. `grads[i]` belongs to store
/// entry `i`; entries without a gradient are left alone.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c = |x: f64| T::from_f64(x).expect("representable");
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let bias1 = c(1.0 - cfg.beta1.powi(t));
    let bias2 = c(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (c(cfg.lr), c(cfg.eps));
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if !store.entry(i).trainable {
            continue;
        }
        if g.shape() != store.entry(i).tensor.shape() {
            return Err(Error::InvalidArgument(format!(
                "adam: gradient {:?} for parameter {} of shape {:?}",
                g.shape(),
                store.entry(i).name,
                store.entry(i).tensor.shape()
            )));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let theta = store.tensor_mut(i).data_mut();
        for (((th, mi), vi), &gi) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *th = *th - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without validation-Dice improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Per-architecture replacements for `epochs`, keyed by variant name.
    pub epoch_overrides: BTreeMap<String, usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 4,
            adam: AdamConfig::default(),
            patience: 15,
            seed: 0,
            epoch_overrides: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.patience < 1 || self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config("epochs, batch_size and patience must be ≥ 1".into()));
        }
        for name in self.epoch_overrides.keys() {
            if Variant::parse(name).is_none() {
                return Err(Error::Config(format!("epoch_overrides: unknown architecture {name:?}")));
            }
        }
        Ok(())
    }

    pub fn epochs_for(&self, variant: Variant) -> usize {
        self.epoch_overrides.get(variant.name()).copied().unwrap_or(self.epochs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_dice: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_dice\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.8}\n",
            r.epoch, r.train_loss, r.train_acc, r.val_dice
        ));
    }
    out
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub store: ParamStore<f32>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stopped_early: bool,
    pub adam_steps: u64,
}

/// Stacks slices into an N×1×H×W batch of images and of binary targets.
pub fn stack_batch(pairs: &[&SlicePair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let Some(first) = pairs.first() else {
        return Err(Error::EmptyDataset("empty batch".into()));
    };
    let (h, w) = first.image.dims();
    let mut x = Vec::with_capacity(pairs.len() * h * w);
    let mut y = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        if p.image.dims() != (h, w) {
            return Err(Error::InvalidArgument(format!(
                "batch mixes {h}×{w} and {:?} slices",
                p.image.dims()
            )));
        }
        x.extend_from_slice(&p.image.data);
        y.extend(p.mask.data.iter().map(|&v| f32::from(v)));
    }
    let shape = vec![pairs.len(), 1, h, w];
    Ok((Tensor::new(shape.clone(), x)?, Tensor::new(shape, y)?))
}

/// Result of one optimisation step.
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Forward, backward and one Adam update on a single batch.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    state: &mut AdamState<f32>,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    cfg: &AdamConfig,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let params = store.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let mut cx = Fwd::new(&mut g, params.clone(), true);
    let pred = model.forward(&mut cx, xv)?;
    let updates = std::mem::take(&mut cx.updates);
    let loss = bce_loss(&mut g, pred, y)?;
    let stats = StepStats {
        loss: g.value(loss).data()[0] as f64,
        accuracy: pixel_accuracy(g.value(pred).data(), y.data())?,
    };
    let mut grads = g.backward(loss)?;
    let per_param: Vec<Option<Tensor<f32>>> = params.iter().map(|&p| grads.take(p)).collect();
    adam_step(store, &per_param, state, cfg)?;
    store.apply_stat_updates(&updates, BN_MOMENTUM as f32);
    Ok(stats)
}

/// Eval-mode probability maps, `batch_size` slices at a time.
pub fn predict_maps(model: &Model, store: &ParamStore<f32>, pairs: &[SlicePair], batch_size: usize) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&SlicePair> = chunk.iter().collect();
        let (x, _) = stack_batch(&refs)?;
        let y = model.predict(store, &x)?;
        let (h, w) = chunk[0].image.dims();
        for (i, _) in chunk.iter().enumerate() {
            let data = y.data()[i * h * w..(i + 1) * h * w].to_vec();
            out.push(Image::new(h, w, data)?);
        }
    }
    Ok(out)
}

/// Mean per-slice Dice of thresholded predictions.
pub fn mean_dice(model: &Model, store: &ParamStore<f32>, pairs: &[SlicePair], batch_size: usize) -> Result<f64> {
    let maps = predict_maps(model, store, pairs, batch_size)?;
    let mut total = 0.0;
    for (p, m) in pairs.iter().zip(&maps) {
        total += dice(&Mask::from_probabilities(m, 0.5), &p.mask)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Epoch loop with seeded shuffling. Keeps the parameters of the epoch with
/// the best validation Dice and stops once `patience` epochs pass without
/// improvement. Without a validation set the monitor is the negated
/// training loss.
pub fn train_loop(
    model: &Model,
    mut store: ParamStore<f32>,
    train: &[SlicePair],
    val: &[SlicePair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    let epochs = cfg.epochs_for(model.spec().variant);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&SlicePair> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = stack_batch(&refs)?;
            let s = train_step(model, &mut store, &mut state, &x, &y, &cfg.adam)?;
            loss_sum += s.loss * chunk.len() as f64;
            acc_sum += s.accuracy * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val_dice = if val.is_empty() {
            f64::NAN
        } else {
            mean_dice(model, &store, val, cfg.batch_size)?
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            train_acc: acc_sum / seen as f64,
            val_dice,
        });
        let monitor = if val.is_empty() { -train_loss } else { val_dice };
        if best.as_ref().is_none_or(|(b, _, _)| monitor > *b) {
            best = Some((monitor, epoch, store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = epoch < epochs;
                break;
            }
        }
    }
    let (monitor, best_epoch, best_store) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        store: best_store,
        best_val_dice: if val.is_empty() { f64::NAN } else { monitor },
        history,
        best_epoch,
        stopped_early,
        adam_steps: state.t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_rejects_bad_betas() {
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_override_is_a_config_error() {
        let mut cfg = TrainConfig::default();
        cfg.epoch_overrides.insert("vnet".into(), 3);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn accuracy_counts_threshold_agreement() {
        assert_eq!(pixel_accuracy(&[0.5f32, 0.4], &[1.0, 1.0]).unwrap(), 0.5);
    }
}
