use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scseg_autodiff::{BatchStats, Graph, Real, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    /// Dotted block path, e.g. `enc1.conv2.weight`.
    pub name: String,
    pub tensor: Tensor<T>,
    /// Running batch-norm statistics are stored here too but never trained.
    pub trainable: bool,
}

/// Ordered, uniquely named model state. Order is fixed by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn from_entries(entries: Vec<ParamEntry<T>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate parameter name {}", e.name)));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ParamEntry<T> {
        &self.entries[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Inserts every entry into `g` as a leaf; trainable entries require
    /// gradients when `with_grad` is set.
    pub fn bind(&self, g: &mut Graph<T>, with_grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| g.leaf(e.tensor.clone(), with_grad && e.trainable))
            .collect()
    }

    /// Blends batch statistics into running statistics:
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>], momentum: T) {
        for u in updates {
            for (idx, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let run = self.entries[idx].tensor.data_mut();
                for (r, &b) in run.iter_mut().zip(batch) {
                    *r = (T::one() - momentum) * *r + momentum * b;
                }
            }
        }
    }
}

/// A pending running-statistic update produced by a training-mode forward.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: usize,
    pub var: usize,
    pub stats: BatchStats<T>,
}

/// State threaded through one forward pass.
pub struct Fwd<'g, T> {
    pub g: &'g mut Graph<T>,
    /// One graph variable per [`ParamStore`] entry, in store order.
    pub params: Vec<Var>,
    pub train: bool,
    pub updates: Vec<StatUpdate<T>>,
    /// Named intermediate activations, recorded when enabled.
    pub trace: Option<Vec<(String, Var)>>,
}

impl<'g, T: Real> Fwd<'g, T> {
    pub fn new(g: &'g mut Graph<T>, params: Vec<Var>, train: bool) -> Self {
        Self {
            g,
            params,
            train,
            updates: Vec::new(),
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn p(&self, i: usize) -> Var {
        self.params[i]
    }

    pub fn record(&mut self, name: impl Into<String>, v: Var) {
        if let Some(t) = &mut self.trace {
            t.push((name.into(), v));
        }
    }

    pub fn traced(&self, name: &str) -> Option<Var> {
        self.trace.as_ref()?.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Collects parameters during model construction. Values are drawn in f64
/// and cast at the end, so f32 and f64 stores agree up to rounding.
pub struct Builder {
    rng: ChaCha8Rng,
    scope: Vec<String>,
    entries: Vec<(String, Vec<usize>, Vec<f64>, bool)>,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn push(&mut self, leaf: &str, shape: Vec<usize>, values: Vec<f64>, trainable: bool) -> usize {
        let mut name = self.scope.join(".");
        if !name.is_empty() {
            name.push('.');
        }
        name.push_str(leaf);
        self.entries.push((name, shape, values, trainable));
        self.entries.len() - 1
    }

    /// He-style uniform initialization, bound `sqrt(6 / fan_in)`.
    pub fn he_uniform(&mut self, leaf: &str, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.push(leaf, shape, values, true)
    }

    pub fn constant(&mut self, leaf: &str, shape: Vec<usize>, value: f64, trainable: bool) -> usize {
        let n = shape.iter().product();
        self.push(leaf, shape, vec![value; n], trainable)
    }

    pub fn finish<T: Real>(self) -> Result<ParamStore<T>> {
        let entries = self
            .entries
            .into_iter()
            .map(|(name, shape, values, trainable)| {
                let data = values.into_iter().map(T::from_f64_lossy).collect();
                Ok(ParamEntry {
                    name,
                    tensor: Tensor::new(shape, data)?,
                    trainable,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ParamStore::from_entries(entries)
    }
}
