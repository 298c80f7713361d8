//! Named parameter storage and the per-pass binding of parameters to a tape.

use ecvit_tensor::{BatchStats, BnBuffers, BnMode, Element, Tape, Tensor, Var, BN_MOMENTUM};
use rand::Rng;

use crate::error::{Error, Result};

/// Standard deviation for weight and positional-embedding initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub stats: BnBuffers<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, channels: usize) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            stats: BnBuffers::new(channels),
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &BnBuffers<T> {
        &self.buffers[id.0].stats
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut BnBuffers<T> {
        &mut self.buffers[id.0].stats
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Trainable scalars grouped by the first `depth` dot-separated name parts.
    pub fn scalars_by_prefix(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let key = p.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += p.value.len(),
                None => out.push((key, p.value.len())),
            }
        }
        out
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    stats: BnBuffers {
                        mean: b.stats.mean.cast(),
                        var: b.stats.var.cast(),
                    },
                })
                .collect(),
        }
    }

    /// Folds training-batch statistics into the running buffers.
    pub fn apply_updates(&mut self, updates: Vec<(BufferId, BatchStats<T>)>) {
        for (id, stats) in updates {
            self.buffers[id.0].stats.update(&stats, BN_MOMENTUM);
        }
    }
}

/// Allocation helpers used while building a model.
pub(crate) struct Init<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Element, R: Rng> Init<'_, T, R> {
    pub fn weight(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        let t = Tensor::randn(shape, INIT_STD, self.rng);
        self.store.add(name, t, true)
    }

    pub fn bias(&mut self, name: String, len: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(vec![len]), true)
    }

    /// Gain/offset pair of a normalisation layer; exempt from weight decay.
    pub fn norm(&mut self, prefix: &str, len: usize) -> NormIds {
        NormIds {
            gamma: self.store.add(format!("{prefix}.gamma"), Tensor::ones(vec![len]), false),
            beta: self.store.add(format!("{prefix}.beta"), Tensor::zeros(vec![len]), false),
        }
    }

    pub fn batch_norm(&mut self, prefix: &str, channels: usize) -> BnIds {
        let affine = self.norm(prefix, channels);
        BnIds {
            affine,
            buffers: self.store.add_buffer(prefix.to_string(), channels),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnIds {
    pub affine: NormIds,
    pub buffers: BufferId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape plus the lazily bound parameter leaves.
pub struct Ctx<'a, T: Element> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    updates: Vec<(BufferId, BatchStats<T>)>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.params.len()],
            mode,
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn layer_norm(&mut self, x: Var, ids: NormIds) -> Result<Var> {
        let (g, b) = (self.param(ids.gamma), self.param(ids.beta));
        Ok(self.tape.layer_norm(x, g, b, ecvit_tensor::LN_EPS)?)
    }

    /// Batch norm in the context's mode; train-mode statistics are queued
    /// for [`Ctx::into_updates`].
    pub fn batch_norm(&mut self, x: Var, ids: BnIds) -> Result<Var> {
        let (g, b) = (self.param(ids.affine.gamma), self.param(ids.affine.beta));
        let store = self.store;
        let mode = match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval(store.buffer(ids.buffers)),
        };
        let (y, stats) = self.tape.batch_norm(x, g, b, mode)?;
        if let Some(stats) = stats {
            self.updates.push((ids.buffers, stats));
        }
        Ok(y)
    }

    /// Gradients for every parameter, in store order.
    pub fn gradients(&self) -> Result<Vec<Tensor<T>>> {
        self.store
            .params
            .iter()
            .zip(&self.bound)
            .map(|(p, v)| {
                v.and_then(|v| self.tape.grad(v).cloned())
                    .ok_or_else(|| Error::MissingGradient(p.name.clone()))
            })
            .collect()
    }

    pub fn into_updates(self) -> Vec<(BufferId, BatchStats<T>)> {
        self.updates
    }
}
