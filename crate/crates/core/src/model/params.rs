use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::{BatchStats, Graph, Tensor, Var};

use super::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Named parameters and batch-norm buffers of a network, in creation order.
///
/// Names are dotted paths (`stage2.block0.mixer.in_x.w`) and stable across
/// versions; checkpoints key on them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<RunningStats<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: String, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        id
    }

    pub fn add_buffer(&mut self, name: String, channels: usize) -> BufferId {
        self.buffers.push(RunningStats {
            name,
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[RunningStats<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.buffers
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats<T> {
        &self.buffers[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Moves running statistics towards a training batch's statistics.
    pub fn update_running(&mut self, id: BufferId, stats: &BatchStats<T>, momentum: T) {
        let b = &mut self.buffers[id.0];
        for (r, &s) in b.mean.iter_mut().zip(&stats.mean) {
            *r = (T::one() - momentum) * *r + momentum * s;
        }
        for (r, &s) in b.var.iter_mut().zip(&stats.var_unbiased) {
            *r = (T::one() - momentum) * *r + momentum * s;
        }
    }

    /// Copies values from `other` by name; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{}: shape {:?} vs {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        for b in &mut self.buffers {
            let src = other
                .buffers
                .iter()
                .find(|s| s.name == b.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing buffer {}", b.name)))?;
            if src.mean.len() != b.mean.len() {
                return Err(ModelError::Checkpoint(format!("{}: channel count", b.name)));
            }
            b.mean = src.mean.clone();
            b.var = src.var.clone();
        }
        Ok(())
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given standard deviation.
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

/// Registers parameters under a name prefix, drawing initial values from a
/// seeded stream.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let t = match init {
            Init::Normal(std) => Tensor::from_fn(shape, |_| {
                let z: f64 = self.rng.sample(StandardNormal);
                T::lit(z * std)
            }),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Const(c) => Tensor::full(shape, T::lit(c)),
        };
        let path = self.path(name);
        self.store.add(path, t)
    }

    /// Parameter with values from `f(i)`, for structured initializations.
    pub fn param_from_fn(&mut self, name: &str, shape: &[usize], f: impl FnMut(usize) -> T) -> ParamId {
        let path = self.path(name);
        self.store.add(path, Tensor::from_fn(shape, f))
    }

    pub fn buffer(&mut self, name: &str, channels: usize) -> BufferId {
        let path = self.path(name);
        self.store.add_buffer(path, channels)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}

/// One forward pass: the graph, lazily bound parameters and the batch-norm
/// statistics gathered in training mode.
pub struct Fwd<'a, T> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    pub train: bool,
    pub bn_stats: Vec<(BufferId, BatchStats<T>)>,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            train,
            bn_stats: Vec::new(),
        }
    }

    /// Graph handle of a parameter, recorded on first use. Frozen parameters
    /// enter as constants.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let v = if param.trainable {
            self.g.param(param.value.clone())
        } else {
            self.g.constant(param.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Parameters that were used in this pass, with their graph handles.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    /// Gradients of every used trainable parameter after `g.backward`.
    pub fn grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.bound()
            .filter(|(id, _)| self.store.get(*id).trainable)
            .filter_map(|(id, v)| self.g.grad(v).map(|gr| (id, gr.to_vec())))
            .collect()
    }
}
