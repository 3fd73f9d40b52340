//! Named parameter storage and the per-forward binding context.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::counter::Component;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the store; also the index into [`Ctx::param_grads`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub component: Component,
    pub value: Tensor<T>,
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Every parameter belongs to exactly one component.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, component: Component, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, component, value });
        id
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffer_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Element counts summed per component.
    pub fn count_by_component(&self) -> HashMap<Component, usize> {
        let mut out = HashMap::new();
        for p in &self.params {
            *out.entry(p.component).or_insert(0) += p.value.len();
        }
        out
    }

    pub fn count(&self, component: Component) -> usize {
        self.params
            .iter()
            .filter(|p| p.component == component)
            .map(|p| p.value.len())
            .sum()
    }

    /// Sets every parameter of `component` to zero.
    pub fn zero_component(&mut self, component: Component) {
        for p in self.params.iter_mut().filter(|p| p.component == component) {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    component: p.component,
                    value: p.value.cast(),
                })
                .collect(),
            buffers: self.buffers.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Whether batch norm uses batch statistics (and reports them) or frozen
/// running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean_buffer: BufferId,
    pub var_buffer: BufferId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// One forward pass: a tape plus lazily bound parameter leaves.
pub struct Ctx<'s, T> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    batch_stats: Vec<BatchStats<T>>,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self::with_tape(store, mode, Tape::new())
    }

    pub fn with_tape(store: &'s ParamStore<T>, mode: Mode, tape: Tape<T>) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            mode,
            batch_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.get(id).clone())?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.tape.leaf(t)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub(crate) fn push_batch_stats(&mut self, s: BatchStats<T>) {
        self.batch_stats.push(s);
    }

    pub fn batch_stats(&self) -> &[BatchStats<T>] {
        &self.batch_stats
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats<T>> {
        std::mem::take(&mut self.batch_stats)
    }

    /// Parameter gradients of a scalar `root`, indexed like the store.
    pub fn param_grads(&self, root: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads: Gradients<T> = self.tape.backward(root)?;
        Ok(self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect())
    }
}

/// Blends observed batch statistics into the running buffers.
pub fn apply_batch_stats<T: Scalar>(store: &mut ParamStore<T>, stats: &[BatchStats<T>], momentum: T) {
    for s in stats {
        let n = T::of(s.count as f64);
        // unbiased variance for the running estimate
        let unbias = if s.count > 1 { n / (n - T::one()) } else { T::one() };
        for (r, &m) in store.buffer_mut(s.mean_buffer).data_mut().iter_mut().zip(&s.mean) {
            *r = (T::one() - momentum) * *r + momentum * m;
        }
        for (r, &v) in store.buffer_mut(s.var_buffer).data_mut().iter_mut().zip(&s.var) {
            *r = (T::one() - momentum) * *r + momentum * v * unbias;
        }
    }
}

/// Parameter initialisers.
pub mod init {
    use super::*;

    pub fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let b = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::of(rng.gen_range(-b..b)))
    }

    pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }

    pub fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
        Tensor::full(shape, T::one())
    }
}
