use std::cell::RefCell;

use crate::tensor::{Graph, NdArray, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel `[K,C,kh,kw]`, Xavier initialised.
    Weight,
    Bias,
    /// Normalisation scale γ, initialised to one.
    Scale,
    /// Normalisation shift β, initialised to zero.
    Shift,
    /// Unconstrained mixing logits (switchable normalisation).
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: NdArray,
    pub grad: NdArray,
}

/// Non-trainable state carried with a network (normalisation running stats).
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub value: NdArray,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: NdArray) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "parameter {name} registered twice"
        );
        let grad = NdArray::zeros_like(&value);
        self.params.push(Param {
            name,
            kind,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub(crate) fn add_buffer(&mut self, name: impl Into<String>, value: NdArray) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &NdArray {
        &self.buffers[id.0].value
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Fold gradients and running-stat updates produced by a forward pass
    /// back into the store.
    pub fn absorb(&mut self, pass: PassOutput) {
        for (id, g) in pass.grads {
            self.params[id.0].grad.add_assign(&g);
        }
        for (id, v) in pass.buffer_updates {
            self.buffers[id.0].value = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Minibatch statistics; running averages are updated.
    Train,
    /// Minibatch statistics, running averages left untouched.
    TrainFrozen,
    /// Running averages stand in for batch statistics.
    Eval,
}

/// Binds one network's parameters into a [`Graph`] for a single pass.
pub struct Ctx<'g, 's> {
    pub(crate) graph: &'g Graph,
    pub(crate) store: &'s ParamStore,
    trainable: bool,
    pub(crate) mode: NormMode,
    bound: RefCell<Vec<Option<Tensor<'g>>>>,
    updates: RefCell<Vec<(BufferId, NdArray)>>,
}

#[derive(Debug, Default)]
pub struct PassOutput {
    pub grads: Vec<(ParamId, NdArray)>,
    pub buffer_updates: Vec<(BufferId, NdArray)>,
}

impl<'g, 's> Ctx<'g, 's> {
    /// Parameters become gradient-carrying leaves when `trainable`, constants
    /// otherwise (gradient still flows through the activations).
    pub fn new(graph: &'g Graph, store: &'s ParamStore, trainable: bool, mode: NormMode) -> Self {
        Self {
            graph,
            store,
            trainable,
            mode,
            bound: RefCell::new(vec![None; store.params.len()]),
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Bind caller-supplied tensors (one per parameter, in store order)
    /// instead of leaves built from stored values.
    pub fn with_bound(self, tensors: &[Tensor<'g>]) -> Self {
        assert_eq!(tensors.len(), self.store.params.len(), "one tensor per parameter");
        *self.bound.borrow_mut() = tensors.iter().copied().map(Some).collect();
        self
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn param(&self, id: ParamId) -> Tensor<'g> {
        if let Some(t) = self.bound.borrow()[id.0] {
            return t;
        }
        let t = self
            .graph
            .leaf(self.store.params[id.0].value.clone(), self.trainable);
        self.bound.borrow_mut()[id.0] = Some(t);
        t
    }

    pub(crate) fn record_buffer(&self, id: BufferId, value: NdArray) {
        if self.mode == NormMode::Train {
            self.updates.borrow_mut().push((id, value));
        }
    }

    /// Gradients of every bound parameter (after `backward`) plus pending
    /// running-stat updates.
    pub fn finish(self) -> PassOutput {
        let grads = self
            .bound
            .into_inner()
            .into_iter()
            .enumerate()
            .filter_map(|(i, t)| t.and_then(|t| t.grad()).map(|g| (ParamId(i), g)))
            .collect();
        PassOutput {
            grads,
            buffer_updates: self.updates.into_inner(),
        }
    }
}
