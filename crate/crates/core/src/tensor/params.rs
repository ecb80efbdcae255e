use std::collections::HashMap;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model tensors. Trainability is the tensor's `requires_grad` flag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(trainable));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.tensors[id.0].requires_grad()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.tensors[id.0].set_requires_grad(trainable);
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Number of scalar values in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    /// Stores `grads` into each trainable tensor's gradient slot. Trainable
    /// tensors that the loss did not reach get an explicit zero gradient.
    pub fn load_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let g = grads
                .slots
                .get(i)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }
}

/// Per-parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(len: usize) -> Self {
        Self {
            slots: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn insert(&mut self, id: ParamId, grad: Vec<f64>) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0] = Some(grad);
    }

    /// Adds `other` into `self` slot by slot.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            let Some(theirs) = theirs else { continue };
            match mine {
                Some(m) => {
                    for (a, b) in m.iter_mut().zip(theirs) {
                        *a += b;
                    }
                }
                None => *mine = Some(theirs.clone()),
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

/// A tape bound to a read-only parameter store.
///
/// Each parameter becomes one leaf on first use, so gradients from every use
/// of a parameter accumulate into the same leaf.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = self.tape.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    fn collect(&self) -> Gradients {
        let mut out = Gradients::new(self.store.len());
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.tape.grad(*v) {
                    out.slots[i] = Some(g.to_vec());
                }
            }
        }
        out
    }

    /// Back-propagates a scalar loss and returns parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)?;
        Ok(self.collect())
    }

    /// Back-propagates an upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        self.tape.backward_with(out, seed)?;
        Ok(self.collect())
    }
}
