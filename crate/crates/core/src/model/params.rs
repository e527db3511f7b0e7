use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensorgrad::{Real, Tape, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named `f32` tensors. Buffers are stored alongside parameters
/// but are never trainable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
    buffer: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<f32>, is_buffer: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.buffer.push(is_buffer);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.values[id.0]
    }

    pub fn is_buffer(&self, id: ParamId) -> bool {
        self.buffer[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn scalar_count(&self) -> usize {
        self.ids()
            .filter(|&i| !self.is_buffer(i))
            .map(|i| self.get(i).len())
            .sum()
    }

    /// Mask with every non-buffer tensor selected by `pred`.
    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<bool> {
        self.ids()
            .map(|i| !self.is_buffer(i) && pred(self.name(i)))
            .collect()
    }

    /// Raw bytes of one tensor, for freeze checks.
    pub fn bytes_of(&self, id: ParamId) -> Vec<u8> {
        self.get(id).data().iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Binds store entries onto a tape on first use. Trainable entries become
/// leaves, everything else a constant.
pub struct Session<'a, T: Real = f32> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore,
    trainable: Option<&'a [bool]>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Session<'a, T> {
    /// `trainable = None` binds everything as constants (inference).
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore, trainable: Option<&'a [bool]>) -> Self {
        Self {
            tape,
            store,
            trainable,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Uses `var` in place of the stored value of `id`.
    pub fn preset(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).cast::<T>();
        let v = if self.trainable.is_some_and(|m| m[id.0]) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    /// Gradient of every bound leaf after `tape.backward`; `None` for
    /// entries that were frozen, unbound, or off the gradient path.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| {
                b.filter(|&v| self.tape.requires_grad(v))
                    .and_then(|v| self.tape.grad(v).cloned())
            })
            .collect()
    }
}

/// Adds `src` into `acc` entry by entry; `None` stays absent only if both
/// are absent.
pub fn accumulate(acc: &mut [Option<Tensor<f32>>], src: Vec<Option<Tensor<f32>>>) {
    for (a, s) in acc.iter_mut().zip(src) {
        let Some(s) = s else { continue };
        match a {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(s.data()) {
                    *x += *y;
                }
            }
            None => *a = Some(s),
        }
    }
}
