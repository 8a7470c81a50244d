use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{ParamKey, Tape, Var};
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// What a parameter is for; decides whether weight regularization applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }
}

struct Buffer<T> {
    name: String,
    value: RwLock<Tensor<T>>,
}

/// Named learnable tensors of one network plus non-learnable buffers
/// (running statistics).
pub struct ParamStore<T> {
    id: u64,
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    frozen: bool,
}

impl<T> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("id", &self.id)
            .field("params", &self.params.len())
            .field("buffers", &self.buffers.len())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// Deep copy under a fresh store identity.
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: Arc::new(p.value.as_ref().clone()),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: RwLock::new(b.value.read().unwrap().clone()),
                })
                .collect(),
            frozen: self.frozen,
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            buffers: Vec::new(),
            frozen: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            kind,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value: RwLock::new(value),
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            store: self.id,
            index: id.0,
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub(crate) fn arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.params[id.0].value.clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        value.expect_shape("ParamStore::set", self.get(id).shape())?;
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn buffer(&self, id: BufferId) -> Tensor<T> {
        self.buffers[id.0].value.read().unwrap().clone()
    }

    pub fn set_buffer(&self, id: BufferId, value: Tensor<T>) {
        *self.buffers[id.0].value.write().unwrap() = value;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Parameters followed by buffers; buffer names carry a `#` prefix.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.as_ref().clone()))
            .collect();
        out.extend(
            self.buffers
                .iter()
                .map(|b| (format!("#{}", b.name), b.value.read().unwrap().clone())),
        );
        out
    }

    /// Loads every parameter and buffer by name; all must be present with
    /// matching shapes.
    pub fn load_named(&mut self, named: &HashMap<String, Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            let t = named
                .get(&p.name)
                .ok_or_else(|| TensorError::Archive(format!("missing parameter {}", p.name)))?;
            t.expect_shape("load_named", p.value.shape())?;
            p.value = Arc::new(t.clone());
        }
        for b in &self.buffers {
            let key = format!("#{}", b.name);
            let t = named
                .get(&key)
                .ok_or_else(|| TensorError::Archive(format!("missing buffer {}", b.name)))?;
            let mut slot = b.value.write().unwrap();
            t.expect_shape("load_named", slot.shape())?;
            *slot = t.clone();
        }
        Ok(())
    }

    /// Byte-level equality of every parameter and buffer.
    pub fn same_values(&self, other: &Self) -> bool {
        self.named_tensors() == other.named_tensors()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'t, 's, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
}

impl<'t, 's, T: Scalar> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self { tape, store, mode }
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        self.tape
            .param_leaf(self.store.arc(id), self.store.key(id), !self.store.is_frozen())
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}
