//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and, when any
//! input needs a gradient, a closure mapping the output cotangent to input
//! cotangents. [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a valid topological order because nodes only reference earlier
//! nodes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

/// Identifies one parameter of one [`crate::ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamKey>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward closures. Forward results are
    /// identical; memory stays proportional to live values only.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
            param: None,
        })
    }

    pub(crate) fn param_leaf(
        &self,
        value: Arc<Tensor<T>>,
        key: ParamKey,
        trainable: bool,
    ) -> Var<'_, T> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled && trainable,
            param: Some(key),
        })
    }

    /// Records an operation. `backward` receives the cotangent of `value` and
    /// returns one optional cotangent per parent, in order.
    pub fn op<'t, F>(&'t self, value: Tensor<T>, parents: &[Var<'t, T>], backward: F) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        debug_assert!(parents.iter().all(|p| std::ptr::eq(p.tape, self)));
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        self.push(Node {
            value: Arc::new(value),
            parents: if requires_grad {
                parents.iter().map(|p| p.id).collect()
            } else {
                Vec::new()
            },
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            param: None,
        })
    }

    /// Back-propagates from a scalar (single element) output.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let value = output.value();
        if value.len() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("output must hold one element, shape {:?}", value.shape()),
            ));
        }
        self.backward_with(output, Tensor::ones(value.shape()))
    }

    pub fn backward_with(&self, output: Var<'_, T>, seed: Tensor<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        seed.expect_shape("backward_with", nodes[output.id].value.shape())?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.id).map(|_| None).collect();
        grads[output.id] = Some(seed);
        let mut result = Gradients::default();
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg)?,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None => match node.param {
                    Some(key) => match result.params.get_mut(&key) {
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            result.params.insert(key, g);
                        }
                    },
                    None => {
                        result.leaves.insert(id, g);
                    }
                },
            }
        }
        Ok(result)
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    params: HashMap<ParamKey, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T> Default for Gradients<T> {
    fn default() -> Self {
        Self {
            params: HashMap::new(),
            leaves: HashMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.params.get(&key)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant_arc(self.value())
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on shape {:?}", v.shape());
        v.data()[0]
    }
}
