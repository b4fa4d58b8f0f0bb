use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::Real;

/// Maps the gradient of a node's output to gradients of its parents.
///
/// The returned vector is aligned with the node's parents; `None` means the
/// parent does not need a gradient (or the contribution is identically zero).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

struct Node<T> {
    value: Arc<ArrayD<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<String>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Records operations for a single forward/backward pass.
///
/// Cloning a tape is cheap and yields a handle to the same recording.
pub struct Tape<T: Real> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Real> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that tracks gradients.
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape that never builds backward closures; forward-only evaluation.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Inner {
                nodes: Vec::new(),
                grad_enabled,
            })),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Arc<ArrayD<T>>, requires_grad: bool, param: Option<String>) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = requires_grad && inner.grad_enabled;
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var {
            id,
            tape: self.clone(),
        }
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: ArrayD<T>) -> Var<T> {
        self.push_leaf(Arc::new(value), false, None)
    }

    pub fn constant_arc(&self, value: Arc<ArrayD<T>>) -> Var<T> {
        self.push_leaf(value, false, None)
    }

    /// An input whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&self, value: ArrayD<T>) -> Var<T> {
        self.push_leaf(Arc::new(value), true, None)
    }

    /// A named trainable parameter; gradients are collected by name.
    pub fn param(&self, name: &str, value: Arc<ArrayD<T>>) -> Var<T> {
        self.push_leaf(value, true, Some(name.to_string()))
    }

    pub fn scalar(&self, v: T) -> Var<T> {
        self.constant(ArrayD::from_elem(ndarray::IxDyn(&[]), v))
    }

    /// Appends an op node. `make_backward` receives, per parent, whether that
    /// parent needs a gradient, and is only invoked when the result does.
    pub(crate) fn record<F>(&self, value: ArrayD<T>, parents: &[&Var<T>], make_backward: F) -> Var<T>
    where
        F: FnOnce(&[bool]) -> BackwardFn<T>,
    {
        let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
        let mut inner = self.inner.borrow_mut();
        let requires_grad = inner.grad_enabled && needs.iter().any(|&n| n);
        let backward = if requires_grad {
            Some(make_backward(&needs))
        } else {
            None
        };
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward,
            requires_grad,
            param: None,
        });
        Var {
            id,
            tape: self.clone(),
        }
    }

    fn value_of(&self, id: usize) -> Arc<ArrayD<T>> {
        Arc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let inner = self.inner.borrow();
        let root = &inner.nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<ArrayD<T>>> = (0..=loss.id).map(|_| None).collect();
        let mut out = Gradients {
            by_id: HashMap::new(),
            by_param: IndexMap::new(),
        };
        if !root.requires_grad {
            return Ok(out);
        }
        grads[loss.id] = Some(ArrayD::from_elem(root.value.raw_dim(), T::one()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            match &node.backward {
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !inner.nodes[pid].requires_grad {
                            continue;
                        }
                        match &mut grads[pid] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None => {
                    if let Some(name) = &node.param {
                        match out.by_param.get_mut(name) {
                            Some(acc) => *acc += &g,
                            None => {
                                out.by_param.insert(name.clone(), g.clone());
                            }
                        }
                    }
                    out.by_id.insert(id, g);
                }
            }
        }
        Ok(out)
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<T: Real> {
    pub(crate) id: usize,
    pub(crate) tape: Tape<T>,
}

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            id: self.id,
            tape: self.tape.clone(),
        }
    }
}

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Real> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn value(&self) -> Arc<ArrayD<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// First element; intended for scalar results.
    pub fn item(&self) -> T {
        *self.value().iter().next().expect("empty tensor")
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<T> {
        self.tape.constant_arc(self.value())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    by_id: HashMap<usize, ArrayD<T>>,
    by_param: IndexMap<String, ArrayD<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::leaf`] or [`Tape::param`].
    pub fn get(&self, var: &Var<T>) -> Option<&ArrayD<T>> {
        self.by_id.get(&var.id)
    }

    pub fn param(&self, name: &str) -> Option<&ArrayD<T>> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> &IndexMap<String, ArrayD<T>> {
        &self.by_param
    }

    pub fn into_params(self) -> IndexMap<String, ArrayD<T>> {
        self.by_param
    }
}
