//! Recorded-graph reverse-mode differentiation.
//!
//! Every differentiable op pushes a node onto a [`Tape`] holding the indices of
//! its parents and a closure mapping the output gradient to parent gradients.
//! [`Tape::backward`] seeds a scalar root with 1 and walks the nodes in reverse
//! recording order. A tape built with [`Tape::no_grad`] records nothing, so
//! intermediate values are freed as soon as their [`Var`]s drop.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradient closure: receives the output gradient and a mask of which parents
/// need a gradient, returns one optional gradient per parent (same order).
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    enabled: bool,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            enabled: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape that never records: forward-only evaluation.
    pub fn no_grad() -> Self {
        Tape {
            enabled: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or probed input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.enabled.then(|| self.push(Vec::new(), None));
        Var {
            tape: self,
            value: Rc::new(value),
            id,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value: Rc::new(value),
            id: None,
        }
    }

    fn push(&self, parents: Vec<usize>, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, backward });
        nodes.len() - 1
    }

    /// Records `value` as the output of an op over `parents`. The node is only
    /// kept when recording and at least one parent is differentiable.
    pub fn record<'t, F>(&'t self, value: Tensor, parents: &[&Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let tracked = self.enabled && parents.iter().any(|p| p.id.is_some());
        let id = if tracked {
            // Untracked parents get a sentinel so the closure still sees one
            // slot per parent.
            let ids = parents.iter().map(|p| p.id.unwrap_or(usize::MAX)).collect();
            Some(self.push(ids, Some(Box::new(backward))))
        } else {
            None
        };
        Var {
            tape: self,
            value: Rc::new(value),
            id,
        }
    }

    /// Reverse sweep from a rank-0 root.
    pub fn backward(&self, root: &Var<'_>) -> Result<Grads> {
        if root.value.rank() != 0 {
            return Err(Error::contract(
                "backward",
                format!("root must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::contract("backward", "root belongs to another tape"));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root_id) = root.id else {
            return Ok(Grads { grads });
        };
        grads[root_id] = Some(Tensor::scalar(1.0));
        for id in (0..=root_id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| p != usize::MAX).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if p == usize::MAX {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // Interior gradients are consumed; only leaves keep theirs.
        }
        Ok(Grads { grads })
    }
}

/// A value on a tape, optionally tracked for differentiation.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    value: Rc<Tensor>,
    id: Option<usize>,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.id
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

/// Gradients of one backward sweep, indexed by leaf.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the root with respect to a leaf; `None` when the root does
    /// not depend on it.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.node_id()
            .and_then(|id| self.grads.get(id))
            .and_then(|g| g.as_ref())
    }

    /// Like [`Grads::get`] but materializes zeros for unreached leaves.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
