//! Reverse-mode differentiation over a Wengert tape.
//!
//! Each forward op records its output value, its parent node ids and a closure
//! that maps the output cotangent to the parent cotangents. The tape is
//! single-threaded; run independent tapes on different threads for
//! data-parallel evaluation.

use super::Tensor;
use crate::error::{Error, Result};
use std::cell::RefCell;

pub type VarId = usize;

type GradFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Cotangents collected by a backward pass, indexed by `VarId`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a value that does not participate in differentiation.
    pub fn constant(&self, value: Tensor) -> VarId {
        self.insert(value, false)
    }

    /// Insert a differentiable leaf (a model parameter).
    pub fn leaf(&self, value: Tensor) -> VarId {
        self.insert(value, true)
    }

    fn insert(&self, value: Tensor, needs_grad: bool) -> VarId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: Vec::new(), grad_fn: None, needs_grad });
        nodes.len() - 1
    }

    pub fn value(&self, id: VarId) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn shape_of(&self, id: VarId) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Record an op output. Rejects non-finite values so NaN/Inf surface at the
    /// op that produced them instead of propagating through the tape.
    pub(super) fn push(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<VarId>,
        grad_fn: GradFn,
    ) -> Result<VarId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            grad_fn: if needs_grad { Some(grad_fn) } else { None },
            needs_grad,
        });
        Ok(nodes.len() - 1)
    }

    /// Reverse pass from a scalar root. Visits each node exactly once, in
    /// reverse topological order (the tape order).
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root].value.numel() != 1 {
            return Err(Error::shape("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let node = &nodes[i];
            let Some(grad_fn) = &node.grad_fn else { continue };
            let Some(gout) = grads[i].take() else { continue };
            let parent_grads = grad_fn(&gout);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&pg) {
                            *a += g;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
            // Leaf grads stay; interior grads for already-processed nodes are
            // dropped as we pass them, except we must keep leaves.
            if node.grad_fn.is_some() {
                grads[i] = Some(gout);
            }
        }
        // Drop interior cotangents to keep only what callers may query; leaves
        // and interior nodes alike remain addressable, which the gradient
        // checks rely on.
        Ok(Gradients { grads })
    }
}
