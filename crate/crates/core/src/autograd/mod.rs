//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted node in a define-by-run graph. Nodes that
//! do not depend on any gradient-tracking leaf are stored as constants with no
//! parents, so inference-only forward passes release intermediates as soon as
//! the last handle is dropped.
//!
//! Calling [`Var::backward`] on a scalar walks the graph once in reverse
//! topological order and returns a [`Grads`] table keyed by leaf node and by
//! [`ParamId`].

mod conv;
mod fused;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::Tensor;

pub use conv::{conv2d_output_size, Conv2dSpec};
pub(crate) use fused::right_vector as fused_right_vector;
#[cfg(test)]
pub(crate) use ops::sigmoid;

/// Backward rule: `(grad_out, out_value, input_values, needs_grad) -> input grads`.
pub(crate) type BackwardFn =
    dyn Fn(&Tensor, &Tensor, &[&Tensor], &[bool]) -> Result<Vec<Option<Tensor>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

enum Kind {
    Constant,
    Leaf { param: Option<ParamId> },
    Op {
        parents: Vec<Var>,
        backward: Box<BackwardFn>,
    },
}

struct Node {
    id: u64,
    value: Tensor,
    kind: Kind,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Var {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            kind: Kind::Constant,
        }))
    }

    /// A gradient-tracking input.
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            kind: Kind::Leaf { param: None },
        }))
    }

    pub(crate) fn param_leaf(value: Tensor, param: ParamId) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            kind: Kind::Leaf { param: Some(param) },
        }))
    }

    pub fn scalar(value: f64) -> Var {
        Var::constant(Tensor::scalar(value))
    }

    /// Records an operation. Collapses to a constant when no parent tracks
    /// gradients.
    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: Box<BackwardFn>) -> Var {
        if parents.iter().any(Var::requires_grad) {
            Var(Rc::new(Node {
                id: next_id(),
                value,
                kind: Kind::Op { parents, backward },
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        !matches!(self.0.kind, Kind::Constant)
    }

    /// The same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// Gradients of this scalar with respect to every tracked leaf.
    pub fn backward(&self) -> Result<Grads> {
        if self.value().len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape()
            )));
        }
        let mut grads = Grads::default();
        if !self.requires_grad() {
            return Ok(grads);
        }

        let order = self.topo_order();
        let mut pending: HashMap<u64, Tensor> = HashMap::new();
        pending.insert(self.id(), Tensor::ones(self.shape().to_vec()));

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.kind {
                Kind::Constant => {}
                Kind::Leaf { param } => {
                    if let Some(pid) = param {
                        match grads.by_param.get_mut(pid) {
                            Some(acc) => acc.add_assign(&grad),
                            None => {
                                grads.by_param.insert(*pid, grad.clone());
                            }
                        }
                    }
                    grads.by_node.insert(node.id(), grad);
                }
                Kind::Op { parents, backward } => {
                    let inputs: Vec<&Tensor> = parents.iter().map(Var::value).collect();
                    let needs: Vec<bool> = parents.iter().map(Var::requires_grad).collect();
                    let parent_grads = backward(&grad, node.value(), &inputs, &needs)?;
                    debug_assert_eq!(parent_grads.len(), parents.len());
                    for (parent, g) in parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), parent.shape());
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                pending.insert(parent.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Post-order over gradient-tracking nodes reachable from `self`.
    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Kind::Op { parents, .. } = &node.0.kind {
                for p in parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients collected by [`Var::backward`].
#[derive(Default, Debug)]
pub struct Grads {
    by_node: HashMap<u64, Tensor>,
    by_param: HashMap<ParamId, Tensor>,
}

impl Grads {
    /// Gradient with respect to a leaf created by [`Var::leaf`] or a parameter binding.
    pub fn wrt(&self, leaf: &Var) -> Option<&Tensor> {
        self.by_node.get(&leaf.id())
    }

    /// Gradient accumulated over every binding of a parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn param_count(&self) -> usize {
        self.by_param.len()
    }
}

#[cfg(test)]
mod tests;
