use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::ops::Op;
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) struct Node {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
    pub param: Option<ParamId>,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a reverse sweep over the node list is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    bound_params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var<'_> {
        debug_assert_eq!(rows * cols, value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
            param: None,
        });
        self.grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Leaf whose gradient tracking follows `t.requires_grad`.
    pub fn var(&self, t: &Tensor) -> Var<'_> {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Bind a stored parameter as a gradient-tracking leaf. Repeated calls for
    /// the same id return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound_params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let t = store.get(id);
        let v = self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true);
        self.nodes.borrow_mut()[v.id].param = Some(id);
        self.bound_params.borrow_mut().insert(id, v.id);
        v
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every gradient-tracking
    /// node reachable from `loss` are added to the stored gradients, so calling
    /// this twice without [`Tape::zero_grad`] accumulates.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.rows * root.cols != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                [root.rows, root.cols]
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adjoint[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = adjoint[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            node.op.backward(node, &g, &nodes, &mut adjoint);
            let mut stored = self.grads.borrow_mut();
            match &mut stored[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    /// Accumulated gradient of `v`, if any reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads[v.id].as_ref()?;
        let n = &self.nodes.borrow()[v.id];
        Some(Tensor::new(n.rows, n.cols, g.clone()).expect("grad shape matches node"))
    }

    /// Gradients of bound parameters, in binding order.
    pub(crate) fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .bound_params
            .borrow()
            .iter()
            .filter_map(|(&pid, &node)| {
                debug_assert_eq!(nodes[node].param, Some(pid));
                grads[node].as_ref().map(|g| (pid, g.clone()))
            })
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    /// Describe the first node holding a NaN or infinite value.
    pub fn first_non_finite(&self, store: Option<&ParamStore>) -> Option<String> {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.iter().all(|v| v.is_finite()) {
                return None;
            }
            let label = match (n.param, store) {
                (Some(pid), Some(s)) => format!("parameter `{}`", s.name(pid)),
                _ => format!("node #{i} ({})", n.op.name()),
            };
            Some(format!("{label} of shape {:?}", [n.rows, n.cols]))
        })
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> [usize; 2] {
        let n = &self.tape.nodes()[self.id];
        [n.rows, n.cols]
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor {
        let n = &self.tape.nodes()[self.id];
        Tensor::new(n.rows, n.cols, n.value.clone()).expect("node shape invariant")
    }

    pub fn item(&self) -> f64 {
        let n = &self.tape.nodes()[self.id];
        assert_eq!(n.value.len(), 1, "item() on non-scalar var");
        n.value[0]
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}
