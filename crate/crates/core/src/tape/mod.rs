//! Reverse-mode automatic differentiation over dynamically shaped arrays.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes; each
//! non-leaf node keeps a boxed backward rule. Nodes only refer to earlier
//! nodes, so insertion order is a topological order and the backward sweep is
//! a single reverse scan. Leaves are explicit inputs, constants, or named
//! parameters pulled from a [`crate::params::ParamRegistry`]; parameter nodes
//! are memoized per tape so that re-using a parameter (the recurrent backbone
//! runs three times per forward) accumulates gradients from every use.
//!
//! All array values are kept in standard (row-major, contiguous) layout,
//! channels last.

mod activ;
mod basic;
mod conv;
mod gemm;
mod linalg;
mod loss;
mod norm;
mod shape;

#[cfg(test)]
mod fd_tests;

pub use basic::stack_batch;
pub use shape::{resize_bilinear_array, resize_nearest_array, PAD_ROW};
pub use gemm::{matmul_acc_into, matmul_into, matmul_tn_reduce};

use crate::params::{ParamId, ParamRegistry};
use crate::scalar::Scalar;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2};
use std::collections::HashMap;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule of a single operation.
///
/// `backward` receives the node's value, the incoming gradient and the parent
/// values, and returns one gradient per parent (`None` to skip a parent).
pub(crate) trait OpBackward<T: Scalar>: Send {
    fn backward(
        &self,
        out_val: &ArrayD<T>,
        out_grad: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>>;
}

pub(crate) enum Provenance<T: Scalar> {
    Input,
    Const,
    Param,
    Op(Box<dyn OpBackward<T>>),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    parents: Vec<usize>,
    prov: Provenance<T>,
}

/// One recorded forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_memo: HashMap<usize, usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_memo: HashMap::new(),
        }
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<T>,
        parents: Vec<usize>,
        prov: Provenance<T>,
    ) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            parents,
            prov,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<T>,
        parents: Vec<Var>,
        op: impl OpBackward<T> + 'static,
    ) -> Var {
        let parents = parents.into_iter().map(|v| v.0).collect();
        self.push(value, parents, Provenance::Op(Box::new(op)))
    }

    /// A differentiable leaf; its gradient is retained by [`Tape::backward`].
    pub fn input(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, vec![], Provenance::Input)
    }

    /// A non-differentiable leaf (targets, masks, fixed weights).
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, vec![], Provenance::Const)
    }

    /// Leaf backed by a registry parameter. Memoized: the same parameter maps
    /// to the same node for the lifetime of the tape.
    pub fn param(&mut self, reg: &ParamRegistry<T>, id: ParamId) -> Var {
        if let Some(&idx) = self.param_memo.get(&id.0) {
            return Var(idx);
        }
        let var = self.push(reg.value(id).clone(), vec![], Provenance::Param);
        self.param_memo.insert(id.0, var.0);
        var
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Extract a 0-dim node as a scalar.
    pub fn scalar(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.ndim(), 0, "scalar() on non-0-dim node");
        *val.first().expect("0-dim array has one element")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from `root`. Gradients of `Input` and `Param` leaves are
    /// retained; interior gradients are dropped as soon as they are consumed.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].prov {
                Provenance::Op(op) => {
                    let node = &self.nodes[i];
                    let pvals: Vec<&ArrayD<T>> =
                        node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                    let pgrads = op.backward(&node.value, &g, &pvals);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if matches!(self.nodes[p].prov, Provenance::Const) {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                Provenance::Input | Provenance::Param => grads[i] = Some(g),
                Provenance::Const => {}
            }
        }
        Gradients { grads }
    }

    /// Parameter ids touched by this tape together with their node handles.
    pub fn touched_params(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<(ParamId, Var)> = self
            .param_memo
            .iter()
            .map(|(&pid, &idx)| (ParamId(pid), Var(idx)))
            .collect();
        out.sort_by_key(|(pid, _)| pid.0);
        out
    }
}

/// Retained leaf gradients of one backward sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, if it was reached by the sweep.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros if unreached.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> ArrayD<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(tape.value(v).raw_dim()),
        }
    }
}

/// View an N-d standard-layout array as rows of its last axis.
pub(crate) fn as_rows<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    let c = *a.shape().last().expect("non-empty shape");
    let r = a.len() / c.max(1);
    let slice = a.as_slice().expect("standard layout");
    ArrayView2::from_shape((r, c), slice).expect("row view")
}

pub(crate) fn as_rows_mut<T: Scalar>(a: &mut ArrayD<T>) -> ArrayViewMut2<'_, T> {
    let c = *a.shape().last().expect("non-empty shape");
    let r = a.len() / c.max(1);
    let slice = a.as_slice_mut().expect("standard layout");
    ArrayViewMut2::from_shape((r, c), slice).expect("row view")
}
