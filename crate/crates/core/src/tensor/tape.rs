//! The recording tape: node arena, leaf registry, reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;

use super::{DType, Storage, Tensor};

pub type NodeId = usize;

/// Reverse rule of one recorded op. Implementations own whatever forward
/// context they need (saved inputs/outputs as cheap Arc clones).
pub(crate) trait Backward {
    /// Tape ids of the op inputs, `None` for untracked slots.
    fn input_ids(&self) -> &[Option<NodeId>];
    /// Gradient for each input slot given the output gradient. Slots whose
    /// id is `None` may return `None`.
    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>>;
    fn op_name(&self) -> &'static str;
}

struct NodeRec {
    backward: Option<Box<dyn Backward>>,
    numel: usize,
    dtype: DType,
}

/// Define-by-run gradient tape. Single-threaded by construction; op kernels
/// may parallelize internally but the graph itself is recorded and replayed
/// in order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<NodeRec>>,
    // Storage identity -> leaf node, so the same parameter tensor consumed by
    // several ops accumulates into one gradient slot.
    leaves: RefCell<HashMap<usize, NodeId>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, rec: NodeRec) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(rec);
        nodes.len() - 1
    }

    /// Tape id for an op input: existing node, or a fresh leaf when the
    /// tensor requires grad, or `None` for plain constants.
    pub(crate) fn track(&self, t: &Tensor) -> Option<NodeId> {
        if let Some(id) = t.node() {
            return Some(id);
        }
        if !t.is_leaf_like() {
            return None;
        }
        let key = t.data().ptr_id();
        if let Some(&id) = self.leaves.borrow().get(&key) {
            return Some(id);
        }
        let id = self.push(NodeRec {
            backward: None,
            numel: t.numel(),
            dtype: t.dtype(),
        });
        self.leaves.borrow_mut().insert(key, id);
        Some(id)
    }

    /// Record an op node. Returns `None` when no input is tracked, in which
    /// case the output stays off-tape.
    pub(crate) fn record(
        &self,
        any_tracked: bool,
        backward: Box<dyn Backward>,
        out_numel: usize,
        out_dtype: DType,
    ) -> Option<NodeId> {
        if !any_tracked {
            return None;
        }
        Some(self.push(NodeRec {
            backward: Some(backward),
            numel: out_numel,
            dtype: out_dtype,
        }))
    }

    /// Reverse sweep from a scalar loss. Every node is visited at most once,
    /// in reverse recording order.
    pub fn backward(&self, loss: &Tensor) -> Gradients {
        assert_eq!(
            loss.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        );
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Storage>> = (0..n).map(|_| None).collect();

        if let Some(seed) = loss.node() {
            grads[seed] = Some(Storage::full(loss.dtype(), 1, 1.0));
            for id in (0..=seed).rev() {
                let Some(g) = grads[id].take() else { continue };
                let rec = &nodes[id];
                let Some(b) = rec.backward.as_ref() else {
                    // Leaf: keep its gradient.
                    grads[id] = Some(g);
                    continue;
                };
                let input_grads = b.vjp(&g);
                let ids = b.input_ids();
                assert_eq!(
                    input_grads.len(),
                    ids.len(),
                    "{}: vjp returned {} grads for {} inputs",
                    b.op_name(),
                    input_grads.len(),
                    ids.len()
                );
                for (slot, ig) in ids.iter().zip(input_grads) {
                    let (Some(iid), Some(ig)) = (slot, ig) else { continue };
                    assert_eq!(
                        ig.len(),
                        nodes[*iid].numel,
                        "{}: gradient length {} does not match input node length {}",
                        b.op_name(),
                        ig.len(),
                        nodes[*iid].numel
                    );
                    match &mut grads[*iid] {
                        Some(acc) => acc.accumulate(&ig),
                        slot => *slot = Some(ig),
                    }
                }
            }
        }

        Gradients {
            grads,
            leaves: self.leaves.borrow().clone(),
            dtypes: nodes.iter().map(|r| r.dtype).collect(),
            numels: nodes.iter().map(|r| r.numel).collect(),
        }
    }
}

/// Gradient store produced by [`Tape::backward`], keyed by node id and
/// resolvable from the original tensors.
pub struct Gradients {
    grads: Vec<Option<Storage>>,
    leaves: HashMap<usize, NodeId>,
    dtypes: Vec<DType>,
    numels: Vec<usize>,
}

impl Gradients {
    fn node_of(&self, t: &Tensor) -> Option<NodeId> {
        t.node().or_else(|| self.leaves.get(&t.data().ptr_id()).copied())
    }

    /// Gradient of the loss w.r.t. `t`, or `None` if `t` never touched the
    /// tape. Tracked leaves that did not contribute get exact zeros.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let id = self.node_of(t)?;
        let storage = match &self.grads[id] {
            Some(g) => g.clone(),
            None => Storage::zeros(self.dtypes[id], self.numels[id]),
        };
        Some(Tensor::from_storage(t.shape(), storage))
    }

    /// Like [`Gradients::get`] but zeros for untouched tensors too.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t)
            .unwrap_or_else(|| Tensor::zeros(t.dtype(), t.shape()))
    }

    pub(crate) fn by_node(&self, id: NodeId) -> Option<&Storage> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}
