//! Dense-tensor reverse-mode autodiff.
//!
//! Tensors are immutable row-major arrays over f32 or f64. Recording a
//! forward pass on a [`Tape`] builds a define-by-run graph; [`Tape::backward`]
//! replays it in reverse and returns gradients for every tracked leaf.
//! One tape per training step, dropped after backward.
//!
//! Broadcasting is deliberately narrow: two operands combine elementwise when
//! their shapes are identical, when one is a scalar, or when the smaller shape
//! is a trailing suffix of the larger (bias-add style). Anything else requires
//! an explicit reshape.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{grad_check, seeded_tensor, GradCheckError};
pub use tape::{Gradients, NodeId, Tape};

#[allow(unused_imports)]
pub(crate) use tape::Backward;

use std::sync::Arc;

/// Element type of a tensor. f32 for training, f64 for gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Flat row-major storage behind an `Arc`, so tensor clones are cheap and
/// views produced by `reshape` share data.
#[derive(Clone, Debug)]
pub enum Storage {
    F32(Arc<Vec<f32>>),
    F64(Arc<Vec<f64>>),
}

impl Storage {
    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn zeros(dtype: DType, n: usize) -> Storage {
        match dtype {
            DType::F32 => Storage::F32(Arc::new(vec![0.0; n])),
            DType::F64 => Storage::F64(Arc::new(vec![0.0; n])),
        }
    }

    pub fn full(dtype: DType, n: usize, value: f64) -> Storage {
        match dtype {
            DType::F32 => Storage::F32(Arc::new(vec![value as f32; n])),
            DType::F64 => Storage::F64(Arc::new(vec![value; n])),
        }
    }

    /// Identity of the underlying allocation; used to map shared parameter
    /// tensors onto tape leaves.
    pub(crate) fn ptr_id(&self) -> usize {
        match self {
            Storage::F32(v) => Arc::as_ptr(v) as usize,
            Storage::F64(v) => Arc::as_ptr(v) as usize,
        }
    }

    pub fn as_f32(&self) -> &[f32] {
        match self {
            Storage::F32(v) => v,
            Storage::F64(_) => panic!("storage is f64, expected f32"),
        }
    }

    pub fn as_f64(&self) -> &[f64] {
        match self {
            Storage::F64(v) => v,
            Storage::F32(_) => panic!("storage is f32, expected f64"),
        }
    }

    /// Elementwise value as f64 regardless of dtype.
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Storage::F32(v) => v[i] as f64,
            Storage::F64(v) => v[i],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.as_ref().clone(),
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self {
            Storage::F32(v) => v.as_ref().clone(),
            Storage::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// In-place accumulation. Both sides must have the same dtype and length.
    pub(crate) fn accumulate(&mut self, other: &Storage) {
        match (self, other) {
            (Storage::F32(a), Storage::F32(b)) => {
                let a = Arc::make_mut(a);
                for (x, y) in a.iter_mut().zip(b.iter()) {
                    *x += *y;
                }
            }
            (Storage::F64(a), Storage::F64(b)) => {
                let a = Arc::make_mut(a);
                for (x, y) in a.iter_mut().zip(b.iter()) {
                    *x += *y;
                }
            }
            _ => panic!("gradient dtype mismatch during accumulation"),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Scalar element trait for kernels generic over f32/f64.
pub trait Elem:
    num_traits::Float + num_traits::NumAssign + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Dense tensor: shape, storage, and an optional link to a tape node.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
    requires_grad: bool,
    node: Option<NodeId>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Tensor {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Storage::F32(Arc::new(data)),
            requires_grad: false,
            node: None,
        }
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Storage::F64(Arc::new(data)),
            requires_grad: false,
            node: None,
        }
    }

    pub fn from_storage(shape: &[usize], data: Storage) -> Tensor {
        assert_eq!(numel(shape), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            node: None,
        }
    }

    pub fn zeros(dtype: DType, shape: &[usize]) -> Tensor {
        Tensor::from_storage(shape, Storage::zeros(dtype, numel(shape)))
    }

    pub fn full(dtype: DType, shape: &[usize], value: f64) -> Tensor {
        Tensor::from_storage(shape, Storage::full(dtype, numel(shape), value))
    }

    pub fn scalar(dtype: DType, value: f64) -> Tensor {
        Tensor::from_storage(&[], Storage::full(dtype, 1, value))
    }

    /// Mark the tensor as a gradient leaf. Ops consuming it will register it
    /// on the tape keyed by storage identity, so all clones map to one node.
    pub fn requires_grad(mut self, yes: bool) -> Tensor {
        self.requires_grad = yes;
        self
    }

    pub fn is_leaf_like(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &Storage {
        &self.data
    }

    pub(crate) fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Tensor {
        self.node = Some(node);
        self
    }

    /// Same storage, no tape link, no grad flag.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            node: None,
        }
    }

    /// Copy into the other dtype (detached).
    pub fn cast(&self, dtype: DType) -> Tensor {
        if self.dtype() == dtype {
            return self.detach();
        }
        let data = match dtype {
            DType::F32 => Storage::F32(Arc::new(self.data.to_f32_vec())),
            DType::F64 => Storage::F64(Arc::new(self.data.to_f64_vec())),
        };
        Tensor::from_storage(&self.shape, data)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data.at(0)
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.to_f32_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.to_f64_vec()
    }

    /// New tensor with the same data and a different shape (shared storage).
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            node: self.node,
        }
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// How a smaller operand maps onto a larger one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    /// Shapes identical.
    Same,
    /// Rhs repeats with this period (scalar or trailing suffix of lhs).
    RhsSmall(usize),
    /// Lhs repeats with this period.
    LhsSmall(usize),
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

pub(crate) fn broadcast_kind(op: &str, lhs: &[usize], rhs: &[usize]) -> Broadcast {
    if lhs == rhs {
        Broadcast::Same
    } else if is_suffix(rhs, lhs) {
        Broadcast::RhsSmall(numel(rhs))
    } else if is_suffix(lhs, rhs) {
        Broadcast::LhsSmall(numel(lhs))
    } else {
        panic!("{op}: shapes {lhs:?} and {rhs:?} are not broadcast-compatible (identical, scalar, or trailing suffix only)");
    }
}
