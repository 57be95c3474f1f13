//! Layout ops: reshape, permute, concat, slice, gather, scatter_add.

use std::sync::Arc;

use super::check_same_dtype;
use crate::tensor::tape::{Backward, NodeId};
use crate::tensor::{numel, strides, Elem, Storage, Tape, Tensor};

// ---------------------------------------------------------------------------
// reshape (zero-copy) and permute
// ---------------------------------------------------------------------------

struct ReshapeBackward {
    ids: [Option<NodeId>; 1],
}

impl Backward for ReshapeBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }
    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        vec![Some(grad.clone())]
    }
    fn op_name(&self) -> &'static str {
        "reshape"
    }
}

fn permute_kernel<T: Elem>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    let n = x.len();
    let mut out = vec![T::zero(); n];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for (flat_out, slot) in out.iter_mut().enumerate() {
        // decode flat_out into out coords, map to input coords
        let mut rem = flat_out;
        for d in 0..rank {
            idx[d] = rem / out_strides[d];
            rem %= out_strides[d];
        }
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[axes[d]];
        }
        *slot = x[src];
    }
    out
}

struct PermuteBackward {
    ids: [Option<NodeId>; 1],
    out_shape: Vec<usize>,
    inverse: Vec<usize>,
}

impl Backward for PermuteBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }
    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        let g = match grad {
            Storage::F32(g) => Storage::F32(Arc::new(permute_kernel(g, &self.out_shape, &self.inverse))),
            Storage::F64(g) => Storage::F64(Arc::new(permute_kernel(g, &self.out_shape, &self.inverse))),
        };
        vec![Some(g)]
    }
    fn op_name(&self) -> &'static str {
        "permute"
    }
}

// ---------------------------------------------------------------------------
// concat / slice along one axis
// ---------------------------------------------------------------------------

struct ConcatBackward {
    ids: Vec<Option<NodeId>>,
    shapes: Vec<Vec<usize>>,
    axis: usize,
    out_shape: Vec<usize>,
}

impl Backward for ConcatBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }
    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        let mut offset = 0usize;
        let mut out = Vec::with_capacity(self.ids.len());
        for (i, shape) in self.shapes.iter().enumerate() {
            let len_axis = shape[self.axis];
            let g = if self.ids[i].is_some() {
                Some(slice_axis(grad, &self.out_shape, self.axis, offset, len_axis))
            } else {
                None
            };
            out.push(g);
            offset += len_axis;
        }
        out
    }
    fn op_name(&self) -> &'static str {
        "concat"
    }
}

fn slice_axis(x: &Storage, shape: &[usize], axis: usize, start: usize, len: usize) -> Storage {
    fn run<T: Elem>(x: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
        let outer: usize = shape[..axis].iter().product();
        let ax = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ax + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        out
    }
    match x {
        Storage::F32(v) => Storage::F32(Arc::new(run(v, shape, axis, start, len))),
        Storage::F64(v) => Storage::F64(Arc::new(run(v, shape, axis, start, len))),
    }
}

fn unslice_axis(g: &Storage, in_shape: &[usize], axis: usize, start: usize, len: usize) -> Storage {
    fn run<T: Elem>(g: &[T], in_shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
        let outer: usize = in_shape[..axis].iter().product();
        let ax = in_shape[axis];
        let inner: usize = in_shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * ax * inner];
        for o in 0..outer {
            let dst = (o * ax + start) * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
        }
        out
    }
    match g {
        Storage::F32(v) => Storage::F32(Arc::new(run(v, in_shape, axis, start, len))),
        Storage::F64(v) => Storage::F64(Arc::new(run(v, in_shape, axis, start, len))),
    }
}

struct SliceBackward {
    ids: [Option<NodeId>; 1],
    in_shape: Vec<usize>,
    axis: usize,
    start: usize,
    len: usize,
}

impl Backward for SliceBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }
    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        vec![Some(unslice_axis(grad, &self.in_shape, self.axis, self.start, self.len))]
    }
    fn op_name(&self) -> &'static str {
        "slice"
    }
}

// ---------------------------------------------------------------------------
// gather / scatter_add over leading rows
// ---------------------------------------------------------------------------

/// Row-gather indices plus the leading shape the gathered rows should take.
#[derive(Clone, Debug)]
pub struct GatherSpec {
    pub indices: Arc<Vec<usize>>,
    pub index_shape: Vec<usize>,
}

impl GatherSpec {
    pub fn new(indices: Vec<usize>, index_shape: &[usize]) -> GatherSpec {
        assert_eq!(numel(index_shape), indices.len());
        GatherSpec {
            indices: Arc::new(indices),
            index_shape: index_shape.to_vec(),
        }
    }
}

fn gather_rows<T: Elem>(x: &[T], row_len: usize, indices: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(indices.len() * row_len);
    for &i in indices {
        out.extend_from_slice(&x[i * row_len..(i + 1) * row_len]);
    }
    out
}

fn scatter_add_rows<T: Elem>(g: &[T], row_len: usize, indices: &[usize], n_rows: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n_rows * row_len];
    for (j, &i) in indices.iter().enumerate() {
        let dst = &mut out[i * row_len..(i + 1) * row_len];
        let src = &g[j * row_len..(j + 1) * row_len];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s;
        }
    }
    out
}

struct GatherBackward {
    ids: [Option<NodeId>; 1],
    spec: GatherSpec,
    n_rows: usize,
    row_len: usize,
}

impl Backward for GatherBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }
    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        let g = match grad {
            Storage::F32(g) => Storage::F32(Arc::new(scatter_add_rows(
                g,
                self.row_len,
                &self.spec.indices,
                self.n_rows,
            ))),
            Storage::F64(g) => Storage::F64(Arc::new(scatter_add_rows(
                g,
                self.row_len,
                &self.spec.indices,
                self.n_rows,
            ))),
        };
        vec![Some(g)]
    }
    fn op_name(&self) -> &'static str {
        "gather"
    }
}

struct ScatterAddBackward {
    ids: [Option<NodeId>; 1],
    spec: GatherSpec,
    row_len: usize,
}

impl Backward for ScatterAddBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }
    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        let g = match grad {
            Storage::F32(g) => Storage::F32(Arc::new(gather_rows(g, self.row_len, &self.spec.indices))),
            Storage::F64(g) => Storage::F64(Arc::new(gather_rows(g, self.row_len, &self.spec.indices))),
        };
        vec![Some(g)]
    }
    fn op_name(&self) -> &'static str {
        "scatter_add"
    }
}

impl Tape {
    /// Same data, new shape. No copy; gradients reshape back.
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            x.numel(),
            "reshape: {:?} -> {shape:?} changes element count",
            x.shape()
        );
        let ids = [self.track(x)];
        let out = Tensor::from_storage(shape, x.data().clone());
        match self.record(
            ids[0].is_some(),
            Box::new(ReshapeBackward { ids }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }

    /// Reorder axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&self, x: &Tensor, axes: &[usize]) -> Tensor {
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        assert_eq!(axes.len(), rank, "permute: axes {axes:?} vs rank {rank}");
        for &a in axes {
            assert!(a < rank && !seen[a], "permute: invalid axes {axes:?}");
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let data = match x.data() {
            Storage::F32(v) => Storage::F32(Arc::new(permute_kernel(v, x.shape(), axes))),
            Storage::F64(v) => Storage::F64(Arc::new(permute_kernel(v, x.shape(), axes))),
        };
        let mut inverse = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let ids = [self.track(x)];
        let out = Tensor::from_storage(&out_shape, data);
        match self.record(
            ids[0].is_some(),
            Box::new(PermuteBackward {
                ids,
                out_shape,
                inverse,
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&self, xs: &[&Tensor], axis: usize) -> Tensor {
        assert!(!xs.is_empty(), "concat: no inputs");
        let rank = xs[0].shape().len();
        assert!(axis < rank, "concat: axis {axis} out of range");
        let mut out_shape = xs[0].shape().to_vec();
        for t in &xs[1..] {
            check_same_dtype("concat", xs[0], t);
            assert_eq!(t.shape().len(), rank, "concat: rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        t.shape()[d],
                        out_shape[d],
                        "concat: shapes {:?} vs {:?} differ off-axis",
                        xs[0].shape(),
                        t.shape()
                    );
                }
            }
        }
        out_shape[axis] = xs.iter().map(|t| t.shape()[axis]).sum();

        fn run<T: Elem>(xs: &[&Tensor], axis: usize, out_shape: &[usize], get: impl Fn(&Tensor) -> &[T]) -> Vec<T> {
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(numel(out_shape));
            for o in 0..outer {
                for t in xs {
                    let len = t.shape()[axis];
                    let src = get(t);
                    out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
                }
            }
            out
        }

        let data = match xs[0].data() {
            Storage::F32(_) => Storage::F32(Arc::new(run::<f32>(xs, axis, &out_shape, |t| t.data().as_f32()))),
            Storage::F64(_) => Storage::F64(Arc::new(run::<f64>(xs, axis, &out_shape, |t| t.data().as_f64()))),
        };
        let ids: Vec<Option<NodeId>> = xs.iter().map(|t| self.track(t)).collect();
        let any = ids.iter().any(|i| i.is_some());
        let out = Tensor::from_storage(&out_shape, data);
        match self.record(
            any,
            Box::new(ConcatBackward {
                ids,
                shapes: xs.iter().map(|t| t.shape().to_vec()).collect(),
                axis,
                out_shape: out.shape().to_vec(),
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
        let rank = x.shape().len();
        assert!(axis < rank, "slice: axis {axis} out of range for {:?}", x.shape());
        assert!(
            start + len <= x.shape()[axis],
            "slice: {start}..{} out of range for axis {axis} of {:?}",
            start + len,
            x.shape()
        );
        let mut out_shape = x.shape().to_vec();
        out_shape[axis] = len;
        let data = slice_axis(x.data(), x.shape(), axis, start, len);
        let ids = [self.track(x)];
        let out = Tensor::from_storage(&out_shape, data);
        match self.record(
            ids[0].is_some(),
            Box::new(SliceBackward {
                ids,
                in_shape: x.shape().to_vec(),
                axis,
                start,
                len,
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }

    /// Gather leading rows: treats `x` as `[rows, rest...]`, output shape is
    /// `index_shape ++ rest`.
    pub fn gather(&self, x: &Tensor, spec: &GatherSpec) -> Tensor {
        assert!(!x.shape().is_empty(), "gather: scalar input");
        let n_rows = x.shape()[0];
        let row_len: usize = x.shape()[1..].iter().product();
        for &i in spec.indices.iter() {
            assert!(i < n_rows, "gather: index {i} out of range for {n_rows} rows");
        }
        let mut out_shape = spec.index_shape.clone();
        out_shape.extend_from_slice(&x.shape()[1..]);
        let data = match x.data() {
            Storage::F32(v) => Storage::F32(Arc::new(gather_rows(v, row_len, &spec.indices))),
            Storage::F64(v) => Storage::F64(Arc::new(gather_rows(v, row_len, &spec.indices))),
        };
        let ids = [self.track(x)];
        let out = Tensor::from_storage(&out_shape, data);
        match self.record(
            ids[0].is_some(),
            Box::new(GatherBackward {
                ids,
                spec: spec.clone(),
                n_rows,
                row_len,
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }

    /// Adjoint of gather: rows of `x` are added into a fresh `[n_rows, rest]`
    /// tensor at `spec.indices`.
    pub fn scatter_add(&self, x: &Tensor, spec: &GatherSpec, n_rows: usize) -> Tensor {
        let idx_rank = spec.index_shape.len();
        assert!(
            x.shape().len() >= idx_rank && x.shape()[..idx_rank] == spec.index_shape[..],
            "scatter_add: input {:?} does not start with index shape {:?}",
            x.shape(),
            spec.index_shape
        );
        let rest: Vec<usize> = x.shape()[idx_rank..].to_vec();
        let row_len: usize = rest.iter().product();
        for &i in spec.indices.iter() {
            assert!(i < n_rows, "scatter_add: index {i} out of range for {n_rows} rows");
        }
        let mut out_shape = vec![n_rows];
        out_shape.extend_from_slice(&rest);
        let data = match x.data() {
            Storage::F32(v) => Storage::F32(Arc::new(scatter_add_rows(v, row_len, &spec.indices, n_rows))),
            Storage::F64(v) => Storage::F64(Arc::new(scatter_add_rows(v, row_len, &spec.indices, n_rows))),
        };
        let ids = [self.track(x)];
        let out = Tensor::from_storage(&out_shape, data);
        match self.record(
            ids[0].is_some(),
            Box::new(ScatterAddBackward {
                ids,
                spec: spec.clone(),
                row_len,
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }
}
