//! Small-vector ops: cross products, lane normalization, quaternion to
//! rotation matrix.

use std::sync::Arc;

use super::check_same_dtype;
use crate::tensor::tape::{Backward, NodeId};
use crate::tensor::{Elem, Storage, Tape, Tensor};

// ---------------------------------------------------------------------------
// cross3
// ---------------------------------------------------------------------------

fn cross_kernel<T: Elem>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in (0..a.len()).step_by(3) {
        out[i] = a[i + 1] * b[i + 2] - a[i + 2] * b[i + 1];
        out[i + 1] = a[i + 2] * b[i] - a[i] * b[i + 2];
        out[i + 2] = a[i] * b[i + 1] - a[i + 1] * b[i];
    }
    out
}

struct Cross3Backward {
    ids: [Option<NodeId>; 2],
    a: Storage,
    b: Storage,
}

impl Backward for Cross3Backward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        // c = a×b  =>  dL/da = b×g, dL/db = g×a
        let da = self.ids[0].map(|_| match (&self.b, grad) {
            (Storage::F32(b), Storage::F32(g)) => Storage::F32(Arc::new(cross_kernel(b, g))),
            (Storage::F64(b), Storage::F64(g)) => Storage::F64(Arc::new(cross_kernel(b, g))),
            _ => panic!("cross3: dtype mismatch"),
        });
        let db = self.ids[1].map(|_| match (grad, &self.a) {
            (Storage::F32(g), Storage::F32(a)) => Storage::F32(Arc::new(cross_kernel(g, a))),
            (Storage::F64(g), Storage::F64(a)) => Storage::F64(Arc::new(cross_kernel(g, a))),
            _ => panic!("cross3: dtype mismatch"),
        });
        vec![da, db]
    }

    fn op_name(&self) -> &'static str {
        "cross3"
    }
}

// ---------------------------------------------------------------------------
// normalize over the last dim
// ---------------------------------------------------------------------------

fn normalize_kernel<T: Elem>(
    x: &[T],
    d: usize,
    eps: f64,
    fallback: Option<usize>,
) -> (Vec<T>, Vec<T>) {
    let lanes = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut norms = vec![T::zero(); lanes];
    let epst = T::from_f64(eps);
    for l in 0..lanes {
        let xl = &x[l * d..(l + 1) * d];
        let mut sq = T::zero();
        for &v in xl {
            sq += v * v;
        }
        let n = sq.sqrt();
        norms[l] = n;
        let dst = &mut out[l * d..(l + 1) * d];
        if n < epst {
            if let Some(f) = fallback {
                dst[f] = T::one();
            }
        } else {
            for j in 0..d {
                dst[j] = xl[j] / n;
            }
        }
    }
    (out, norms)
}

struct NormalizeBackward {
    ids: [Option<NodeId>; 1],
    output: Storage,
    norms: Storage,
    d: usize,
    eps: f64,
}

impl Backward for NormalizeBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        fn rule<T: Elem>(g: &[T], y: &[T], norms: &[T], d: usize, eps: f64) -> Vec<T> {
            let lanes = g.len() / d;
            let epst = T::from_f64(eps);
            let mut out = vec![T::zero(); g.len()];
            for l in 0..lanes {
                let n = norms[l];
                if n < epst {
                    continue; // degenerate lane: zero gradient
                }
                let gl = &g[l * d..(l + 1) * d];
                let yl = &y[l * d..(l + 1) * d];
                let mut dot = T::zero();
                for j in 0..d {
                    dot += gl[j] * yl[j];
                }
                for j in 0..d {
                    out[l * d + j] = (gl[j] - yl[j] * dot) / n;
                }
            }
            out
        }
        let g = match (grad, &self.output, &self.norms) {
            (Storage::F32(g), Storage::F32(y), Storage::F32(n)) => {
                Storage::F32(Arc::new(rule(g, y, n, self.d, self.eps)))
            }
            (Storage::F64(g), Storage::F64(y), Storage::F64(n)) => {
                Storage::F64(Arc::new(rule(g, y, n, self.d, self.eps)))
            }
            _ => panic!("normalize: dtype mismatch"),
        };
        vec![Some(g)]
    }

    fn op_name(&self) -> &'static str {
        "normalize"
    }
}

// ---------------------------------------------------------------------------
// quaternion_to_rotation
// ---------------------------------------------------------------------------

/// R(q) for q = (w, x, y, z), the standard polynomial form. The caller is
/// expected to pass unit quaternions; the formula itself is polynomial so the
/// gradient is exact for any input.
pub fn quat_to_rot<T: Elem>(q: &[T]) -> [T; 9] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::from_f64(2.0);
    let one = T::one();
    [
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    ]
}

/// Accumulate dL/dq from dL/dR (row-major 3x3).
pub fn quat_to_rot_vjp<T: Elem>(q: &[T], g: &[T]) -> [T; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::from_f64(2.0);
    let four = T::from_f64(4.0);
    let mut dw = T::zero();
    let mut dx = T::zero();
    let mut dy = T::zero();
    let mut dz = T::zero();
    // row 0
    dy -= four * y * g[0];
    dz -= four * z * g[0];
    dx += two * y * g[1];
    dy += two * x * g[1];
    dw -= two * z * g[1];
    dz -= two * w * g[1];
    dx += two * z * g[2];
    dz += two * x * g[2];
    dw += two * y * g[2];
    dy += two * w * g[2];
    // row 1
    dx += two * y * g[3];
    dy += two * x * g[3];
    dw += two * z * g[3];
    dz += two * w * g[3];
    dx -= four * x * g[4];
    dz -= four * z * g[4];
    dy += two * z * g[5];
    dz += two * y * g[5];
    dw -= two * x * g[5];
    dx -= two * w * g[5];
    // row 2
    dx += two * z * g[6];
    dz += two * x * g[6];
    dw -= two * y * g[6];
    dy -= two * w * g[6];
    dy += two * z * g[7];
    dz += two * y * g[7];
    dw += two * x * g[7];
    dx += two * w * g[7];
    dx -= four * x * g[8];
    dy -= four * y * g[8];
    [dw, dx, dy, dz]
}

struct QuatRotBackward {
    ids: [Option<NodeId>; 1],
    q: Storage,
}

impl Backward for QuatRotBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        fn rule<T: Elem>(g: &[T], q: &[T]) -> Vec<T> {
            let n = q.len() / 4;
            let mut out = vec![T::zero(); q.len()];
            for i in 0..n {
                let dq = quat_to_rot_vjp(&q[i * 4..(i + 1) * 4], &g[i * 9..(i + 1) * 9]);
                out[i * 4..(i + 1) * 4].copy_from_slice(&dq);
            }
            out
        }
        let g = match (grad, &self.q) {
            (Storage::F32(g), Storage::F32(q)) => Storage::F32(Arc::new(rule(g, q))),
            (Storage::F64(g), Storage::F64(q)) => Storage::F64(Arc::new(rule(g, q))),
            _ => panic!("quaternion_to_rotation: dtype mismatch"),
        };
        vec![Some(g)]
    }

    fn op_name(&self) -> &'static str {
        "quaternion_to_rotation"
    }
}

impl Tape {
    /// Elementwise cross product over the trailing dim of 3.
    pub fn cross3(&self, a: &Tensor, b: &Tensor) -> Tensor {
        check_same_dtype("cross3", a, b);
        assert_eq!(a.shape(), b.shape(), "cross3: shapes {:?} vs {:?}", a.shape(), b.shape());
        assert_eq!(a.shape().last(), Some(&3), "cross3: last dim must be 3, got {:?}", a.shape());
        let data = match (a.data(), b.data()) {
            (Storage::F32(x), Storage::F32(y)) => Storage::F32(Arc::new(cross_kernel(x, y))),
            (Storage::F64(x), Storage::F64(y)) => Storage::F64(Arc::new(cross_kernel(x, y))),
            _ => unreachable!(),
        };
        let ids = [self.track(a), self.track(b)];
        let out = Tensor::from_storage(a.shape(), data);
        match self.record(
            ids.iter().any(|i| i.is_some()),
            Box::new(Cross3Backward {
                ids,
                a: a.data().clone(),
                b: b.data().clone(),
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }

    /// L2-normalize lanes of the last dim. Lanes with norm < eps output zeros
    /// (or the unit basis vector `fallback`) and receive zero gradient.
    pub fn normalize(&self, x: &Tensor, eps: f64, fallback: Option<usize>) -> Tensor {
        let d = *x
            .shape()
            .last()
            .unwrap_or_else(|| panic!("normalize: scalar input"));
        if let Some(f) = fallback {
            assert!(f < d, "normalize: fallback index {f} out of range for dim {d}");
        }
        let (data, norms) = match x.data() {
            Storage::F32(v) => {
                let (y, n) = normalize_kernel(v, d, eps, fallback);
                (Storage::F32(Arc::new(y)), Storage::F32(Arc::new(n)))
            }
            Storage::F64(v) => {
                let (y, n) = normalize_kernel(v, d, eps, fallback);
                (Storage::F64(Arc::new(y)), Storage::F64(Arc::new(n)))
            }
        };
        let ids = [self.track(x)];
        let out = Tensor::from_storage(x.shape(), data);
        match self.record(
            ids[0].is_some(),
            Box::new(NormalizeBackward {
                ids,
                output: out.data().clone(),
                norms,
                d,
                eps,
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }

    /// `(N,4)` unit quaternions (w,x,y,z) to `(N,3,3)` rotation matrices.
    pub fn quaternion_to_rotation(&self, q: &Tensor) -> Tensor {
        let n = match q.shape() {
            [n, 4] => *n,
            _ => panic!("quaternion_to_rotation: expected (N,4), got {:?}", q.shape()),
        };
        fn fwd<T: Elem>(q: &[T]) -> Vec<T> {
            let n = q.len() / 4;
            let mut out = vec![T::zero(); n * 9];
            for i in 0..n {
                out[i * 9..(i + 1) * 9].copy_from_slice(&quat_to_rot(&q[i * 4..(i + 1) * 4]));
            }
            out
        }
        let data = match q.data() {
            Storage::F32(v) => Storage::F32(Arc::new(fwd(v))),
            Storage::F64(v) => Storage::F64(Arc::new(fwd(v))),
        };
        let ids = [self.track(q)];
        let out = Tensor::from_storage(&[n, 3, 3], data);
        match self.record(
            ids[0].is_some(),
            Box::new(QuatRotBackward {
                ids,
                q: q.data().clone(),
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }
}
