//! Matrix multiplication: rank-2 and batched rank-3, parallel over rows.

use std::sync::Arc;

use rayon::prelude::*;

use super::check_same_dtype;
use crate::tensor::tape::{Backward, NodeId};
use crate::tensor::{Elem, Storage, Tape, Tensor};

/// C[b] = A[b] (m×k) · B[b] (k×n), row-major, `batch` independent problems.
/// Rows are distributed over threads; each row is computed sequentially, so
/// results do not depend on the thread count.
pub(crate) fn matmul_kernel<T: Elem>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(row_idx, out_row)| {
            let bi = row_idx / m;
            let i = row_idx % m;
            let a_row = &a[bi * m * k + i * k..bi * m * k + (i + 1) * k];
            let b_mat = &b[bi * k * n..(bi + 1) * k * n];
            for (kk, &av) in a_row.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let b_row = &b_mat[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        });
    out
}

/// Transpose the last two dims of a batched row-major matrix.
fn transpose_kernel<T: Elem>(x: &[T], batch: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * r * c];
    for bi in 0..batch {
        let src = &x[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

struct MatmulBackward {
    ids: [Option<NodeId>; 2],
    a: Storage,
    b: Storage,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatmulBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        fn run<T: Elem>(
            g: &[T],
            a: &[T],
            b: &[T],
            batch: usize,
            m: usize,
            k: usize,
            n: usize,
            want_a: bool,
            want_b: bool,
        ) -> (Option<Vec<T>>, Option<Vec<T>>) {
            // dA = G · Bᵀ ; dB = Aᵀ · G
            let da = want_a.then(|| {
                let bt = transpose_kernel(b, batch, k, n);
                matmul_kernel(g, &bt, batch, m, n, k)
            });
            let db = want_b.then(|| {
                let at = transpose_kernel(a, batch, m, k);
                matmul_kernel(&at, g, batch, k, m, n)
            });
            (da, db)
        }
        let want_a = self.ids[0].is_some();
        let want_b = self.ids[1].is_some();
        let (da, db) = match (grad, &self.a, &self.b) {
            (Storage::F32(g), Storage::F32(a), Storage::F32(b)) => {
                let (da, db) = run(g, a, b, self.batch, self.m, self.k, self.n, want_a, want_b);
                (
                    da.map(|v| Storage::F32(Arc::new(v))),
                    db.map(|v| Storage::F32(Arc::new(v))),
                )
            }
            (Storage::F64(g), Storage::F64(a), Storage::F64(b)) => {
                let (da, db) = run(g, a, b, self.batch, self.m, self.k, self.n, want_a, want_b);
                (
                    da.map(|v| Storage::F64(Arc::new(v))),
                    db.map(|v| Storage::F64(Arc::new(v))),
                )
            }
            _ => panic!("matmul: dtype mismatch in backward"),
        };
        vec![da, db]
    }

    fn op_name(&self) -> &'static str {
        "matmul"
    }
}

impl Tape {
    /// `(m,k)·(k,n)` or batched `(b,m,k)·(b,k,n)`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        check_same_dtype("matmul", a, b);
        let (batch, m, k, n, out_shape): (usize, usize, usize, usize, Vec<usize>) =
            match (a.shape(), b.shape()) {
                ([m, k1], [k2, n]) => {
                    if k1 != k2 {
                        panic!("matmul: inner dims differ, {:?} vs {:?}", a.shape(), b.shape());
                    }
                    (1, *m, *k1, *n, vec![*m, *n])
                }
                ([ba, m, k1], [bb, k2, n]) => {
                    if k1 != k2 || ba != bb {
                        panic!("matmul: incompatible batched shapes {:?} vs {:?}", a.shape(), b.shape());
                    }
                    (*ba, *m, *k1, *n, vec![*ba, *m, *n])
                }
                _ => panic!(
                    "matmul: expects rank-2 or matching rank-3 operands, got {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                ),
            };
        let data = match (a.data(), b.data()) {
            (Storage::F32(x), Storage::F32(y)) => {
                Storage::F32(Arc::new(matmul_kernel(x, y, batch, m, k, n)))
            }
            (Storage::F64(x), Storage::F64(y)) => {
                Storage::F64(Arc::new(matmul_kernel(x, y, batch, m, k, n)))
            }
            _ => unreachable!(),
        };
        let ids = [self.track(a), self.track(b)];
        let out = Tensor::from_storage(&out_shape, data);
        match self.record(
            ids.iter().any(|i| i.is_some()),
            Box::new(MatmulBackward {
                ids,
                a: a.data().clone(),
                b: b.data().clone(),
                batch,
                m,
                k,
                n,
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let eye = Tensor::from_f32(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = Tensor::from_f32(&[3, 3], (0..9).map(|i| i as f32 * 0.37 - 1.0).collect());
        let y = tape.matmul(&eye, &a);
        assert_eq!(y.to_f32_vec(), a.to_f32_vec());
    }

    #[test]
    fn small_matmul_grad() {
        let tape = Tape::new();
        let a = Tensor::from_f64(&[1, 2], vec![1.0, 2.0]).requires_grad(true);
        let b = Tensor::from_f64(&[2, 1], vec![3.0, 4.0]).requires_grad(true);
        let y = tape.matmul(&a, &b);
        assert_eq!(y.to_f64_vec(), vec![11.0]);
        let loss = tape.sum(&y, None);
        let grads = tape.backward(&loss);
        assert_eq!(grads.get(&a).unwrap().to_f64_vec(), vec![3.0, 4.0]);
        assert_eq!(grads.get(&b).unwrap().to_f64_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn batched_matches_loop() {
        let tape = Tape::new();
        let a = Tensor::from_f32(&[2, 2, 3], (0..12).map(|i| i as f32).collect());
        let b = Tensor::from_f32(&[2, 3, 2], (0..12).map(|i| (i as f32) * 0.5).collect());
        let y = tape.matmul(&a, &b);
        assert_eq!(y.shape(), &[2, 2, 2]);
        // manual batch 1, row 0, col 0: a[6..9] · b[6,8,10 col 0] with offsets
        let av = a.to_f32_vec();
        let bv = b.to_f32_vec();
        let mut expect = 0.0;
        for kk in 0..3 {
            expect += av[6 + kk] * bv[6 + kk * 2];
        }
        assert_eq!(y.to_f32_vec()[4], expect);
    }
}
