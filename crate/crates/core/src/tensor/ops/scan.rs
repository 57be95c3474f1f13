//! Fused gated linear recurrence over the leading (sequence) axis.
//!
//! h_t = a_t ⊙ h_{t-1} + u_t with h_{-1} = 0, recorded as one node instead of
//! per-step slice/mul/add chains. Strictly causal by construction.

use std::sync::Arc;

use super::check_same_dtype;
use crate::tensor::tape::{Backward, NodeId};
use crate::tensor::{Elem, Storage, Tape, Tensor};

fn scan_forward<T: Elem>(a: &[T], u: &[T], len: usize, d: usize) -> Vec<T> {
    let mut h = vec![T::zero(); len * d];
    h[..d].copy_from_slice(&u[..d]);
    for t in 1..len {
        for j in 0..d {
            h[t * d + j] = a[t * d + j] * h[(t - 1) * d + j] + u[t * d + j];
        }
    }
    h
}

struct ScanBackward {
    ids: [Option<NodeId>; 2],
    a: Storage,
    h: Storage,
    len: usize,
    d: usize,
}

impl Backward for ScanBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        // Reverse recurrence: c_t = g_t + a_{t+1} ⊙ c_{t+1};
        // du_t = c_t ; da_t = c_t ⊙ h_{t-1} (zero at t = 0).
        fn run<T: Elem>(
            g: &[T],
            a: &[T],
            h: &[T],
            len: usize,
            d: usize,
            want: [bool; 2],
        ) -> (Option<Vec<T>>, Option<Vec<T>>) {
            let mut c = vec![T::zero(); len * d];
            c[(len - 1) * d..].copy_from_slice(&g[(len - 1) * d..]);
            for t in (0..len - 1).rev() {
                for j in 0..d {
                    c[t * d + j] = g[t * d + j] + a[(t + 1) * d + j] * c[(t + 1) * d + j];
                }
            }
            let da = want[0].then(|| {
                let mut da = vec![T::zero(); len * d];
                for t in 1..len {
                    for j in 0..d {
                        da[t * d + j] = c[t * d + j] * h[(t - 1) * d + j];
                    }
                }
                da
            });
            let du = want[1].then(|| c);
            (da, du)
        }
        let want = [self.ids[0].is_some(), self.ids[1].is_some()];
        match (grad, &self.a, &self.h) {
            (Storage::F32(g), Storage::F32(a), Storage::F32(h)) => {
                let (da, du) = run(g, a, h, self.len, self.d, want);
                vec![
                    da.map(|v| Storage::F32(Arc::new(v))),
                    du.map(|v| Storage::F32(Arc::new(v))),
                ]
            }
            (Storage::F64(g), Storage::F64(a), Storage::F64(h)) => {
                let (da, du) = run(g, a, h, self.len, self.d, want);
                vec![
                    da.map(|v| Storage::F64(Arc::new(v))),
                    du.map(|v| Storage::F64(Arc::new(v))),
                ]
            }
            _ => panic!("linear_scan: dtype mismatch"),
        }
    }

    fn op_name(&self) -> &'static str {
        "linear_scan"
    }
}

impl Tape {
    /// Sequential gated scan over `(L, D)` inputs: output h with
    /// `h_t = gate_t ⊙ h_{t-1} + drive_t`.
    pub fn linear_scan(&self, gate: &Tensor, drive: &Tensor) -> Tensor {
        check_same_dtype("linear_scan", gate, drive);
        assert_eq!(
            gate.shape(),
            drive.shape(),
            "linear_scan: gate {:?} vs drive {:?}",
            gate.shape(),
            drive.shape()
        );
        let (len, d) = match gate.shape() {
            [l, d] => (*l, *d),
            _ => panic!("linear_scan: expected (L,D), got {:?}", gate.shape()),
        };
        assert!(len >= 1, "linear_scan: empty sequence");
        let data = match (gate.data(), drive.data()) {
            (Storage::F32(a), Storage::F32(u)) => Storage::F32(Arc::new(scan_forward(a, u, len, d))),
            (Storage::F64(a), Storage::F64(u)) => Storage::F64(Arc::new(scan_forward(a, u, len, d))),
            _ => unreachable!(),
        };
        let ids = [self.track(gate), self.track(drive)];
        let out = Tensor::from_storage(gate.shape(), data);
        match self.record(
            ids.iter().any(|i| i.is_some()),
            Box::new(ScanBackward {
                ids,
                a: gate.data().clone(),
                h: out.data().clone(),
                len,
                d,
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
    fn zero_gate_is_identity() {
        let tape = Tape::new();
        let a = Tensor::from_f64(&[3, 2], vec![0.0; 6]);
        let u = Tensor::from_f64(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let h = tape.linear_scan(&a, &u);
        assert_eq!(h.to_f64_vec(), u.to_f64_vec());
    }

    #[test]
    fn unit_gate_prefix_sums() {
        let tape = Tape::new();
        let a = Tensor::from_f64(&[3, 1], vec![1.0; 3]);
        let u = Tensor::from_f64(&[3, 1], vec![1.0, 2.0, 3.0]);
        let h = tape.linear_scan(&a, &u);
        assert_eq!(h.to_f64_vec(), vec![1.0, 3.0, 6.0]);
    }

    #[test]
    fn unit_gate_first_drive_copies_state() {
        // a ≡ 1 and drive only at t=0: state is carried unchanged.
        let tape = Tape::new();
        let a = Tensor::from_f64(&[4, 1], vec![1.0; 4]);
        let u = Tensor::from_f64(&[4, 1], vec![7.0, 0.0, 0.0, 0.0]);
        let h = tape.linear_scan(&a, &u);
        assert_eq!(h.to_f64_vec(), vec![7.0; 4]);
    }

    #[test]
    fn causality_gradient_zero_for_future() {
        // loss on h_1 must not depend on inputs at t=2.
        let tape = Tape::new();
        let a = Tensor::from_f64(&[3, 1], vec![0.5; 3]).requires_grad(true);
        let u = Tensor::from_f64(&[3, 1], vec![1.0, 2.0, 3.0]).requires_grad(true);
        let h = tape.linear_scan(&a, &u);
        let h1 = tape.slice(&h, 0, 1, 1);
        let loss = tape.sum(&h1, None);
        let grads = tape.backward(&loss);
        let du = grads.get(&u).unwrap().to_f64_vec();
        assert!(du[2] == 0.0, "future drive grad leaked: {du:?}");
        let da = grads.get(&a).unwrap().to_f64_vec();
        assert!(da[2] == 0.0, "future gate grad leaked: {da:?}");
    }
}
