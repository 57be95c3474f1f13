//! Reductions and normalizations: sum/mean, softmax, layer_norm, rms_norm.

use std::sync::Arc;

use super::check_same_dtype;
use crate::tensor::tape::{Backward, NodeId};
use crate::tensor::{Elem, Storage, Tape, Tensor};

/// Split a shape at `axis` into (outer, len, inner) loop bounds.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

// ---------------------------------------------------------------------------
// sum / mean
// ---------------------------------------------------------------------------

struct ReduceBackward {
    ids: [Option<NodeId>; 1],
    in_shape: Vec<usize>,
    axis: Option<usize>,
    mean: bool,
}

impl Backward for ReduceBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        fn spread<T: Elem>(
            g: &[T],
            in_shape: &[usize],
            axis: Option<usize>,
            mean: bool,
        ) -> Vec<T> {
            let n: usize = in_shape.iter().product();
            match axis {
                None => {
                    let scale = if mean {
                        T::from_f64(1.0 / n as f64)
                    } else {
                        T::one()
                    };
                    vec![g[0] * scale; n]
                }
                Some(a) => {
                    let (outer, len, inner) = lanes(in_shape, a);
                    let scale = if mean {
                        T::from_f64(1.0 / len as f64)
                    } else {
                        T::one()
                    };
                    let mut out = vec![T::zero(); n];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                out[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    out
                }
            }
        }
        let g = match grad {
            Storage::F32(g) => Storage::F32(Arc::new(spread(g, &self.in_shape, self.axis, self.mean))),
            Storage::F64(g) => Storage::F64(Arc::new(spread(g, &self.in_shape, self.axis, self.mean))),
        };
        vec![Some(g)]
    }

    fn op_name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }
}

fn reduce_forward<T: Elem>(x: &[T], shape: &[usize], axis: Option<usize>, mean: bool) -> Vec<T> {
    match axis {
        None => {
            let mut acc = T::zero();
            for &v in x {
                acc += v;
            }
            if mean {
                acc = acc * T::from_f64(1.0 / x.len() as f64);
            }
            vec![acc]
        }
        Some(a) => {
            let (outer, len, inner) = lanes(shape, a);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += x[(o * len + l) * inner + i];
                    }
                }
            }
            if mean {
                let s = T::from_f64(1.0 / len as f64);
                for v in &mut out {
                    *v = *v * s;
                }
            }
            out
        }
    }
}

impl Tape {
    fn reduce(&self, x: &Tensor, axis: Option<usize>, mean: bool) -> Tensor {
        let out_shape: Vec<usize> = match axis {
            None => vec![],
            Some(a) => {
                assert!(a < x.shape().len(), "reduce: axis {a} out of range for {:?}", x.shape());
                let mut s = x.shape().to_vec();
                s.remove(a);
                s
            }
        };
        let data = match x.data() {
            Storage::F32(v) => Storage::F32(Arc::new(reduce_forward(v, x.shape(), axis, mean))),
            Storage::F64(v) => Storage::F64(Arc::new(reduce_forward(v, x.shape(), axis, mean))),
        };
        let ids = [self.track(x)];
        let out = Tensor::from_storage(&out_shape, data);
        match self.record(
            ids[0].is_some(),
            Box::new(ReduceBackward {
                ids,
                in_shape: x.shape().to_vec(),
                axis,
                mean,
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }

    /// Sum over one axis (removed) or all elements (`None` -> scalar).
    pub fn sum(&self, x: &Tensor, axis: Option<usize>) -> Tensor {
        self.reduce(x, axis, false)
    }

    pub fn mean(&self, x: &Tensor, axis: Option<usize>) -> Tensor {
        self.reduce(x, axis, true)
    }
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

fn softmax_forward<T: Elem>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = lanes(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let mut mx = x[idx(0)];
            for l in 1..len {
                if x[idx(l)] > mx {
                    mx = x[idx(l)];
                }
            }
            let mut denom = T::zero();
            for l in 0..len {
                let e = (x[idx(l)] - mx).exp();
                out[idx(l)] = e;
                denom += e;
            }
            for l in 0..len {
                out[idx(l)] = out[idx(l)] / denom;
            }
        }
    }
    out
}

struct SoftmaxBackward {
    ids: [Option<NodeId>; 1],
    shape: Vec<usize>,
    axis: usize,
    output: Storage,
}

impl Backward for SoftmaxBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        // dx = y ⊙ (g − Σ g⊙y) per lane
        fn rule<T: Elem>(g: &[T], y: &[T], shape: &[usize], axis: usize) -> Vec<T> {
            let (outer, len, inner) = lanes(shape, axis);
            let mut out = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let mut dot = T::zero();
                    for l in 0..len {
                        dot += g[idx(l)] * y[idx(l)];
                    }
                    for l in 0..len {
                        out[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                    }
                }
            }
            out
        }
        let g = match (grad, &self.output) {
            (Storage::F32(g), Storage::F32(y)) => {
                Storage::F32(Arc::new(rule(g, y, &self.shape, self.axis)))
            }
            (Storage::F64(g), Storage::F64(y)) => {
                Storage::F64(Arc::new(rule(g, y, &self.shape, self.axis)))
            }
            _ => panic!("softmax: dtype mismatch in backward"),
        };
        vec![Some(g)]
    }

    fn op_name(&self) -> &'static str {
        "softmax"
    }
}

impl Tape {
    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Tensor {
        let data = match x.data() {
            Storage::F32(v) => Storage::F32(Arc::new(softmax_forward(v, x.shape(), axis))),
            Storage::F64(v) => Storage::F64(Arc::new(softmax_forward(v, x.shape(), axis))),
        };
        let ids = [self.track(x)];
        let out = Tensor::from_storage(x.shape(), data);
        match self.record(
            ids[0].is_some(),
            Box::new(SoftmaxBackward {
                ids,
                shape: x.shape().to_vec(),
                axis,
                output: out.data().clone(),
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }
}

// ---------------------------------------------------------------------------
// layer_norm / rms_norm over the last dim
// ---------------------------------------------------------------------------

const NORM_EPS: f64 = 1e-6;

struct LayerNormBackward {
    ids: [Option<NodeId>; 3],
    xhat: Storage,
    inv_std: Storage, // one per lane
    gamma: Storage,
    d: usize,
}

impl Backward for LayerNormBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        fn rule<T: Elem>(
            g: &[T],
            xhat: &[T],
            inv_std: &[T],
            gamma: &[T],
            d: usize,
            want: [bool; 3],
        ) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
            let lanes = g.len() / d;
            let dx = want[0].then(|| {
                let mut out = vec![T::zero(); g.len()];
                let dt = T::from_f64(d as f64);
                for l in 0..lanes {
                    let s = &mut out[l * d..(l + 1) * d];
                    let gl = &g[l * d..(l + 1) * d];
                    let xl = &xhat[l * d..(l + 1) * d];
                    let mut sum_gh = T::zero();
                    let mut sum_ghx = T::zero();
                    for j in 0..d {
                        let gh = gl[j] * gamma[j];
                        sum_gh += gh;
                        sum_ghx += gh * xl[j];
                    }
                    for j in 0..d {
                        let gh = gl[j] * gamma[j];
                        s[j] = inv_std[l] / dt * (dt * gh - sum_gh - xl[j] * sum_ghx);
                    }
                }
                out
            });
            let dgamma = want[1].then(|| {
                let mut out = vec![T::zero(); d];
                for l in 0..lanes {
                    for j in 0..d {
                        out[j] += g[l * d + j] * xhat[l * d + j];
                    }
                }
                out
            });
            let dbeta = want[2].then(|| {
                let mut out = vec![T::zero(); d];
                for l in 0..lanes {
                    for j in 0..d {
                        out[j] += g[l * d + j];
                    }
                }
                out
            });
            (dx, dgamma, dbeta)
        }
        let want = [
            self.ids[0].is_some(),
            self.ids[1].is_some(),
            self.ids[2].is_some(),
        ];
        match (grad, &self.xhat, &self.inv_std, &self.gamma) {
            (Storage::F32(g), Storage::F32(xh), Storage::F32(is), Storage::F32(ga)) => {
                let (dx, dg, db) = rule(g, xh, is, ga, self.d, want);
                vec![
                    dx.map(|v| Storage::F32(Arc::new(v))),
                    dg.map(|v| Storage::F32(Arc::new(v))),
                    db.map(|v| Storage::F32(Arc::new(v))),
                ]
            }
            (Storage::F64(g), Storage::F64(xh), Storage::F64(is), Storage::F64(ga)) => {
                let (dx, dg, db) = rule(g, xh, is, ga, self.d, want);
                vec![
                    dx.map(|v| Storage::F64(Arc::new(v))),
                    dg.map(|v| Storage::F64(Arc::new(v))),
                    db.map(|v| Storage::F64(Arc::new(v))),
                ]
            }
            _ => panic!("layer_norm: dtype mismatch in backward"),
        }
    }

    fn op_name(&self) -> &'static str {
        "layer_norm"
    }
}

struct RmsNormBackward {
    ids: [Option<NodeId>; 2],
    x: Storage,
    inv_rms: Storage,
    gamma: Storage,
    d: usize,
}

impl Backward for RmsNormBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        fn rule<T: Elem>(
            g: &[T],
            x: &[T],
            inv_rms: &[T],
            gamma: &[T],
            d: usize,
            want: [bool; 2],
        ) -> (Option<Vec<T>>, Option<Vec<T>>) {
            let lanes = g.len() / d;
            let dt = T::from_f64(d as f64);
            let dx = want[0].then(|| {
                let mut out = vec![T::zero(); g.len()];
                for l in 0..lanes {
                    let gl = &g[l * d..(l + 1) * d];
                    let xl = &x[l * d..(l + 1) * d];
                    let ir = inv_rms[l];
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += gl[j] * gamma[j] * xl[j];
                    }
                    for j in 0..d {
                        out[l * d + j] = gl[j] * gamma[j] * ir - xl[j] * dot * ir * ir * ir / dt;
                    }
                }
                out
            });
            let dgamma = want[1].then(|| {
                let mut out = vec![T::zero(); d];
                for l in 0..lanes {
                    for j in 0..d {
                        out[j] += g[l * d + j] * x[l * d + j] * inv_rms[l];
                    }
                }
                out
            });
            (dx, dgamma)
        }
        let want = [self.ids[0].is_some(), self.ids[1].is_some()];
        match (grad, &self.x, &self.inv_rms, &self.gamma) {
            (Storage::F32(g), Storage::F32(x), Storage::F32(ir), Storage::F32(ga)) => {
                let (dx, dg) = rule(g, x, ir, ga, self.d, want);
                vec![
                    dx.map(|v| Storage::F32(Arc::new(v))),
                    dg.map(|v| Storage::F32(Arc::new(v))),
                ]
            }
            (Storage::F64(g), Storage::F64(x), Storage::F64(ir), Storage::F64(ga)) => {
                let (dx, dg) = rule(g, x, ir, ga, self.d, want);
                vec![
                    dx.map(|v| Storage::F64(Arc::new(v))),
                    dg.map(|v| Storage::F64(Arc::new(v))),
                ]
            }
            _ => panic!("rms_norm: dtype mismatch in backward"),
        }
    }

    fn op_name(&self) -> &'static str {
        "rms_norm"
    }
}

impl Tape {
    /// Layer normalization over the last dim with learnable gain and shift.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        check_same_dtype("layer_norm", x, gamma);
        check_same_dtype("layer_norm", x, beta);
        let d = *x.shape().last().unwrap_or_else(|| panic!("layer_norm: scalar input"));
        if gamma.shape() != [d] || beta.shape() != [d] {
            panic!(
                "layer_norm: gamma/beta must be [{d}], got {:?} / {:?}",
                gamma.shape(),
                beta.shape()
            );
        }

        fn fwd<T: Elem>(x: &[T], gamma: &[T], beta: &[T], d: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
            let lanes = x.len() / d;
            let mut y = vec![T::zero(); x.len()];
            let mut xhat = vec![T::zero(); x.len()];
            let mut inv_std = vec![T::zero(); lanes];
            let dt = T::from_f64(d as f64);
            let eps = T::from_f64(NORM_EPS);
            for l in 0..lanes {
                let xl = &x[l * d..(l + 1) * d];
                let mut mu = T::zero();
                for &v in xl {
                    mu += v;
                }
                mu = mu / dt;
                let mut var = T::zero();
                for &v in xl {
                    var += (v - mu) * (v - mu);
                }
                var = var / dt;
                let is = (var + eps).sqrt().recip();
                inv_std[l] = is;
                for j in 0..d {
                    let xh = (xl[j] - mu) * is;
                    xhat[l * d + j] = xh;
                    y[l * d + j] = xh * gamma[j] + beta[j];
                }
            }
            (y, xhat, inv_std)
        }

        let (data, xhat, inv_std) = match (x.data(), gamma.data(), beta.data()) {
            (Storage::F32(x_), Storage::F32(g), Storage::F32(b)) => {
                let (y, xh, is) = fwd(x_, g, b, d);
                (
                    Storage::F32(Arc::new(y)),
                    Storage::F32(Arc::new(xh)),
                    Storage::F32(Arc::new(is)),
                )
            }
            (Storage::F64(x_), Storage::F64(g), Storage::F64(b)) => {
                let (y, xh, is) = fwd(x_, g, b, d);
                (
                    Storage::F64(Arc::new(y)),
                    Storage::F64(Arc::new(xh)),
                    Storage::F64(Arc::new(is)),
                )
            }
            _ => unreachable!(),
        };
        let ids = [self.track(x), self.track(gamma), self.track(beta)];
        let out = Tensor::from_storage(x.shape(), data);
        match self.record(
            ids.iter().any(|i| i.is_some()),
            Box::new(LayerNormBackward {
                ids,
                xhat,
                inv_std,
                gamma: gamma.data().clone(),
                d,
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }

    /// RMS normalization over the last dim with learnable gain.
    pub fn rms_norm(&self, x: &Tensor, gamma: &Tensor) -> Tensor {
        check_same_dtype("rms_norm", x, gamma);
        let d = *x.shape().last().unwrap_or_else(|| panic!("rms_norm: scalar input"));
        if gamma.shape() != [d] {
            panic!("rms_norm: gamma must be [{d}], got {:?}", gamma.shape());
        }

        fn fwd<T: Elem>(x: &[T], gamma: &[T], d: usize) -> (Vec<T>, Vec<T>) {
            let lanes = x.len() / d;
            let mut y = vec![T::zero(); x.len()];
            let mut inv_rms = vec![T::zero(); lanes];
            let dt = T::from_f64(d as f64);
            let eps = T::from_f64(NORM_EPS);
            for l in 0..lanes {
                let xl = &x[l * d..(l + 1) * d];
                let mut ms = T::zero();
                for &v in xl {
                    ms += v * v;
                }
                let ir = (ms / dt + eps).sqrt().recip();
                inv_rms[l] = ir;
                for j in 0..d {
                    y[l * d + j] = xl[j] * ir * gamma[j];
                }
            }
            (y, inv_rms)
        }

        let (data, inv_rms) = match (x.data(), gamma.data()) {
            (Storage::F32(x_), Storage::F32(g)) => {
                let (y, ir) = fwd(x_, g, d);
                (Storage::F32(Arc::new(y)), Storage::F32(Arc::new(ir)))
            }
            (Storage::F64(x_), Storage::F64(g)) => {
                let (y, ir) = fwd(x_, g, d);
                (Storage::F64(Arc::new(y)), Storage::F64(Arc::new(ir)))
            }
            _ => unreachable!(),
        };
        let ids = [self.track(x), self.track(gamma)];
        let out = Tensor::from_storage(x.shape(), data);
        match self.record(
            ids.iter().any(|i| i.is_some()),
            Box::new(RmsNormBackward {
                ids,
                x: x.data().clone(),
                inv_rms,
                gamma: gamma.data().clone(),
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
