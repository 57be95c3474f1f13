//! Elementwise binary/unary ops with suffix broadcasting.

use std::sync::Arc;

use super::{check_same_dtype, map_unary};
use crate::tensor::tape::{Backward, NodeId};
use crate::tensor::{broadcast_kind, Broadcast, Elem, Storage, Tape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

fn bin_forward<T: Elem>(kind: BinKind, a: &[T], b: &[T], bc: Broadcast) -> Vec<T> {
    let apply = |x: T, y: T| match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    };
    match bc {
        Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| apply(x, y)).collect(),
        Broadcast::RhsSmall(p) => a
            .iter()
            .enumerate()
            .map(|(i, &x)| apply(x, b[i % p]))
            .collect(),
        Broadcast::LhsSmall(p) => b
            .iter()
            .enumerate()
            .map(|(i, &y)| apply(a[i % p], y))
            .collect(),
    }
}

/// Sum `g` (length n) into periods of length `p` — the adjoint of suffix
/// broadcasting.
fn fold_periodic<T: Elem>(g: &[T], p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p];
    for (i, &v) in g.iter().enumerate() {
        out[i % p] += v;
    }
    out
}

struct BinBackward {
    kind: BinKind,
    ids: [Option<NodeId>; 2],
    bc: Broadcast,
    a: Storage,
    b: Storage,
}

impl Backward for BinBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        fn side<T: Elem>(
            kind: BinKind,
            grad: &[T],
            a: &[T],
            b: &[T],
            bc: Broadcast,
            lhs: bool,
        ) -> Vec<T> {
            // Raw elementwise gradient at output resolution.
            let full: Vec<T> = match (kind, lhs) {
                (BinKind::Add, _) => grad.to_vec(),
                (BinKind::Sub, true) => grad.to_vec(),
                (BinKind::Sub, false) => grad.iter().map(|&g| -g).collect(),
                (BinKind::Mul, true) => grad
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * fetch(b, i, bc, false))
                    .collect(),
                (BinKind::Mul, false) => grad
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * fetch(a, i, bc, true))
                    .collect(),
                (BinKind::Div, true) => grad
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g / fetch(b, i, bc, false))
                    .collect(),
                (BinKind::Div, false) => grad
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let bi = fetch(b, i, bc, false);
                        -g * fetch(a, i, bc, true) / (bi * bi)
                    })
                    .collect(),
            };
            // Reduce onto the operand if it was broadcast.
            match (bc, lhs) {
                (Broadcast::RhsSmall(p), false) | (Broadcast::LhsSmall(p), true) => {
                    fold_periodic(&full, p)
                }
                _ => full,
            }
        }

        fn fetch<T: Elem>(v: &[T], i: usize, bc: Broadcast, is_lhs: bool) -> T {
            match (bc, is_lhs) {
                (Broadcast::RhsSmall(p), false) | (Broadcast::LhsSmall(p), true) => v[i % p],
                _ => v[i],
            }
        }

        let mk = |lhs: bool| -> Option<Storage> {
            let id = if lhs { self.ids[0] } else { self.ids[1] };
            id.map(|_| match (grad, &self.a, &self.b) {
                (Storage::F32(g), Storage::F32(a), Storage::F32(b)) => {
                    Storage::F32(Arc::new(side(self.kind, g, a, b, self.bc, lhs)))
                }
                (Storage::F64(g), Storage::F64(a), Storage::F64(b)) => {
                    Storage::F64(Arc::new(side(self.kind, g, a, b, self.bc, lhs)))
                }
                _ => panic!("binary op: dtype mismatch in backward"),
            })
        };
        vec![mk(true), mk(false)]
    }

    fn op_name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }
}

impl Tape {
    fn binary(&self, kind: BinKind, name: &str, a: &Tensor, b: &Tensor) -> Tensor {
        check_same_dtype(name, a, b);
        let bc = broadcast_kind(name, a.shape(), b.shape());
        let out_shape: Vec<usize> = match bc {
            Broadcast::LhsSmall(_) => b.shape().to_vec(),
            _ => a.shape().to_vec(),
        };
        let data = match (a.data(), b.data()) {
            (Storage::F32(x), Storage::F32(y)) => {
                Storage::F32(Arc::new(bin_forward(kind, x, y, bc)))
            }
            (Storage::F64(x), Storage::F64(y)) => {
                Storage::F64(Arc::new(bin_forward(kind, x, y, bc)))
            }
            _ => unreachable!(),
        };
        let ids = [self.track(a), self.track(b)];
        let out = Tensor::from_storage(&out_shape, data);
        match self.record(
            ids.iter().any(|i| i.is_some()),
            Box::new(BinBackward {
                kind,
                ids,
                bc,
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

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(BinKind::Div, "div", a, b)
    }

    /// Multiply by a plain scalar constant.
    pub fn scale(&self, a: &Tensor, s: f64) -> Tensor {
        let c = Tensor::scalar(a.dtype(), s);
        self.mul(a, &c)
    }
}

// ---------------------------------------------------------------------------
// Unary ops
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum UnKind {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Softplus,
    Relu,
    Sqrt,
    Abs,
    Clamp { lo: f64, hi: f64 },
}

fn un_forward(kind: UnKind, s: &Storage) -> Storage {
    match kind {
        UnKind::Exp => map_unary(s, |x| x.exp(), |x| x.exp()),
        UnKind::Log => map_unary(s, |x| x.ln(), |x| x.ln()),
        UnKind::Sigmoid => map_unary(s, sigmoid_f32, sigmoid_f64),
        UnKind::Tanh => map_unary(s, |x| x.tanh(), |x| x.tanh()),
        UnKind::Softplus => map_unary(s, softplus_f32, softplus_f64),
        UnKind::Relu => map_unary(s, |x| x.max(0.0), |x| x.max(0.0)),
        UnKind::Sqrt => map_unary(s, |x| x.sqrt(), |x| x.sqrt()),
        UnKind::Abs => map_unary(s, |x| x.abs(), |x| x.abs()),
        UnKind::Clamp { lo, hi } => map_unary(
            s,
            move |x| x.clamp(lo as f32, hi as f32),
            move |x| x.clamp(lo, hi),
        ),
    }
}

fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f32(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

struct UnBackward {
    kind: UnKind,
    ids: [Option<NodeId>; 1],
    input: Storage,
    output: Storage,
}

impl Backward for UnBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        fn rule<T: Elem>(kind: UnKind, g: &[T], x: &[T], y: &[T]) -> Vec<T> {
            let one = T::one();
            let half = T::from_f64(0.5);
            g.iter()
                .enumerate()
                .map(|(i, &g)| match kind {
                    UnKind::Exp => g * y[i],
                    UnKind::Log => g / x[i],
                    UnKind::Sigmoid => g * y[i] * (one - y[i]),
                    UnKind::Tanh => g * (one - y[i] * y[i]),
                    UnKind::Softplus => {
                        // d softplus = sigmoid(x) = 1 - exp(-y)
                        g * (one - (-y[i]).exp())
                    }
                    UnKind::Relu => {
                        if x[i] > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    }
                    UnKind::Sqrt => g * half / y[i],
                    UnKind::Abs => {
                        if x[i] > T::zero() {
                            g
                        } else if x[i] < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    }
                    UnKind::Clamp { lo, hi } => {
                        let xi = x[i].into_f64();
                        if xi > lo && xi < hi {
                            g
                        } else {
                            T::zero()
                        }
                    }
                })
                .collect()
        }
        let g = match (grad, &self.input, &self.output) {
            (Storage::F32(g), Storage::F32(x), Storage::F32(y)) => {
                Storage::F32(Arc::new(rule(self.kind, g, x, y)))
            }
            (Storage::F64(g), Storage::F64(x), Storage::F64(y)) => {
                Storage::F64(Arc::new(rule(self.kind, g, x, y)))
            }
            _ => panic!("unary op: dtype mismatch in backward"),
        };
        vec![Some(g)]
    }

    fn op_name(&self) -> &'static str {
        match self.kind {
            UnKind::Exp => "exp",
            UnKind::Log => "log",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Tanh => "tanh",
            UnKind::Softplus => "softplus",
            UnKind::Relu => "relu",
            UnKind::Sqrt => "sqrt",
            UnKind::Abs => "abs",
            UnKind::Clamp { .. } => "clamp",
        }
    }
}

impl Tape {
    fn unary(&self, kind: UnKind, x: &Tensor) -> Tensor {
        let data = un_forward(kind, x.data());
        let ids = [self.track(x)];
        let out = Tensor::from_storage(x.shape(), data);
        match self.record(
            ids[0].is_some(),
            Box::new(UnBackward {
                kind,
                ids,
                input: x.data().clone(),
                output: out.data().clone(),
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }

    pub fn exp(&self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Exp, x)
    }
    pub fn log(&self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Log, x)
    }
    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Sigmoid, x)
    }
    pub fn tanh(&self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Tanh, x)
    }
    pub fn softplus(&self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Softplus, x)
    }
    pub fn relu(&self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Relu, x)
    }
    pub fn sqrt(&self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Sqrt, x)
    }
    pub fn abs(&self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Abs, x)
    }
    pub fn clamp(&self, x: &Tensor, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        self.unary(UnKind::Clamp { lo, hi }, x)
    }
}
