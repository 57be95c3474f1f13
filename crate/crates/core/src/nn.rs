//! Small layer library shared by the backbone and the decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::ops::GatherSpec;
use crate::tensor::{Tape, Tensor};

/// Uniform access to named parameters, in a fixed traversal order shared by
/// the optimizer and the checkpoint format.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// Collect `(name, tensor)` pairs of a module tree.
pub fn named_params<M: Module + ?Sized>(m: &M, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Xavier-uniform weight init in f32.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::from_f32(shape, data).requires_grad(true)
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias: bool) -> Linear {
        Linear {
            weight: xavier_uniform(rng, &[d_in, d_out], d_in, d_out),
            bias: bias.then(|| Tensor::zeros(crate::tensor::DType::F32, &[d_out]).requires_grad(true)),
        }
    }

    /// `(..., d_in) -> (..., d_out)`; leading dims are flattened internally.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let d_in = self.weight.shape()[0];
        let d_out = self.weight.shape()[1];
        let lead: Vec<usize> = x.shape()[..x.shape().len() - 1].to_vec();
        assert_eq!(
            *x.shape().last().unwrap(),
            d_in,
            "linear: input {:?} does not end in {d_in}",
            x.shape()
        );
        let rows: usize = lead.iter().product();
        let flat = tape.reshape(x, &[rows, d_in]);
        let w = self.weight.cast_like(x);
        let mut y = tape.matmul(&flat, &w);
        if let Some(b) = &self.bias {
            y = tape.add(&y, &b.cast_like(x));
        }
        let mut out_shape = lead;
        out_shape.push(d_out);
        tape.reshape(&y, &out_shape)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::full(crate::tensor::DType::F32, &[d], 1.0).requires_grad(true),
            beta: Tensor::zeros(crate::tensor::DType::F32, &[d]).requires_grad(true),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        tape.layer_norm(x, &self.gamma.cast_like(x), &self.beta.cast_like(x))
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Tanh-form GELU, composed from primitive ops.
pub fn gelu(tape: &Tape, x: &Tensor) -> Tensor {
    let c = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let x3 = tape.mul(&tape.mul(x, x), x);
    let inner = tape.add(x, &tape.scale(&x3, 0.044715));
    let t = tape.tanh(&tape.scale(&inner, c));
    let one = Tensor::full(x.dtype(), &[], 1.0);
    let gate = tape.add(&t, &one);
    tape.scale(&tape.mul(x, &gate), 0.5)
}

/// Two-layer GELU MLP.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> Mlp {
        Mlp {
            fc1: Linear::new(rng, d, hidden, true),
            fc2: Linear::new(rng, hidden, d, true),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let h = gelu(tape, &self.fc1.forward(tape, x));
        self.fc2.forward(tape, &h)
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Multi-head self-attention with QK-Norm (RMS over the head dim with a
/// learnable gain), full or windowed.
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub q_gain: Tensor,
    pub k_gain: Tensor,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> MultiHeadAttention {
        assert_eq!(dim % heads, 0, "attention dim {dim} not divisible by {heads} heads");
        let dh = dim / heads;
        MultiHeadAttention {
            qkv: Linear::new(rng, dim, 3 * dim, true),
            proj: Linear::new(rng, dim, dim, true),
            q_gain: Tensor::full(crate::tensor::DType::F32, &[dh], 1.0).requires_grad(true),
            k_gain: Tensor::full(crate::tensor::DType::F32, &[dh], 1.0).requires_grad(true),
            heads,
        }
    }

    /// Normalized q, k and raw v, each shaped (N, heads, d_head).
    fn qkv_heads(&self, tape: &Tape, x: &Tensor) -> (Tensor, Tensor, Tensor) {
        let n = x.shape()[0];
        let dim = *x.shape().last().unwrap();
        let dh = dim / self.heads;
        let qkv = self.qkv.forward(tape, x);
        let q = tape.slice(&qkv, 1, 0, dim);
        let k = tape.slice(&qkv, 1, dim, dim);
        let v = tape.slice(&qkv, 1, 2 * dim, dim);
        let split = |t: &Tensor| tape.reshape(t, &[n, self.heads, dh]);
        let q = tape.rms_norm(&split(&q), &self.q_gain.cast_like(x));
        let k = tape.rms_norm(&split(&k), &self.k_gain.cast_like(x));
        (q, k, split(&v))
    }

    /// Full self-attention over all tokens.
    pub fn forward_full(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let n = x.shape()[0];
        let dim = *x.shape().last().unwrap();
        let dh = dim / self.heads;
        let (q, k, v) = self.qkv_heads(tape, x);
        // (h, N, dh)
        let qh = tape.permute(&q, &[1, 0, 2]);
        let kh = tape.permute(&k, &[1, 0, 2]);
        let vh = tape.permute(&v, &[1, 0, 2]);
        let scores = tape.matmul(&qh, &tape.permute(&kh, &[0, 2, 1]));
        let scores = tape.scale(&scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(&scores, 2);
        let out = tape.matmul(&attn, &vh); // (h, N, dh)
        let out = tape.permute(&out, &[1, 0, 2]);
        let out = tape.reshape(&out, &[n, dim]);
        self.proj.forward(tape, &out)
    }

    /// Windowed attention: each token attends to its `k` listed neighbors.
    /// `neighbors` holds N·k token indices; `bias` is (N, k, heads) additive
    /// attention scores (already gathered per pair).
    pub fn forward_windowed(
        &self,
        tape: &Tape,
        x: &Tensor,
        neighbors: &GatherSpec,
        bias: &Tensor,
    ) -> Tensor {
        let n = x.shape()[0];
        let dim = *x.shape().last().unwrap();
        let dh = dim / self.heads;
        let k_count = neighbors.indices.len() / n;
        assert_eq!(bias.shape(), &[n, k_count, self.heads], "bias shape mismatch");
        let (q, k, v) = self.qkv_heads(tape, x);
        // queries: (N, h, dh) -> (N*h, 1, dh)
        let qb = tape.reshape(&q, &[n * self.heads, 1, dh]);
        // keys/values gathered per token: (N*k, h, dh) -> (N, h, k, dh)
        let gather_heads = |t: &Tensor| {
            let g = tape.gather(t, neighbors); // (N*k, h, dh) with index_shape [N*k]
            let g = tape.reshape(&g, &[n, k_count, self.heads, dh]);
            let g = tape.permute(&g, &[0, 2, 1, 3]);
            tape.reshape(&g, &[n * self.heads, k_count, dh])
        };
        let kb = gather_heads(&k);
        let vb = gather_heads(&v);
        let scores = tape.matmul(&qb, &tape.permute(&kb, &[0, 2, 1])); // (N*h,1,k)
        let scores = tape.scale(&scores, 1.0 / (dh as f64).sqrt());
        let b = tape.permute(bias, &[0, 2, 1]); // (N,h,k)
        let b = tape.reshape(&b, &[n * self.heads, 1, k_count]);
        let attn = tape.softmax(&tape.add(&scores, &b), 2);
        let out = tape.matmul(&attn, &vb); // (N*h,1,dh)
        let out = tape.reshape(&out, &[n, dim]);
        self.proj.forward(tape, &out)
    }
}

impl Module for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        f(&join(prefix, "q_gain"), &self.q_gain);
        f(&join(prefix, "k_gain"), &self.k_gain);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        f(&join(prefix, "q_gain"), &mut self.q_gain);
        f(&join(prefix, "k_gain"), &mut self.k_gain);
    }
}

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, mlp_ratio: usize) -> TransformerBlock {
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, dim * mlp_ratio),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let a = self.attn.forward_full(tape, &self.ln1.forward(tape, x));
        let x = tape.add(x, &a);
        let m = self.mlp.forward(tape, &self.ln2.forward(tape, &x));
        tape.add(&x, &m)
    }

    /// Same block with windowed attention.
    pub fn forward_windowed(
        &self,
        tape: &Tape,
        x: &Tensor,
        neighbors: &GatherSpec,
        bias: &Tensor,
    ) -> Tensor {
        let a = self
            .attn
            .forward_windowed(tape, &self.ln1.forward(tape, x), neighbors, bias);
        let x = tape.add(x, &a);
        let m = self.mlp.forward(tape, &self.ln2.forward(tape, &x));
        tape.add(&x, &m)
    }
}

impl Module for TransformerBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

impl Tensor {
    /// Cast parameters to the dtype of the activations flowing past them.
    /// No-op (shared storage) when dtypes already agree.
    pub fn cast_like(&self, other: &Tensor) -> Tensor {
        if self.dtype() == other.dtype() {
            self.clone()
        } else {
            let mut t = self.cast(other.dtype());
            if self.is_leaf_like() {
                t = t.requires_grad(true);
            }
            t
        }
    }
}
