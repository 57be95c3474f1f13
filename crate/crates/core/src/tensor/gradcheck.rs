//! Central-difference verification harness for analytic gradients.

use thiserror::Error;

use super::{DType, Storage, Tape, Tensor};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("analytic gradient is non-finite at element {index} (value {value})")]
    NonFiniteAnalytic { index: usize, value: f64 },
    #[error("forward produced a non-finite loss during perturbation of element {index}")]
    NonFiniteLoss { index: usize },
}

/// Max relative error between the analytic gradient of a scalar-valued
/// function and central differences with step `h`, evaluated in f64.
///
/// `f` is called with a fresh tape and a tracked copy of `x`; it must be
/// deterministic and return a scalar. Relative error uses the standard
/// `|analytic - numeric| / (|numeric| + 1e-8)` guard.
pub fn grad_check(
    f: &dyn Fn(&Tape, &Tensor) -> Tensor,
    x: &Tensor,
    h: f64,
) -> Result<f64, GradCheckError> {
    assert_eq!(x.dtype(), DType::F64, "grad_check requires an f64 input");
    let base = x.to_f64_vec();

    // Analytic gradient.
    let tape = Tape::new();
    let leaf = Tensor::from_f64(x.shape(), base.clone()).requires_grad(true);
    let loss = f(&tape, &leaf);
    assert_eq!(loss.numel(), 1, "grad_check: f must return a scalar");
    let grads = tape.backward(&loss);
    let analytic = grads.get_or_zeros(&leaf).to_f64_vec();
    for (i, &g) in analytic.iter().enumerate() {
        if !g.is_finite() {
            return Err(GradCheckError::NonFiniteAnalytic { index: i, value: g });
        }
    }

    // Central differences, one element at a time, forward-only.
    let eval = |data: Vec<f64>| -> f64 {
        let tape = Tape::new();
        let t = Tensor::from_f64(x.shape(), data);
        f(&tape, &t).item()
    };
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = eval(plus);
        let fm = eval(minus);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GradCheckError::NonFiniteLoss { index: i });
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Convenience: random f64 tensor in [-1, 1] from a seeded generator.
pub fn seeded_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64(shape, data)
}

/// Assert helper shared by op-level gradient property tests.
#[cfg(test)]
pub(crate) fn assert_grad_ok(
    name: &str,
    f: &dyn Fn(&Tape, &Tensor) -> Tensor,
    x: &Tensor,
    tol: f64,
) {
    let err = grad_check(f, x, 1e-5).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(err < tol, "{name}: max rel err {err} >= {tol}");
}
