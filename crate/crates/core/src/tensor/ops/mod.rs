//! Forward kernels and reverse rules for every tape op.
//!
//! Each op is a method on [`Tape`]: validate shapes, run the forward kernel,
//! and (when any input is tracked) record a node owning the saved context its
//! reverse rule needs. Shape or dtype mismatches panic with the op name and
//! the offending shapes; those are contract violations, not runtime errors.

mod conv;
mod elementwise;
mod linalg;
mod reduce;
mod scan;
mod shape;
mod vector;

pub use conv::PadMode;
pub use vector::{quat_to_rot, quat_to_rot_vjp};
pub use shape::GatherSpec;

use super::{Storage, Tensor};

pub(crate) fn check_same_dtype(op: &str, a: &Tensor, b: &Tensor) {
    if a.dtype() != b.dtype() {
        panic!("{op}: dtype mismatch {:?} vs {:?}", a.dtype(), b.dtype());
    }
}

/// Dispatch a unary elementwise kernel over both dtypes.
pub(crate) fn map_unary(
    s: &Storage,
    f32f: impl Fn(f32) -> f32,
    f64f: impl Fn(f64) -> f64,
) -> Storage {
    match s {
        Storage::F32(v) => Storage::F32(std::sync::Arc::new(v.iter().map(|&x| f32f(x)).collect())),
        Storage::F64(v) => Storage::F64(std::sync::Arc::new(v.iter().map(|&x| f64f(x)).collect())),
    }
}
