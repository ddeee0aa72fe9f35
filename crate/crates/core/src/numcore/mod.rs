//! Dense `f64` tensors with a dynamic reverse-mode tape and an Adam optimizer.

mod adam;
pub mod io;
pub mod kernels;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use tensor::{is_grad_enabled, no_grad, Tensor};

use crate::error::{LabError, Result};

/// Cosine similarity `a.b / (|a||b|)` as a differentiable scalar.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(LabError::Shape {
            op: "cosine",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    for (t, which) in [(a, "first operand"), (b, "second operand")] {
        if t.data().iter().all(|v| *v == 0.0) {
            return Err(LabError::ZeroNorm(which.into()));
        }
    }
    let num = a.dot(b)?;
    let den = a.l2_norm().mul(&b.l2_norm())?;
    num.div(&den)
}
