//! Reverse-mode differentiation over dense 2-D tensors.
//!
//! The op set is deliberately small: exactly what the encoder, discriminator,
//! predictor and attention-fusion graphs need. Every op has a finite-difference
//! check registered in [`gradcheck`].

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Fault, Tape, Var};
pub use tensor::{kernels, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {}×{} and {}×{}", left.0, left.1, right.0, right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("buffer of length {len} cannot form a {rows}×{cols} tensor")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("label {label} at row {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("{op}: range starting at {start} of length {len} exceeds extent {extent}")]
    Range {
        op: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("backward needs a scalar loss, got {}×{}", shape.0, shape.1)]
    NotScalar { shape: (usize, usize) },
    #[error("gradient reversal lambda must be finite and non-negative, got {0}")]
    Lambda(f64),
    #[error("row weights must be finite and non-negative, got {0}")]
    Weight(f64),
}

/// Reversal strength ramp for training progress `p ∈ [0, 1]`:
/// `2 / (1 + exp(-10 p)) - 1`.
pub fn grl_lambda(progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

#[cfg(test)]
mod tests {
    use super::grl_lambda;

    #[test]
    fn lambda_schedule_endpoints() {
        assert_eq!(grl_lambda(0.0), 0.0);
        assert!((grl_lambda(1.0) - (2.0 / (1.0 + (-10.0f64).exp()) - 1.0)).abs() < 1e-15);
        assert!(grl_lambda(0.5) > grl_lambda(0.1));
        assert!(grl_lambda(2.0) == grl_lambda(1.0));
    }
}
