//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! The engine is deliberately small: a fixed set of differentiable math
//! primitives (elementwise arithmetic and transcendentals, matmul/matvec,
//! clamp, sum/mean, abs with subgradient 0 at the origin, and bilinear image
//! sampling) plus zero-arithmetic layout ops. Everything downstream — the
//! implicit scene models, pose curves, reprojection, and the photometric loss
//! — is expressed as graphs over these primitives, so one finite-difference
//! harness ([`grad_check`]) certifies the gradients of the whole pipeline.
//!
//! All values are 64-bit: burst parallax is sub-pixel and 32-bit accumulation
//! noise is comparable to the signal being measured. Forward and backward
//! reductions run in fixed sequential node order, so results are bitwise
//! reproducible.

mod check;
mod sample;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_sampled, GradCheckReport};
pub use sample::bilinear_sample;
pub use tape::{broadcast_shapes, matmul_eager, BinKind, Broadcast, NodeId, Op, Tape, UnKind};
pub use tensor::DTensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("wrong number of tensors: expected {expected}, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("empty image or zero channels in bilinear_sample")]
    EmptyImage,
}

