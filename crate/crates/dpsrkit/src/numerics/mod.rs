//! Deterministic numeric substrate: seeded RNG, Adam, reverse-mode
//! gradients over the fixed primitive set, finite-difference checking,
//! and small symmetric linear algebra.

pub mod adam;
pub mod linalg;
pub mod rng;
pub mod tape;

pub use adam::AdamState;
pub use linalg::{jacobi_eigen, psd_factor, psd_inv_logdet, sym_psd_sqrt};
pub use rng::Rng;
pub use tape::{finite_diff_grad, GradTape, Gradients, NodeId};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),
    #[error("matrix is not symmetric within tolerance")]
    NotSymmetric,
    #[error("matrix is not positive semidefinite (eigenvalue {0})")]
    NotPsd(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("point {index} has non-positive camera depth {depth}")]
    NonPositiveDepth { index: usize, depth: f64 },
}
