//! Diffusion-based prior engine for articulated pose data.
//!
//! The crate trains an unconditional noise-prediction model under the
//! sub-VP forward process and solves pose-centric inverse problems
//! (completion, inverse kinematics, 2D keypoint fitting, motion
//! denoising) by test-time optimization with a one-step-denoiser
//! regularizer and truncated timestep scheduling. A composite prior
//! assembles frozen part networks (body, shared hand, face) behind a
//! fused module trained with masked mixed batches.

pub mod cli;
pub mod composite;
pub mod diffusion;
pub mod evalmetrics;
pub mod kinematics;
pub mod numerics;
pub mod prior;
pub mod synthdata;
pub mod tasks;

pub use cli::run_cli;
