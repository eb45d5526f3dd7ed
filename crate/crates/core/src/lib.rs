//! Deformable 2D image registration by coarse-to-fine instance optimization.
//!
//! The pipeline estimates a dense displacement field between a fixed and a
//! moving grayscale image by minimizing a windowed-correlation loss with a
//! diffusive penalty. Displacements are produced by a structured smoothing
//! layer ([`smoothproper`]) that expands per-pixel coefficients over a small
//! bank of displacement vectors and alternates closed-form coefficient solves
//! with neighborhood averaging, which propagates match evidence across
//! low-texture regions before any intensity gradient is taken. The final
//! velocity is integrated to a diffeomorphism by scaling and squaring
//! ([`diffeo`]). Gradients for the whole forward pass come from a small
//! reverse-mode tape ([`adjoint`]).
//!
//! The [`registrar`] module drives the multi-resolution loop, [`bench`]
//! generates the synthetic vessel benchmark used for evaluation, and [`cli`]
//! backs the `spreg` command-line tool.

pub mod adjoint;
pub mod bench;
pub mod cli;
pub mod diffeo;
pub mod energy;
mod error;
pub mod grid;
pub mod registrar;
pub mod smoothproper;

pub use error::{Error, Result};
