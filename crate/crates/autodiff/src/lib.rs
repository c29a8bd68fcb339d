//! Reverse-mode automatic differentiation for small dense models.
//!
//! The crate provides a [`Tape`] that records operations on `f64` matrices,
//! a finite-difference [`grad_check`], named parameter storage with an Adam
//! optimizer, and the on-disk checkpoint format shared by the rest of the
//! workspace.

pub mod adam;
pub mod check;
pub mod checkpoint;
mod error;
pub mod params;
pub mod tape;

pub use adam::{adam_step, clip_global_norm, optimizer_steps, AdamConfig, AdamState, StepReport};
pub use check::{
    grad_check, grad_check_many, grad_check_stencil, random_graph, CheckStatus, GradCheck, Stencil,
};
pub use error::{AutodiffError, Result};
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{Gradients, Matrix, Reduce, Shape, Tape, Var};
