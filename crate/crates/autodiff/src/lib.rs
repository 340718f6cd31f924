//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records eagerly evaluated tensor ops; [`Tape::backward`] sweeps
//! it once in reverse. Trainable tensors live in a [`ParamRegistry`], are
//! bound onto a fresh tape per forward pass, and are updated by [`AdamW`].

pub mod check;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use optim::{cyclic_lr, AdamW, CyclicSchedule};
pub use params::{Bound, ParamRegistry};
pub use tape::{ConvGeometry, Gradients, SampleFrame, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;
