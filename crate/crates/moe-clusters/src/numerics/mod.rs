//! Numeric substrate: dense `f64` tensors, a reverse-mode autodiff tape, and
//! a finite-difference gradient checker that validates the tape.
//!
//! Everything downstream (gating, losses, the routed layer, the trainer)
//! builds its computation as tape ops and differentiates with
//! [`Tape::backward`]; nothing here knows about experts or routing.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_multi, FD_STEP, GRAD_TOL};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
