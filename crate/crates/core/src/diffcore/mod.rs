//! Minimal reverse-mode differentiable tensor core.
//!
//! Only the operations the tagger needs are provided. Broadcasting is limited
//! to adding a bias vector along the last axis; every other binary op needs
//! equal shapes. [`grad_check`] is the correctness oracle for every backward
//! rule.

pub mod checks;
pub mod fault;
pub mod gradcheck;
pub mod nn;
pub mod rng;
mod tape;
mod tensor;

#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

/// Width of [`Float`] in bits, recorded in checkpoints.
pub const FLOAT_BITS: u32 = (std::mem::size_of::<Float>() * 8) as u32;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, DEFAULT_EPS};
pub use nn::{bilstm, dropout, linear, LstmVars};
pub use tape::{Elementwise, Tape, Var, LOG_FLOOR};
pub use tensor::{Init, Tensor};
