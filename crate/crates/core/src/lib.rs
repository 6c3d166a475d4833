//! Grid-based machine-reading-comprehension tagger for flat and nested
//! medical named entities.
//!
//! One query per entity type is prepended to the sentence; an encoder with
//! weighted layer fusion feeds two scorers over the N×N word-pair grid (a
//! biaffine scorer and a dilated-convolution MLP scorer) whose logits are
//! summed and normalized per cell.

pub mod corpus;
pub mod decode_eval;
pub mod diffcore;
pub mod error;
pub mod model;
pub mod train;

pub use error::{Error, Result};
