//! The span tagger: a small transformer encoder with learned layer fusion,
//! a type-conditioned Biaffine branch and a word-pair grid branch with
//! dilated convolutions, combined by summing logits before one softmax.

pub mod check;
pub mod config;
pub mod layers;
pub mod network;
pub mod params;

pub use check::{end_to_end_check, END_TO_END_TOLERANCE};
pub use config::{ModelConfig, N_DIST_BUCKETS, N_REGION_IDS};
pub use layers::{biaffine_scores, cln, cln_grid, co_predict, distance_bucket, fuse_layers, region_id, ClnVars};
pub use network::{Dropout, ForwardVars, Model, ScoreGrid};
pub use params::{Binder, Gradients, ParamGroup, ParamId, ParamIds, ParamStore};
