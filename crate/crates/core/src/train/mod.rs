//! Adam with per-group learning rates, masked-LM pre-training, fine-tuning
//! with dev-set model selection, and checkpoint files.

pub mod checkpoint;
pub mod config;
pub mod finetune;
pub mod mlm;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CheckpointMeta};
pub use config::TrainConfig;
pub use finetune::{finetune, EpochRecord, EpochStats, FinetuneReport, StopReason, Trainer};
pub use mlm::{mask_sequence, mlm_pretrain, MaskedSequence, MlmReport};
pub use optim::{adam_step, check_finite, clip_grad_norm, OptimState, StepInfo};
