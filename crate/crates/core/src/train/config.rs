use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimization settings for pre-training and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub epochs: usize,
    pub mlm_epochs: usize,
    pub mlm_mask_rate: f64,
    /// Learning rate for every parameter during masked-LM pre-training.
    pub mlm_lr: f64,
    pub seed: u64,
    /// Evaluate on the dev set every this many epochs.
    pub eval_every: usize,
    /// Stop after this many evaluations without a dev-F1 improvement.
    pub patience: Option<usize>,
    /// Stop as soon as dev micro-F1 reaches this value.
    pub target_f1: Option<f64>,
    /// Linear learning-rate warmup over this many optimizer steps.
    pub warmup_steps: usize,
    /// Fraction of queries with no gold entity kept in each epoch.
    pub negative_query_rate: f64,
    /// Worker threads for per-batch gradient computation; 0 means all cores.
    /// Results do not depend on this value.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr_encoder: 2e-5,
            lr_heads: 2.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: Some(5.0),
            epochs: 100,
            mlm_epochs: 100,
            mlm_mask_rate: 0.15,
            mlm_lr: 1e-3,
            seed: 42,
            eval_every: 1,
            patience: Some(10),
            target_f1: None,
            warmup_steps: 0,
            negative_query_rate: 1.0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_encoder > 0.0 && self.lr_heads > 0.0 && self.mlm_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be positive");
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.mlm_mask_rate) {
            return bad("mlm_mask_rate must lie in [0, 1]");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.negative_query_rate) {
            return bad("negative_query_rate must lie in [0, 1]");
        }
        Ok(())
    }

    pub(crate) fn worker_threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}
