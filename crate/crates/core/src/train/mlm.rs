use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::finetune::{average, parallel_map};
use super::optim::{adam_step, OptimState};
use crate::corpus::vocab::{MASK, NUM_SPECIALS};
use crate::diffcore::rng::stream;
use crate::diffcore::Float;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: Vec<usize>,
    /// Original id at each selected position.
    pub targets: Vec<Option<usize>>,
}

impl MaskedSequence {
    pub fn n_selected(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Selects `round(rate · n)` of the n character positions (at least one
/// when the rate is positive); 80% of them become `<mask>`, 10% a random
/// character and 10% stay unchanged.
pub fn mask_sequence<R: Rng + ?Sized>(ids: &[usize], rate: f64, vocab_size: usize, rng: &mut R) -> MaskedSequence {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&k| ids[k] >= NUM_SPECIALS).collect();
    let mut input = ids.to_vec();
    let mut targets = vec![None; ids.len()];
    let mut k = (rate * candidates.len() as f64).round() as usize;
    if rate > 0.0 && !candidates.is_empty() {
        k = k.clamp(1, candidates.len());
    }
    for pick in index::sample(rng, candidates.len(), k.min(candidates.len())) {
        let pos = candidates[pick];
        targets[pos] = Some(ids[pos]);
        let r: f64 = rng.random();
        if r < 0.8 {
            input[pos] = MASK;
        } else if r < 0.9 {
            input[pos] = rng.random_range(NUM_SPECIALS..vocab_size);
        }
    }
    MaskedSequence { input, targets }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    /// Mean training-mode loss per epoch.
    pub epoch_losses: Vec<Float>,
    /// Sequences with no maskable position.
    pub skipped: usize,
    pub steps: u64,
}

/// Masked-language-model training of the encoder on `sequences` (token ids
/// as produced by `corpus::mlm_corpus`). Masks are drawn once up front, so
/// every epoch sees the same corruption of each sequence. All parameters
/// train at `mlm_lr`.
pub fn mlm_pretrain(model: &mut Model, sequences: &[Vec<usize>], cfg: &TrainConfig) -> Result<MlmReport> {
    cfg.validate()?;
    if model.vocab_size < NUM_SPECIALS + 2 {
        return Err(Error::config("masked-LM training needs at least two character tokens"));
    }
    if cfg.mlm_mask_rate == 0.0 {
        log::warn!("mlm_mask_rate is 0; nothing to predict, skipping pre-training");
        return Ok(MlmReport {
            epoch_losses: Vec::new(),
            skipped: sequences.len(),
            steps: 0,
        });
    }
    if let Some(s) = sequences.iter().find(|s| s.len() > model.config.max_len) {
        return Err(Error::config(format!(
            "sequence of {} tokens exceeds max_len {}",
            s.len(),
            model.config.max_len
        )));
    }
    let mut mask_rng = stream(cfg.seed, "mlm-mask");
    let masked: Vec<MaskedSequence> = sequences
        .iter()
        .map(|s| mask_sequence(s, cfg.mlm_mask_rate, model.vocab_size, &mut mask_rng))
        .filter(|m| m.n_selected() > 0)
        .collect();
    let skipped = sequences.len() - masked.len();
    if skipped > 0 {
        log::warn!("{skipped} sequence(s) without character tokens skipped");
    }
    let opt_cfg = TrainConfig {
        lr_encoder: cfg.mlm_lr,
        lr_heads: cfg.mlm_lr,
        ..cfg.clone()
    };
    let mut state = OptimState::new(&model.params);
    let mut shuffle = stream(cfg.seed, "mlm-shuffle");
    let threads = cfg.worker_threads();
    let mut epoch_losses = Vec::with_capacity(cfg.mlm_epochs);
    let mut order: Vec<usize> = (0..masked.len()).collect();
    for epoch in 0..cfg.mlm_epochs {
        if masked.is_empty() {
            break;
        }
        order.shuffle(&mut shuffle);
        let (mut total, mut batches) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let step = state.step;
            let results = parallel_map(batch, threads, |k, &i| {
                let mut rng = (model.config.dropout > 0.0).then(|| stream(cfg.seed, &format!("mlm-dropout/{step}/{k}")));
                model.mlm_loss_and_grads(&masked[i].input, &masked[i].targets, rng.as_mut())
            });
            let results = results.into_iter().collect::<Result<Vec<_>>>()?;
            let Some((loss, grads)) = average(model, results) else { continue };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("masked-LM loss {loss} at step {step}")));
            }
            adam_step(&mut model.params, &grads, &mut state, &opt_cfg)?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as Float;
        log::info!("mlm epoch {}: loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(MlmReport {
        epoch_losses,
        skipped,
        steps: state.step,
    })
}
