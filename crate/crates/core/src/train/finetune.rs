use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{adam_step, OptimState};
use crate::corpus::{build_all_instances, InstanceOptions, MrcInstance, SentenceRecord, Vocab};
use crate::decode_eval::{evaluate_corpus, Prf};
use crate::diffcore::rng::{stream, SeededRng};
use crate::diffcore::Float;
use crate::error::{Error, Result};
use crate::model::{Gradients, Model};

/// Runs `f` on every item, spread over up to `threads` scoped workers.
/// Output order follows input order, so results do not depend on the
/// thread count.
pub(crate) fn parallel_map<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(k, x)| f(k, x)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, xs)| {
                let f = &f;
                s.spawn(move || {
                    xs.iter()
                        .enumerate()
                        .map(|(k, x)| f(c * chunk + k, x))
                        .collect::<Vec<U>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    })
}

/// Mean loss and mean gradients over the `Some` results.
pub(crate) fn average(model: &Model, results: Vec<Option<(Float, Gradients)>>) -> Option<(Float, Gradients)> {
    let parts: Vec<(Float, Gradients)> = results.into_iter().flatten().collect();
    if parts.is_empty() {
        return None;
    }
    let w = 1.0 / parts.len() as Float;
    let mut grads = Gradients::zeros_like(&model.params);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l * w;
        grads.accumulate(g, w);
    }
    Some((loss, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean training-mode loss over the epoch's batches.
    pub mean_loss: Float,
    /// Training-mode loss of each batch, in order.
    pub step_losses: Vec<Float>,
    pub batches: usize,
    pub instances: usize,
}

/// Fine-tuning state that persists across epochs: optimizer moments and
/// the shuffling and negative-sampling streams.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: OptimState,
    shuffle: SeededRng,
    negatives: SeededRng,
}

impl Trainer {
    pub fn new(model: &Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            state: OptimState::new(&model.params),
            shuffle: stream(cfg.seed, "shuffle"),
            negatives: stream(cfg.seed, "negative-queries"),
            cfg,
        })
    }

    /// Instance indices for the next epoch: queries without gold entities
    /// are subsampled at `negative_query_rate`, then everything is shuffled.
    pub fn epoch_order(&mut self, instances: &[MrcInstance]) -> Vec<usize> {
        let rate = self.cfg.negative_query_rate;
        let mut order: Vec<usize> = (0..instances.len())
            .filter(|&k| {
                let positive = instances[k].label_grid.iter().any(|&l| l != 0);
                positive || rate >= 1.0 || self.negatives.random_bool(rate)
            })
            .collect();
        order.shuffle(&mut self.shuffle);
        order
    }

    pub fn train_epoch(&mut self, model: &mut Model, instances: &[MrcInstance]) -> Result<EpochStats> {
        let order = self.epoch_order(instances);
        let threads = self.cfg.worker_threads();
        let seed = self.cfg.seed;
        let mut step_losses = Vec::new();
        for (bi, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let step = self.state.step;
            let results = parallel_map(batch, threads, |k, &i| {
                let mut rng = (model.config.dropout > 0.0).then(|| stream(seed, &format!("dropout/{step}/{k}")));
                model.loss_and_grads(&instances[i], rng.as_mut()).map(Some)
            });
            let results = results.into_iter().collect::<Result<Vec<_>>>()?;
            let (loss, grads) = average(model, results).expect("batches are nonempty");
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss {loss} at step {step} (batch {bi})")));
            }
            adam_step(&mut model.params, &grads, &mut self.state, &self.cfg)?;
            step_losses.push(loss);
        }
        let batches = step_losses.len();
        Ok(EpochStats {
            mean_loss: step_losses.iter().sum::<Float>() / batches.max(1) as Float,
            step_losses,
            batches,
            instances: order.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: Float,
    pub dev: Option<Prf>,
    pub improved: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochsExhausted,
    Patience,
    TargetReached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_f1: Option<f64>,
    pub steps: u64,
    pub stop_reason: StopReason,
}

/// Supervised training with dev-set model selection. On return `model`
/// holds the parameters of the best dev epoch, or of the last epoch when
/// the dev set is empty.
pub fn finetune(
    model: &mut Model,
    train: &[SentenceRecord],
    dev: &[SentenceRecord],
    vocab: &Vocab,
    inst_opts: &InstanceOptions,
    cfg: &TrainConfig,
) -> Result<FinetuneReport> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if inst_opts.label_scheme.n_classes() != model.config.n_classes {
        return Err(Error::config(format!(
            "label scheme has {} classes but the model predicts {}",
            inst_opts.label_scheme.n_classes(),
            model.config.n_classes
        )));
    }
    let instances = build_all_instances(train, vocab, inst_opts)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    if dev.is_empty() {
        log::warn!("dev set is empty; skipping evaluation and keeping the last epoch");
    }
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::model::ParamStore)> = None;
    let mut stale = 0;
    let mut stop_reason = StopReason::EpochsExhausted;
    for epoch in 1..=cfg.epochs {
        let stats = trainer.train_epoch(model, &instances)?;
        let mut rec = EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            dev: None,
            improved: false,
        };
        if !dev.is_empty() && epoch % cfg.eval_every == 0 {
            let micro = evaluate_corpus(&*model, dev, vocab, inst_opts)?.0.micro;
            rec.dev = Some(micro);
            if best.as_ref().is_none_or(|b| micro.f1 > b.0) {
                best = Some((micro.f1, epoch, model.params.clone()));
                rec.improved = true;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log::info!(
            "epoch {epoch}: loss {:.6}{}",
            rec.train_loss,
            rec.dev.map_or(String::new(), |d| format!(", dev F1 {:.4}", d.f1))
        );
        let f1 = rec.dev.map(|d| d.f1);
        history.push(rec);
        if let (Some(t), Some(f1)) = (cfg.target_f1, f1) {
            if f1 >= t {
                stop_reason = StopReason::TargetReached;
                break;
            }
        }
        if cfg.patience.is_some_and(|p| stale >= p) {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let (best_dev_f1, best_epoch) = match best {
        Some((f1, epoch, params)) => {
            model.params = params;
            (Some(f1), Some(epoch))
        }
        None => (None, None),
    };
    Ok(FinetuneReport {
        history,
        best_epoch,
        best_dev_f1,
        steps: trainer.state.step,
        stop_reason,
    })
}
