//! Finite-difference check of the whole network on a small fixed instance.

use rand::Rng;

use super::config::ModelConfig;
use super::network::Model;
use crate::corpus::vocab::{CLS, NUM_SPECIALS, SEP};
use crate::corpus::{EntityType, LabelScheme, MrcInstance};
use crate::diffcore::rng::stream;
use crate::diffcore::{Float, GradCheckReport, DEFAULT_EPS};
use crate::error::Result;

/// Pass threshold on max relative error for the full loss at 64-bit.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

const CHECK_VOCAB: usize = 12;

/// Every dimension at most 8, so the check visits each parameter quickly.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        d_type: 4,
        d_lstm: 4,
        d_biaffine: 4,
        d_h: 4,
        d_dist: 2,
        d_region: 2,
        d_g: 4,
        dropout: 0.0,
        max_len: 16,
        ..ModelConfig::default()
    }
}

/// A 12-token instance: 2 query tokens, 7 context tokens and three spans,
/// two of them nested.
pub fn check_instance() -> MrcInstance {
    let (query, context) = (2, 7);
    let mut rng = stream(6, "instance");
    let mut token_ids = vec![CLS];
    token_ids.extend((0..query).map(|_| rng.random_range(NUM_SPECIALS..CHECK_VOCAB)));
    token_ids.push(SEP);
    let off = token_ids.len();
    token_ids.extend((0..context).map(|_| rng.random_range(NUM_SPECIALS..CHECK_VOCAB)));
    token_ids.push(SEP);
    let n = token_ids.len();
    let ty = EntityType::Dis;
    let mut loss_mask = vec![false; n * n];
    let mut label_grid = vec![0; n * n];
    for i in off..off + context {
        for j in i..off + context {
            loss_mask[i * n + j] = true;
        }
    }
    for (s, e) in [(0, 2), (1, 1), (3, 6)] {
        label_grid[(off + s) * n + off + e] = 1 + ty.id();
    }
    MrcInstance {
        entity_type: ty,
        token_ids,
        context_offset: off,
        context_len: context,
        sentence_len: context,
        label_grid,
        loss_mask,
        label_scheme: LabelScheme::PerType,
        truncated_entities: 0,
    }
}

/// Gradient check of loss∘forward with respect to every parameter, on a
/// fixed model and instance. The zero-initialized conditioning weights are
/// perturbed first so their paths carry signal.
pub fn end_to_end_check() -> Result<GradCheckReport> {
    let mut model = Model::new(check_config(), CHECK_VOCAB, 12)?;
    for (name, period, step) in [("biaffine.cln.w_gamma", 5, 0.2), ("grid.cln.w_beta", 3, 0.2)] {
        let id = model.params.id(name).expect("parameter exists");
        let half = (period / 2) as Float;
        for (k, v) in model.params.data_mut(id).iter_mut().enumerate() {
            *v = ((k % period) as Float - half) * step;
        }
    }
    model.grad_check_loss(&check_instance(), DEFAULT_EPS)
}
