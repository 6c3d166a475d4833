use super::config::TrainConfig;
use crate::diffcore::Float;
use crate::error::{Error, Result};
use crate::model::{Gradients, ParamGroup, ParamStore};

/// Adam moments, one pair of arrays per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<Float>>,
    pub v: Vec<Vec<Float>>,
    /// Updates applied to each parameter, for bias correction.
    pub param_steps: Vec<u64>,
    /// Optimizer steps taken.
    pub step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<Float>> = store.ids().map(|id| vec![0.0; store.tensor(id).numel()]).collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            param_steps: vec![0; store.len()],
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Gradient norm before clipping.
    pub grad_norm: Float,
    /// Factor applied to the gradients (1 when not clipped).
    pub clip_scale: Float,
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping and the factor applied.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: Float) -> (Float, Float) {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.scale(s);
        (norm, s)
    } else {
        (norm, 1.0)
    }
}

/// Rejects gradients containing NaN or infinity, naming the parameter.
pub fn check_finite(store: &ParamStore, grads: &Gradients) -> Result<()> {
    for id in store.ids() {
        if let Some(g) = grads.get(id) {
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of '{}' at element {k} is {}",
                    store.name(id),
                    g[k]
                )));
            }
        }
    }
    Ok(())
}

/// One bias-corrected Adam update. Parameters with no gradient (`None`)
/// are left alone and their moments are not decayed.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<StepInfo> {
    if grads.0.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::contract("gradients or optimizer state do not match the parameter store"));
    }
    check_finite(store, grads)?;
    let mut grads = grads.clone();
    let (grad_norm, clip_scale) = match cfg.grad_clip_norm {
        Some(c) => clip_grad_norm(&mut grads, c as Float),
        None => (grads.global_norm(), 1.0),
    };
    state.step += 1;
    let warm = if cfg.warmup_steps > 0 {
        (state.step as f64 / cfg.warmup_steps as f64).min(1.0)
    } else {
        1.0
    };
    let (b1, b2, eps) = (cfg.beta1 as Float, cfg.beta2 as Float, cfg.eps as Float);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let k = id.index();
        let lr = match store.group(id) {
            ParamGroup::Encoder => cfg.lr_encoder,
            ParamGroup::Heads => cfg.lr_heads,
        } * warm;
        state.param_steps[k] += 1;
        let t = state.param_steps[k] as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = lr as Float;
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if m.len() != g.len() {
            return Err(Error::shape(format!("gradient of '{}' has the wrong length", store.name(id))));
        }
        let p = store.data_mut(id);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(StepInfo { grad_norm, clip_scale })
}
