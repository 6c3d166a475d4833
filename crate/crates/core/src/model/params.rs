//! Named parameter storage and lazy binding onto a tape.

use std::collections::HashMap;

use rand::Rng;

use super::config::ModelConfig;
use crate::corpus::NUM_TYPES;
use crate::diffcore::{Float, Init, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which learning rate a parameter trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Heads,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter '{name}'")));
        }
        let t = Tensor::create(shape, init, rng)?.with_grad();
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [Float] {
        &mut self.tensors[id.0].data
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        if self.names[id.0].starts_with("encoder.") {
            ParamGroup::Encoder
        } else {
            ParamGroup::Heads
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Overwrites the values of `name`, checking the shape.
    pub fn set(&mut self, name: &str, shape: &[usize], data: Vec<Float>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        let t = &mut self.tensors[id.0];
        if t.shape != shape || data.len() != t.numel() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                t.shape, shape
            )));
        }
        t.data = data;
        Ok(())
    }
}

/// Per-parameter gradients from one backward pass; `None` means the
/// parameter did not take part and its gradient is zero.
#[derive(Clone, Debug, Default)]
pub struct Gradients(pub Vec<Option<Vec<Float>>>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(vec![None; store.len()])
    }

    pub fn get(&self, id: ParamId) -> Option<&[Float]> {
        self.0[id.0].as_deref()
    }

    /// Adds `other` into `self`, scaled by `w`.
    pub fn accumulate(&mut self, other: &Gradients, w: Float) {
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            if let Some(src) = src {
                let d = dst.get_or_insert_with(|| vec![0.0; src.len()]);
                for (a, b) in d.iter_mut().zip(src) {
                    *a += w * b;
                }
            }
        }
    }

    pub fn scale(&mut self, w: Float) {
        for g in self.0.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= w);
        }
    }

    pub fn global_norm(&self) -> Float {
        self.0
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<Float>()
            .sqrt()
    }
}

/// Records parameters onto a tape the first time they are used, so
/// parameters of disabled components never appear and get no gradient.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
        }
    }

    /// A binder whose parameters are already on the tape as `vars`, in
    /// store order.
    pub fn prebound(store: &'a ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Binder {
            store,
            vars: vars.iter().map(|&v| Some(v)).collect(),
        })
    }

    pub fn get(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        let store = self.store;
        *self.vars[id.0].get_or_insert_with(|| tape.leaf(&store.tensors[id.0]))
    }

    pub fn gradients(&self, tape: &Tape) -> Gradients {
        Gradients(
            self.vars
                .iter()
                .map(|v| v.and_then(|v| tape.grad(v).map(<[Float]>::to_vec)))
                .collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    /// No key bias: it shifts every score in a row equally and cannot
    /// change attention weights.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Affine maps producing a gain and a shift from a condition vector.
#[derive(Clone, Copy, Debug)]
pub struct ClnIds {
    pub w_gamma: ParamId,
    pub b_gamma: ParamId,
    pub w_beta: ParamId,
    pub b_beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ParamIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerIds>,
    pub fusion: ParamId,
    pub type_emb: ParamId,
    pub type_cln: ClnIds,
    pub lstm_fwd: LstmIds,
    pub lstm_bwd: LstmIds,
    pub start_w: ParamId,
    pub start_b: ParamId,
    pub end_w: ParamId,
    pub end_b: ParamId,
    /// [d_biaffine, C, d_biaffine]
    pub u: ParamId,
    /// [2·d_biaffine, C]: the pair term acting on `x_i ⊕ x_j`.
    pub w_pair: ParamId,
    pub b_pair: ParamId,
    pub grid_cln: ClnIds,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub dist_emb: ParamId,
    pub region_emb: ParamId,
    pub grid_w: ParamId,
    pub grid_b: ParamId,
    pub conv_k: [ParamId; 3],
    pub conv_b: [ParamId; 3],
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub mlm_bias: ParamId,
}

const EMB_STD: f64 = 0.02;

fn cln_ids<R: Rng + ?Sized>(
    s: &mut ParamStore,
    prefix: &str,
    d_cond: usize,
    d: usize,
    rng: &mut R,
) -> Result<ClnIds> {
    Ok(ClnIds {
        w_gamma: s.add(&format!("{prefix}.w_gamma"), &[d_cond, d], Init::Zeros, rng)?,
        b_gamma: s.add(&format!("{prefix}.b_gamma"), &[d], Init::Ones, rng)?,
        w_beta: s.add(&format!("{prefix}.w_beta"), &[d_cond, d], Init::Zeros, rng)?,
        b_beta: s.add(&format!("{prefix}.b_beta"), &[d], Init::Zeros, rng)?,
    })
}

fn lstm_ids<R: Rng + ?Sized>(s: &mut ParamStore, prefix: &str, d_in: usize, h: usize, rng: &mut R) -> Result<LstmIds> {
    Ok(LstmIds {
        w_ih: s.add(&format!("{prefix}.w_ih"), &[d_in, 4 * h], Init::Xavier, rng)?,
        w_hh: s.add(&format!("{prefix}.w_hh"), &[h, 4 * h], Init::Xavier, rng)?,
        bias: s.add(&format!("{prefix}.bias"), &[4 * h], Init::Zeros, rng)?,
    })
}

/// Allocates every parameter. Shapes depend only on `cfg` and `vocab_size`.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, vocab_size: usize, rng: &mut R) -> Result<(ParamStore, ParamIds)> {
    let mut s = ParamStore::default();
    let d = cfg.d_model;
    let normal = Init::Normal {
        mean: 0.0,
        std: EMB_STD,
    };
    let tok_emb = s.add("encoder.tok_emb", &[vocab_size, d], normal, rng)?;
    let pos_emb = s.add("encoder.pos_emb", &[cfg.max_len, d], normal, rng)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("encoder.layer{l}");
        let mut add = |name: &str, shape: &[usize], init: Init| s.add(&format!("{p}.{name}"), shape, init, rng);
        layers.push(LayerIds {
            ln1_g: add("ln1_g", &[d], Init::Ones)?,
            ln1_b: add("ln1_b", &[d], Init::Zeros)?,
            wq: add("wq", &[d, d], Init::Xavier)?,
            bq: add("bq", &[d], Init::Zeros)?,
            wk: add("wk", &[d, d], Init::Xavier)?,
            wv: add("wv", &[d, d], Init::Xavier)?,
            bv: add("bv", &[d], Init::Zeros)?,
            wo: add("wo", &[d, d], Init::Xavier)?,
            bo: add("bo", &[d], Init::Zeros)?,
            ln2_g: add("ln2_g", &[d], Init::Ones)?,
            ln2_b: add("ln2_b", &[d], Init::Zeros)?,
            w1: add("w1", &[d, cfg.d_ff], Init::Xavier)?,
            b1: add("b1", &[cfg.d_ff], Init::Zeros)?,
            w2: add("w2", &[cfg.d_ff, d], Init::Xavier)?,
            b2: add("b2", &[d], Init::Zeros)?,
        });
    }
    let fusion = s.add("fusion.alpha", &[cfg.n_layers + 1], Init::Zeros, rng)?;
    let type_emb = s.add("biaffine.type_emb", &[NUM_TYPES, cfg.d_type], Init::Xavier, rng)?;
    let type_cln = cln_ids(&mut s, "biaffine.cln", cfg.d_type, d, rng)?;
    let lstm_fwd = lstm_ids(&mut s, "biaffine.lstm_fwd", d, cfg.d_lstm, rng)?;
    let lstm_bwd = lstm_ids(&mut s, "biaffine.lstm_bwd", d, cfg.d_lstm, rng)?;
    let (db, c) = (cfg.d_biaffine, cfg.n_classes);
    let start_w = s.add("biaffine.start_w", &[2 * cfg.d_lstm, db], Init::Xavier, rng)?;
    let start_b = s.add("biaffine.start_b", &[db], Init::Zeros, rng)?;
    let end_w = s.add("biaffine.end_w", &[2 * cfg.d_lstm, db], Init::Xavier, rng)?;
    let end_b = s.add("biaffine.end_b", &[db], Init::Zeros, rng)?;
    let u = s.add("biaffine.u", &[db, c, db], Init::Xavier, rng)?;
    let w_pair = s.add("biaffine.w_pair", &[2 * db, c], Init::Xavier, rng)?;
    let b_pair = s.add("biaffine.b_pair", &[c], Init::Zeros, rng)?;
    let grid_cln = cln_ids(&mut s, "grid.cln", d, d, rng)?;
    let v_w = s.add("grid.v_w", &[d, cfg.d_h], Init::Xavier, rng)?;
    let v_b = s.add("grid.v_b", &[cfg.d_h], Init::Zeros, rng)?;
    let dist_emb = s.add("grid.dist_emb", &[cfg.n_dist_buckets, cfg.d_dist], Init::Xavier, rng)?;
    let region_emb = s.add("grid.region_emb", &[cfg.n_region_ids, cfg.d_region], Init::Xavier, rng)?;
    let d_in = cfg.d_h + cfg.d_dist + cfg.d_region;
    let grid_w = s.add("grid.mlp_w", &[d_in, cfg.d_g], Init::Xavier, rng)?;
    let grid_b = s.add("grid.mlp_b", &[cfg.d_g], Init::Zeros, rng)?;
    let mut conv_k = Vec::new();
    let mut conv_b = Vec::new();
    for l in 1..=3 {
        conv_k.push(s.add(&format!("grid.conv{l}_k"), &[3, 3, cfg.d_g, cfg.d_g], Init::Xavier, rng)?);
        conv_b.push(s.add(&format!("grid.conv{l}_b"), &[cfg.d_g], Init::Zeros, rng)?);
    }
    let out_w = s.add("grid.out_w", &[3 * cfg.d_g, c], Init::Xavier, rng)?;
    let out_b = s.add("grid.out_b", &[c], Init::Zeros, rng)?;
    let n_chars = vocab_size.saturating_sub(crate::corpus::vocab::NUM_SPECIALS).max(1);
    let mlm_bias = s.add("mlm.bias", &[n_chars], Init::Zeros, rng)?;

    let ids = ParamIds {
        tok_emb,
        pos_emb,
        layers,
        fusion,
        type_emb,
        type_cln,
        lstm_fwd,
        lstm_bwd,
        start_w,
        start_b,
        end_w,
        end_b,
        u,
        w_pair,
        b_pair,
        grid_cln,
        v_w,
        v_b,
        dist_emb,
        region_emb,
        grid_w,
        grid_b,
        conv_k: [conv_k[0], conv_k[1], conv_k[2]],
        conv_b: [conv_b[0], conv_b[1], conv_b[2]],
        out_w,
        out_b,
        mlm_bias,
    };
    Ok((s, ids))
}
