use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{biaffine_scores, cln, cln_grid, co_predict, distance_ids, fuse_layers, region_ids, ClnVars, LN_EPS};
use super::params::{init_params, Binder, ClnIds, Gradients, ParamIds, ParamStore};
use crate::corpus::vocab::NUM_SPECIALS;
use crate::corpus::MrcInstance;
use crate::diffcore::rng::{stream, SeededRng};
use crate::diffcore::{bilstm, dropout, grad_check, linear, Float, GradCheckReport, LstmVars, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Dropout state for one forward pass: inactive in eval mode.
pub struct Dropout<'r> {
    rate: Float,
    rng: Option<&'r mut SeededRng>,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: Float, rng: &'r mut SeededRng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => dropout(tape, x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

/// Branch logits and co-predicted probabilities, each row-major N×N×C. A
/// disabled branch's logits are all zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub n: usize,
    pub n_classes: usize,
    pub biaffine_logits: Vec<Float>,
    pub mlp_logits: Vec<Float>,
    pub probs: Vec<Float>,
}

impl ScoreGrid {
    pub fn cell(&self, i: usize, j: usize) -> &[Float] {
        let c = self.n_classes;
        let at = (i * self.n + j) * c;
        &self.probs[at..at + c]
    }
}

/// Vars produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub biaffine: Option<Var>,
    pub mlp: Option<Var>,
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
    pub ids: ParamIds,
}

fn cln_vars(tape: &mut Tape, b: &mut Binder, p: ClnIds) -> ClnVars {
    ClnVars {
        w_gamma: b.get(tape, p.w_gamma),
        b_gamma: b.get(tape, p.b_gamma),
        w_beta: b.get(tape, p.w_beta),
        b_beta: b.get(tape, p.b_beta),
    }
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size <= NUM_SPECIALS {
            return Err(Error::config(format!("vocabulary of {vocab_size} has no character tokens")));
        }
        let mut rng = stream(seed, "model-init");
        let (params, ids) = init_params(&config, vocab_size, &mut rng)?;
        Ok(Model {
            config,
            vocab_size,
            params,
            ids,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Token+position embeddings followed by each pre-norm transformer
    /// block's output: `n_layers + 1` tensors of [N, d_model].
    /// `keep[k]` is false for padding keys, which receive no attention.
    pub fn encode(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        token_ids: &[usize],
        keep: &[bool],
        drop: &mut Dropout,
    ) -> Result<Vec<Var>> {
        let n = token_ids.len();
        if n == 0 || n > self.config.max_len {
            return Err(Error::contract(format!(
                "sequence of {n} tokens outside 1..={}",
                self.config.max_len
            )));
        }
        if keep.len() != n {
            return Err(Error::shape(format!("attention mask of {} for {n} tokens", keep.len())));
        }
        let tok = b.get(tape, self.ids.tok_emb);
        let pos = b.get(tape, self.ids.pos_emb);
        let te = tape.embedding(tok, token_ids, &[n])?;
        let positions: Vec<usize> = (0..n).collect();
        let pe = tape.embedding(pos, &positions, &[n])?;
        let mut x = tape.add(te, pe)?;
        x = drop.apply(tape, x)?;
        let mut outs = vec![x];
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as Float).sqrt();
        for l in &self.ids.layers {
            let g1 = b.get(tape, l.ln1_g);
            let b1 = b.get(tape, l.ln1_b);
            let normed = tape.layer_norm(x, g1, b1, LN_EPS)?;
            let (wq, bq) = (b.get(tape, l.wq), b.get(tape, l.bq));
            let q = linear(tape, normed, wq, Some(bq))?;
            let wk = b.get(tape, l.wk);
            let k = linear(tape, normed, wk, None)?;
            let (wv, bv) = (b.get(tape, l.wv), b.get(tape, l.bv));
            let v = linear(tape, normed, wv, Some(bv))?;
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice(q, 1, h * dh, dh)?;
                let kh = tape.slice(k, 1, h * dh, dh)?;
                let vh = tape.slice(v, 1, h * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let s = tape.scale(s, scale)?;
                let a = tape.masked_softmax(s, keep)?;
                let a = drop.apply(tape, a)?;
                head_outs.push(tape.matmul(a, vh)?);
            }
            let cat = tape.concat(&head_outs, 1)?;
            let (wo, bo) = (b.get(tape, l.wo), b.get(tape, l.bo));
            let attn = linear(tape, cat, wo, Some(bo))?;
            x = tape.add(x, attn)?;

            let g2 = b.get(tape, l.ln2_g);
            let b2 = b.get(tape, l.ln2_b);
            let normed = tape.layer_norm(x, g2, b2, LN_EPS)?;
            let (w1, bb1) = (b.get(tape, l.w1), b.get(tape, l.b1));
            let hid = linear(tape, normed, w1, Some(bb1))?;
            let hid = tape.gelu(hid)?;
            let hid = drop.apply(tape, hid)?;
            let (w2, bb2) = (b.get(tape, l.w2), b.get(tape, l.b2));
            let ff = linear(tape, hid, w2, Some(bb2))?;
            x = tape.add(x, ff)?;
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn fused(&self, tape: &mut Tape, b: &mut Binder, layers: &[Var]) -> Result<Var> {
        let alpha = b.get(tape, self.ids.fusion);
        fuse_layers(tape, layers, alpha)
    }

    /// Biaffine logits [N, N, C] conditioned on the queried type.
    pub fn biaffine_branch(&self, tape: &mut Tape, b: &mut Binder, h: Var, type_id: usize) -> Result<Var> {
        let ids = &self.ids;
        let table = b.get(tape, ids.type_emb);
        let cond = tape.embedding(table, &[type_id], &[1])?;
        let p = cln_vars(tape, b, ids.type_cln);
        let hc = cln(tape, h, cond, p)?;
        let lstm = |tape: &mut Tape, b: &mut Binder, l: super::params::LstmIds| LstmVars {
            w_ih: b.get(tape, l.w_ih),
            w_hh: b.get(tape, l.w_hh),
            bias: b.get(tape, l.bias),
        };
        let fwd = lstm(tape, b, ids.lstm_fwd);
        let bwd = lstm(tape, b, ids.lstm_bwd);
        let s = bilstm(tape, hc, fwd, bwd)?;
        let (sw, sb) = (b.get(tape, ids.start_w), b.get(tape, ids.start_b));
        let xs = linear(tape, s, sw, Some(sb))?;
        let xs = tape.gelu(xs)?;
        let (ew, eb) = (b.get(tape, ids.end_w), b.get(tape, ids.end_b));
        let xe = linear(tape, s, ew, Some(eb))?;
        let xe = tape.gelu(xe)?;
        let u = b.get(tape, ids.u);
        let w = b.get(tape, ids.w_pair);
        let bias = b.get(tape, ids.b_pair);
        biaffine_scores(tape, xs, xe, u, w, bias)
    }

    /// Word-pair grids `(V, E_d, E_t)`; disabled embeddings are zeros.
    pub fn word_pair_embeddings(&self, tape: &mut Tape, b: &mut Binder, h: Var) -> Result<(Var, Var, Var)> {
        let cfg = &self.config;
        let ids = &self.ids;
        let n = tape.shape(h)[0];
        let p = cln_vars(tape, b, ids.grid_cln);
        let grid = cln_grid(tape, h, p)?;
        let (vw, vb) = (b.get(tape, ids.v_w), b.get(tape, ids.v_b));
        let v = linear(tape, grid, vw, Some(vb))?;
        let ed = if cfg.use_distance_emb {
            let t = b.get(tape, ids.dist_emb);
            tape.embedding(t, &distance_ids(n), &[n, n])?
        } else {
            tape.zeros(vec![n, n, cfg.d_dist])?
        };
        let et = if cfg.use_region_emb {
            let t = b.get(tape, ids.region_emb);
            tape.embedding(t, &region_ids(n), &[n, n])?
        } else {
            tape.zeros(vec![n, n, cfg.d_region])?
        };
        Ok((v, ed, et))
    }

    /// Grid logits [N, N, C] from the three word-pair grids. Without dilated
    /// convolution the grid representation is repeated three times so the
    /// output layer keeps its shape.
    pub fn mlp_branch(&self, tape: &mut Tape, b: &mut Binder, v: Var, ed: Var, et: Var, drop: &mut Dropout) -> Result<Var> {
        let (_, q) = self.grid_representation(tape, b, v, ed, et, drop)?;
        let (ow, ob) = (b.get(tape, self.ids.out_w), b.get(tape, self.ids.out_b));
        linear(tape, q, ow, Some(ob))
    }

    /// `(G, Q)`: the fused grid [N, N, d_g] and its multi-dilation
    /// representation [N, N, 3·d_g].
    pub fn grid_representation(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        v: Var,
        ed: Var,
        et: Var,
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let ids = &self.ids;
        let cat = tape.concat(&[v, ed, et], 2)?;
        let cat = drop.apply(tape, cat)?;
        let (gw, gb) = (b.get(tape, ids.grid_w), b.get(tape, ids.grid_b));
        let g = linear(tape, cat, gw, Some(gb))?;
        let g = tape.gelu(g)?;
        let q = if self.config.use_dconv {
            let mut parts = Vec::with_capacity(3);
            for l in 0..3 {
                let (k, kb) = (b.get(tape, ids.conv_k[l]), b.get(tape, ids.conv_b[l]));
                let c = tape.conv2d_dilated(g, k, kb, l + 1)?;
                parts.push(tape.gelu(c)?);
            }
            tape.concat(&parts, 2)?
        } else {
            tape.concat(&[g, g, g], 2)?
        };
        Ok((g, q))
    }

    /// The full network on one instance.
    pub fn forward_on(&self, tape: &mut Tape, b: &mut Binder, inst: &MrcInstance, drop: &mut Dropout) -> Result<ForwardVars> {
        if inst.n_classes() != self.config.n_classes {
            return Err(Error::config(format!(
                "instance has {} classes but the model predicts {}",
                inst.n_classes(),
                self.config.n_classes
            )));
        }
        let layers = self.encode(tape, b, &inst.token_ids, &inst.attention_mask(), drop)?;
        let h = self.fused(tape, b, &layers)?;
        let biaffine = if self.config.use_biaffine {
            Some(self.biaffine_branch(tape, b, h, inst.entity_type.id())?)
        } else {
            None
        };
        let mlp = if self.config.use_mlp_branch {
            let (v, ed, et) = self.word_pair_embeddings(tape, b, h)?;
            Some(self.mlp_branch(tape, b, v, ed, et, drop)?)
        } else {
            None
        };
        let probs = co_predict(tape, biaffine, mlp)?;
        Ok(ForwardVars { biaffine, mlp, probs })
    }

    /// Masked cross entropy of `probs` against the instance grid.
    pub fn loss_on(&self, tape: &mut Tape, probs: Var, inst: &MrcInstance) -> Result<Var> {
        let n = inst.len();
        let denom = self.config.full_grid_loss.then_some((n * n) as Float);
        tape.masked_cross_entropy(probs, &inst.label_grid, &inst.loss_mask, denom)
    }

    /// Eval-mode scores.
    pub fn score(&self, inst: &MrcInstance) -> Result<ScoreGrid> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params);
        let f = self.forward_on(&mut tape, &mut b, inst, &mut Dropout::eval())?;
        let n = inst.len();
        let c = self.config.n_classes;
        let logits = |v: Option<Var>| v.map_or_else(|| vec![0.0; n * n * c], |v| tape.value(v).to_vec());
        Ok(ScoreGrid {
            n,
            n_classes: c,
            biaffine_logits: logits(f.biaffine),
            mlp_logits: logits(f.mlp),
            probs: tape.value(f.probs).to_vec(),
        })
    }

    /// Eval-mode loss without gradients.
    pub fn eval_loss(&self, inst: &MrcInstance) -> Result<Float> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params);
        let f = self.forward_on(&mut tape, &mut b, inst, &mut Dropout::eval())?;
        let loss = self.loss_on(&mut tape, f.probs, inst)?;
        Ok(tape.value(loss)[0])
    }

    /// Loss and parameter gradients; dropout is active iff `rng` is given.
    pub fn loss_and_grads(&self, inst: &MrcInstance, rng: Option<&mut SeededRng>) -> Result<(Float, Gradients)> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params);
        let mut drop = match rng {
            Some(r) => Dropout::train(self.config.dropout, r),
            None => Dropout::eval(),
        };
        let f = self.forward_on(&mut tape, &mut b, inst, &mut drop)?;
        let loss = self.loss_on(&mut tape, f.probs, inst)?;
        tape.backward(loss)?;
        Ok((tape.value(loss)[0], b.gradients(&tape)))
    }

    /// Masked-token loss with the output layer tied to the character rows of
    /// the token embedding. `targets[k]` is the original id at a masked
    /// position. Returns `None` when nothing is masked.
    pub fn mlm_loss_on(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        input_ids: &[usize],
        targets: &[Option<usize>],
        drop: &mut Dropout,
    ) -> Result<Option<Var>> {
        if targets.len() != input_ids.len() {
            return Err(Error::shape("mlm targets and inputs differ in length"));
        }
        if targets.iter().all(Option::is_none) {
            return Ok(None);
        }
        let n_chars = self.vocab_size - NUM_SPECIALS;
        let mut labels = vec![0; targets.len()];
        let mut mask = vec![false; targets.len()];
        for (k, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t < NUM_SPECIALS || t >= self.vocab_size {
                    return Err(Error::Index(format!("mlm target {t} is not a character token")));
                }
                labels[k] = t - NUM_SPECIALS;
                mask[k] = true;
            }
        }
        let keep = vec![true; input_ids.len()];
        let layers = self.encode(tape, b, input_ids, &keep, drop)?;
        let last = *layers.last().unwrap();
        let table = b.get(tape, self.ids.tok_emb);
        let chars = tape.slice(table, 0, NUM_SPECIALS, n_chars)?;
        let out = tape.transpose(chars)?;
        let logits = tape.matmul(last, out)?;
        let bias = b.get(tape, self.ids.mlm_bias);
        let logits = tape.add(logits, bias)?;
        let probs = tape.softmax(logits, 1)?;
        Ok(Some(tape.masked_cross_entropy(probs, &labels, &mask, None)?))
    }

    pub fn mlm_loss_and_grads(
        &self,
        input_ids: &[usize],
        targets: &[Option<usize>],
        rng: Option<&mut SeededRng>,
    ) -> Result<Option<(Float, Gradients)>> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params);
        let mut drop = match rng {
            Some(r) => Dropout::train(self.config.dropout, r),
            None => Dropout::eval(),
        };
        let Some(loss) = self.mlm_loss_on(&mut tape, &mut b, input_ids, targets, &mut drop)? else {
            return Ok(None);
        };
        tape.backward(loss)?;
        Ok(Some((tape.value(loss)[0], b.gradients(&tape))))
    }

    /// Finite-difference check of the eval-mode loss with respect to every
    /// parameter.
    pub fn grad_check_loss(&self, inst: &MrcInstance, eps: Float) -> Result<GradCheckReport> {
        let inputs: Vec<Tensor> = self.params.ids().map(|id| self.params.tensor(id).clone()).collect();
        grad_check(
            |tape, vars| {
                let mut b = Binder::prebound(&self.params, vars)?;
                let f = self.forward_on(tape, &mut b, inst, &mut Dropout::eval())?;
                self.loss_on(tape, f.probs, inst)
            },
            &inputs,
            eps,
        )
    }
}
