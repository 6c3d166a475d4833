//! Building blocks of the tagger, written against raw tape variables so each
//! can be exercised on hand-set weights.

use crate::diffcore::{linear, Float, Tape, Var};
use crate::error::{Error, Result};

pub const LN_EPS: Float = 1e-5;

/// `Σ_l softmax(alpha)_l · layers[l]`.
pub fn fuse_layers(tape: &mut Tape, layers: &[Var], alpha: Var) -> Result<Var> {
    if layers.is_empty() || tape.shape(alpha) != [layers.len()] {
        return Err(Error::shape(format!(
            "fusion logits {:?} for {} layers",
            tape.shape(alpha),
            layers.len()
        )));
    }
    let w = tape.softmax(alpha, 0)?;
    let mut acc = tape.scale_by(layers[0], w, 0)?;
    for (l, &layer) in layers.iter().enumerate().skip(1) {
        if tape.shape(layer) != tape.shape(layers[0]) {
            return Err(Error::shape("fused layers differ in shape"));
        }
        let term = tape.scale_by(layer, w, l)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Vars of one conditional layer norm: `γ = cond·w_gamma + b_gamma`,
/// `β = cond·w_beta + b_beta`.
#[derive(Clone, Copy, Debug)]
pub struct ClnVars {
    pub w_gamma: Var,
    pub b_gamma: Var,
    pub w_beta: Var,
    pub b_beta: Var,
}

/// `γ ⊙ LayerNorm(x) + β` on every row of `x`, with γ and β computed from
/// the single condition vector `cond`.
pub fn cln(tape: &mut Tape, x: Var, cond: Var, p: ClnVars) -> Result<Var> {
    let dc = tape.value(cond).len();
    let cond = tape.reshape(cond, &[1, dc])?;
    let d = *tape.shape(x).last().unwrap();
    let gamma = linear(tape, cond, p.w_gamma, Some(p.b_gamma))?;
    let beta = linear(tape, cond, p.w_beta, Some(p.b_beta))?;
    let gamma = tape.reshape(gamma, &[d])?;
    let beta = tape.reshape(beta, &[d])?;
    tape.layer_norm(x, gamma, beta, LN_EPS)
}

/// Grid form of conditional layer norm: cell (i, j) normalizes row `j` of
/// `h` with gain and shift generated from row `i`. Returns [N, N, d].
pub fn cln_grid(tape: &mut Tape, h: Var, p: ClnVars) -> Result<Var> {
    let d = tape.shape(h)[1];
    let gamma = linear(tape, h, p.w_gamma, Some(p.b_gamma))?;
    let beta = linear(tape, h, p.w_beta, Some(p.b_beta))?;
    let ones = tape.constant(vec![d], vec![1.0; d])?;
    let zeros = tape.zeros(vec![d])?;
    let normed = tape.layer_norm(h, ones, zeros, LN_EPS)?;
    tape.outer_affine(gamma, normed, beta)
}

/// `y[i, j] = x_iᵀ U x_j + W (x_i ⊕ x_j) + b` for starts X_s [N, d] and
/// ends X_e [N, d]; `w_pair` is [2d, C]. Returns [N, N, C].
pub fn biaffine_scores(tape: &mut Tape, xs: Var, xe: Var, u: Var, w_pair: Var, b: Var) -> Result<Var> {
    let d = tape.shape(xs)[1];
    if tape.shape(w_pair).len() != 2 || tape.shape(w_pair)[0] != 2 * d {
        return Err(Error::shape(format!("pair weight {:?} for features of {d}", tape.shape(w_pair))));
    }
    let bil = tape.bilinear_pairs(xs, u, xe)?;
    let wa = tape.slice(w_pair, 0, 0, d)?;
    let wb = tape.slice(w_pair, 0, d, d)?;
    let ps = tape.matmul(xs, wa)?;
    let pe = tape.matmul(xe, wb)?;
    let pair = tape.pair_sum(ps, pe)?;
    let y = tape.add(bil, pair)?;
    tape.add(y, b)
}

/// Bucket for a non-negative token distance: 0, 1, 2, 3 map to themselves,
/// then 4–7, 8–15, 16–31, 32–63, 64–127 and ≥128 get ids 4 through 9.
pub fn distance_bucket(d: usize) -> usize {
    if d < 4 {
        d
    } else {
        (d.ilog2() as usize + 2).min(9)
    }
}

/// 0 above the diagonal, 1 on it, 2 below.
pub fn region_id(i: usize, j: usize) -> usize {
    match i.cmp(&j) {
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => 1,
        std::cmp::Ordering::Greater => 2,
    }
}

pub fn distance_ids(n: usize) -> Vec<usize> {
    (0..n)
        .flat_map(|i| (0..n).map(move |j| distance_bucket(i.abs_diff(j))))
        .collect()
}

pub fn region_ids(n: usize) -> Vec<usize> {
    (0..n).flat_map(|i| (0..n).map(move |j| region_id(i, j))).collect()
}

/// Softmax over classes of the summed branch logits. A missing branch
/// contributes nothing.
pub fn co_predict(tape: &mut Tape, biaffine: Option<Var>, mlp: Option<Var>) -> Result<Var> {
    let logits = match (biaffine, mlp) {
        (Some(a), Some(b)) => {
            if tape.shape(a) != tape.shape(b) {
                return Err(Error::shape(format!(
                    "branch logits {:?} and {:?}",
                    tape.shape(a),
                    tape.shape(b)
                )));
            }
            tape.add(a, b)?
        }
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::config("no prediction branch enabled")),
    };
    let axis = tape.shape(logits).len() - 1;
    tape.softmax(logits, axis)
}
