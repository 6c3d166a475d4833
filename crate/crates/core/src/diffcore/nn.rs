//! Layers composed from tape primitives.

use rand::Rng;

use super::tape::{Tape, Var};
use super::Float;
use crate::error::{Error, Result};

/// `x · w + b` over the last axis of `x`, for any rank of `x`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d_in = *shape.last().unwrap();
    let rows = tape.value(x).len() / d_in;
    let ws = tape.shape(w);
    if ws.len() != 2 || ws[0] != d_in {
        return Err(Error::shape(format!("linear input {shape:?} with weight {ws:?}")));
    }
    let d_out = ws[1];
    let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, d_in])? };
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        y = tape.add(y, b)?;
    }
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = d_out;
    tape.reshape(y, &out_shape)
}

/// Inverted dropout; identity when `rate == 0`.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: Float, rng: &mut R) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x).to_vec();
    let mask: Vec<Float> = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < keep as f64 { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(shape, mask)?;
    tape.mul(x, m)
}

/// One direction of an LSTM: input weights [d_in, 4h], recurrent weights
/// [h, 4h], bias [4h]. Gate order is input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

fn lstm_direction(tape: &mut Tape, seq: Var, p: LstmVars, reverse: bool) -> Result<Vec<Var>> {
    let n = tape.shape(seq)[0];
    let hidden = tape.shape(p.w_hh)[0];
    if tape.shape(p.w_hh) != [hidden, 4 * hidden] || tape.shape(p.bias) != [4 * hidden] {
        return Err(Error::shape(format!(
            "lstm recurrent weights {:?} bias {:?}",
            tape.shape(p.w_hh),
            tape.shape(p.bias)
        )));
    }
    let projected = linear(tape, seq, p.w_ih, Some(p.bias))?;
    let mut outputs = vec![None; n];
    let mut state: Option<(Var, Var)> = None;
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let mut gates = tape.slice(projected, 0, t, 1)?;
        if let Some((h, _)) = state {
            let rec = tape.matmul(h, p.w_hh)?;
            gates = tape.add(gates, rec)?;
        }
        let i_raw = tape.slice(gates, 1, 0, hidden)?;
        let f_raw = tape.slice(gates, 1, hidden, hidden)?;
        let g_raw = tape.slice(gates, 1, 2 * hidden, hidden)?;
        let o_raw = tape.slice(gates, 1, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i_raw)?;
        let g = tape.tanh(g_raw)?;
        let o = tape.sigmoid(o_raw)?;
        let mut c = tape.mul(i, g)?;
        if let Some((_, c_prev)) = state {
            let f = tape.sigmoid(f_raw)?;
            let keep = tape.mul(f, c_prev)?;
            c = tape.add(keep, c)?;
        }
        let c_act = tape.tanh(c)?;
        let h = tape.mul(o, c_act)?;
        outputs[t] = Some(h);
        state = Some((h, c));
    }
    Ok(outputs.into_iter().map(|h| h.unwrap()).collect())
}

/// Single-layer bidirectional LSTM with zero initial states. Returns
/// [n, 2h]: forward hidden state then backward hidden state per position.
pub fn bilstm(tape: &mut Tape, seq: Var, forward: LstmVars, backward: LstmVars) -> Result<Var> {
    let s = tape.shape(seq);
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::shape(format!("bilstm needs a non-empty [n, d] sequence, got {s:?}")));
    }
    let fwd = lstm_direction(tape, seq, forward, false)?;
    let bwd = lstm_direction(tape, seq, backward, true)?;
    let f = tape.concat(&fwd, 0)?;
    let b = tape.concat(&bwd, 0)?;
    tape.concat(&[f, b], 1)
}
