//! Catalogue of finite-difference checks, one per differentiable op.
//!
//! Each check builds small random inputs from a seed and reduces the op's
//! output to a scalar through a fixed random projection, so every output
//! element carries a distinct weight into the gradient.

use rand::Rng;

use super::fault::FaultSite;
use super::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use super::nn::{bilstm, LstmVars};
use super::rng::{stream, SeededRng};
use super::tape::{Tape, Var};
use super::tensor::{Init, Tensor};
use super::Float;
use crate::error::Result;

/// Pass threshold on max relative error for single ops at 64-bit.
pub const OP_TOLERANCE: f64 = 1e-5;

type Program = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCheck {
    pub name: &'static str,
    pub site: FaultSite,
    pub inputs: Vec<Tensor>,
    program: Program,
}

impl OpCheck {
    pub fn run(&self) -> Result<GradCheckReport> {
        grad_check(&self.program, &self.inputs, DEFAULT_EPS)
    }
}

fn rand_tensor(rng: &mut SeededRng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::create(shape, Init::Uniform(-scale, scale), rng)
        .expect("static shapes are valid")
        .with_grad()
}

/// Sum of `out ⊙ w` for a fixed random `w` of the same shape.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = stream(seed, "gradcheck-projection");
    let shape = tape.shape(out).to_vec();
    let w: Vec<Float> = (0..tape.value(out).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let w = tape.constant(shape, w)?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check(name: &'static str, site: FaultSite, inputs: Vec<Tensor>, program: Program) -> OpCheck {
    OpCheck {
        name,
        site,
        inputs,
        program,
    }
}

/// All op checks for one seed.
pub fn op_checks(seed: u64) -> Vec<OpCheck> {
    let mut rng = stream(seed, "gradcheck-inputs");
    let r = &mut rng;
    let p = seed;
    let mut checks = Vec::new();

    checks.push(check(
        "matmul",
        FaultSite::MatMul,
        vec![rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[4, 2], 1.0)],
        Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "transpose",
        FaultSite::MatMul,
        vec![rand_tensor(r, &[3, 4], 1.0)],
        Box::new(move |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "add",
        FaultSite::Elementwise,
        vec![rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0)],
        Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "add_bias",
        FaultSite::Elementwise,
        vec![rand_tensor(r, &[2, 2, 3], 1.0), rand_tensor(r, &[3], 1.0)],
        Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "mul",
        FaultSite::Elementwise,
        vec![rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0)],
        Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "scale",
        FaultSite::Elementwise,
        vec![rand_tensor(r, &[4], 1.0), rand_tensor(r, &[3], 1.0)],
        Box::new(move |t, v| {
            let a = t.scale(v[0], -1.7)?;
            let b = t.scale_by(v[0], v[1], 2)?;
            let y = t.add(a, b)?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "concat",
        FaultSite::Concat,
        vec![rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 1], 1.0), rand_tensor(r, &[1, 4], 1.0)],
        Box::new(move |t, v| {
            let a = t.concat(&[v[0], v[1]], 1)?;
            let b = t.concat(&[a, v[2]], 0)?;
            let s = t.slice(b, 1, 1, 2)?;
            let y = t.reshape(s, &[6])?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "softmax",
        FaultSite::Softmax,
        vec![rand_tensor(r, &[3, 4], 2.0)],
        Box::new(move |t, v| {
            let a = t.softmax(v[0], 1)?;
            let b = t.softmax(v[0], 0)?;
            let c = t.masked_softmax(v[0], &[true, false, true, true])?;
            let ab = t.add(a, b)?;
            let y = t.add(ab, c)?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "gelu",
        FaultSite::Gelu,
        vec![rand_tensor(r, &[8], 2.0)],
        Box::new(move |t, v| {
            let y = t.gelu(v[0])?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "sigmoid_tanh",
        FaultSite::Lstm,
        vec![rand_tensor(r, &[6], 2.0)],
        Box::new(move |t, v| {
            let a = t.sigmoid(v[0])?;
            let b = t.tanh(v[0])?;
            let y = t.concat(&[a, b], 0)?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "layer_norm",
        FaultSite::LayerNorm,
        vec![rand_tensor(r, &[3, 5], 1.0), rand_tensor(r, &[5], 1.0), rand_tensor(r, &[5], 1.0)],
        Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "embedding",
        FaultSite::Embedding,
        vec![rand_tensor(r, &[5, 3], 1.0)],
        Box::new(move |t, v| {
            let y = t.embedding(v[0], &[3, 0, 3, 4], &[2, 2])?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "bilinear",
        FaultSite::Bilinear,
        vec![rand_tensor(r, &[4], 1.0), rand_tensor(r, &[4, 3, 5], 1.0), rand_tensor(r, &[5], 1.0)],
        Box::new(move |t, v| {
            let y = t.bilinear(v[0], v[1], v[2])?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "bilinear_pairs",
        FaultSite::Bilinear,
        vec![rand_tensor(r, &[3, 2], 1.0), rand_tensor(r, &[2, 3, 4], 1.0), rand_tensor(r, &[4, 4], 1.0)],
        Box::new(move |t, v| {
            let y = t.bilinear_pairs(v[0], v[1], v[2])?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "pair_grid",
        FaultSite::Elementwise,
        vec![rand_tensor(r, &[3, 2], 1.0), rand_tensor(r, &[4, 2], 1.0), rand_tensor(r, &[3, 2], 1.0)],
        Box::new(move |t, v| {
            let a = t.pair_sum(v[0], v[1])?;
            let b = t.outer_affine(v[0], v[1], v[2])?;
            let y = t.add(a, b)?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "conv2d",
        FaultSite::Conv2d,
        vec![rand_tensor(r, &[5, 5, 2], 1.0), rand_tensor(r, &[3, 3, 2, 3], 1.0), rand_tensor(r, &[3], 1.0)],
        Box::new(move |t, v| {
            let a = t.conv2d_dilated(v[0], v[1], v[2], 1)?;
            let b = t.conv2d_dilated(v[0], v[1], v[2], 2)?;
            let c = t.conv2d_dilated(v[0], v[1], v[2], 3)?;
            let y = t.concat(&[a, b, c], 2)?;
            project(t, y, p)
        }),
    ));
    checks.push(check(
        "bilstm",
        FaultSite::Lstm,
        vec![
            rand_tensor(r, &[3, 2], 1.0),
            rand_tensor(r, &[2, 8], 0.7),
            rand_tensor(r, &[2, 8], 0.7),
            rand_tensor(r, &[8], 0.5),
            rand_tensor(r, &[2, 8], 0.7),
            rand_tensor(r, &[2, 8], 0.7),
            rand_tensor(r, &[8], 0.5),
        ],
        Box::new(move |t, v| {
            let fwd = LstmVars {
                w_ih: v[1],
                w_hh: v[2],
                bias: v[3],
            };
            let bwd = LstmVars {
                w_ih: v[4],
                w_hh: v[5],
                bias: v[6],
            };
            let y = bilstm(t, v[0], fwd, bwd)?;
            project(t, y, p)
        }),
    ));
    let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
    checks.push(check(
        "masked_cross_entropy",
        FaultSite::CrossEntropy,
        vec![rand_tensor(r, &[2, 3, 4], 2.0)],
        Box::new(move |t, v| {
            let probs = t.softmax(v[0], 2)?;
            let mask = [true, false, true, true, false, true];
            t.masked_cross_entropy(probs, &labels, &mask, None)
        }),
    ));
    checks
}
