//! Central-difference gradient checker.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::Float;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: Float = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar program `f` against central
/// differences for every element of every input with `requires_grad` set.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: Float) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<Float> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        match tape.value(out) {
            [v] => Ok(*v),
            other => Err(Error::contract(format!("grad_check program returned {} values", other.len()))),
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<Float>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[Float]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        for k in 0..t.numel() {
            let orig = probe[ti].data[k];
            probe[ti].data[k] = orig + eps;
            let plus = eval(&probe)?;
            probe[ti].data[k] = orig - eps;
            let minus = eval(&probe)?;
            probe[ti].data[k] = orig;
            let numeric = ((plus - minus) / (2.0 * eps)) as f64;
            let a = analytic[ti][k] as f64;
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((ti, k));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
