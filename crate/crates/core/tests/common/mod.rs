//! Brute-force oracles shared by the integration tests. Nothing here calls
//! into the code paths it is used to check.
#![allow(dead_code)]

use std::collections::BTreeSet;

/// Direct 6-nested-loop dilated 3×3 cross-correlation with zero padding.
/// input: [h, w, cin], kernel: [3, 3, cin, cout], bias: [cout].
pub fn conv2d_oracle(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    cout: usize,
    bias: &[f64],
    dilation: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            for o in 0..cout {
                let mut acc = bias[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as i64 + (ky as i64 - 1) * dilation as i64;
                        let sx = x as i64 + (kx as i64 - 1) * dilation as i64;
                        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                            continue;
                        }
                        for c in 0..cin {
                            let iv = input[((sy as usize) * w + sx as usize) * cin + c];
                            let kv = kernel[((ky * 3 + kx) * cin + c) * cout + o];
                            acc += iv * kv;
                        }
                    }
                }
                out[(y * w + x) * cout + o] = acc;
            }
        }
    }
    out
}

/// Triple-loop bilinear form s[c] = Σ_a Σ_b x[a] U[a,c,b] z[b].
pub fn bilinear_oracle(x: &[f64], u: &[f64], z: &[f64], d1: usize, c: usize, d2: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for (k, sk) in s.iter_mut().enumerate() {
        for a in 0..d1 {
            for b in 0..d2 {
                *sk += x[a] * u[(a * c + k) * d2 + b] * z[b];
            }
        }
    }
    s
}

pub type Triple = (usize, usize, usize);

/// Precision/recall/F1 by set intersection over (record, start, end, type).
pub fn set_prf(preds: &[Vec<Triple>], golds: &[Vec<Triple>], type_filter: Option<usize>) -> (f64, f64, f64, usize, usize, usize) {
    let flatten = |xs: &[Vec<Triple>]| -> BTreeSet<(usize, Triple)> {
        xs.iter()
            .enumerate()
            .flat_map(|(r, v)| v.iter().map(move |t| (r, *t)))
            .filter(|(_, t)| type_filter.is_none_or(|ty| t.2 == ty))
            .collect()
    };
    let p = flatten(preds);
    let g = flatten(golds);
    let tp = p.intersection(&g).count();
    let fp = p.len() - tp;
    let fn_ = g.len() - tp;
    let prec = if p.is_empty() { 0.0 } else { tp as f64 / p.len() as f64 };
    let rec = if g.is_empty() { 0.0 } else { tp as f64 / g.len() as f64 };
    let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    (prec, rec, f1, tp, fp, fn_)
}

/// Standard normal CDF by composite Simpson quadrature of the density from 0.
pub fn normal_cdf_quadrature(x: f64) -> f64 {
    let n = 20_000;
    let h = x / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x);
    for i in 1..n {
        let t = i as f64 * h;
        s += if i % 2 == 1 { 4.0 * pdf(t) } else { 2.0 * pdf(t) };
    }
    0.5 + s * h / 3.0
}
