//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output tensor and enough saved
//! state to run its backward rule. Nodes are only ever appended, so the tape
//! is topologically ordered by construction and `backward` is a single reverse
//! sweep.

use super::fault::{self, FaultSite};
use super::tensor::Tensor;
use super::Float;
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs in cross-entropy.
pub const LOG_FLOOR: Float = 1e-12;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: Float },
    ScaleBy { a: Var, s: Var, idx: usize },
    Reshape { a: Var },
    Transpose { a: Var, rows: usize, cols: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Softmax { a: Var, axis: usize },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<Float>, rstd: Vec<Float> },
    Embedding { table: Var, ids: Vec<usize> },
    Bilinear { x: Var, u: Var, z: Var },
    BilinearPairs { x: Var, u: Var, z: Var, xu: Vec<Float> },
    PairSum { a: Var, b: Var },
    OuterAffine { gamma: Var, x: Var, beta: Var },
    Conv2d { input: Var, kernel: Var, bias: Var, dilation: usize },
    CrossEntropy { probs: Var, labels: Vec<usize>, mask: Vec<bool>, denom: Float },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Operation recorder for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// (outer, axis length, inner) strides for `axis` of `shape`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_slope(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[Float] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[Float]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Records `t` as a leaf; gradients flow to it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut tensor = t.clone();
        tensor.grad = None;
        self.push_node(tensor, Op::Leaf)
    }

    pub fn param(&mut self, shape: Vec<usize>, data: Vec<Float>) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_grad();
        Ok(self.push_node(t, Op::Leaf))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<Float>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_node(t, Op::Leaf))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Result<Var> {
        let n = shape.iter().product();
        self.constant(shape, vec![0.0; n])
    }

    fn push_node(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<Float>, inputs: &[Var], op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if cfg!(debug_assertions) && !data.iter().all(|v| v.is_finite()) {
            let inputs_finite = inputs.iter().all(|&v| self.tensor(v).is_finite());
            assert!(!inputs_finite, "non-finite output from {op:?} on finite inputs");
        }
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let tensor = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push_node(tensor, op)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let av = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = av[r * cols + c];
            }
        }
        Ok(self.push(vec![cols, rows], out, &[a], Op::Transpose { a, rows, cols }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.is_empty() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), data, &[a], Op::Reshape { a }))
    }

    // ---- elementwise ----------------------------------------------------

    /// `add` and `mul` on equal shapes; `add` also accepts a vector `b`
    /// matching the last axis of `a`, broadcast over the leading axes.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let (av, bv) = (self.value(a), self.value(b));
            let out: Vec<Float> = match kind {
                Elementwise::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
                Elementwise::Mul => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            };
            let op = match kind {
                Elementwise::Add => Op::Add { a, b },
                Elementwise::Mul => Op::Mul { a, b },
            };
            return Ok(self.push(sa, out, &[a, b], op));
        }
        if kind == Elementwise::Add && sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let d = sb[0];
            let bv = self.value(b).to_vec();
            let out: Vec<Float> = self
                .value(a)
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv[i % d])
                .collect();
            return Ok(self.push(sa, out, &[a, b], Op::AddBias { a, bias: b }));
        }
        Err(Error::shape(format!("{kind:?} of {sa:?} and {sb:?}")))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: Float) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a], Op::Scale { a, c }))
    }

    /// `a * s[idx]` where `s` is a recorded vector.
    pub fn scale_by(&mut self, a: Var, s: Var, idx: usize) -> Result<Var> {
        let sv = self.value(s);
        if idx >= sv.len() {
            return Err(Error::Index(format!("scale_by index {idx} of {}", sv.len())));
        }
        let c = sv[idx];
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a, s], Op::ScaleBy { a, s, idx }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: Float = self.value(a).iter().sum();
        Ok(self.push(vec![1], vec![s], &[a], Op::Sum { a }))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| gelu_value(x as f64) as Float)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a], Op::Gelu { a }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a], Op::Sigmoid { a }))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a], Op::Tanh { a }))
    }

    // ---- layout ---------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!("concat {base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.push(shape, out, inputs, op))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(format!("slice [{start}, {start}+{len}) of axis {axis} in {s:?}")));
        }
        let (outer, alen, inner) = split_axis(&s, axis);
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, out, &[a], Op::Slice { a, axis, start }))
    }

    // ---- normalisation --------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("softmax axis {axis} for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| av[idx(k)]).fold(Float::NEG_INFINITY, Float::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (av[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        Ok(self.push(s, out, &[a], Op::Softmax { a, axis }))
    }

    /// Softmax over the last axis where positions with `keep[k] == false` are
    /// excluded: they get probability exactly 0 and never affect the others.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let len = *s.last().unwrap();
        if keep.len() != len {
            return Err(Error::shape(format!("softmax mask of {} for {s:?}", keep.len())));
        }
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for (row, orow) in av.chunks(len).zip(out.chunks_mut(len)) {
            let max = row
                .iter()
                .zip(keep.iter())
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(Float::NEG_INFINITY, Float::max);
            if max == Float::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for k in 0..len {
                if keep[k] {
                    let e = (row[k] - max).exp();
                    orow[k] = e;
                    z += e;
                }
            }
            for k in 0..len {
                if keep[k] {
                    orow[k] /= z;
                }
            }
        }
        // The plain softmax backward rule is exact here: masked outputs are 0.
        let axis = s.len() - 1;
        Ok(self.push(s, out, &[a], Op::Softmax { a, axis }))
    }

    /// Standardizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Float) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm of {s:?} with gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Float>() / d as Float;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / d as Float;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for k in 0..d {
                let h = (row[k] - mean) * inv;
                xhat[r * d + k] = h;
                out[r * d + k] = gv[k] * h + bv[k];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(s, out, &[x, gamma, beta], op))
    }

    // ---- lookups and structured products --------------------------------

    /// Gathers rows of `table` ([v, d]); output shape is `ids_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape(format!("embedding table must be 2-D, got {s:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(format!("{} ids for shape {ids_shape:?}", ids.len())));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("embedding id {bad} out of range for {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(shape, out, &[table], op))
    }

    /// `s[c] = xᵀ U[:, c, :] z` for x: [d1], U: [d1, C, d2], z: [d2].
    pub fn bilinear(&mut self, x: Var, u: Var, z: Var) -> Result<Var> {
        let (sx, su, sz) = (self.shape(x), self.shape(u), self.shape(z));
        if sx.len() != 1 || sz.len() != 1 || su.len() != 3 || su[0] != sx[0] || su[2] != sz[0] {
            return Err(Error::shape(format!("bilinear x {sx:?} U {su:?} z {sz:?}")));
        }
        let (d1, c, d2) = (su[0], su[1], su[2]);
        let (xv, uv, zv) = (self.value(x), self.value(u), self.value(z));
        let mut out = vec![0.0; c];
        for a in 0..d1 {
            for (k, o) in out.iter_mut().enumerate() {
                let base = (a * c + k) * d2;
                let inner: Float = uv[base..base + d2].iter().zip(zv).map(|(w, z)| w * z).sum();
                *o += xv[a] * inner;
            }
        }
        Ok(self.push(vec![c], out, &[x, u, z], Op::Bilinear { x, u, z }))
    }

    /// Bilinear scores for every row pair: `out[i, j, c] = X[i]ᵀ U[:, c, :] Z[j]`
    /// for X: [n, d1], Z: [m, d2]; output [n, m, C].
    pub fn bilinear_pairs(&mut self, x: Var, u: Var, z: Var) -> Result<Var> {
        let (sx, su, sz) = (self.shape(x), self.shape(u), self.shape(z));
        if sx.len() != 2 || sz.len() != 2 || su.len() != 3 || su[0] != sx[1] || su[2] != sz[1] {
            return Err(Error::shape(format!("bilinear_pairs X {sx:?} U {su:?} Z {sz:?}")));
        }
        let (n, m) = (sx[0], sz[0]);
        let (d1, c, d2) = (su[0], su[1], su[2]);
        let (xv, uv, zv) = (self.value(x), self.value(u), self.value(z));
        // xu[i, c, b] = sum_a X[i, a] U[a, c, b]
        let mut xu = vec![0.0; n * c * d2];
        for i in 0..n {
            let dst = &mut xu[i * c * d2..(i + 1) * c * d2];
            for a in 0..d1 {
                let xa = xv[i * d1 + a];
                for (t, w) in dst.iter_mut().zip(&uv[a * c * d2..(a + 1) * c * d2]) {
                    *t += xa * w;
                }
            }
        }
        let mut out = vec![0.0; n * m * c];
        for i in 0..n {
            for j in 0..m {
                let zj = &zv[j * d2..(j + 1) * d2];
                for k in 0..c {
                    let t = &xu[(i * c + k) * d2..(i * c + k + 1) * d2];
                    out[(i * m + j) * c + k] = t.iter().zip(zj).map(|(p, q)| p * q).sum();
                }
            }
        }
        let op = Op::BilinearPairs { x, u, z, xu };
        Ok(self.push(vec![n, m, c], out, &[x, u, z], op))
    }

    /// `out[i, j, :] = A[i, :] + B[j, :]` for A: [n, c], B: [m, c].
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(format!("pair_sum {sa:?} and {sb:?}")));
        }
        let (n, m, c) = (sa[0], sb[0], sa[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * m * c);
        for i in 0..n {
            for j in 0..m {
                out.extend((0..c).map(|k| av[i * c + k] + bv[j * c + k]));
            }
        }
        Ok(self.push(vec![n, m, c], out, &[a, b], Op::PairSum { a, b }))
    }

    /// `out[i, j, :] = gamma[i, :] * x[j, :] + beta[i, :]`, the per-row
    /// conditioned affine map used to build a pair grid.
    pub fn outer_affine(&mut self, gamma: Var, x: Var, beta: Var) -> Result<Var> {
        let (sg, sx, sb) = (self.shape(gamma), self.shape(x), self.shape(beta));
        if sg.len() != 2 || sx.len() != 2 || sg != sb || sg[1] != sx[1] {
            return Err(Error::shape(format!("outer_affine gamma {sg:?} x {sx:?} beta {sb:?}")));
        }
        let (n, m, d) = (sg[0], sx[0], sg[1]);
        let (gv, xv, bv) = (self.value(gamma), self.value(x), self.value(beta));
        let mut out = Vec::with_capacity(n * m * d);
        for i in 0..n {
            let (g, b) = (&gv[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]);
            for j in 0..m {
                let xr = &xv[j * d..(j + 1) * d];
                out.extend((0..d).map(|k| g[k] * xr[k] + b[k]));
            }
        }
        Ok(self.push(vec![n, m, d], out, &[gamma, x, beta], Op::OuterAffine { gamma, x, beta }))
    }

    /// 3×3 dilated cross-correlation over an [h, w, c_in] grid with zero
    /// padding of width `dilation`, so the output is [h, w, c_out].
    pub fn conv2d_dilated(&mut self, input: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::config("dilation must be positive"));
        }
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if si.len() != 3
            || sk.len() != 4
            || sk[0] != 3
            || sk[1] != 3
            || sk[2] != si[2]
            || sb != [sk[3]]
        {
            return Err(Error::shape(format!("conv2d input {si:?} kernel {sk:?} bias {sb:?}")));
        }
        let (h, w, cin, cout) = (si[0], si[1], si[2], sk[3]);
        let (iv, kv, bv) = (self.value(input), self.value(kernel), self.value(bias));
        let cells = h * w;
        let icm = to_channel_major(iv, cells, cin);
        let mut ocm = vec![0.0; cout * cells];
        for (co, row) in ocm.chunks_exact_mut(cells).enumerate() {
            row.fill(bv[co]);
        }
        for tap in 0..9 {
            let Some(t) = TapWindow::new(tap, h, w, dilation) else { continue };
            for ci in 0..cin {
                let src = &icm[ci * cells..(ci + 1) * cells];
                for co in 0..cout {
                    let k = kv[(tap * cin + ci) * cout + co];
                    if k == 0.0 {
                        continue;
                    }
                    let dst = &mut ocm[co * cells..(co + 1) * cells];
                    t.for_rows(|o, i, len| {
                        dst[o..o + len].iter_mut().zip(&src[i..i + len]).for_each(|(d, s)| *d += k * s);
                    });
                }
            }
        }
        let out = from_channel_major(&ocm, cells, cout);
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            dilation,
        };
        Ok(self.push(vec![h, w, cout], out, &[input, kernel, bias], op))
    }

    /// `-(1/denom) Σ_{mask} log max(probs[r, labels[r]], LOG_FLOOR)` over the
    /// rows of `probs` flattened to [R, C]. `denom` defaults to the number of
    /// unmasked rows.
    pub fn masked_cross_entropy(
        &mut self,
        probs: Var,
        labels: &[usize],
        mask: &[bool],
        denom: Option<Float>,
    ) -> Result<Var> {
        let s = self.shape(probs);
        let c = *s.last().unwrap();
        let rows = self.value(probs).len() / c;
        if labels.len() != rows || mask.len() != rows {
            return Err(Error::shape(format!(
                "cross entropy over {rows} rows with {} labels and {} mask cells",
                labels.len(),
                mask.len()
            )));
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(Error::contract("cross entropy mask has no supervised cells"));
        }
        if let Some((r, &l)) = labels.iter().enumerate().find(|(r, &l)| mask[*r] && l >= c) {
            return Err(Error::Index(format!("label {l} at row {r} for {c} classes")));
        }
        let denom = denom.unwrap_or(active as Float);
        let pv = self.value(probs);
        let total: Float = (0..rows)
            .filter(|&r| mask[r])
            .map(|r| pv[r * c + labels[r]].max(LOG_FLOOR).ln())
            .sum();
        let op = Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
            mask: mask.to_vec(),
            denom,
        };
        Ok(self.push(vec![1], vec![-total / denom], &[probs], op))
    }

    // ---- backward -------------------------------------------------------

    /// Fills `grad` on every requires-grad ancestor of `loss`. Grads from a
    /// previous call are replaced, not accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        let mut grads: Vec<Option<Vec<Float>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].tensor.requires_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            self.nodes[idx].tensor.grad = Some(g);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let val = |v: Var| -> &[Float] { &nodes[v.0].tensor.data };
        let wants = |v: Var| nodes[v.0].tensor.requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [Float])| {
            if !nodes[v.0].tensor.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].tensor.data.len()]);
            f(slot);
        };
        let out = &node.tensor.data;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let f = fault::factor(FaultSite::MatMul);
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    // dA = G·Bᵀ as row updates against Bᵀ, which vectorizes
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bv[p * n + j];
                        }
                    }
                    acc(a, &mut |da| {
                        for i in 0..m {
                            let drow = &mut da[i * k..(i + 1) * k];
                            for j in 0..n {
                                let x = f * g[i * n + j];
                                if x == 0.0 {
                                    continue;
                                }
                                for (d, &w) in drow.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                                    *d += x * w;
                                }
                            }
                        }
                    });
                }
                if wants(b) {
                    acc(b, &mut |db| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = f * av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += x * gv;
                                }
                            }
                        }
                    });
                }
            }
            &Op::Add { a, b } => {
                let f = fault::factor(FaultSite::Elementwise);
                for v in [a, b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += f * g));
                }
            }
            &Op::AddBias { a, bias } => {
                let f = fault::factor(FaultSite::Elementwise);
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += f * g));
                acc(bias, &mut |d| {
                    let n = d.len();
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += f * gv;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let f = fault::factor(FaultSite::Elementwise);
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += f * g[i] * bv[i];
                    }
                });
                acc(b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += f * g[i] * av[i];
                    }
                });
            }
            &Op::Scale { a, c } => {
                let f = fault::factor(FaultSite::Elementwise);
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += f * c * g));
            }
            &Op::ScaleBy { a, s, idx } => {
                let f = fault::factor(FaultSite::Elementwise);
                let c = val(s)[idx];
                let av = val(a);
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += f * c * g));
                acc(s, &mut |d| {
                    d[idx] += f * av.iter().zip(g).map(|(x, g)| x * g).sum::<Float>();
                });
            }
            &Op::Sum { a } => {
                acc(a, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            &Op::Reshape { a } => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            &Op::Transpose { a, rows, cols } => {
                let f = fault::factor(FaultSite::MatMul);
                acc(a, &mut |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] += f * g[c * rows + r];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let f = fault::factor(FaultSite::Concat);
                let (outer, total, inner) = split_axis(&node.tensor.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].tensor.shape[*axis];
                    acc(v, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += f * s);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let (outer, len, inner) = split_axis(&node.tensor.shape, axis);
                let alen = nodes[a.0].tensor.shape[axis];
                acc(a, &mut |d| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        d[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            &Op::Softmax { a, axis } => {
                let f = fault::factor(FaultSite::Softmax);
                let (outer, len, inner) = split_axis(&node.tensor.shape, axis);
                acc(a, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: Float = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            for k in 0..len {
                                d[idx(k)] += f * out[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::Gelu { a } => {
                let f = fault::factor(FaultSite::Gelu);
                let av = val(a);
                acc(a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += f * g[i] * gelu_slope(av[i] as f64) as Float;
                    }
                });
            }
            &Op::Sigmoid { a } => {
                let f = fault::factor(FaultSite::Lstm);
                acc(a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += f * g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            &Op::Tanh { a } => {
                let f = fault::factor(FaultSite::Lstm);
                acc(a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += f * g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let f = fault::factor(FaultSite::LayerNorm);
                let gv = val(*gamma);
                let dd = gv.len();
                acc(*gamma, &mut |d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % dd] += f * gi * xhat[i];
                    }
                });
                acc(*beta, &mut |d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % dd] += f * gi;
                    }
                });
                acc(*x, &mut |d| {
                    for (r, &inv) in rstd.iter().enumerate() {
                        let rows = r * dd..(r + 1) * dd;
                        let gr = &g[rows.clone()];
                        let hr = &xhat[rows.clone()];
                        let dh: Vec<Float> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let mean_dh = dh.iter().sum::<Float>() / dd as Float;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<Float>() / dd as Float;
                        for k in 0..dd {
                            d[r * dd + k] += f * inv * (dh[k] - mean_dh - hr[k] * mean_dhh);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let f = fault::factor(FaultSite::Embedding);
                let dd = nodes[table.0].tensor.shape[1];
                acc(*table, &mut |d| {
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g[row * dd..(row + 1) * dd];
                        d[id * dd..(id + 1) * dd]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += f * s);
                    }
                });
            }
            &Op::Bilinear { x, u, z } => {
                let f = fault::factor(FaultSite::Bilinear);
                let su = &nodes[u.0].tensor.shape;
                let (d1, c, d2) = (su[0], su[1], su[2]);
                let (xv, uv, zv) = (val(x), val(u), val(z));
                acc(x, &mut |d| {
                    for a in 0..d1 {
                        for k in 0..c {
                            let base = (a * c + k) * d2;
                            let inner: Float = uv[base..base + d2].iter().zip(zv).map(|(w, z)| w * z).sum();
                            d[a] += f * g[k] * inner;
                        }
                    }
                });
                acc(z, &mut |d| {
                    for a in 0..d1 {
                        for k in 0..c {
                            let s = f * g[k] * xv[a];
                            let base = (a * c + k) * d2;
                            for b in 0..d2 {
                                d[b] += s * uv[base + b];
                            }
                        }
                    }
                });
                acc(u, &mut |d| {
                    for a in 0..d1 {
                        for k in 0..c {
                            let s = f * g[k] * xv[a];
                            let base = (a * c + k) * d2;
                            for b in 0..d2 {
                                d[base + b] += s * zv[b];
                            }
                        }
                    }
                });
            }
            Op::BilinearPairs { x, u, z, xu } => {
                let f = fault::factor(FaultSite::Bilinear);
                let (x, u, z) = (*x, *u, *z);
                let (n, m) = (nodes[x.0].tensor.shape[0], nodes[z.0].tensor.shape[0]);
                let su = &nodes[u.0].tensor.shape;
                let (d1, c, d2) = (su[0], su[1], su[2]);
                let (xv, uv, zv) = (val(x), val(u), val(z));
                // d_xu[i, c, b] = sum_j g[i, j, c] Z[j, b]
                let mut dxu = vec![0.0; n * c * d2];
                for i in 0..n {
                    for j in 0..m {
                        let zj = &zv[j * d2..(j + 1) * d2];
                        for k in 0..c {
                            let gv = f * g[(i * m + j) * c + k];
                            if gv == 0.0 {
                                continue;
                            }
                            let dst = &mut dxu[(i * c + k) * d2..(i * c + k + 1) * d2];
                            dst.iter_mut().zip(zj).for_each(|(d, z)| *d += gv * z);
                        }
                    }
                }
                acc(z, &mut |d| {
                    for i in 0..n {
                        for j in 0..m {
                            let dst = &mut d[j * d2..(j + 1) * d2];
                            for k in 0..c {
                                let gv = f * g[(i * m + j) * c + k];
                                if gv == 0.0 {
                                    continue;
                                }
                                let t = &xu[(i * c + k) * d2..(i * c + k + 1) * d2];
                                dst.iter_mut().zip(t).for_each(|(d, t)| *d += gv * t);
                            }
                        }
                    }
                });
                acc(x, &mut |d| {
                    for i in 0..n {
                        let dt = &dxu[i * c * d2..(i + 1) * c * d2];
                        for a in 0..d1 {
                            let ua = &uv[a * c * d2..(a + 1) * c * d2];
                            d[i * d1 + a] += dt.iter().zip(ua).map(|(p, q)| p * q).sum::<Float>();
                        }
                    }
                });
                acc(u, &mut |d| {
                    for i in 0..n {
                        let dt = &dxu[i * c * d2..(i + 1) * c * d2];
                        for a in 0..d1 {
                            let xa = xv[i * d1 + a];
                            if xa == 0.0 {
                                continue;
                            }
                            d[a * c * d2..(a + 1) * c * d2]
                                .iter_mut()
                                .zip(dt)
                                .for_each(|(d, t)| *d += xa * t);
                        }
                    }
                });
            }
            &Op::PairSum { a, b } => {
                let f = fault::factor(FaultSite::Elementwise);
                let s = &node.tensor.shape;
                let (n, m, c) = (s[0], s[1], s[2]);
                acc(a, &mut |d| {
                    for i in 0..n {
                        for j in 0..m {
                            for k in 0..c {
                                d[i * c + k] += f * g[(i * m + j) * c + k];
                            }
                        }
                    }
                });
                acc(b, &mut |d| {
                    for i in 0..n {
                        for j in 0..m {
                            for k in 0..c {
                                d[j * c + k] += f * g[(i * m + j) * c + k];
                            }
                        }
                    }
                });
            }
            &Op::OuterAffine { gamma, x, beta } => {
                let f = fault::factor(FaultSite::LayerNorm);
                let s = &node.tensor.shape;
                let (n, m, dd) = (s[0], s[1], s[2]);
                let (gv, xv) = (val(gamma), val(x));
                acc(gamma, &mut |d| {
                    for i in 0..n {
                        for j in 0..m {
                            for k in 0..dd {
                                d[i * dd + k] += f * g[(i * m + j) * dd + k] * xv[j * dd + k];
                            }
                        }
                    }
                });
                acc(beta, &mut |d| {
                    for i in 0..n {
                        for j in 0..m {
                            for k in 0..dd {
                                d[i * dd + k] += f * g[(i * m + j) * dd + k];
                            }
                        }
                    }
                });
                acc(x, &mut |d| {
                    for i in 0..n {
                        for j in 0..m {
                            for k in 0..dd {
                                d[j * dd + k] += f * g[(i * m + j) * dd + k] * gv[i * dd + k];
                            }
                        }
                    }
                });
            }
            &Op::Conv2d {
                input,
                kernel,
                bias,
                dilation,
            } => {
                let f = fault::factor(FaultSite::Conv2d);
                let si = &nodes[input.0].tensor.shape;
                let (h, w, cin) = (si[0], si[1], si[2]);
                let cout = nodes[kernel.0].tensor.shape[3];
                let (iv, kv) = (val(input), val(kernel));
                let cells = h * w;
                let gcm = to_channel_major(g, cells, cout);
                acc(bias, &mut |d| {
                    for (co, row) in gcm.chunks_exact(cells).enumerate() {
                        d[co] += f * row.iter().sum::<Float>();
                    }
                });
                if wants(input) {
                    let mut dcm = vec![0.0; cin * cells];
                    for tap in 0..9 {
                        let Some(t) = TapWindow::new(tap, h, w, dilation) else { continue };
                        for ci in 0..cin {
                            let dst = &mut dcm[ci * cells..(ci + 1) * cells];
                            for co in 0..cout {
                                let k = f * kv[(tap * cin + ci) * cout + co];
                                if k == 0.0 {
                                    continue;
                                }
                                let gr = &gcm[co * cells..(co + 1) * cells];
                                t.for_rows(|o, i, len| {
                                    dst[i..i + len].iter_mut().zip(&gr[o..o + len]).for_each(|(d, g)| *d += k * g);
                                });
                            }
                        }
                    }
                    let dl = from_channel_major(&dcm, cells, cin);
                    acc(input, &mut |d| d.iter_mut().zip(&dl).for_each(|(d, x)| *d += x));
                }
                if wants(kernel) {
                    let icm = to_channel_major(iv, cells, cin);
                    acc(kernel, &mut |d| {
                        for tap in 0..9 {
                            let Some(t) = TapWindow::new(tap, h, w, dilation) else { continue };
                            for ci in 0..cin {
                                let src = &icm[ci * cells..(ci + 1) * cells];
                                for co in 0..cout {
                                    let gr = &gcm[co * cells..(co + 1) * cells];
                                    let mut s = 0.0;
                                    t.for_rows(|o, i, len| s += dot(&gr[o..o + len], &src[i..i + len]));
                                    d[(tap * cin + ci) * cout + co] += f * s;
                                }
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                probs,
                labels,
                mask,
                denom,
            } => {
                let f = fault::factor(FaultSite::CrossEntropy);
                let pv = val(*probs);
                let c = pv.len() / labels.len();
                acc(*probs, &mut |d| {
                    for (r, (&l, &m)) in labels.iter().zip(mask).enumerate() {
                        let p = pv[r * c + l];
                        if m && p > LOG_FLOOR {
                            d[r * c + l] -= f * g[0] / (denom * p);
                        }
                    }
                });
            }
        }
    }
}

/// Visits the in-bounds taps of a 3×3 kernel centred at (y, x); `tap` is the
/// row-major kernel position `ky * 3 + kx`.
#[inline]
/// [cells, c] -> [c, cells]
fn to_channel_major(v: &[Float], cells: usize, c: usize) -> Vec<Float> {
    let mut out = vec![0.0; v.len()];
    for p in 0..cells {
        for k in 0..c {
            out[k * cells + p] = v[p * c + k];
        }
    }
    out
}

/// [c, cells] -> [cells, c]
fn from_channel_major(v: &[Float], cells: usize, c: usize) -> Vec<Float> {
    let mut out = vec![0.0; v.len()];
    for k in 0..c {
        for p in 0..cells {
            out[p * c + k] = v[k * cells + p];
        }
    }
    out
}

/// Dot product with four independent accumulators.
fn dot(a: &[Float], b: &[Float]) -> Float {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: Float = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Output cells of one 3×3 tap whose source lies inside the grid. Output
/// (y, x) reads source (y + dy, x + dx).
struct TapWindow {
    w: usize,
    dy: isize,
    dx: isize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl TapWindow {
    fn new(tap: usize, h: usize, w: usize, dilation: usize) -> Option<Self> {
        let dy = (tap / 3) as isize - 1;
        let dx = (tap % 3) as isize - 1;
        let (dy, dx) = (dy * dilation as isize, dx * dilation as isize);
        let range = |d: isize, n: usize| {
            let lo = (-d).max(0) as usize;
            let hi = (n as isize - d).min(n as isize).max(0) as usize;
            (lo, hi)
        };
        let (y0, y1) = range(dy, h);
        let (x0, x1) = range(dx, w);
        (y0 < y1 && x0 < x1).then_some(TapWindow { w, dy, dx, y0, y1, x0, x1 })
    }

    /// Calls `f(out_offset, src_offset, len)` for each contiguous row run.
    fn for_rows(&self, mut f: impl FnMut(usize, usize, usize)) {
        let len = self.x1 - self.x0;
        for y in self.y0..self.y1 {
            let o = y * self.w + self.x0;
            let sy = (y as isize + self.dy) as usize;
            let i = sy * self.w + (self.x0 as isize + self.dx) as usize;
            f(o, i, len);
        }
    }
}
