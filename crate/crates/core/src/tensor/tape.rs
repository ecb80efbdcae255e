use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for an operation defined outside the tape.
///
/// Returns one entry per input, `None` where the input receives no gradient.
pub trait CustomBackward: Send {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Reshape(Var),
    Softmax(Var),
    Ln(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: Box<dyn CustomBackward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Ordered record of differentiable operations.
///
/// Every operation appends one node; [`Tape::backward`] walks the nodes in
/// exact reverse order, accumulating gradients additively.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; gradient participation follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let mut value = t;
        value.zero_grad();
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Nodes visited by the last backward pass, in visiting order.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.shape(v).last().unwrap_or(&1)
    }

    // ---- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = ops::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let data = ops::transpose(self.value(a).data(), r, c);
        let value = Tensor::new(&[c, r], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, op)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(src.shape(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a `[d]` bias to every row of a `[.. × d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.last_dim(x);
        if self.value(bias).numel() != d {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let d = self.last_dim(x);
        let mut value = self.value(x).detached();
        for row in value.data_mut().chunks_mut(d) {
            ops::softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Elementwise natural logarithm.
    pub fn ln(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(src.shape(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, Op::Ln(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| ops::gelu(v)).collect();
        let value = Tensor::new(src.shape(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Layer normalization over the last axis (epsilon 1e-5 inside the root).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.last_dim(x);
        if d == 0 || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let d = self.last_dim(x);
        let mut value = self.value(x).detached();
        let mut norms = Vec::new();
        for row in value.data_mut().chunks_mut(d) {
            let n = ops::dot(row, row).sqrt().max(NORM_FLOOR);
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::L2Normalize { x, norms }, rg)
    }

    /// Gathers rows of a 2-D tensor; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "select_rows")?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::dim("select_rows", &[r, c], &[i]));
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(&[rows.len(), c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::new(&[rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.value(x).data();
        let data = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let value = Tensor::new(&[r, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(&[r, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x).data();
        let s = src.iter().sum::<f64>() / src.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Multi-head scaled dot-product attention over `groups` independent
    /// sequences stacked along the rows.
    ///
    /// `q`, `k`, `v` are `[groups·T × D]` with `D = heads·dh`; each head sees
    /// columns `h·dh..(h+1)·dh` and scores are scaled by `1/√dh`. The output
    /// is the per-head results concatenated along the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if groups == 0 || heads == 0 || rows % groups != 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention over {rows}×{d} with {groups} groups and {heads} heads"
            )));
        }
        let t = rows / groups;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; groups * heads * t * t];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; t];
        for g in 0..groups {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..t {
                    let qi = &qd[(g * t + i) * d + col..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(g * t + j) * d + col..][..dh];
                        *s = ops::dot(qi, kj) * scale;
                    }
                    ops::softmax_in_place(&mut scores);
                    let base = ((g * heads + h) * t + i) * t;
                    probs[base..base + t].copy_from_slice(&scores);
                    let oi = &mut out[(g * t + i) * d + col..][..dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vd[(g * t + j) * d + col..][..dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits[m×n]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m || m == 0 {
            return Err(Error::dim("cross_entropy", &[m, n], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Label(format!("target {bad} outside [0, {n})")));
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        let mut total = 0.0;
        for (i, row) in src.chunks(n).enumerate() {
            total += ops::log_sum_exp(row) - row[targets[i]];
            ops::softmax_in_place(&mut probs[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Records an externally computed value with a user-supplied backward.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: Box<dyn CustomBackward>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    // ---- reverse pass -------------------------------------------------

    /// Back-propagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Back-propagates an arbitrary upstream gradient into `out`.
    pub fn backward_with(&mut self, out: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::dim("backward_with", self.shape(out), &[seed.len()]));
        }
        self.grads = vec![None; self.nodes.len()];
        self.visited.clear();
        self.grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.visited.push(Var(i));
            for (input, contribution) in self.vjp(i, &g) {
                accumulate(&mut self.grads, &self.nodes, input, contribution);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("2-D");
                let n = val(*b).shape()[1];
                vec![
                    (*a, ops::matmul_nt(g, val(*b).data(), m, n, k)),
                    (*b, ops::matmul_tn(val(*a).data(), g, m, k, n)),
                ]
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().expect("2-D");
                vec![(*a, ops::transpose(g, c, r))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(av).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::AddBias(x, b) => {
                let d = val(*b).numel();
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let s = ops::dot(yr, gr);
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Ln(x) => vec![(*x, g.iter().zip(val(*x).data()).map(|(gg, v)| gg / v).collect())],
            Op::Gelu(x) => vec![(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(gg, &v)| gg * ops::gelu_grad(v))
                    .collect(),
            )],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain).data();
                let d = gv.len();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_d /= d as f64;
                    mean_dh /= d as f64;
                    let out = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (r, ((dr, yr), gr)) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)).enumerate() {
                    let s = ops::dot(yr, gr);
                    for j in 0..d {
                        dr[j] = (gr[j] - yr[j] * s) / norms[r];
                    }
                }
                vec![(*x, dx)]
            }
            Op::SelectRows { x, rows } => {
                let c = val(*x).shape()[1];
                let mut dx = vec![0.0; val(*x).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += g[k * c + j];
                    }
                }
                vec![(*x, dx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = val(*p).numel();
                        let piece = g[offset..offset + n].to_vec();
                        offset += n;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).dims2().expect("2-D");
                let w = node.value.shape()[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let w = val(*p).shape()[1];
                        let mut piece = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            piece.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => attention_vjp(val(*q), val(*k), val(*v), *groups, *heads, probs, g)
                .into_iter()
                .zip([*q, *k, *v])
                .map(|(d, var)| (var, d))
                .collect(),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = val(*logits).shape()[1];
                let m = targets.len();
                let coef = g[0] / m as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * coef).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dz[i * n + t] -= coef;
                }
                vec![(*logits, dz)]
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                backward
                    .backward(&values, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(d, var)| d.map(|d| (*var, d)))
                    .collect()
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contribution: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn attention_vjp(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    groups: usize,
    heads: usize,
    probs: &[f64],
    g: &[f64],
) -> [Vec<f64>; 3] {
    let (rows, d) = q.dims2().expect("2-D");
    let t = rows / groups;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut dp = vec![0.0; t];
    for gi in 0..groups {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..t {
                let base = ((gi * heads + h) * t + i) * t;
                let p = &probs[base..base + t];
                let go = &g[(gi * t + i) * d + col..][..dh];
                for j in 0..t {
                    let vj = &vd[(gi * t + j) * d + col..][..dh];
                    dp[j] = ops::dot(go, vj);
                    let dvj = &mut dv[(gi * t + j) * d + col..][..dh];
                    for (acc, &x) in dvj.iter_mut().zip(go) {
                        *acc += p[j] * x;
                    }
                }
                let s = ops::dot(p, &dp);
                let qi = &qd[(gi * t + i) * d + col..][..dh];
                for j in 0..t {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kd[(gi * t + j) * d + col..][..dh];
                    let dqi = &mut dq[(gi * t + i) * d + col..][..dh];
                    for (acc, &x) in dqi.iter_mut().zip(kj) {
                        *acc += ds * x;
                    }
                    let dkj = &mut dk[(gi * t + j) * d + col..][..dh];
                    for (acc, &x) in dkj.iter_mut().zip(qi) {
                        *acc += ds * x;
                    }
                }
            }
        }
    }
    [dq, dk, dv]
}
