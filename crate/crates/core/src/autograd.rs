//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`] holding its value and the
//! handles of its inputs. [`Tape::backward`] walks the tape in reverse once and
//! returns a [`Gradients`] table. Only first-order derivatives are supported.
//!
//! Most operations act on rank-2 tensors (`rows × cols`); batched token
//! tensors are flattened to `(B·N) × C` by the model code before they reach
//! the tape.

use crate::error::{C2eError, Result};
use crate::linalg;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, transpose_data, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Reshape(Var),
    Tanh(Var),
    Softplus(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Abs(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
    GroupMeanRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Attention(Box<AttentionSaved>),
    LogDet { m: Var, inv: Vec<f64> },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    groups: usize,
    heads: usize,
    /// Softmax probabilities laid out `[group][head][query][key]`.
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path from `v` reached the output.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zeros if unreachable.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, r: Var) -> Result<(usize, usize)> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(r).len() != n {
            return Err(C2eError::dim(op, self.shape(a), self.shape(r)));
        }
        Ok((m, n))
    }

    /// `a[m×n] + r` with `r` holding `n` values broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast("add_row", a, r)?;
        let rv = self.value(r).data();
        let out = Tensor::from_fn(self.shape(a), |i| self.value(a).data()[i] + rv[i % n]);
        Ok(self.push(out, Op::AddRow(a, r), &[a, r]))
    }

    /// `a[m×n] ⊙ r` with `r` holding `n` values broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast("mul_row", a, r)?;
        let rv = self.value(r).data();
        let out = Tensor::from_fn(self.shape(a), |i| self.value(a).data()[i] * rv[i % n]);
        Ok(self.push(out, Op::MulRow(a, r), &[a, r]))
    }

    /// `a[m×n] ⊙ c` with `c` holding `m` values broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(c).len() != m {
            return Err(C2eError::dim("mul_col", self.shape(a), self.shape(c)));
        }
        let cv = self.value(c).data();
        let out = Tensor::from_fn(&[m, n], |i| self.value(a).data()[i] * cv[i / n]);
        Ok(self.push(out, Op::MulCol(a, c), &[a, c]))
    }

    /// `a · s` where `s` is a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(C2eError::dim("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(a).scale(sv);
        Ok(self.push(out, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, f64::recip, Op::Recip(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Column means: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if m == 0 {
            return Err(C2eError::EmptyInput("mean_rows"));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += d[r * n + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let out = Tensor::new(&[1, n], out)?;
        Ok(self.push(out, Op::MeanRows(a), &[a]))
    }

    /// Row sums: `[m×n] → [m×1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let out = Tensor::from_fn(&[m, 1], |r| d[r * n..(r + 1) * n].iter().sum());
        Ok(self.push(out, Op::SumCols(a), &[a]))
    }

    /// Mean over consecutive blocks of `group` rows: `[g·k × n] → [g × n]`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if group == 0 || m % group != 0 {
            return Err(C2eError::Shape(format!(
                "group_mean_rows: {m} rows not divisible into groups of {group}"
            )));
        }
        let g = m / group;
        let d = self.value(a).data();
        let mut out = vec![0.0; g * n];
        for r in 0..m {
            let o = (r / group) * n;
            for c in 0..n {
                out[o + c] += d[r * n + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let out = Tensor::new(&[g, n], out)?;
        Ok(self.push(out, Op::GroupMeanRows(a, group), &[a]))
    }

    /// Row gather; indices may repeat (gradients scatter-add).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, _) = self.value(a).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(C2eError::Shape(format!("gather_rows: index {bad} >= {m} rows")));
        }
        let out = self.value(a).select_rows(idx);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start > end || end > n {
            return Err(C2eError::Shape(format!("slice_cols {start}..{end} of {n}")));
        }
        let w = end - start;
        let d = self.value(a).data();
        let out = Tensor::from_fn(&[m, w], |i| d[(i / w.max(1)) * n + start + i % w.max(1)]);
        Ok(self.push(out, Op::SliceCols(a, start, end), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(C2eError::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(C2eError::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            softmax_into(&d[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    /// Per-row standardization `(x − mean)/sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let d = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = &d[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..n {
                out[r * n + c] = (row[c] - mean) * s;
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::LayerNorm { x, rstd }, &[x]))
    }

    /// Multi-head scaled dot-product attention, tokens grouped in consecutive
    /// blocks of rows (one block per image).
    ///
    /// `q`, `k`, `v` are `[groups·T × C]` with `C` divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Result<Var> {
        let (rows, c) = self.value(q).dims2()?;
        for other in [k, v] {
            if self.shape(other) != self.shape(q) {
                return Err(C2eError::dim("attention", self.shape(q), self.shape(other)));
            }
        }
        if groups == 0 || rows % groups != 0 || heads == 0 || c % heads != 0 {
            return Err(C2eError::Shape(format!(
                "attention: {rows}×{c} with {groups} groups and {heads} heads"
            )));
        }
        let t = rows / groups;
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * c];
        let mut probs = vec![0.0; groups * heads * t * t];
        let mut qh = vec![0.0; t * dh];
        let mut kh = vec![0.0; t * dh];
        let mut vh = vec![0.0; t * dh];
        let mut oh = vec![0.0; t * dh];
        for g in 0..groups {
            for h in 0..heads {
                gather_head(qd, &mut qh, g * t, t, c, h * dh, dh);
                gather_head(kd, &mut kh, g * t, t, c, h * dh, dh);
                gather_head(vd, &mut vh, g * t, t, c, h * dh, dh);
                let p = &mut probs[(g * heads + h) * t * t..(g * heads + h + 1) * t * t];
                let mut s = vec![0.0; t * t];
                matmul_nt_into(&qh, &kh, &mut s, t, dh, t);
                s.iter_mut().for_each(|v| *v *= scale);
                for r in 0..t {
                    softmax_into(&s[r * t..(r + 1) * t], &mut p[r * t..(r + 1) * t]);
                }
                oh.iter_mut().for_each(|v| *v = 0.0);
                matmul_into(p, &vh, &mut oh, t, t, dh);
                scatter_head(&oh, &mut out, g * t, t, c, h * dh, dh);
            }
        }
        let out = Tensor::new(&[rows, c], out)?;
        let saved = AttentionSaved {
            q,
            k,
            v,
            groups,
            heads,
            probs,
        };
        Ok(self.push(out, Op::Attention(Box::new(saved)), &[q, k, v]))
    }

    /// Attention probabilities `[group][head][query][key]` stored by an
    /// [`attention`](Self::attention) node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some((&s.probs, s.groups, s.heads)),
            _ => None,
        }
    }

    /// Differentiable `ln|sym(m) + jitter·I|` via Cholesky.
    pub fn logdet(&mut self, m: Var, jitter: f64) -> Result<Var> {
        let (inv, ld) = linalg::spd_inverse_logdet(self.value(m), jitter)?;
        let out = Tensor::scalar(ld);
        Ok(self.push(
            out,
            Op::LogDet {
                m,
                inv: inv.into_data(),
            },
            &[m],
        ))
    }

    /// Reverse sweep from `output`, seeded with ones (the gradient of `sum(output)`).
    pub fn backward(&self, output: Var) -> Gradients {
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0; self.nodes[output.0].value.len()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn acc_elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        self.acc(grads, v, |s| {
            for (i, (si, &gi)) in s.iter_mut().zip(g).enumerate() {
                *si += f(i, gi);
            }
        });
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.cols();
                self.acc(grads, *a, |s| matmul_nt_into(g, val(*b), s, m, n, k));
                self.acc(grads, *b, |s| matmul_tn_into(val(*a), g, s, m, k, n));
            }
            Op::Add(a, b) => {
                self.acc_elementwise(grads, *a, g, |_, gi| gi);
                self.acc_elementwise(grads, *b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(grads, *a, g, |_, gi| gi);
                self.acc_elementwise(grads, *b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc_elementwise(grads, *a, g, |i, gi| gi * bv[i]);
                self.acc_elementwise(grads, *b, g, |i, gi| gi * av[i]);
            }
            Op::AddRow(a, r) => {
                let n = self.nodes[r.0].value.len();
                self.acc_elementwise(grads, *a, g, |_, gi| gi);
                self.acc(grads, *r, |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi;
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(*a), val(*r));
                let n = rv.len();
                self.acc_elementwise(grads, *a, g, |i, gi| gi * rv[i % n]);
                self.acc(grads, *r, |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi * av[i];
                    }
                });
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (val(*a), val(*c));
                let n = self.nodes[a.0].value.cols();
                self.acc_elementwise(grads, *a, g, |i, gi| gi * cv[i / n]);
                self.acc(grads, *c, |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i / n] += gi * av[i];
                    }
                });
            }
            Op::MulScalar(a, sc) => {
                let (av, sv) = (val(*a), val(*sc)[0]);
                self.acc_elementwise(grads, *a, g, |_, gi| gi * sv);
                self.acc(grads, *sc, |s| {
                    s[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::Scale(a, k) => self.acc_elementwise(grads, *a, g, |_, gi| gi * k),
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.acc_elementwise(grads, *a, g, |_, gi| gi)
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2().unwrap();
                // g is c×r; its transpose is r×c.
                let gt = transpose_data(g, c, r);
                self.acc_elementwise(grads, *a, &gt, |_, gi| gi);
            }
            Op::Tanh(a) => self.acc_elementwise(grads, *a, g, |i, gi| gi * (1.0 - out[i] * out[i])),
            Op::Softplus(a) => {
                let av = val(*a);
                self.acc_elementwise(grads, *a, g, |i, gi| gi * sigmoid(av[i]))
            }
            Op::Gelu(a) => {
                let av = val(*a);
                self.acc_elementwise(grads, *a, g, |i, gi| gi * gelu_grad(av[i]))
            }
            Op::Exp(a) => self.acc_elementwise(grads, *a, g, |i, gi| gi * out[i]),
            Op::Ln(a) => {
                let av = val(*a);
                self.acc_elementwise(grads, *a, g, |i, gi| gi / av[i])
            }
            Op::Square(a) => {
                let av = val(*a);
                self.acc_elementwise(grads, *a, g, |i, gi| 2.0 * gi * av[i])
            }
            Op::Abs(a) => {
                let av = val(*a);
                self.acc_elementwise(grads, *a, g, |i, gi| {
                    if av[i] > 0.0 {
                        gi
                    } else if av[i] < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                })
            }
            Op::Recip(a) => self.acc_elementwise(grads, *a, g, |i, gi| -gi * out[i] * out[i]),
            Op::Sum(a) => self.acc(grads, *a, |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                self.acc(grads, *a, |s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                self.acc(grads, *a, |s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        *x += g[i % n] / m as f64;
                    }
                });
            }
            Op::SumCols(a) => {
                let n = self.nodes[a.0].value.cols();
                self.acc(grads, *a, |s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        *x += g[i / n];
                    }
                });
            }
            Op::GroupMeanRows(a, group) => {
                let n = self.nodes[a.0].value.cols();
                let k = *group as f64;
                self.acc(grads, *a, |s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        let r = i / n;
                        *x += g[(r / group) * n + i % n] / k;
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let n = self.nodes[a.0].value.cols();
                self.acc(grads, *a, |s| {
                    for (o, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            s[src * n + c] += g[o * n + c];
                        }
                    }
                });
            }
            Op::SliceCols(a, start, end) => {
                let n = self.nodes[a.0].value.cols();
                let w = end - start;
                if w > 0 {
                    self.acc(grads, *a, |s| {
                        for (i, gi) in g.iter().enumerate() {
                            s[(i / w) * n + start + i % w] += gi;
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.acc_elementwise(grads, p, &g[off..off + len], |_, gi| gi);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.acc(grads, p, |s| {
                        for (i, x) in s.iter_mut().enumerate() {
                            *x += g[(i / w) * n + col + i % w];
                        }
                    });
                    col += w;
                }
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                self.acc(grads, *a, |s| {
                    for r in 0..node.value.rows() {
                        let y = &out[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            s[r * n + c] += y[c] * (gy[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let n = node.value.cols();
                self.acc(grads, *x, |s| {
                    for (r, &sd) in rstd.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        let mg = gy.iter().sum::<f64>() / n as f64;
                        let mgy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            s[r * n + c] += sd * (gy[c] - mg - y[c] * mgy);
                        }
                    }
                });
            }
            Op::Attention(saved) => self.backprop_attention(saved, g, grads),
            Op::LogDet { m, inv } => {
                self.acc_elementwise(grads, *m, inv, |_, vi| vi * g[0]);
            }
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, c) = self.nodes[s.q.0].value.dims2().unwrap();
        let t = rows / s.groups;
        let dh = c / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.nodes[s.q.0].value.data(),
            self.nodes[s.k.0].value.data(),
            self.nodes[s.v.0].value.data(),
        );
        let mut dq = vec![0.0; rows * c];
        let mut dk = vec![0.0; rows * c];
        let mut dv = vec![0.0; rows * c];
        let mut qh = vec![0.0; t * dh];
        let mut kh = vec![0.0; t * dh];
        let mut vh = vec![0.0; t * dh];
        let mut gh = vec![0.0; t * dh];
        for grp in 0..s.groups {
            for h in 0..s.heads {
                gather_head(qd, &mut qh, grp * t, t, c, h * dh, dh);
                gather_head(kd, &mut kh, grp * t, t, c, h * dh, dh);
                gather_head(vd, &mut vh, grp * t, t, c, h * dh, dh);
                gather_head(g, &mut gh, grp * t, t, c, h * dh, dh);
                let p = &s.probs[(grp * s.heads + h) * t * t..(grp * s.heads + h + 1) * t * t];
                // dV = Pᵀ dO
                let mut dvh = vec![0.0; t * dh];
                matmul_tn_into(p, &gh, &mut dvh, t, t, dh);
                // dP = dO Vᵀ
                let mut dp = vec![0.0; t * t];
                matmul_nt_into(&gh, &vh, &mut dp, t, dh, t);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then scaled
                let mut ds = vec![0.0; t * t];
                for r in 0..t {
                    let pr = &p[r * t..(r + 1) * t];
                    let dpr = &dp[r * t..(r + 1) * t];
                    let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    for j in 0..t {
                        ds[r * t + j] = pr[j] * (dpr[j] - dot) * scale;
                    }
                }
                let mut dqh = vec![0.0; t * dh];
                matmul_into(&ds, &kh, &mut dqh, t, t, dh);
                let mut dkh = vec![0.0; t * dh];
                matmul_tn_into(&ds, &qh, &mut dkh, t, t, dh);
                scatter_head(&dqh, &mut dq, grp * t, t, c, h * dh, dh);
                scatter_head(&dkh, &mut dk, grp * t, t, c, h * dh, dh);
                scatter_head(&dvh, &mut dv, grp * t, t, c, h * dh, dh);
            }
        }
        self.acc_elementwise(grads, s.q, &dq, |_, x| x);
        self.acc_elementwise(grads, s.k, &dk, |_, x| x);
        self.acc_elementwise(grads, s.v, &dv, |_, x| x);
    }
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn gather_head(src: &[f64], dst: &mut [f64], row0: usize, t: usize, c: usize, col0: usize, dh: usize) {
    for r in 0..t {
        let s = (row0 + r) * c + col0;
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

fn scatter_head(src: &[f64], dst: &mut [f64], row0: usize, t: usize, c: usize, col0: usize, dh: usize) {
    for r in 0..t {
        let d = (row0 + r) * c + col0;
        dst[d..d + dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[3, 2], |i| 1.0 + i as f64));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s);
        let expect = Tensor::ones(&[2, 2])
            .matmul(&tape.value(b).transpose().unwrap())
            .unwrap();
        assert_eq!(g.get(a).unwrap(), expect);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 2]));
        let b = tape.leaf(Tensor::ones(&[2, 2]));
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), Tensor::ones(&[2, 2]));
    }

    #[test]
    fn reused_node_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_fn(&[6, 4], |i| (i as f64 * 0.37).sin()));
        let k = tape.leaf(Tensor::from_fn(&[6, 4], |i| (i as f64 * 0.11).cos()));
        let v = tape.leaf(Tensor::ones(&[6, 4]));
        let o = tape.attention(q, k, v, 2, 2).unwrap();
        assert!(tape.value(o).data().iter().all(|x| (x - 1.0).abs() < 1e-12));
        let (p, groups, heads) = tape.attention_probs(o).unwrap();
        assert_eq!((groups, heads, p.len()), (2, 2, 2 * 2 * 9));
    }
}
