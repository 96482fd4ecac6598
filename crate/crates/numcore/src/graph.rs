//! Tape of recorded primitive operations and the reverse sweep over it.
//!
//! Every op appends one node; node indices are therefore a valid
//! topological order and `backward` simply walks them in reverse.

use std::rc::Rc;

use crate::error::NumError;
use crate::kernels::{gemm, View, ViewMut};
use crate::tensor::Tensor;

/// Additive pre-softmax constant standing in for `log 0`.
pub const MASK_BLOCK: f64 = -1e9;

/// A softmax row whose maximum is at or below this is treated as fully masked.
const MASKED_ROW_CEILING: f64 = MASK_BLOCK / 2.0;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied primitive with a hand-written backward rule.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumError>;
    /// Vector-Jacobian product: one gradient per input, each matching that input's length.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Rope {
        x: Var,
        cos: Rc<Vec<f64>>,
        sin: Rc<Vec<f64>>,
        heads: usize,
    },
    Attention(Box<AttentionSaved>),
    Sum(Var),
    Mean(Var),
    Custom(Rc<dyn CustomOp>, Vec<Var>),
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: f64,
    /// Per-head row-major `[lq × lk]` probabilities (empty when nothing needs gradients).
    probs: Vec<f64>,
    /// Rows with no admissible key.
    blocked: Vec<bool>,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn softmax_row(row: &mut [f64]) -> bool {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= MASKED_ROW_CEILING {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
        return true;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
    false
}

/// `ds = p ⊙ (dp − ⟨dp, p⟩)` for one row.
fn softmax_row_backward(p: &[f64], dp: &[f64], ds: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((d, &pi), &gi) in ds.iter_mut().zip(p).zip(dp) {
        *d = pi * (gi - dot);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf; it participates in differentiation iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Moves a leaf's tensor (with its accumulated gradient) out of the graph.
    pub fn take_leaf(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.grad = None);
    }

    // ---- dense algebra -------------------------------------------------

    /// `a[..×k] · b[k×n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return Err(NumError::shape("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape.push(n);
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::dense(self.data(a), m, k),
            View::dense(self.data(b), k, n),
            0.0,
            ViewMut::dense(&mut out, m, n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(NumError::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var, NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::shape(op, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var, NumError> {
        let n = self.value(x).cols();
        if self.value(r).len() != n {
            return Err(NumError::shape(op, self.shape(x), self.shape(r)));
        }
        let rd = self.data(r);
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(rd).map(|(&a, &b)| f(a, b)))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(Tensor::from_parts(shape, out), mk(x, r), rg))
    }

    /// Adds a length-`n` vector to every row of `x[..×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        self.row_broadcast("add_row", x, bias, |a, b| a + b, Op::AddRow)
    }

    /// Multiplies every row of `x[..×n]` element-wise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var, NumError> {
        self.row_broadcast("mul_row", x, gain, |a, b| a * b, Op::MulRow)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, c), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Silu(x), rg)
    }

    /// Softmax along the last axis, max-subtracted. A row whose entries all sit at
    /// the blocking constant yields a uniform row and passes no gradient.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let n = self.value(x).cols();
        let mut out = self.data(x).to_vec();
        out.chunks_exact_mut(n).for_each(|row| {
            softmax_row(row);
        });
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg)
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumError> {
        if eps <= 0.0 {
            return Err(NumError::InvalidArgument {
                op: "layernorm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let n = self.value(x).cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(NumError::shape("layernorm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).rows();
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = vec![0.0; rows * n];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (row, o) in self.data(x).chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                o[j] = (row[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
        ))
    }

    // ---- layout --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        let t = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Concatenates rank-2 tensors along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = *parts.first().ok_or(NumError::InvalidArgument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let n = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).len() != 2 || self.value(p).cols() != n {
                return Err(NumError::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += self.value(p).rows();
            data.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[0] {
            return Err(NumError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{end} of {s:?}"),
            });
        }
        let n = s[1];
        let data = self.data(x)[start * n..end * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![end - start, n], data),
            Op::SliceRows(x, start),
            rg,
        ))
    }

    /// Concatenates rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = *parts.first().ok_or(NumError::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.shape(p).len() != 2 || self.value(p).rows() != rows {
                return Err(NumError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(NumError::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols {start}..{end} of {s:?}"),
            });
        }
        let (rows, n) = (s[0], s[1]);
        let d = self.data(x);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&d[r * n + start..r * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, end - start], data),
            Op::SliceCols(x, start),
            rg,
        ))
    }

    /// Row lookup into a `[vocab × n]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let s = self.shape(table);
        if s.len() != 2 || ids.is_empty() {
            return Err(NumError::InvalidArgument {
                op: "gather_rows",
                msg: format!("table {s:?}, {} ids", ids.len()),
            });
        }
        let (vocab, n) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumError::InvalidArgument {
                op: "gather_rows",
                msg: format!("id {bad} out of range for vocabulary {vocab}"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(self.value(table).row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), n], data),
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    /// Rotates consecutive channel pairs of every head by per-token angles.
    ///
    /// `x` is `[L × heads·dk]`; `cos`/`sin` are `[L × dk/2]` and shared by all heads.
    pub fn rope(
        &mut self,
        x: Var,
        cos: Rc<Vec<f64>>,
        sin: Rc<Vec<f64>>,
        heads: usize,
    ) -> Result<Var, NumError> {
        let s = self.shape(x);
        if s.len() != 2 || heads == 0 || s[1] % (2 * heads) != 0 {
            return Err(NumError::InvalidArgument {
                op: "rope",
                msg: format!("shape {s:?} with {heads} heads"),
            });
        }
        let (l, h) = (s[0], s[1]);
        let half = h / heads / 2;
        if cos.len() != l * half || sin.len() != l * half {
            return Err(NumError::shape("rope", s, &[l, half]));
        }
        let dk = h / heads;
        let d = self.data(x);
        let mut out = vec![0.0; l * h];
        for t in 0..l {
            for hd in 0..heads {
                for i in 0..half {
                    let (c, sn) = (cos[t * half + i], sin[t * half + i]);
                    let base = t * h + hd * dk + 2 * i;
                    let (x0, x1) = (d[base], d[base + 1]);
                    out[base] = x0 * c - x1 * sn;
                    out[base + 1] = x0 * sn + x1 * c;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![l, h], out),
            Op::Rope { x, cos, sin, heads },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention `softmax(QKᵀ/√dk + log M)·V`.
    ///
    /// `q` is `[lq × h]`, `k`/`v` are `[lk × h]`; `mask`, when given, is a row-major
    /// `[lq × lk]` 0/1 matrix shared by all heads, with blocked entries receiving
    /// [`MASK_BLOCK`] before the softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[f64]>,
    ) -> Result<Var, NumError> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(NumError::shape("attention", sq, sk));
        }
        let (lq, lk, h) = (sq[0], sk[0], sq[1]);
        if heads == 0 || h % heads != 0 {
            return Err(NumError::InvalidArgument {
                op: "attention",
                msg: format!("width {h} not divisible into {heads} heads"),
            });
        }
        if let Some(m) = mask {
            if m.len() != lq * lk {
                return Err(NumError::shape("attention", &[lq, lk], &[m.len()]));
            }
        }
        let dk = h / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let blocked: Vec<bool> = match mask {
            Some(m) => m.chunks_exact(lk).map(|r| r.iter().all(|&x| x == 0.0)).collect(),
            None => vec![false; lq],
        };
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let mut out = vec![0.0; lq * h];
        let mut probs = if rg { vec![0.0; heads * lq * lk] } else { Vec::new() };
        let mut scores = vec![0.0; lq * lk];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for hd in 0..heads {
            let c0 = hd * dk;
            gemm(
                scale,
                View::cols_of(qd, lq, h, c0, dk),
                View::cols_of(kd, lk, h, c0, dk).t(),
                0.0,
                ViewMut::dense(&mut scores, lq, lk),
            );
            if let Some(m) = mask {
                for (s, &mv) in scores.iter_mut().zip(m) {
                    if mv == 0.0 {
                        *s += MASK_BLOCK;
                    }
                }
            }
            for (r, row) in scores.chunks_exact_mut(lk).enumerate() {
                if blocked[r] {
                    let u = 1.0 / lk as f64;
                    row.iter_mut().for_each(|x| *x = u);
                } else {
                    softmax_row(row);
                }
            }
            gemm(
                1.0,
                View::dense(&scores, lq, lk),
                View::cols_of(vd, lk, h, c0, dk),
                0.0,
                ViewMut::cols_of(&mut out, lq, h, c0, dk),
            );
            if rg {
                probs[hd * lq * lk..(hd + 1) * lq * lk].copy_from_slice(&scores);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![lq, h], out),
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                heads,
                scale,
                probs,
                blocked,
            })),
            rg,
        ))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean squared difference between `pred` and a target of the same shape.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, NumError> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Var]) -> Result<Var, NumError> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = op.forward(&vals)?;
        let rg = inputs.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::Custom(op, inputs.to_vec()), rg))
    }

    // ---- reverse sweep -------------------------------------------------

    /// Propagates `∂loss/∂·` to every leaf that requires a gradient, adding into
    /// any gradient already stored there.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if !self.value(loss).is_scalar() {
            return Err(NumError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.shape(*b)[0];
                let n = self.shape(*b)[1];
                let m = self.value(*a).len() / k;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        1.0,
                        View::dense(g, m, n),
                        View::dense(self.data(*b), k, n).t(),
                        0.0,
                        ViewMut::dense(&mut da, m, k),
                    );
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        1.0,
                        View::dense(self.data(*a), m, k).t(),
                        View::dense(g, m, n),
                        0.0,
                        ViewMut::dense(&mut db, k, n),
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::AddRow(x, bias) => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.rg(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::MulRow(x, gain) => {
                let n = self.value(*gain).len();
                let gd = self.data(*gain);
                if self.rg(*x) {
                    let d = g
                        .chunks_exact(n)
                        .flat_map(|row| row.iter().zip(gd).map(|(a, b)| a * b))
                        .collect();
                    accumulate(grads, *x, d);
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; n];
                    for (row, xr) in g.chunks_exact(n).zip(self.data(*x).chunks_exact(n)) {
                        for j in 0..n {
                            dg[j] += row[j] * xr[j];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::Silu(x) => {
                let d = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * s * (1.0 + xi * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let mut dx = vec![0.0; out.len()];
                let xin = self.data(*x);
                for ((p, dp), (ds, xr)) in out
                    .data()
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n).zip(xin.chunks_exact(n)))
                {
                    let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if max > MASKED_ROW_CEILING {
                        softmax_row_backward(p, dp, ds);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let n = out.cols();
                let gd = self.data(*gain);
                let xd = self.data(*x);
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                for (r, (xr, gr)) in xd.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        xhat[j] = (xr[j] - mu) * rs;
                        let dxh = gr[j] * gd[j];
                        m1 += dxh;
                        m2 += dxh * xhat[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    let dr = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        dr[j] = rs * (gr[j] * gd[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.rg(*gain) {
                    accumulate(grads, *gain, dgain);
                }
                if self.rg(*bias) {
                    accumulate(grads, *bias, dbias);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        accumulate(grads, p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let n = out.cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + c0..r * total + c0 + w]);
                        }
                        accumulate(grads, p, d);
                    }
                    c0 += w;
                }
            }
            Op::SliceCols(x, start) => {
                let n = self.value(*x).cols();
                let w = out.cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, gr) in g.chunks_exact(w).enumerate() {
                    dx[r * n + start..r * n + start + w].copy_from_slice(gr);
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather(table, ids) => {
                let n = out.cols();
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        dt[id * n + j] += g[r * n + j];
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Rope { x, cos, sin, heads } => {
                let (l, h) = (out.shape()[0], out.shape()[1]);
                let dk = h / heads;
                let half = dk / 2;
                let mut dx = vec![0.0; l * h];
                for t in 0..l {
                    for hd in 0..*heads {
                        for i in 0..half {
                            let (c, s) = (cos[t * half + i], sin[t * half + i]);
                            let base = t * h + hd * dk + 2 * i;
                            let (g0, g1) = (g[base], g[base + 1]);
                            dx[base] = g0 * c + g1 * s;
                            dx[base + 1] = -g0 * s + g1 * c;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention(saved) => self.backprop_attention(saved, g, grads),
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let ds = op.backward(&vals, out, g);
                for (&v, d) in inputs.iter().zip(ds) {
                    if self.rg(v) {
                        accumulate(grads, v, d);
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (lq, h) = (self.shape(s.q)[0], self.shape(s.q)[1]);
        let lk = self.shape(s.k)[0];
        let dk = h / s.heads;
        let (qd, kd, vd) = (self.data(s.q), self.data(s.k), self.data(s.v));
        let mut dq = vec![0.0; lq * h];
        let mut dkey = vec![0.0; lk * h];
        let mut dv = vec![0.0; lk * h];
        let mut dp = vec![0.0; lq * lk];
        let mut ds = vec![0.0; lq * lk];
        for hd in 0..s.heads {
            let c0 = hd * dk;
            let p = &s.probs[hd * lq * lk..(hd + 1) * lq * lk];
            // dV = Pᵀ dO
            gemm(
                1.0,
                View::dense(p, lq, lk).t(),
                View::cols_of(g, lq, h, c0, dk),
                0.0,
                ViewMut::cols_of(&mut dv, lk, h, c0, dk),
            );
            // dP = dO Vᵀ
            gemm(
                1.0,
                View::cols_of(g, lq, h, c0, dk),
                View::cols_of(vd, lk, h, c0, dk).t(),
                0.0,
                ViewMut::dense(&mut dp, lq, lk),
            );
            for r in 0..lq {
                let range = r * lk..(r + 1) * lk;
                if s.blocked[r] {
                    ds[range].iter_mut().for_each(|x| *x = 0.0);
                } else {
                    softmax_row_backward(&p[range.clone()], &dp[range.clone()], &mut ds[range]);
                }
            }
            // dQ = scale · dS K ; dK = scale · dSᵀ Q
            gemm(
                s.scale,
                View::dense(&ds, lq, lk),
                View::cols_of(kd, lk, h, c0, dk),
                0.0,
                ViewMut::cols_of(&mut dq, lq, h, c0, dk),
            );
            gemm(
                s.scale,
                View::dense(&ds, lq, lk).t(),
                View::cols_of(qd, lq, h, c0, dk),
                0.0,
                ViewMut::cols_of(&mut dkey, lk, h, c0, dk),
            );
        }
        if self.rg(s.q) {
            accumulate(grads, s.q, dq);
        }
        if self.rg(s.k) {
            accumulate(grads, s.k, dkey);
        }
        if self.rg(s.v) {
            accumulate(grads, s.v, dv);
        }
    }
}
