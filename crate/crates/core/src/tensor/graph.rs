use std::collections::HashMap;
use std::fmt;

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    MulRow,
    ConcatCols,
    StackTokens,
    MeanTokens,
    SoftmaxRows,
    Sigmoid,
    Gelu,
    LayerNorm,
    Attention,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddRow,
        OpKind::MulRow,
        OpKind::ConcatCols,
        OpKind::StackTokens,
        OpKind::MeanTokens,
        OpKind::SoftmaxRows,
        OpKind::Sigmoid,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Attention,
        OpKind::Sum,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::ConcatCols => "concat_cols",
            OpKind::StackTokens => "stack_tokens",
            OpKind::MeanTokens => "mean_tokens",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Attention => "attention",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::DIFFERENTIABLE
            .iter()
            .copied()
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Elementwise binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ConcatCols(Vec<Var>),
    StackTokens {
        parts: Vec<(Var, usize)>,
        batch: usize,
    },
    MeanTokens {
        x: Var,
        batch: usize,
        len: usize,
    },
    SoftmaxRows(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        /// Normalized activations and per-row inverse std, kept for backward.
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        q_len: usize,
        kv_len: usize,
        heads: usize,
        /// Softmax weights, laid out `[batch][head][q_len][kv_len]`.
        probs: Vec<f64>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::StackTokens { .. } => OpKind::StackTokens,
            Op::MeanTokens { .. } => OpKind::MeanTokens,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Gelu(_) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Attention { .. } => OpKind::Attention,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// A recording tape. Build one per forward pass, call [`Graph::backward`] on a
/// scalar output, then read leaf gradients or push them into a
/// [`ParameterSet`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    fault: Option<OpKind>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn dim_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension {
        op,
        left: a,
        right: b,
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
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

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
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

    /// Test hook: scale the backward contribution of every `kind` node by 1.5.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter as a differentiable leaf. Binding the same name
    /// twice returns the same node, so tied weights share one gradient.
    pub fn param(&mut self, ps: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = ps
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let mut value = t.clone();
        value.zero_grad();
        let v = self.variable(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Softmax weights of an attention node, `[batch][head][q_len][kv_len]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Adds the gradients of every bound parameter into `ps`.
    pub fn store_grads(&self, ps: &mut ParameterSet) -> Result<()> {
        for (name, v) in &self.params {
            let n = &self.nodes[v.0];
            let zeros;
            let g = match &n.grad {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![0.0; n.value.len()];
                    &zeros
                }
            };
            ps.get_mut(name)
                .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
                .accumulate_grad(g);
        }
        Ok(())
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(dim_err("matmul", (n, k), (k2, m)));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(
            self.value(a).values(),
            self.value(b).values(),
            &mut out,
            n,
            k,
            m,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(n, m, out)?, Op::MatMul(a, b), rg))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let name = match kind {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
        };
        if sa != sb {
            return Err(dim_err(name, sa, sb));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let out: Vec<f64> = match kind {
            Elementwise::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Elementwise::Sub => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
            Elementwise::Mul => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
        };
        let op = match kind {
            Elementwise::Add => Op::Add(a, b),
            Elementwise::Sub => Op::Sub(a, b),
            Elementwise::Mul => Op::Mul(a, b),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(sa.0, sa.1, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.values().iter().map(|x| x * c).collect();
        let (r, k) = t.shape();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::from_vec(r, k, out).expect("shape preserved"),
            Op::Scale(a, c),
            rg,
        )
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let (n, m) = self.shape(a);
        let sr = self.shape(row);
        if sr != (1, m) {
            return Err(dim_err(if mul { "mul_row" } else { "add_row" }, (n, m), sr));
        }
        let rv = self.value(row).values().to_vec();
        let mut out = self.value(a).values().to_vec();
        for r in 0..n {
            for (o, b) in out[r * m..(r + 1) * m].iter_mut().zip(&rv) {
                if mul {
                    *o *= b;
                } else {
                    *o += b;
                }
            }
        }
        let op = if mul {
            Op::MulRow(a, row)
        } else {
            Op::AddRow(a, row)
        };
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::from_vec(n, m, out)?, op, rg))
    }

    /// `a + 1·row`: adds a 1×m row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    /// Multiplies every row of `a` elementwise by a 1×m row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of zero tensors"))?;
        let rows = self.shape(*first).0;
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != rows {
                return Err(dim_err("concat_cols", (rows, width), s));
            }
            width += s.1;
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_vec(rows, width, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Per-sample token concatenation: for each of `batch` samples, the
    /// sample's rows from every part in order. Each part holds `batch * len`
    /// rows.
    pub fn stack_tokens(&mut self, parts: &[(Var, usize)], batch: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack_tokens of zero tensors"))?;
        let width = self.shape(first.0).1;
        for (p, len) in parts {
            let s = self.shape(*p);
            if s != (batch * len, width) {
                return Err(dim_err("stack_tokens", (batch * len, width), s));
            }
        }
        let total: usize = parts.iter().map(|(_, l)| l).sum();
        let mut out = Vec::with_capacity(batch * total * width);
        for b in 0..batch {
            for (p, len) in parts {
                let v = self.value(*p).values();
                out.extend_from_slice(&v[b * len * width..(b + 1) * len * width]);
            }
        }
        let rg = self.rg(&parts.iter().map(|p| p.0).collect::<Vec<_>>());
        Ok(self.push(
            Tensor::from_vec(batch * total, width, out)?,
            Op::StackTokens {
                parts: parts.to_vec(),
                batch,
            },
            rg,
        ))
    }

    /// Mean over each sample's `len` token rows: `(batch*len) × d -> batch × d`.
    pub fn mean_tokens(&mut self, x: Var, batch: usize, len: usize) -> Result<Var> {
        let (n, d) = self.shape(x);
        if n != batch * len || len == 0 {
            return Err(dim_err("mean_tokens", (n, d), (batch, len)));
        }
        let v = self.value(x).values();
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            for t in 0..len {
                let row = &v[(b * len + t) * d..(b * len + t + 1) * d];
                for (o, x) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(batch, d, out)?,
            Op::MeanTokens { x, batch, len },
            rg,
        ))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, m) = t.shape();
        let mut out = t.values().to_vec();
        for r in 0..n {
            softmax_in_place(&mut out[r * m..(r + 1) * m]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_vec(n, m, out).expect("shape preserved"),
            Op::SoftmaxRows(x),
            rg,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, m) = t.shape();
        let out = t.values().iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_vec(n, m, out).expect("shape preserved"),
            Op::Sigmoid(x),
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, m) = t.shape();
        let out = t
            .values()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_vec(n, m, out).expect("shape preserved"),
            Op::Gelu(x),
            rg,
        )
    }

    /// Row normalization to zero mean and unit variance, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (n, m) = t.shape();
        let mut normed = t.values().to_vec();
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = &mut normed[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(&[x]);
        let value = Tensor::from_vec(n, m, normed.clone()).expect("shape preserved");
        self.push(
            value,
            Op::LayerNorm {
                x,
                normed,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over a batch of token
    /// sequences.
    ///
    /// `q` holds `batch * q_len` rows and `k`, `v` hold `batch * kv_len` rows;
    /// sample `b` only attends within its own block. The width `D` is split
    /// into `heads` contiguous slices of `D / heads` columns and each head uses
    /// the scale `1 / sqrt(D / heads)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        let (nq, d) = self.shape(q);
        let sk = self.shape(k);
        let sv = self.shape(v);
        if sk.1 != d || sv.1 != d {
            return Err(dim_err("attention", (nq, d), if sk.1 != d { sk } else { sv }));
        }
        if sk.0 != sv.0 {
            return Err(dim_err("attention", sk, sv));
        }
        if batch == 0 || nq % batch != 0 || !sk.0.is_multiple_of(batch) || nq == 0 || sk.0 == 0 {
            return Err(dim_err("attention", (nq, sk.0), (batch, batch)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "head count {heads} does not divide width {d}"
            )));
        }
        let q_len = nq / batch;
        let kv_len = sk.0 / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).values();
        let kv = self.value(k).values();
        let vv = self.value(v).values();
        let mut out = vec![0.0; nq * d];
        let mut probs = vec![0.0; batch * heads * q_len * kv_len];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..q_len {
                    let qi = (b * q_len + i) * d + c0;
                    let p = &mut probs[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = (b * kv_len + j) * d + c0;
                        let mut s = 0.0;
                        for c in 0..dh {
                            s += qv[qi + c] * kv[kj + c];
                        }
                        *pj = s * scale;
                    }
                    softmax_in_place(p);
                    let o = &mut out[qi..qi + dh];
                    for (j, pj) in p.iter().enumerate() {
                        let vj = (b * kv_len + j) * d + c0;
                        for (c, oc) in o.iter_mut().enumerate() {
                            *oc += pj * vv[vj + c];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_vec(nq, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                q_len,
                kv_len,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum::<f64>();
        let rg = self.rg(&[x]);
        self.push(Tensor::filled(1, 1, s), Op::Sum(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(logits);
        if targets.len() != n {
            return Err(dim_err("cross_entropy", (n, c), (targets.len(), 1)));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label {
                target: t,
                classes: c,
            });
        }
        let mut probs = self.value(logits).values().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= n.max(1) as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a 1×1 output. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.shape(output) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let fault = if Some(self.nodes[i].op.kind()) == self.fault {
                1.5
            } else {
                1.0
            };
            if let Op::Leaf = self.nodes[i].op {
                let n = &mut self.nodes[i];
                match &mut n.grad {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, g)| *a += g),
                    None => n.grad = Some(gout),
                }
                continue;
            }
            let contributions = self.local_backward(i, &gout);
            for (var, mut g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if fault != 1.0 {
                    g.iter_mut().for_each(|x| *x *= fault);
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to its inputs, given its output
    /// gradient.
    fn local_backward(&self, i: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let (n, m) = node.value.shape();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                let mut out = Vec::new();
                if self.needs(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..m {
                                s += gout[r * m + c] * bv[p * m + c];
                            }
                            da[r * k + p] = s;
                        }
                    }
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        for p in 0..k {
                            let arp = av[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            for c in 0..m {
                                db[p * m + c] += arp * gout[r * m + c];
                            }
                        }
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                vec![
                    (*a, gout.iter().zip(bv).map(|(g, y)| g * y).collect()),
                    (*b, gout.iter().zip(av).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, gout.iter().map(|g| g * c).collect())],
            Op::AddRow(a, row) => {
                let mut dr = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        dr[c] += gout[r * m + c];
                    }
                }
                vec![(*a, gout.to_vec()), (*row, dr)]
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a).values();
                let rv = self.value(*row).values();
                let mut da = gout.to_vec();
                let mut dr = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        da[r * m + c] *= rv[c];
                        dr[c] += gout[r * m + c] * av[r * m + c];
                    }
                }
                vec![(*a, da), (*row, dr)]
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = self.shape(*p).1;
                    let mut g = Vec::with_capacity(n * w);
                    for r in 0..n {
                        g.extend_from_slice(&gout[r * m + off..r * m + off + w]);
                    }
                    off += w;
                    out.push((*p, g));
                }
                out
            }
            Op::StackTokens { parts, batch } => {
                let total: usize = parts.iter().map(|(_, l)| l).sum();
                let mut out: Vec<(Var, Vec<f64>)> = parts
                    .iter()
                    .map(|(p, l)| (*p, Vec::with_capacity(batch * l * m)))
                    .collect();
                for b in 0..*batch {
                    let mut row = b * total;
                    for (slot, (_, len)) in out.iter_mut().zip(parts) {
                        slot.1
                            .extend_from_slice(&gout[row * m..(row + len) * m]);
                        row += len;
                    }
                }
                out
            }
            Op::MeanTokens { x, batch, len } => {
                let inv = 1.0 / *len as f64;
                let mut g = vec![0.0; batch * len * m];
                for b in 0..*batch {
                    for t in 0..*len {
                        let dst = &mut g[(b * len + t) * m..(b * len + t + 1) * m];
                        for (d, s) in dst.iter_mut().zip(&gout[b * m..(b + 1) * m]) {
                            *d = s * inv;
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.values();
                let mut g = vec![0.0; n * m];
                for r in 0..n {
                    let yr = &y[r * m..(r + 1) * m];
                    let gr = &gout[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        g[r * m + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(*x, g)]
            }
            Op::Sigmoid(x) => {
                let y = node.value.values();
                vec![(
                    *x,
                    gout.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
                )]
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).values();
                vec![(
                    *x,
                    gout.iter()
                        .zip(xv)
                        .map(|(g, &v)| {
                            let u = GELU_C * (v + GELU_A * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect(),
                )]
            }
            Op::LayerNorm {
                x, normed, inv_std, ..
            } => {
                let mut g = vec![0.0; n * m];
                let inv_m = 1.0 / m as f64;
                for r in 0..n {
                    let xh = &normed[r * m..(r + 1) * m];
                    let gr = &gout[r * m..(r + 1) * m];
                    let mean_g = gr.iter().sum::<f64>() * inv_m;
                    let mean_gx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() * inv_m;
                    for c in 0..m {
                        g[r * m + c] = inv_std[r] * (gr[c] - mean_g - xh[c] * mean_gx);
                    }
                }
                vec![(*x, g)]
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                q_len,
                kv_len,
                heads,
                probs,
            } => {
                let d = m;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = self.value(*q).values();
                let kv = self.value(*k).values();
                let vv = self.value(*v).values();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; *kv_len];
                for b in 0..*batch {
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..*q_len {
                            let qi = (b * q_len + i) * d + c0;
                            let p = &probs[((b * heads + h) * q_len + i) * kv_len..][..*kv_len];
                            let go = &gout[qi..qi + dh];
                            for j in 0..*kv_len {
                                let vj = (b * kv_len + j) * d + c0;
                                let mut s = 0.0;
                                for c in 0..dh {
                                    s += go[c] * vv[vj + c];
                                    dv[vj + c] += p[j] * go[c];
                                }
                                dp[j] = s;
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..*kv_len {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = (b * kv_len + j) * d + c0;
                                for c in 0..dh {
                                    dq[qi + c] += ds * kv[kj + c];
                                    dk[kj + c] += ds * qv[qi + c];
                                }
                            }
                        }
                    }
                }
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                vec![(*x, vec![gout[0]; len])]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (rows, c) = self.shape(*logits);
                let scale = gout[0] / rows.max(1) as f64;
                let mut g = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * c + t] -= 1.0;
                }
                g.iter_mut().for_each(|x| *x *= scale);
                vec![(*logits, g)]
            }
        }
    }
}
