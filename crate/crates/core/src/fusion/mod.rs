//! Attention and fusion operators for combining visual and textual token
//! sequences.
//!
//! Every operator works on a [`TokenSeq`]: a batch of equal-length token
//! sequences stacked sample after sample on a [`Graph`]. A single sequence is
//! simply a batch of one.

mod encoder;
mod variant;

pub use encoder::{encoder_block, EncoderLayer, AttnUnit};
pub use variant::{FusionModule, FusionVariant};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, ParameterSet, Tensor, Var};

/// A batch of token sequences: `batch * len` rows of width `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSeq {
    pub var: Var,
    pub batch: usize,
    pub len: usize,
}

impl TokenSeq {
    pub fn new(g: &Graph, var: Var, batch: usize) -> Result<Self> {
        let (rows, cols) = g.shape(var);
        if batch == 0 || rows == 0 || rows % batch != 0 {
            return Err(Error::Dimension {
                op: "token_seq",
                left: (rows, cols),
                right: (batch, 0),
            });
        }
        Ok(TokenSeq {
            var,
            batch,
            len: rows / batch,
        })
    }

    /// One sequence whose tokens are the rows of `var`.
    pub fn single(g: &Graph, var: Var) -> Result<Self> {
        Self::new(g, var, 1)
    }

    pub fn width(&self, g: &Graph) -> usize {
        g.shape(self.var).1
    }

    /// Mean over each sample's tokens, giving one token per sample.
    pub fn pooled(&self, g: &mut Graph) -> Result<TokenSeq> {
        if self.len == 1 {
            return Ok(*self);
        }
        let var = g.mean_tokens(self.var, self.batch, self.len)?;
        Ok(TokenSeq {
            var,
            batch: self.batch,
            len: 1,
        })
    }

    fn with_var(&self, var: Var) -> TokenSeq {
        TokenSeq { var, ..*self }
    }
}

fn same_shape(g: &Graph, op: &'static str, a: &TokenSeq, b: &TokenSeq) -> Result<()> {
    let (sa, sb) = (g.shape(a.var), g.shape(b.var));
    if sa != sb || a.batch != b.batch {
        return Err(Error::Dimension {
            op,
            left: sa,
            right: sb,
        });
    }
    Ok(())
}

/// Glorot-uniform initialization for an `fan_in × fan_out` matrix.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(fan_in, fan_out, limit, rng)
}

/// Query/key/value projections plus a head count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(ps: &mut ParameterSet, prefix: &str, d: usize, rng: &mut Rng) {
        for w in ["wq", "wk", "wv"] {
            ps.insert(format!("{prefix}.{w}"), glorot(d, d, rng));
        }
    }

    pub fn bind(g: &mut Graph, ps: &ParameterSet, prefix: &str, heads: usize) -> Result<Self> {
        let p = AttentionParams {
            wq: g.param(ps, &format!("{prefix}.wq"))?,
            wk: g.param(ps, &format!("{prefix}.wk"))?,
            wv: g.param(ps, &format!("{prefix}.wv"))?,
            heads,
        };
        p.validate(g)?;
        Ok(p)
    }

    /// Wraps projection matrices already on the graph.
    pub fn from_vars(g: &Graph, wq: Var, wk: Var, wv: Var, heads: usize) -> Result<Self> {
        let p = AttentionParams { wq, wk, wv, heads };
        p.validate(g)?;
        Ok(p)
    }

    fn validate(&self, g: &Graph) -> Result<()> {
        let d = g.shape(self.wq).0;
        for w in [self.wq, self.wk, self.wv] {
            if g.shape(w) != (d, d) {
                return Err(Error::Dimension {
                    op: "attention_params",
                    left: (d, d),
                    right: g.shape(w),
                });
            }
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "head count {} does not divide D={d}",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn width(&self, g: &Graph) -> usize {
        g.shape(self.wq).0
    }
}

/// How the fusion gate is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Per-dimension gate conditioned on both inputs.
    Vector,
    /// One gate value per token, conditioned on both inputs.
    Scalar,
    /// A free learned per-dimension vector, independent of the inputs.
    Free,
}

impl GateMode {
    pub fn key(self) -> &'static str {
        match self {
            GateMode::Vector => "vector",
            GateMode::Scalar => "scalar",
            GateMode::Free => "free",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        match s {
            "vector" => Some(GateMode::Vector),
            "scalar" => Some(GateMode::Scalar),
            "free" => Some(GateMode::Free),
            _ => None,
        }
    }
}

/// Sigmoid gate `g = σ([a ; b]·W + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateParams {
    pub w: Option<Var>,
    pub b: Var,
    pub mode: GateMode,
}

impl GateParams {
    pub fn init(ps: &mut ParameterSet, prefix: &str, d: usize, mode: GateMode, rng: &mut Rng) {
        let out = if mode == GateMode::Scalar { 1 } else { d };
        if mode != GateMode::Free {
            ps.insert(format!("{prefix}.w"), glorot(2 * d, out, rng));
        }
        ps.insert(format!("{prefix}.b"), Tensor::zeros(1, out));
    }

    pub fn bind(g: &mut Graph, ps: &ParameterSet, prefix: &str, mode: GateMode) -> Result<Self> {
        let w = if mode == GateMode::Free {
            None
        } else {
            Some(g.param(ps, &format!("{prefix}.w"))?)
        };
        Ok(GateParams {
            w,
            b: g.param(ps, &format!("{prefix}.b"))?,
            mode,
        })
    }

    /// Gate values in (0,1), same shape as `a`.
    pub fn gate(&self, g: &mut Graph, a: &TokenSeq, b: &TokenSeq) -> Result<Var> {
        same_shape(g, "gate", a, b)?;
        let (rows, d) = g.shape(a.var);
        let logits = match self.w {
            Some(w) => {
                let cat = g.concat_cols(&[a.var, b.var])?;
                let z = g.matmul(cat, w)?;
                g.add_row(z, self.b)?
            }
            None => {
                let ones = g.constant(Tensor::ones(rows, 1));
                g.matmul(ones, self.b)?
            }
        };
        let gate = g.sigmoid(logits);
        match self.mode {
            GateMode::Scalar => {
                let spread = g.constant(Tensor::ones(1, d));
                g.matmul(gate, spread)
            }
            _ => Ok(gate),
        }
    }
}

/// `gate ⊙ a + (1 - gate) ⊙ b`, with the gate values supplied directly.
pub fn gated_mix(g: &mut Graph, a: &TokenSeq, b: &TokenSeq, gate: Var) -> Result<TokenSeq> {
    same_shape(g, "gated_mix", a, b)?;
    let (r, c) = g.shape(a.var);
    let ones = g.constant(Tensor::ones(r, c));
    let inv = g.sub(ones, gate)?;
    let left = g.mul(gate, a.var)?;
    let right = g.mul(inv, b.var)?;
    let y = g.add(left, right)?;
    Ok(a.with_var(y))
}

/// `softmax(Q Kᵀ / sqrt(D)) V` for a single head.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: &TokenSeq,
    k: &TokenSeq,
    v: &TokenSeq,
) -> Result<TokenSeq> {
    if k.batch != q.batch || v.batch != q.batch || k.len != v.len {
        return Err(Error::Dimension {
            op: "scaled_dot_attention",
            left: g.shape(k.var),
            right: g.shape(v.var),
        });
    }
    let y = g.attention(q.var, k.var, v.var, q.batch, 1)?;
    Ok(q.with_var(y))
}

/// Multi-head cross-attention: queries from `src`, keys and values from `tgt`.
pub fn cross_attention(
    g: &mut Graph,
    src: &TokenSeq,
    tgt: &TokenSeq,
    p: &AttentionParams,
) -> Result<TokenSeq> {
    let d = p.width(g);
    for s in [src, tgt] {
        if s.width(g) != d {
            return Err(Error::Dimension {
                op: "cross_attention",
                left: g.shape(s.var),
                right: (d, d),
            });
        }
    }
    if src.batch != tgt.batch {
        return Err(Error::Dimension {
            op: "cross_attention",
            left: g.shape(src.var),
            right: g.shape(tgt.var),
        });
    }
    let q = g.matmul(src.var, p.wq)?;
    let k = g.matmul(tgt.var, p.wk)?;
    let v = g.matmul(tgt.var, p.wv)?;
    let y = g.attention(q, k, v, src.batch, p.heads)?;
    Ok(src.with_var(y))
}

/// Stacks each sample's tokens from `parts` into one longer sequence.
pub fn stack_tokens(g: &mut Graph, parts: &[&TokenSeq]) -> Result<TokenSeq> {
    let batch = parts
        .first()
        .map(|p| p.batch)
        .ok_or_else(|| Error::contract("stack of zero sequences"))?;
    let spec: Vec<(Var, usize)> = parts.iter().map(|p| (p.var, p.len)).collect();
    let var = g.stack_tokens(&spec, batch)?;
    Ok(TokenSeq {
        var,
        batch,
        len: parts.iter().map(|p| p.len).sum(),
    })
}

/// Self-attention over the per-sample concatenation `[X_v ; X_t]`.
pub fn self_attention_fusion(
    g: &mut Graph,
    xv: &TokenSeq,
    xt: &TokenSeq,
    p: &AttentionParams,
) -> Result<TokenSeq> {
    if xv.width(g) != xt.width(g) {
        return Err(Error::Dimension {
            op: "self_attention_fusion",
            left: g.shape(xv.var),
            right: g.shape(xt.var),
        });
    }
    let x = stack_tokens(g, &[xv, xt])?;
    cross_attention(g, &x, &x, p)
}

/// Combination operator of a residual cross-attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Sum,
    Mean,
    Product,
    Gated,
}

/// `combine(src, attended)` for two equal-shape sequences.
pub fn combine_pair(
    g: &mut Graph,
    src: &TokenSeq,
    attended: &TokenSeq,
    combine: Combine,
    gate: Option<&GateParams>,
) -> Result<TokenSeq> {
    same_shape(g, "combine", src, attended)?;
    let y = match combine {
        Combine::Sum => g.add(src.var, attended.var)?,
        Combine::Mean => {
            let s = g.add(src.var, attended.var)?;
            g.scale(s, 0.5)
        }
        Combine::Product => g.mul(src.var, attended.var)?,
        Combine::Gated => {
            let gp = gate.ok_or_else(|| Error::config("gated combination needs gate parameters"))?;
            let gv = gp.gate(g, src, attended)?;
            return gated_mix(g, src, attended, gv);
        }
    };
    Ok(src.with_var(y))
}

/// `Y = combine(src, CA(src, tgt))`.
pub fn residual_ca(
    g: &mut Graph,
    src: &TokenSeq,
    tgt: &TokenSeq,
    p: &AttentionParams,
    combine: Combine,
    gate: Option<&GateParams>,
) -> Result<TokenSeq> {
    let attended = cross_attention(g, src, tgt, p)?;
    combine_pair(g, src, &attended, combine, gate)
}

/// `Y = X_v + X_t'`.
pub fn cross_residual(g: &mut Graph, xv: &TokenSeq, xt_attended: &TokenSeq) -> Result<TokenSeq> {
    same_shape(g, "cross_residual", xv, xt_attended)?;
    let y = g.add(xv.var, xt_attended.var)?;
    Ok(xv.with_var(y))
}

/// `(CA(X_v, X_t), CA(X_t, X_v))`. Passing the same parameters for both
/// directions gives the tied-weight variant.
pub fn bi_cross_attention(
    g: &mut Graph,
    xv: &TokenSeq,
    xt: &TokenSeq,
    p_v: &AttentionParams,
    p_t: &AttentionParams,
) -> Result<(TokenSeq, TokenSeq)> {
    let v = cross_attention(g, xv, xt, p_v)?;
    let t = cross_attention(g, xt, xv, p_t)?;
    Ok((v, t))
}

/// How the two bidirectional outputs are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiCombine {
    Concat,
    Sum,
    Mean,
    Product,
    Gated,
    SelfAttention,
}

/// Merges `(X_v', X_t')`. Concatenation doubles the width; self-attention
/// returns both token sets after attending over their union.
pub fn bicombine(
    g: &mut Graph,
    xv: &TokenSeq,
    xt: &TokenSeq,
    mode: BiCombine,
    gate: Option<&GateParams>,
    sa: Option<&AttentionParams>,
) -> Result<TokenSeq> {
    if gate.is_some() != (mode == BiCombine::Gated) {
        return Err(Error::config("gate parameters are required exactly for gated fusion"));
    }
    if sa.is_some() != (mode == BiCombine::SelfAttention) {
        return Err(Error::config(
            "self-attention parameters are required exactly for self-attention fusion",
        ));
    }
    match mode {
        BiCombine::Concat => {
            same_shape(g, "bicombine", xv, xt)?;
            let y = g.concat_cols(&[xv.var, xt.var])?;
            Ok(xv.with_var(y))
        }
        BiCombine::Sum => combine_pair(g, xv, xt, Combine::Sum, None),
        BiCombine::Mean => combine_pair(g, xv, xt, Combine::Mean, None),
        BiCombine::Product => combine_pair(g, xv, xt, Combine::Product, None),
        BiCombine::Gated => combine_pair(g, xv, xt, Combine::Gated, gate),
        BiCombine::SelfAttention => {
            same_shape(g, "bicombine", xv, xt)?;
            let sa = sa.expect("checked above");
            self_attention_fusion(g, xv, xt, sa)
        }
    }
}
