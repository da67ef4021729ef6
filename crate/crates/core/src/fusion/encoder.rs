use super::{cross_attention, glorot, AttentionParams, TokenSeq};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, ParameterSet, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Parameters of one post-norm transformer encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub wo: Var,
    pub bo: Var,
    pub ln1: (Var, Var),
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2: (Var, Var),
}

impl EncoderLayer {
    pub fn init(ps: &mut ParameterSet, prefix: &str, d: usize, rng: &mut Rng) {
        AttentionParams::init(ps, &format!("{prefix}.attn"), d, rng);
        ps.insert(format!("{prefix}.wo"), glorot(d, d, rng));
        ps.insert(format!("{prefix}.bo"), Tensor::zeros(1, d));
        ps.insert(format!("{prefix}.w1"), glorot(d, 4 * d, rng));
        ps.insert(format!("{prefix}.b1"), Tensor::zeros(1, 4 * d));
        ps.insert(format!("{prefix}.w2"), glorot(4 * d, d, rng));
        ps.insert(format!("{prefix}.b2"), Tensor::zeros(1, d));
        for ln in ["ln1", "ln2"] {
            ps.insert(format!("{prefix}.{ln}.g"), Tensor::ones(1, d));
            ps.insert(format!("{prefix}.{ln}.b"), Tensor::zeros(1, d));
        }
    }

    pub fn bind(g: &mut Graph, ps: &ParameterSet, prefix: &str, heads: usize) -> Result<Self> {
        let mut p = |s: &str| g.param(ps, &format!("{prefix}.{s}"));
        let (wo, bo) = (p("wo")?, p("bo")?);
        let (w1, b1, w2, b2) = (p("w1")?, p("b1")?, p("w2")?, p("b2")?);
        let ln1 = (p("ln1.g")?, p("ln1.b")?);
        let ln2 = (p("ln2.g")?, p("ln2.b")?);
        let attn = AttentionParams::bind(g, ps, &format!("{prefix}.attn"), heads)?;
        Ok(EncoderLayer {
            attn,
            wo,
            bo,
            ln1,
            w1,
            b1,
            w2,
            b2,
            ln2,
        })
    }
}

fn affine_norm(g: &mut Graph, x: Var, (gamma, beta): (Var, Var)) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let s = g.mul_row(n, gamma)?;
    g.add_row(s, beta)
}

/// One encoder layer. Attention is self-attention when `memory` is `None`
/// and cross-attention onto `memory` otherwise.
pub fn encoder_block(
    g: &mut Graph,
    x: &TokenSeq,
    memory: Option<&TokenSeq>,
    layer: &EncoderLayer,
) -> Result<TokenSeq> {
    let kv = memory.unwrap_or(x);
    let a = cross_attention(g, x, kv, &layer.attn)?;
    let a = g.matmul(a.var, layer.wo)?;
    let a = g.add_row(a, layer.bo)?;
    let h = g.add(x.var, a)?;
    let h = affine_norm(g, h, layer.ln1)?;

    let f = g.matmul(h, layer.w1)?;
    let f = g.add_row(f, layer.b1)?;
    let f = g.gelu(f);
    let f = g.matmul(f, layer.w2)?;
    let f = g.add_row(f, layer.b2)?;
    let y = g.add(h, f)?;
    let y = affine_norm(g, y, layer.ln2)?;
    Ok(TokenSeq { var: y, ..*x })
}

/// An attention stage: either a bare cross-attention or a stack of encoder
/// layers using the same query/memory wiring.
#[derive(Debug, Clone)]
pub enum AttnUnit {
    Bare(AttentionParams),
    Stack(Vec<EncoderLayer>),
}

impl AttnUnit {
    /// `layers == 0` registers a bare attention.
    pub fn init(ps: &mut ParameterSet, prefix: &str, d: usize, layers: usize, rng: &mut Rng) {
        if layers == 0 {
            AttentionParams::init(ps, prefix, d, rng);
        } else {
            for l in 0..layers {
                EncoderLayer::init(ps, &format!("{prefix}.l{l}"), d, rng);
            }
        }
    }

    pub fn bind(
        g: &mut Graph,
        ps: &ParameterSet,
        prefix: &str,
        layers: usize,
        heads: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Ok(AttnUnit::Bare(AttentionParams::bind(g, ps, prefix, heads)?));
        }
        let stack = (0..layers)
            .map(|l| EncoderLayer::bind(g, ps, &format!("{prefix}.l{l}"), heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(AttnUnit::Stack(stack))
    }

    /// Attends `src` onto `tgt`, or onto itself when `tgt` is `None`.
    pub fn apply(&self, g: &mut Graph, src: &TokenSeq, tgt: Option<&TokenSeq>) -> Result<TokenSeq> {
        match self {
            AttnUnit::Bare(p) => cross_attention(g, src, tgt.unwrap_or(src), p),
            AttnUnit::Stack(layers) => {
                let mut x = *src;
                for layer in layers {
                    x = encoder_block(g, &x, tgt, layer)?;
                }
                Ok(x)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, weighted_sum};
    use crate::rng::Seed;

    #[test]
    fn zero_output_weights_reduce_to_double_normalization() {
        let d = 4;
        let mut rng = Seed::new(4).rng();
        let mut ps = ParameterSet::new();
        EncoderLayer::init(&mut ps, "enc", d, &mut rng);
        for w in ["enc.wo", "enc.w2"] {
            ps.get_mut(w).unwrap().values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::randn(3, d, 1.0, &mut rng);

        let mut g = Graph::new();
        let layer = EncoderLayer::bind(&mut g, &ps, "enc", 2).unwrap();
        let xv = g.constant(x.clone());
        let seq = TokenSeq::single(&g, xv).unwrap();
        let y = encoder_block(&mut g, &seq, None, &layer).unwrap();

        let norm = |row: &[f64]| -> Vec<f64> {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / row.len() as f64;
            row.iter().map(|a| (a - m) / (v + LN_EPS).sqrt()).collect()
        };
        for r in 0..3 {
            let expected = norm(&norm(x.row(r)));
            for (a, b) in g.value(y.var).row(r).iter().zip(expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_width_tracks_model_width() {
        let mut rng = Seed::new(6).rng();
        for d in [8, 16] {
            let mut ps = ParameterSet::new();
            EncoderLayer::init(&mut ps, "enc", d, &mut rng);
            let mut g = Graph::new();
            let layer = EncoderLayer::bind(&mut g, &ps, "enc", 4).unwrap();
            let x = g.constant(Tensor::randn(2, d, 1.0, &mut rng));
            let mem = g.constant(Tensor::randn(5, d, 1.0, &mut rng));
            let (xs, ms) = (TokenSeq::single(&g, x).unwrap(), TokenSeq::single(&g, mem).unwrap());
            let y = encoder_block(&mut g, &xs, Some(&ms), &layer).unwrap();
            assert_eq!(g.shape(y.var), (2, d));
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let d = 4;
        let mut rng = Seed::new(10).rng();
        let mut ps = ParameterSet::new();
        EncoderLayer::init(&mut ps, "enc", d, &mut rng);
        // perturb the normalization affine terms away from their identity init
        for n in ["enc.ln1.g", "enc.ln1.b", "enc.ln2.g", "enc.ln2.b", "enc.bo", "enc.b1", "enc.b2"] {
            let t = ps.get(n).unwrap().clone();
            let noise = Tensor::randn(t.rows(), t.cols(), 0.3, &mut rng);
            let mut v = t.clone();
            for (a, b) in v.values_mut().iter_mut().zip(noise.values()) {
                *a += b;
            }
            ps.insert(n, v);
        }
        let x = Tensor::randn(6, d, 1.0, &mut rng);
        let out = check_params("encoder_block", &ps, None, |g, ps| {
            let layer = EncoderLayer::bind(g, ps, "enc", 2)?;
            let xv = g.constant(x.clone());
            let seq = TokenSeq::new(g, xv, 2)?;
            let y = encoder_block(g, &seq, None, &layer)?;
            weighted_sum(g, y.var, 1)
        })
        .unwrap();
        assert!(out.passed(), "{out:?}");
        assert_eq!(out.entries, ps.scalar_count());
    }
}
