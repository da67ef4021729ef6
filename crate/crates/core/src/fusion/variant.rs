use std::fmt;

use super::{
    bicombine, combine_pair, cross_residual, stack_tokens, AttnUnit, BiCombine, Combine, GateMode,
    GateParams, TokenSeq,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, ParameterSet, Var};

/// The visual/textual fusion strategies of the ablation catalogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionVariant {
    SaBaseline,
    CaQVisual,
    CaQText,
    ResidualCaSum,
    ResidualCaMean,
    ResidualCaProduct,
    ResidualCaGated,
    CrossResidual,
    GatedCrossResidual,
    BiCaConcatIndependent,
    BiCaConcatShared,
    BiCaSum,
    BiCaMean,
    BiCaProduct,
    BiCaGated,
    BiCaSa,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 16] = [
        FusionVariant::SaBaseline,
        FusionVariant::CaQVisual,
        FusionVariant::CaQText,
        FusionVariant::ResidualCaSum,
        FusionVariant::ResidualCaMean,
        FusionVariant::ResidualCaProduct,
        FusionVariant::ResidualCaGated,
        FusionVariant::CrossResidual,
        FusionVariant::GatedCrossResidual,
        FusionVariant::BiCaConcatIndependent,
        FusionVariant::BiCaConcatShared,
        FusionVariant::BiCaSum,
        FusionVariant::BiCaMean,
        FusionVariant::BiCaProduct,
        FusionVariant::BiCaGated,
        FusionVariant::BiCaSa,
    ];

    /// Config key.
    pub fn key(self) -> &'static str {
        match self {
            FusionVariant::SaBaseline => "sa",
            FusionVariant::CaQVisual => "ca-q-visual",
            FusionVariant::CaQText => "ca-q-text",
            FusionVariant::ResidualCaSum => "residual-ca-sum",
            FusionVariant::ResidualCaMean => "residual-ca-mean",
            FusionVariant::ResidualCaProduct => "residual-ca-product",
            FusionVariant::ResidualCaGated => "residual-ca-gated",
            FusionVariant::CrossResidual => "cross-residual",
            FusionVariant::GatedCrossResidual => "gated-cross-residual",
            FusionVariant::BiCaConcatIndependent => "bi-ca-concat",
            FusionVariant::BiCaConcatShared => "bi-ca-concat-shared",
            FusionVariant::BiCaSum => "bi-ca-sum",
            FusionVariant::BiCaMean => "bi-ca-mean",
            FusionVariant::BiCaProduct => "bi-ca-product",
            FusionVariant::BiCaGated => "bi-ca-gated",
            FusionVariant::BiCaSa => "bi-ca-sa",
        }
    }

    /// Row label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            FusionVariant::SaBaseline => "SA (Baseline)",
            FusionVariant::CaQVisual => "CA (Q = Visual)",
            FusionVariant::CaQText => "CA (Q = Text)",
            FusionVariant::ResidualCaSum => "Residual CA (Sum)",
            FusionVariant::ResidualCaMean => "Residual CA (Mean)",
            FusionVariant::ResidualCaProduct => "Residual CA (Product)",
            FusionVariant::ResidualCaGated => "Residual CA (Gated)",
            FusionVariant::CrossResidual => "Cross-Residual",
            FusionVariant::GatedCrossResidual => "Gated Cross-Residual",
            FusionVariant::BiCaConcatIndependent => "Bi-CA Concat (Independent)",
            FusionVariant::BiCaConcatShared => "Bi-CA Concat (Shared Weights)",
            FusionVariant::BiCaSum => "Bi-CA (Sum)",
            FusionVariant::BiCaMean => "Bi-CA (Mean)",
            FusionVariant::BiCaProduct => "Bi-CA (Product)",
            FusionVariant::BiCaGated => "Bi-CA (Gated)",
            FusionVariant::BiCaSa => "Bi-CA (SA)",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.key() == s)
    }

    pub fn uses_gate(self) -> bool {
        matches!(
            self,
            FusionVariant::ResidualCaGated | FusionVariant::GatedCrossResidual | FusionVariant::BiCaGated
        )
    }

    /// Width of the fused representation for model width `d`.
    pub fn output_width(self, d: usize) -> usize {
        match self {
            FusionVariant::BiCaConcatIndependent | FusionVariant::BiCaConcatShared => 2 * d,
            _ => d,
        }
    }

    /// Names of the attention stages this variant owns.
    fn units(self) -> &'static [&'static str] {
        match self {
            FusionVariant::SaBaseline => &["sa"],
            FusionVariant::CaQVisual
            | FusionVariant::CaQText
            | FusionVariant::ResidualCaSum
            | FusionVariant::ResidualCaMean
            | FusionVariant::ResidualCaProduct
            | FusionVariant::ResidualCaGated
            | FusionVariant::CrossResidual
            | FusionVariant::GatedCrossResidual
            | FusionVariant::BiCaConcatShared => &["ca"],
            FusionVariant::BiCaSa => &["ca_v", "ca_t", "combine"],
            _ => &["ca_v", "ca_t"],
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// A configured fusion stage: variant plus the shape of its attention units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionModule {
    pub variant: FusionVariant,
    /// Encoder layers per attention unit; 0 means a bare attention.
    pub layers: usize,
    pub heads: usize,
    pub gate: GateMode,
}

impl FusionModule {
    pub fn init(&self, ps: &mut ParameterSet, prefix: &str, d: usize, rng: &mut Rng) {
        for unit in self.variant.units() {
            AttnUnit::init(ps, &format!("{prefix}.{unit}"), d, self.layers, rng);
        }
        if self.variant.uses_gate() {
            GateParams::init(ps, &format!("{prefix}.gate"), d, self.gate, rng);
        }
    }

    /// Fuses visual tokens `xv` with textual tokens `xt`, returning one
    /// pooled row per sample.
    pub fn apply(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        prefix: &str,
        xv: &TokenSeq,
        xt: &TokenSeq,
    ) -> Result<Var> {
        if xv.batch != xt.batch {
            return Err(Error::Dimension {
                op: "fusion",
                left: g.shape(xv.var),
                right: g.shape(xt.var),
            });
        }
        let unit = |g: &mut Graph, name: &str| {
            AttnUnit::bind(g, ps, &format!("{prefix}.{name}"), self.layers, self.heads)
        };
        let gate = if self.variant.uses_gate() {
            Some(GateParams::bind(g, ps, &format!("{prefix}.gate"), self.gate)?)
        } else {
            None
        };
        use FusionVariant as V;
        let y = match self.variant {
            V::SaBaseline => {
                let sa = unit(g, "sa")?;
                let x = stack_tokens(g, &[xv, xt])?;
                sa.apply(g, &x, None)?.pooled(g)?
            }
            V::CaQVisual => unit(g, "ca")?.apply(g, xv, Some(xt))?.pooled(g)?,
            V::CaQText => unit(g, "ca")?.apply(g, xt, Some(xv))?.pooled(g)?,
            V::ResidualCaSum | V::ResidualCaMean | V::ResidualCaProduct | V::ResidualCaGated => {
                let combine = match self.variant {
                    V::ResidualCaSum => Combine::Sum,
                    V::ResidualCaMean => Combine::Mean,
                    V::ResidualCaProduct => Combine::Product,
                    _ => Combine::Gated,
                };
                let att = unit(g, "ca")?.apply(g, xt, Some(xv))?.pooled(g)?;
                let src = xt.pooled(g)?;
                combine_pair(g, &src, &att, combine, gate.as_ref())?
            }
            V::CrossResidual | V::GatedCrossResidual => {
                let att = unit(g, "ca")?.apply(g, xt, Some(xv))?.pooled(g)?;
                let v = xv.pooled(g)?;
                if self.variant == V::CrossResidual {
                    cross_residual(g, &v, &att)?
                } else {
                    combine_pair(g, &v, &att, Combine::Gated, gate.as_ref())?
                }
            }
            V::BiCaConcatIndependent
            | V::BiCaConcatShared
            | V::BiCaSum
            | V::BiCaMean
            | V::BiCaProduct
            | V::BiCaGated
            | V::BiCaSa => {
                let (uv, ut) = if self.variant == V::BiCaConcatShared {
                    let u = unit(g, "ca")?;
                    (u.clone(), u)
                } else {
                    (unit(g, "ca_v")?, unit(g, "ca_t")?)
                };
                let av = uv.apply(g, xv, Some(xt))?;
                let at = ut.apply(g, xt, Some(xv))?;
                if self.variant == V::BiCaSa {
                    let sa = unit(g, "combine")?;
                    let x = stack_tokens(g, &[&av, &at])?;
                    sa.apply(g, &x, None)?.pooled(g)?
                } else {
                    let mode = match self.variant {
                        V::BiCaSum => BiCombine::Sum,
                        V::BiCaMean => BiCombine::Mean,
                        V::BiCaProduct => BiCombine::Product,
                        V::BiCaGated => BiCombine::Gated,
                        _ => BiCombine::Concat,
                    };
                    let (pv, pt) = (av.pooled(g)?, at.pooled(g)?);
                    bicombine(g, &pv, &pt, mode, gate.as_ref(), None)?
                }
            }
        };
        Ok(y.var)
    }
}
