//! The anticipation model: visual fusion, history branch, joint fusion and
//! classifier head, plus the recognizer variant sharing the architecture.

mod checkpoint;
mod pipeline;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use pipeline::{argmax, StepTokens,
    anticipate_episode, recognize_from_logits, recognize_step, HistorySource, Recognizer,
    StepPrediction,
};

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::fusion::{gated_mix, glorot, AttnUnit, FusionModule, FusionVariant, GateMode, GateParams, TokenSeq};
use crate::history::{embed_history, CorruptionKind, CorruptionSpec, Corruptor, EmbeddingTable, HistoryQueue, Mode};
use crate::keyframe::{KeyframePolicy, DEFAULT_THRESHOLD};
use crate::rng::Seed;
use crate::tensor::{Graph, ParameterSet, Tensor, Var};

/// Which inputs a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Modalities {
    pub rgb: bool,
    pub depth: bool,
    pub ah: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities {
        rgb: true,
        depth: true,
        ah: true,
    };
    pub const RGB: Modalities = Modalities {
        rgb: true,
        depth: false,
        ah: false,
    };
    pub const RGB_DEPTH: Modalities = Modalities {
        rgb: true,
        depth: true,
        ah: false,
    };
    pub const AH: Modalities = Modalities {
        rgb: false,
        depth: false,
        ah: true,
    };
    pub const RGB_AH: Modalities = Modalities {
        rgb: true,
        depth: false,
        ah: true,
    };

    pub fn visual(self) -> bool {
        self.rgb || self.depth
    }

    /// `rgb,depth,ah` style key.
    pub fn key(self) -> String {
        let mut parts = Vec::new();
        if self.rgb {
            parts.push("rgb");
        }
        if self.depth {
            parts.push("depth");
        }
        if self.ah {
            parts.push("ah");
        }
        parts.join(",")
    }

    /// `RGB, Depth, AH` style label.
    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.rgb {
            parts.push("RGB");
        }
        if self.depth {
            parts.push("Depth");
        }
        if self.ah {
            parts.push("AH");
        }
        parts.join(", ")
    }

    pub fn from_key(s: &str) -> Result<Self> {
        let mut m = Modalities {
            rgb: false,
            depth: false,
            ah: false,
        };
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            let flag = match part.to_ascii_lowercase().as_str() {
                "rgb" => &mut m.rgb,
                "depth" => &mut m.depth,
                "ah" => &mut m.ah,
                other => return Err(Error::config(format!("unknown modality `{other}`"))),
            };
            if *flag {
                return Err(Error::config(format!("modality `{part}` listed twice")));
            }
            *flag = true;
        }
        if !(m.rgb || m.depth || m.ah) {
            return Err(Error::config("at least one modality is required"));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Predict the next action.
    Anticipate,
    /// Predict the current action.
    Recognize,
}

impl Task {
    pub fn key(self) -> &'static str {
        match self {
            Task::Anticipate => "anticipate",
            Task::Recognize => "recognize",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        match s {
            "anticipate" => Some(Task::Anticipate),
            "recognize" => Some(Task::Recognize),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Shared embedding width; visual feature tokens have this width.
    pub d: usize,
    /// Encoder layers per attention unit.
    pub layers: usize,
    pub heads: usize,
    /// History length N.
    pub history_len: usize,
    /// Width of one action text embedding.
    pub text_dim: usize,
    pub classes: usize,
    pub modalities: Modalities,
    pub fusion: FusionVariant,
    pub gate: GateMode,
    /// Run the RGB/depth cross-attention as encoder layers instead of a single
    /// bare attention.
    pub visual_in_encoder: bool,
    /// Gate between raw RGB and the depth-attended RGB.
    pub visual_gate: bool,
    pub history_bias: bool,
    pub corruption: CorruptionSpec,
    pub keyframe: KeyframePolicy,
    pub threshold: f64,
    pub task: Task,
}

impl ModelConfig {
    /// Full-size configuration: D=768, 2 layers, 4 heads, N=7.
    pub fn full_size(classes: usize) -> Self {
        ModelConfig {
            d: 768,
            layers: 2,
            heads: 4,
            history_len: 7,
            text_dim: 768,
            classes,
            modalities: Modalities::ALL,
            fusion: FusionVariant::BiCaGated,
            gate: GateMode::Vector,
            visual_in_encoder: false,
            visual_gate: false,
            history_bias: true,
            corruption: CorruptionSpec::none(),
            keyframe: KeyframePolicy::Blur,
            threshold: DEFAULT_THRESHOLD,
            task: Task::Anticipate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "head count {} must divide D={}",
                self.heads, self.d
            )));
        }
        if self.classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if self.history_len == 0 || self.text_dim == 0 {
            return Err(Error::config("history length and text width must be positive"));
        }
        if self.visual_in_encoder && self.layers == 0 {
            return Err(Error::config("visual_in_encoder needs layers >= 1"));
        }
        if !(self.threshold.is_finite()) {
            return Err(Error::config("keyframe threshold must be finite"));
        }
        self.corruption.validate()
    }

    fn fusion_module(&self) -> FusionModule {
        FusionModule {
            variant: self.fusion,
            layers: self.layers,
            heads: self.heads,
            gate: self.gate,
        }
    }

    pub(crate) fn visual_layers(&self) -> usize {
        if self.visual_in_encoder {
            self.layers
        } else {
            0
        }
    }

    /// Width entering the classifier head.
    pub fn head_input(&self) -> usize {
        if self.modalities.visual() && self.modalities.ah {
            self.fusion.output_width(self.d)
        } else {
            self.d
        }
    }

    /// Flat `key=value` description, stable across runs.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d", self.d.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("history_len", self.history_len.to_string()),
            ("text_dim", self.text_dim.to_string()),
            ("classes", self.classes.to_string()),
            ("modalities", self.modalities.key()),
            ("fusion", self.fusion.key().to_string()),
            ("gate", self.gate.key().to_string()),
            ("visual_in_encoder", self.visual_in_encoder.to_string()),
            ("visual_gate", self.visual_gate.to_string()),
            ("history_bias", self.history_bias.to_string()),
            ("corruption", self.corruption.kind.key().to_string()),
            ("corruption_p", self.corruption.p.to_string()),
            ("corruption_sigma", self.corruption.sigma.to_string()),
            ("keyframe", self.keyframe.key().to_string()),
            ("threshold", self.threshold.to_string()),
            ("task", self.task.key().to_string()),
        ]
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::config(format!("`{key}` must be true or false, got `{v}`"))),
            }
        }
        let bad = || Error::config(format!("invalid value `{value}` for `{key}`"));
        match key {
            "d" => self.d = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "history_len" => self.history_len = num(key, value)?,
            "text_dim" => self.text_dim = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "modalities" => self.modalities = Modalities::from_key(value)?,
            "fusion" => self.fusion = FusionVariant::from_key(value).ok_or_else(bad)?,
            "gate" => self.gate = GateMode::from_key(value).ok_or_else(bad)?,
            "visual_in_encoder" => self.visual_in_encoder = flag(key, value)?,
            "visual_gate" => self.visual_gate = flag(key, value)?,
            "history_bias" => self.history_bias = flag(key, value)?,
            "corruption" => self.corruption.kind = CorruptionKind::from_key(value).ok_or_else(bad)?,
            "corruption_p" => self.corruption.p = num(key, value)?,
            "corruption_sigma" => self.corruption.sigma = num(key, value)?,
            "keyframe" => self.keyframe = KeyframePolicy::from_key(value).ok_or_else(bad)?,
            "threshold" => self.threshold = num(key, value)?,
            "task" => self.task = Task::from_key(value).ok_or_else(bad)?,
            _ => return Err(Error::config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn echo(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::full_size(2);
        let mut seen = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("malformed config line `{line}`")))?;
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(Error::config(format!("duplicate config key `{k}`")));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One model input. Visual tokens are `T × D`, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub rgb: Option<Tensor>,
    pub depth: Option<Tensor>,
    pub history: Option<HistoryQueue>,
    pub target: usize,
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParameterSet,
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} D={} layers={} heads={}",
            self.modalities.label(),
            self.fusion.label(),
            self.d,
            self.layers,
            self.heads
        )
    }
}

fn stack_visual(batch: &[Sample], pick: fn(&Sample) -> Option<&Tensor>, name: &str, d: usize) -> Result<Tensor> {
    let parts: Vec<&Tensor> = batch
        .iter()
        .map(|s| pick(s).ok_or_else(|| Error::config(format!("sample lacks {name} tokens"))))
        .collect::<Result<_>>()?;
    let t = parts[0].rows();
    for p in &parts {
        if p.rows() != t || p.cols() != d || t == 0 {
            return Err(Error::Dimension {
                op: "visual_tokens",
                left: (t, d),
                right: p.shape(),
            });
        }
    }
    Tensor::vstack(&parts)
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: Seed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.child("init").rng();
        let mut ps = ParameterSet::new();
        let d = cfg.d;
        let m = cfg.modalities;
        if m.rgb && m.depth {
            AttnUnit::init(&mut ps, "vis.ca", d, cfg.visual_layers(), &mut rng);
            if cfg.visual_gate {
                GateParams::init(&mut ps, "vis.gate", d, GateMode::Vector, &mut rng);
            }
        }
        if m.ah {
            let width = cfg.history_len * cfg.text_dim;
            ps.insert("hist.w", glorot(width, d, &mut rng));
            if cfg.history_bias {
                ps.insert("hist.b", Tensor::zeros(1, d));
            }
        }
        if m.visual() && m.ah {
            cfg.fusion_module().init(&mut ps, "fuse", d, &mut rng);
        }
        let inp = cfg.head_input();
        ps.insert("head.w1", glorot(inp, 4 * d, &mut rng));
        ps.insert("head.b1", Tensor::zeros(1, 4 * d));
        ps.insert("head.w2", glorot(4 * d, cfg.classes, &mut rng));
        ps.insert("head.b2", Tensor::zeros(1, cfg.classes));
        Ok(Model { cfg, params: ps })
    }

    fn check_inputs(&self, batch: &[Sample], table: Option<&EmbeddingTable>) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::data("empty batch"));
        }
        let m = self.cfg.modalities;
        for s in batch {
            if s.rgb.is_some() != m.rgb || s.depth.is_some() != m.depth || s.history.is_some() != m.ah {
                return Err(Error::config(format!(
                    "sample modalities do not match model modalities {}",
                    m.label()
                )));
            }
            if s.target >= self.cfg.classes {
                return Err(Error::Label {
                    target: s.target,
                    classes: self.cfg.classes,
                });
            }
            if let Some(q) = &s.history {
                if q.capacity() != self.cfg.history_len {
                    return Err(Error::config(format!(
                        "history capacity {} differs from N={}",
                        q.capacity(),
                        self.cfg.history_len
                    )));
                }
            }
        }
        if m.ah {
            let t = table.ok_or_else(|| Error::config("history input needs an embedding table"))?;
            if t.dim() != self.cfg.text_dim || t.classes() != self.cfg.classes {
                return Err(Error::config(format!(
                    "embedding table {}x{} does not match classes={} text_dim={}",
                    t.classes(),
                    t.dim(),
                    self.cfg.classes,
                    self.cfg.text_dim
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass of `batch` on `g` and returns `batch × C`
    /// logits. Corruption runs only in [`Mode::Train`] and only when a
    /// corruptor is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &[Sample],
        table: Option<&EmbeddingTable>,
        mode: Mode,
        mut corruptor: Option<&mut Corruptor>,
    ) -> Result<Var> {
        self.check_inputs(batch, table)?;
        let cfg = &self.cfg;
        let ps = &self.params;
        let n = batch.len();
        let d = cfg.d;

        let rgb = if cfg.modalities.rgb {
            let t = stack_visual(batch, |s| s.rgb.as_ref(), "RGB", d)?;
            let v = g.constant(t);
            Some(TokenSeq::new(g, v, n)?)
        } else {
            None
        };
        let depth = if cfg.modalities.depth {
            let t = stack_visual(batch, |s| s.depth.as_ref(), "depth", d)?;
            let v = g.constant(t);
            Some(TokenSeq::new(g, v, n)?)
        } else {
            None
        };
        let visual = match (rgb, depth) {
            (Some(r), Some(dp)) => {
                let unit = AttnUnit::bind(g, ps, "vis.ca", cfg.visual_layers(), cfg.heads)?;
                let x = unit.apply(g, &r, Some(&dp))?;
                if cfg.visual_gate {
                    let gate = GateParams::bind(g, ps, "vis.gate", GateMode::Vector)?;
                    let gv = gate.gate(g, &r, &x)?;
                    Some(gated_mix(g, &r, &x, gv)?)
                } else {
                    Some(x)
                }
            }
            (Some(r), None) => Some(r),
            (None, Some(dp)) => Some(dp),
            (None, None) => None,
        };

        let text = if cfg.modalities.ah {
            let table = table.expect("checked");
            let mut rows = Vec::with_capacity(n);
            for s in batch {
                let q = s.history.as_ref().expect("checked");
                let q = match corruptor.as_deref_mut() {
                    Some(c) => c.swap(q, cfg.classes, mode)?,
                    None => q.clone(),
                };
                rows.push(embed_history(&q, table)?);
            }
            let refs: Vec<&Tensor> = rows.iter().collect();
            let x = g.constant(Tensor::vstack(&refs)?);
            let w = g.param(ps, "hist.w")?;
            let mut h = g.matmul(x, w)?;
            if cfg.history_bias {
                let b = g.param(ps, "hist.b")?;
                h = g.add_row(h, b)?;
            }
            if let Some(c) = corruptor {
                if let Some(draw) = c.noise(n, d, mode)? {
                    let scale = g.constant(draw.scale);
                    let offset = g.constant(draw.offset);
                    let m = g.mul(h, scale)?;
                    h = g.add(m, offset)?;
                }
            }
            Some(TokenSeq::new(g, h, n)?)
        } else {
            None
        };

        let features = match (visual, text) {
            (Some(v), Some(t)) => cfg.fusion_module().apply(g, ps, "fuse", &v, &t)?,
            (Some(v), None) => v.pooled(g)?.var,
            (None, Some(t)) => t.var,
            (None, None) => unreachable!("validated modalities"),
        };

        let w1 = g.param(ps, "head.w1")?;
        let b1 = g.param(ps, "head.b1")?;
        let w2 = g.param(ps, "head.w2")?;
        let b2 = g.param(ps, "head.b2")?;
        let h = g.matmul(features, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }

    /// Inference-mode logits.
    pub fn logits(&self, batch: &[Sample], table: Option<&EmbeddingTable>) -> Result<Tensor> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, batch, table, Mode::Infer, None)?;
        Ok(g.value(y).clone())
    }
}
