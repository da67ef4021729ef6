//! Run configuration files: `key = value` lines grouped under `[world]`,
//! `[model]`, `[train]`, `[corruption]`, `[keyframe]` and `[run]` headers.
//! `#` starts a comment.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::experiment::{desk_model, desk_training};
use crate::history::CorruptionKind;
use crate::keyframe::KeyframePolicy;
use crate::model::{Modalities, ModelConfig};
use crate::synth::WorldSpec;
use crate::train::{Monitor, TrainSpec};

const SECTIONS: [&str; 6] = ["world", "model", "train", "corruption", "keyframe", "run"];

/// One `key = value` entry with its position.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Syntax-level parse: sections, keys and raw values.
pub fn parse_entries(text: &str, source: &str) -> Result<Vec<Entry>> {
    let mut section: Option<String> = None;
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::parse(source, ln, "unterminated section header"))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::parse(source, ln, format!("unknown section `[{name}]`")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(source, ln, "expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::parse(source, ln, "empty key"));
        }
        let section = section
            .clone()
            .ok_or_else(|| Error::parse(source, ln, "setting before any section header"))?;
        if out.iter().any(|e| e.section == section && e.key == k) {
            return Err(Error::parse(source, ln, format!("duplicate key `{k}` in [{section}]")));
        }
        out.push(Entry {
            section,
            key: k.to_string(),
            value: v.to_string(),
            line: ln,
        });
    }
    Ok(out)
}

/// Where evaluation histories come from.
#[derive(Debug, Clone, PartialEq)]
pub enum HistoryChoice {
    GroundTruth,
    /// The trained recognizer saved next to the model.
    Recognizer,
    /// The true action replaced by a random wrong one at this rate.
    Noisy(f64),
    /// A history file with one line per anticipated test step.
    File(PathBuf),
}

impl HistoryChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(HistoryChoice::GroundTruth),
            "recognizer" => Ok(HistoryChoice::Recognizer),
            _ => {
                if let Some(p) = s.strip_prefix("file:").filter(|p| !p.is_empty()) {
                    Ok(HistoryChoice::File(PathBuf::from(p)))
                } else if let Some(r) = s.strip_prefix("noisy:") {
                    let rate: f64 = r
                        .parse()
                        .ok()
                        .filter(|r| (0.0..=1.0).contains(r))
                        .ok_or_else(|| Error::config(format!("invalid error rate `{r}`")))?;
                    Ok(HistoryChoice::Noisy(rate))
                } else {
                    Err(Error::config(format!(
                        "unknown history source `{s}` (expected gt, recognizer, noisy:RATE or file:PATH)"
                    )))
                }
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            HistoryChoice::GroundTruth => "GT",
            _ => "Pred",
        }
    }

    pub fn key(&self) -> String {
        match self {
            HistoryChoice::GroundTruth => "gt".into(),
            HistoryChoice::Recognizer => "recognizer".into(),
            HistoryChoice::Noisy(r) => format!("noisy:{r}"),
            HistoryChoice::File(p) => format!("file:{}", p.display()),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<String>,
    pub history: Option<HistoryChoice>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub seed: u64,
    pub out: PathBuf,
    pub history: HistoryChoice,
}

fn set_train(t: &mut TrainSpec, key: &str, value: &str) -> Result<()> {
    let bad = || Error::config(format!("invalid value `{value}` for `{key}`"));
    let u = || value.parse::<usize>().map_err(|_| bad());
    let f = || value.parse::<f64>().map_err(|_| bad());
    match key {
        "epochs" => t.epochs = u()?,
        "patience" => t.patience = u()?,
        "improvement_threshold" => t.improvement_threshold = f()?,
        "batch_size" => t.batch_size = u()?,
        "lr" => t.lr = f()?,
        "weight_decay" => t.weight_decay = f()?,
        "monitor" => t.monitor = Monitor::from_key(value).ok_or_else(bad)?,
        _ => return Err(Error::config(format!("unknown train key `{key}`"))),
    }
    Ok(())
}

impl RunConfig {
    /// Defaults: the ikea-like world, a desk-sized model on every modality and
    /// the desk training schedule.
    pub fn from_text(text: &str, source: &str, ov: &Overrides) -> Result<Self> {
        let entries = parse_entries(text, source)?;
        let at = |e: &Entry, err: Error| match err {
            Error::Config(m) => Error::config(format!("{source}:{}: {m}", e.line)),
            other => other,
        };
        let find = |section: &str, key: &str| {
            entries
                .iter()
                .find(|e| e.section == section && e.key == key)
        };

        let mut seed = 0u64;
        if let Some(e) = find("run", "seed") {
            seed = e
                .value
                .parse()
                .map_err(|_| at(e, Error::config(format!("invalid seed `{}`", e.value))))?;
        }
        seed = ov.seed.unwrap_or(seed);

        let preset = match (&ov.preset, find("world", "preset")) {
            (Some(p), _) => p.clone(),
            (None, Some(e)) => e.value.clone(),
            (None, None) => "ikea-like".to_string(),
        };
        let mut world = WorldSpec::preset(&preset)?;
        for e in entries.iter().filter(|e| e.section == "world" && e.key != "preset") {
            if e.key == "seed" || e.key == "name" {
                return Err(at(e, Error::config(format!("`{}` is set through [run] and [world] preset", e.key))));
            }
            world.set(&e.key, &e.value).map_err(|err| at(e, err))?;
        }
        world.seed = seed;
        world.validate()?;

        let mut model = desk_model(&world, Modalities::ALL);
        let mut train = desk_training(seed);
        let mut history = HistoryChoice::GroundTruth;
        let mut out = PathBuf::from("run");
        for e in &entries {
            let r = match e.section.as_str() {
                "model" => match e.key.as_str() {
                    "corruption" | "corruption_p" | "corruption_sigma" | "keyframe" | "threshold" => Err(
                        Error::config(format!("`{}` belongs in [corruption] or [keyframe]", e.key)),
                    ),
                    k => model.set(k, &e.value),
                },
                "train" => set_train(&mut train, &e.key, &e.value),
                "corruption" => match e.key.as_str() {
                    "kind" => CorruptionKind::from_key(&e.value)
                        .map(|k| model.corruption.kind = k)
                        .ok_or_else(|| Error::config(format!("unknown corruption `{}`", e.value))),
                    "p" => model.set("corruption_p", &e.value),
                    "sigma" => model.set("corruption_sigma", &e.value),
                    k => Err(Error::config(format!("unknown corruption key `{k}`"))),
                },
                "keyframe" => match e.key.as_str() {
                    "policy" => KeyframePolicy::from_key(&e.value)
                        .map(|p| model.keyframe = p)
                        .ok_or_else(|| Error::config(format!("unknown keyframe policy `{}`", e.value))),
                    "threshold" => model.set("threshold", &e.value),
                    k => Err(Error::config(format!("unknown keyframe key `{k}`"))),
                },
                "run" => match e.key.as_str() {
                    "seed" => Ok(()),
                    "out" => {
                        out = PathBuf::from(&e.value);
                        Ok(())
                    }
                    "history_source" => HistoryChoice::parse(&e.value).map(|h| history = h),
                    k => Err(Error::config(format!("unknown run key `{k}`"))),
                },
                _ => Ok(()),
            };
            r.map_err(|err| at(e, err))?;
        }
        if let Some(t) = ov.threshold {
            model.threshold = t;
        }
        if let Some(h) = &ov.history {
            history = h.clone();
        }
        if let Some(o) = &ov.out {
            out = o.clone();
        }
        model.validate()?;
        train.validate()?;
        crate::experiment::check_compatible_spec(&world, &model)?;
        Ok(RunConfig {
            world,
            model,
            train,
            seed,
            out,
            history,
        })
    }

    pub fn default_with(ov: &Overrides) -> Result<Self> {
        Self::from_text("", "<defaults>", ov)
    }

    pub fn load(path: &std::path::Path, ov: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string(), ov)
    }
}
