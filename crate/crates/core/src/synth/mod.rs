//! Synthetic procedural worlds: stochastic task graphs, episodes walking them,
//! per-step visual feature tokens and frame windows with planted blur.

mod export;
mod frames;

pub use export::{
    decode_episode, encode_episode, export_dataset, import_dataset, manifest_text, parse_dataset_manifest,
    DatasetManifest, EpisodeFile,
};
pub use frames::{render_frame, PackedFrame};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::history::{ActionVocabulary, EmbeddingTable};
use crate::keyframe::{FrameWindow, KeyframePolicy};
use crate::model::StepTokens;
use crate::rng::{Rng, Seed};
use crate::tensor::Tensor;

/// Distribution of per-frame Laplacian variance, clamped to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlurDist {
    LogNormal { median: f64, sigma: f64, min: f64, max: f64 },
    Normal { mean: f64, std: f64, min: f64, max: f64 },
}

impl BlurDist {
    fn bounds(self) -> (f64, f64) {
        match self {
            BlurDist::LogNormal { min, max, .. } | BlurDist::Normal { min, max, .. } => (min, max),
        }
    }

    fn sample(self, rng: &mut Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        let (lo, hi) = self.bounds();
        let v = match self {
            BlurDist::LogNormal { median, sigma, .. } => median * (sigma * z).exp(),
            BlurDist::Normal { mean, std, .. } => mean + std * z,
        };
        v.clamp(lo, hi)
    }
}

/// Background frame blur plus an optional single planted sharp frame per
/// window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurPlant {
    pub background: BlurDist,
    pub plant_prob: f64,
    pub plant_min: f64,
    pub plant_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub name: String,
    pub classes: usize,
    pub branching: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Visual informativeness of the feature tokens.
    pub alpha: f64,
    /// Weight of the depth-only disambiguation component.
    pub beta: f64,
    /// Action pairs `(2k, 2k+1)` share one RGB prototype.
    pub aliased: bool,
    /// Blur attenuation constant: a frame of Laplacian variance `v` carries
    /// signal weight `alpha * v / (v + kappa)`.
    pub kappa: f64,
    pub tokens: usize,
    pub d: usize,
    pub text_dim: usize,
    pub window: usize,
    pub frame_side: usize,
    pub blur: BlurPlant,
    pub episodes: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

fn fmt_dist(d: BlurDist) -> [(&'static str, String); 5] {
    match d {
        BlurDist::LogNormal { median, sigma, min, max } => [
            ("blur_dist", "lognormal".into()),
            ("blur_center", median.to_string()),
            ("blur_spread", sigma.to_string()),
            ("blur_min", min.to_string()),
            ("blur_max", max.to_string()),
        ],
        BlurDist::Normal { mean, std, min, max } => [
            ("blur_dist", "normal".into()),
            ("blur_center", mean.to_string()),
            ("blur_spread", std.to_string()),
            ("blur_min", min.to_string()),
            ("blur_max", max.to_string()),
        ],
    }
}

impl WorldSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let base = WorldSpec {
            name: name.to_string(),
            classes: 12,
            branching: 2,
            min_len: 4,
            max_len: 12,
            alpha: 0.8,
            beta: 0.6,
            aliased: true,
            kappa: 50.0,
            tokens: 1,
            d: 16,
            text_dim: 16,
            window: crate::keyframe::WINDOW,
            frame_side: 32,
            blur: BlurPlant {
                background: BlurDist::LogNormal {
                    median: 280.0,
                    sigma: 0.38,
                    min: 130.0,
                    max: 800.0,
                },
                plant_prob: 0.0,
                plant_min: 0.0,
                plant_max: 0.0,
            },
            episodes: 160,
            train_frac: 0.7,
            val_frac: 0.15,
            seed: 0,
        };
        match name {
            "ikea-like" => Ok(base),
            "meccano-like" => Ok(WorldSpec {
                classes: 20,
                min_len: 6,
                max_len: 20,
                alpha: 0.5,
                blur: BlurPlant {
                    background: BlurDist::LogNormal {
                        median: 30.0,
                        sigma: 0.5,
                        min: 1.0,
                        max: 90.0,
                    },
                    plant_prob: 0.028,
                    plant_min: 110.0,
                    plant_max: 170.0,
                },
                ..base
            }),
            "assembly-like" => Ok(WorldSpec {
                classes: 40,
                branching: 3,
                min_len: 10,
                max_len: 40,
                alpha: 0.25,
                beta: 0.3,
                blur: BlurPlant {
                    background: BlurDist::Normal {
                        mean: 101.4,
                        std: 15.1,
                        min: 71.8,
                        max: 212.1,
                    },
                    plant_prob: 0.0,
                    plant_min: 0.0,
                    plant_max: 0.0,
                },
                ..base
            }),
            _ => Err(Error::config(format!(
                "unknown preset `{name}` (expected ikea-like, meccano-like or assembly-like)"
            ))),
        }
    }

    pub const PRESETS: [&'static str; 3] = ["ikea-like", "meccano-like", "assembly-like"];

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.classes < 2 {
            return Err(Error::config("a world needs at least two actions"));
        }
        if self.branching == 0 {
            return Err(Error::config("branching must be at least 1"));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "episode length range {}..={} is invalid",
                self.min_len, self.max_len
            )));
        }
        if !unit(self.alpha) || !unit(self.beta) || !unit(self.blur.plant_prob) {
            return Err(Error::config("alpha, beta and plant_prob must lie in [0,1]"));
        }
        if self.kappa.is_nan() || self.kappa < 0.0 {
            return Err(Error::config("kappa must be non-negative"));
        }
        if self.tokens == 0 || self.d == 0 || self.text_dim == 0 || self.window == 0 {
            return Err(Error::config("tokens, d, text_dim and window must be positive"));
        }
        if self.frame_side < 3 || self.frame_side > 256 {
            return Err(Error::config("frame_side must lie in 3..=256"));
        }
        let (lo, hi) = self.blur.background.bounds();
        if !(0.0 <= lo && lo <= hi) || !(0.0 <= self.blur.plant_min && self.blur.plant_min <= self.blur.plant_max) {
            return Err(Error::config("blur ranges must satisfy 0 <= min <= max"));
        }
        if self.episodes < 3 {
            return Err(Error::config("a world needs at least three episodes"));
        }
        if !(self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac < 1.0) {
            return Err(Error::config("split fractions must be positive and leave a test split"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("name", self.name.clone()),
            ("classes", self.classes.to_string()),
            ("branching", self.branching.to_string()),
            ("min_len", self.min_len.to_string()),
            ("max_len", self.max_len.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("aliased", self.aliased.to_string()),
            ("kappa", self.kappa.to_string()),
            ("tokens", self.tokens.to_string()),
            ("d", self.d.to_string()),
            ("text_dim", self.text_dim.to_string()),
            ("window", self.window.to_string()),
            ("frame_side", self.frame_side.to_string()),
        ];
        v.extend(fmt_dist(self.blur.background));
        v.extend([
            ("plant_prob", self.blur.plant_prob.to_string()),
            ("plant_min", self.blur.plant_min.to_string()),
            ("plant_max", self.blur.plant_max.to_string()),
            ("episodes", self.episodes.to_string()),
            ("train_frac", self.train_frac.to_string()),
            ("val_frac", self.val_frac.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        v
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::config(format!("invalid value `{value}` for `{key}`"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        let u = || value.parse::<usize>().map_err(|_| bad());
        let (mut center, mut spread, mut lo, mut hi, lognormal) = match self.blur.background {
            BlurDist::LogNormal { median, sigma, min, max } => (median, sigma, min, max, true),
            BlurDist::Normal { mean, std, min, max } => (mean, std, min, max, false),
        };
        let mut lognormal = lognormal;
        match key {
            "name" => self.name = value.to_string(),
            "classes" => self.classes = u()?,
            "branching" => self.branching = u()?,
            "min_len" => self.min_len = u()?,
            "max_len" => self.max_len = u()?,
            "alpha" => self.alpha = f()?,
            "beta" => self.beta = f()?,
            "aliased" => self.aliased = value.parse().map_err(|_| bad())?,
            "kappa" => self.kappa = f()?,
            "tokens" => self.tokens = u()?,
            "d" => self.d = u()?,
            "text_dim" => self.text_dim = u()?,
            "window" => self.window = u()?,
            "frame_side" => self.frame_side = u()?,
            "blur_dist" => {
                lognormal = match value {
                    "lognormal" => true,
                    "normal" => false,
                    _ => return Err(bad()),
                }
            }
            "blur_center" => center = f()?,
            "blur_spread" => spread = f()?,
            "blur_min" => lo = f()?,
            "blur_max" => hi = f()?,
            "plant_prob" => self.blur.plant_prob = f()?,
            "plant_min" => self.blur.plant_min = f()?,
            "plant_max" => self.blur.plant_max = f()?,
            "episodes" => self.episodes = u()?,
            "train_frac" => self.train_frac = f()?,
            "val_frac" => self.val_frac = f()?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::config(format!("unknown world key `{key}`"))),
        }
        self.blur.background = if lognormal {
            BlurDist::LogNormal {
                median: center,
                sigma: spread,
                min: lo,
                max: hi,
            }
        } else {
            BlurDist::Normal {
                mean: center,
                std: spread,
                min: lo,
                max: hi,
            }
        };
        Ok(())
    }

    fn root(&self) -> Seed {
        Seed::new(self.seed).child("world")
    }

    pub fn vocabulary(&self) -> Result<ActionVocabulary> {
        ActionVocabulary::synthetic(self.classes)
    }

    /// Frozen text embeddings standing in for a language encoder.
    pub fn embedding_table(&self) -> EmbeddingTable {
        EmbeddingTable::synthetic(self.classes, self.text_dim, self.root().child("text"))
    }
}

/// Directed stochastic graph over action ids from `start` to `end`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    pub classes: usize,
    pub edges: Vec<Vec<(usize, f64)>>,
    pub start: usize,
    pub end: usize,
}

impl TaskGraph {
    pub fn successors(&self, a: usize) -> &[(usize, f64)] {
        &self.edges[a]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.get(a).is_some_and(|e| e.iter().any(|&(t, _)| t == b))
    }

    pub fn is_walk(&self, actions: &[usize]) -> bool {
        actions.first() == Some(&self.start)
            && actions.last() == Some(&self.end)
            && actions.windows(2).all(|w| self.has_edge(w[0], w[1]))
    }

    /// Most probable successor of `a`, lowest id on ties.
    pub fn likeliest_next(&self, a: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &(t, p) in &self.edges[a] {
            if best.is_none_or(|(bt, bp)| p > bp || (p == bp && t < bt)) {
                best = Some((t, p));
            }
        }
        best.map(|(t, _)| t)
    }
}

/// A chain `0 → 1 → … → C−1` plus up to `branching − 1` skip edges per node to
/// nodes at most `branching` further ahead.
pub fn gen_task_graph(spec: &WorldSpec) -> Result<TaskGraph> {
    if spec.classes < 2 {
        return Err(Error::config("a task graph needs at least two actions"));
    }
    if spec.branching == 0 {
        return Err(Error::config("branching must be at least 1"));
    }
    let c = spec.classes;
    let mut rng = spec.root().child("graph").rng();
    let mut edges = Vec::with_capacity(c);
    for i in 0..c {
        if i == c - 1 {
            edges.push(Vec::new());
            continue;
        }
        let mut targets = vec![i + 1];
        let mut pool: Vec<usize> = (i + 2..=(i + spec.branching).min(c - 1)).collect();
        while targets.len() < spec.branching && !pool.is_empty() {
            let k = rng.random_range(0..pool.len());
            targets.push(pool.swap_remove(k));
        }
        targets.sort_unstable();
        let weights: Vec<f64> = targets.iter().map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        edges.push(targets.into_iter().zip(weights.into_iter().map(|w| w / total)).collect());
    }
    Ok(TaskGraph {
        classes: c,
        edges,
        start: 0,
        end: c - 1,
    })
}

/// One step of an episode: its action and a window of frames, each frame
/// with `T` RGB and `T` depth tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub action: usize,
    /// `(W·T) × D`, frame-major.
    pub rgb: Tensor,
    pub depth: Tensor,
    pub frames: Vec<PackedFrame>,
    pub variances: Vec<f64>,
}

impl Step {
    pub fn new(action: usize, rgb: Tensor, depth: Tensor, frames: Vec<PackedFrame>) -> Result<Self> {
        let w = frames.len();
        if w == 0 || !rgb.rows().is_multiple_of(w) || rgb.shape() != depth.shape() {
            return Err(Error::data(format!(
                "step tokens {:?}/{:?} do not split over {w} frames",
                rgb.shape(),
                depth.shape()
            )));
        }
        let variances = frames.iter().map(PackedFrame::variance).collect();
        Ok(Step {
            action,
            rgb,
            depth,
            frames,
            variances,
        })
    }

    pub fn window(&self) -> usize {
        self.frames.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.rgb.rows() / self.window()
    }

    /// Tokens of frame `k`.
    pub fn frame_tokens(&self, k: usize) -> StepTokens {
        let t = self.tokens_per_frame();
        StepTokens {
            rgb: self.rgb.slice_rows(k * t, t),
            depth: self.depth.slice_rows(k * t, t),
        }
    }

    /// One row per frame: the mean RGB token.
    pub fn frame_embeddings(&self) -> Tensor {
        let t = self.tokens_per_frame();
        let d = self.rgb.cols();
        let mut e = Tensor::zeros(self.window(), d);
        for k in 0..self.window() {
            for r in 0..t {
                for (o, v) in e.row_mut(k).iter_mut().zip(self.rgb.row(k * t + r)) {
                    *o += v / t as f64;
                }
            }
        }
        e
    }

    pub fn select(&self, policy: KeyframePolicy, threshold: f64) -> Result<usize> {
        let emb = match policy {
            KeyframePolicy::Cosine | KeyframePolicy::L2 => Some(self.frame_embeddings()),
            _ => None,
        };
        policy.select_from(&self.variances, emb.as_ref(), threshold)
    }

    pub fn selected_tokens(&self, policy: KeyframePolicy, threshold: f64) -> Result<StepTokens> {
        Ok(self.frame_tokens(self.select(policy, threshold)?))
    }

    pub fn frame_window(&self) -> Result<FrameWindow> {
        FrameWindow::new(
            self.frames.iter().map(PackedFrame::to_gray).collect(),
            Some(self.frame_embeddings()),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn key(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Unit vectors with i.i.d. Gaussian directions.
fn unit_vector(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Per-action feature prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub rgb: Vec<Vec<f64>>,
    pub disamb: Vec<Vec<f64>>,
}

impl Prototypes {
    pub fn new(spec: &WorldSpec) -> Self {
        let root = spec.root();
        let rgb = (0..spec.classes)
            .map(|a| {
                let p = if spec.aliased { a / 2 } else { a };
                unit_vector(spec.d, &mut root.child("proto").index(p as u64).rng())
            })
            .collect();
        let disamb = (0..spec.classes)
            .map(|a| unit_vector(spec.d, &mut root.child("disamb").index(a as u64).rng()))
            .collect();
        Prototypes { rgb, disamb }
    }

    /// Index of the closest RGB prototype by Euclidean distance, lowest id on
    /// ties.
    pub fn nearest_rgb(&self, token: &[f64]) -> usize {
        let dist = |p: &[f64]| p.iter().zip(token).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best = 0;
        for (i, p) in self.rgb.iter().enumerate() {
            if dist(p) < dist(&self.rgb[best]) {
                best = i;
            }
        }
        best
    }
}

/// Random walk from the start node to the end node within the length range.
pub fn sample_walk(graph: &TaskGraph, spec: &WorldSpec, rng: &mut Rng) -> Result<Vec<usize>> {
    for _ in 0..100 {
        let mut walk = vec![graph.start];
        let mut cur = graph.start;
        while cur != graph.end && walk.len() < spec.max_len {
            let u: f64 = rng.random();
            let succ = graph.successors(cur);
            let mut acc = 0.0;
            let mut next = succ[succ.len() - 1].0;
            for &(t, p) in succ {
                acc += p;
                if u < acc {
                    next = t;
                    break;
                }
            }
            walk.push(next);
            cur = next;
        }
        if cur == graph.end && walk.len() >= spec.min_len {
            return Ok(walk);
        }
    }
    Err(Error::config(format!(
        "no walk of length {}..={} found in 100 tries",
        spec.min_len, spec.max_len
    )))
}

/// Laplacian variances of one window, oldest first.
fn window_variances(blur: &BlurPlant, window: usize, rng: &mut Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..window).map(|_| blur.background.sample(rng)).collect();
    if blur.plant_prob > 0.0 && rng.random_bool(blur.plant_prob) {
        let k = rng.random_range(0..window);
        v[k] = if blur.plant_max > blur.plant_min {
            rng.random_range(blur.plant_min..blur.plant_max)
        } else {
            blur.plant_min
        };
    }
    v
}

/// Feature tokens and frames for one step. A pure function of the world
/// settings, the episode and step indices and the action.
pub fn gen_step(spec: &WorldSpec, protos: &Prototypes, episode: usize, step: usize, action: usize) -> Result<Step> {
    let mut rng = spec
        .root()
        .child("step")
        .index(episode as u64)
        .index(step as u64)
        .rng();
    let targets = window_variances(&spec.blur, spec.window, &mut rng);
    let rows = spec.window * spec.tokens;
    let mut rgb = Tensor::zeros(rows, spec.d);
    let mut depth = Tensor::zeros(rows, spec.d);
    let noise = Normal::new(0.0, 1.0 / (spec.d as f64).sqrt()).expect("valid std");
    let mut frames = Vec::with_capacity(spec.window);
    for (k, &v) in targets.iter().enumerate() {
        let frame = render_frame(v, spec.frame_side, &mut rng)?;
        let q = if spec.kappa > 0.0 {
            let fv = frame.variance();
            fv / (fv + spec.kappa)
        } else {
            1.0
        };
        let a = spec.alpha * q;
        for t in 0..spec.tokens {
            let r = k * spec.tokens + t;
            for j in 0..spec.d {
                let p = protos.rgb[action][j];
                let n1: f64 = noise.sample(&mut rng);
                let n2: f64 = noise.sample(&mut rng);
                rgb.set(r, j, a * p + (1.0 - a) * n1);
                depth.set(r, j, a * p + spec.beta * protos.disamb[action][j] + (1.0 - a) * n2);
            }
        }
        frames.push(frame);
    }
    Step::new(action, rgb, depth, frames)
}

/// A generated or imported world.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub graph: TaskGraph,
    pub episodes: Vec<Episode>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        spec.validate()?;
        let graph = gen_task_graph(spec)?;
        let protos = Prototypes::new(spec);
        let episodes = (0..spec.episodes)
            .into_par_iter()
            .map(|e| {
                let mut rng = spec.root().child("walk").index(e as u64).rng();
                let walk = sample_walk(&graph, spec, &mut rng)?;
                let steps = walk
                    .iter()
                    .enumerate()
                    .map(|(s, &a)| gen_step(spec, &protos, e, s, a))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Episode { steps })
            })
            .collect::<Result<Vec<_>>>()?;
        let splits = split_assignment(spec);
        Ok(Dataset {
            spec: spec.clone(),
            graph,
            episodes,
            splits,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Episode> {
        self.episodes
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(e, _)| e)
    }

    pub fn vocabulary(&self) -> Result<ActionVocabulary> {
        self.spec.vocabulary()
    }

    pub fn embedding_table(&self) -> EmbeddingTable {
        self.spec.embedding_table()
    }

    pub fn prototypes(&self) -> Prototypes {
        Prototypes::new(&self.spec)
    }
}

/// First episodes train, then validation, then test.
pub fn split_assignment(spec: &WorldSpec) -> Vec<Split> {
    let n = spec.episodes;
    let train = ((n as f64 * spec.train_frac).round() as usize).clamp(1, n - 2);
    let val = ((n as f64 * spec.val_frac).round() as usize).clamp(1, n - train - 1);
    (0..n)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}
