//! Action vocabulary, per-action embeddings, the bounded history queue, and
//! the training-time history corruption operators.

mod external;

pub use external::{load_external_history, parse_history};

use std::collections::{HashMap, VecDeque};

use rand::Rng as _;
use rand_distr::{Bernoulli, Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{Rng, Seed};
use crate::tensor::Tensor;

/// Action id ↔ name mapping. Ids are `0..len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ActionVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            if name.is_empty() || name.trim() != name {
                return Err(Error::Vocabulary(format!(
                    "action {id} has an empty or padded name {name:?}"
                )));
            }
            if name.contains([';', '#', '\n', '\r']) {
                return Err(Error::Vocabulary(format!(
                    "action name {name:?} contains a reserved character"
                )));
            }
            if index.insert(name.clone(), id).is_some() {
                return Err(Error::Vocabulary(format!("duplicate action name {name:?}")));
            }
        }
        if names.is_empty() {
            return Err(Error::Vocabulary("empty vocabulary".into()));
        }
        Ok(ActionVocabulary { names, index })
    }

    /// `step_00`, `step_01`, ...
    pub fn synthetic(classes: usize) -> Result<Self> {
        let width = classes.saturating_sub(1).to_string().len().max(2);
        Self::new((0..classes).map(|i| format!("step_{i:0width$}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn check(&self, id: usize) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::Vocabulary(format!(
                "action id {id} outside vocabulary of {}",
                self.len()
            )))
        }
    }
}

/// Fixed per-action text embeddings, plus one padding row for "no action".
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    table: Tensor,
}

impl EmbeddingTable {
    /// Unit-norm Gaussian rows, one independent substream per id.
    pub fn synthetic(classes: usize, dim: usize, seed: Seed) -> Self {
        let mut table = Tensor::zeros(classes + 1, dim);
        for id in 0..=classes {
            let mut rng = seed.child("embedding").index(id as u64).rng();
            let row = Tensor::randn(1, dim, 1.0, &mut rng);
            let norm = row.values().iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (o, v) in table.row_mut(id).iter_mut().zip(row.values()) {
                *o = v / norm;
            }
        }
        EmbeddingTable { table }
    }

    pub fn from_tensor(table: Tensor) -> Result<Self> {
        if table.rows() < 2 {
            return Err(Error::Vocabulary(
                "embedding table needs at least one action and the padding row".into(),
            ));
        }
        Ok(EmbeddingTable { table })
    }

    pub fn classes(&self) -> usize {
        self.table.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn padding_id(&self) -> usize {
        self.classes()
    }

    pub fn row(&self, id: usize) -> Result<&[f64]> {
        if id >= self.table.rows() {
            return Err(Error::Vocabulary(format!(
                "action id {id} outside embedding table of {}",
                self.classes()
            )));
        }
        Ok(self.table.row(id))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }
}

/// Bounded FIFO of completed action ids, newest last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryQueue {
    capacity: usize,
    items: VecDeque<usize>,
}

impl HistoryQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("history capacity must be positive"));
        }
        Ok(HistoryQueue {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    /// Queue holding the last `capacity` of `items`.
    pub fn from_items(capacity: usize, items: &[usize]) -> Result<Self> {
        let mut q = Self::new(capacity)?;
        for &id in items {
            q.push_raw(id);
        }
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> Vec<usize> {
        self.items.iter().copied().collect()
    }

    pub fn newest(&self) -> Option<usize> {
        self.items.back().copied()
    }

    /// Appends without deduplication, evicting the oldest item when full.
    pub fn push_raw(&mut self, id: usize) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(id);
    }

    /// Records a completed action. Repeating the newest action is a no-op.
    pub fn push_completed(&mut self, id: usize, vocab: &ActionVocabulary) -> Result<()> {
        vocab.check(id)?;
        if self.newest() != Some(id) {
            self.push_raw(id);
        }
        Ok(())
    }
}

/// Concatenated embeddings of the queue, left-padded to the capacity:
/// `1 × (N · D_txt)`, oldest first.
pub fn embed_history(queue: &HistoryQueue, table: &EmbeddingTable) -> Result<Tensor> {
    let n = queue.capacity();
    let d = table.dim();
    let mut out = Vec::with_capacity(n * d);
    for _ in queue.len()..n {
        out.extend_from_slice(table.row(table.padding_id())?);
    }
    for id in queue.items() {
        if id >= table.classes() {
            return Err(Error::Vocabulary(format!(
                "action id {id} outside embedding table of {}",
                table.classes()
            )));
        }
        out.extend_from_slice(table.row(id)?);
    }
    Tensor::from_vec(1, n * d, out)
}

/// Whether stochastic corruption may run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    None,
    Noise,
    Swap,
}

impl CorruptionKind {
    pub fn key(self) -> &'static str {
        match self {
            CorruptionKind::None => "none",
            CorruptionKind::Noise => "noise",
            CorruptionKind::Swap => "swap",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        match s {
            "none" => Some(CorruptionKind::None),
            "noise" => Some(CorruptionKind::Noise),
            "swap" => Some(CorruptionKind::Swap),
            _ => None,
        }
    }
}

/// Default noise standard deviation.
pub const DEFAULT_SIGMA: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub p: f64,
    pub sigma: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            kind: CorruptionKind::None,
            p: 0.0,
            sigma: DEFAULT_SIGMA,
        }
    }
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn noise(p: f64, sigma: f64) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::Noise,
            p,
            sigma,
        }
    }

    pub fn swap(p: f64) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::Swap,
            p,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!("corruption p={} outside [0,1]", self.p)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("noise sigma={} must be non-negative", self.sigma)));
        }
        if self.kind == CorruptionKind::Noise && self.p >= 1.0 {
            return Err(Error::config("noise corruption needs p < 1"));
        }
        Ok(())
    }
}

/// One draw of the dropout-plus-noise operator as an affine map
/// `x ↦ x ⊙ scale + offset`, so it can be applied on a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub scale: Tensor,
    pub offset: Tensor,
}

pub fn draw_noise(rows: usize, cols: usize, p: f64, sigma: f64, rng: &mut Rng) -> Result<NoiseDraw> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!(
            "noise corruption needs 0 <= p < 1, got p={p}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("noise sigma={sigma} must be non-negative")));
    }
    let keep = Bernoulli::new(1.0 - p).map_err(|e| Error::config(e.to_string()))?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    let inv = 1.0 / (1.0 - p);
    let mut scale = Tensor::zeros(rows, cols);
    let mut offset = Tensor::zeros(rows, cols);
    for (s, o) in scale.values_mut().iter_mut().zip(offset.values_mut()) {
        *s = if keep.sample(rng) { inv } else { 0.0 };
        *o = if sigma > 0.0 { normal.sample(rng) } else { 0.0 };
    }
    Ok(NoiseDraw { scale, offset })
}

/// Inverted dropout with keep probability `1 - p`, then additive
/// `N(0, sigma²)` noise.
pub fn corrupt_noise(x: &Tensor, p: f64, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    let draw = draw_noise(x.rows(), x.cols(), p, sigma, rng)?;
    let mut out = x.clone();
    out.zero_grad();
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        *v = *v * draw.scale.values()[i] + draw.offset.values()[i];
    }
    Ok(out)
}

/// Replaces each slot with probability `p` by a uniformly drawn different id.
pub fn corrupt_swap(queue: &HistoryQueue, p: f64, classes: usize, rng: &mut Rng) -> Result<HistoryQueue> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("swap probability {p} outside [0,1]")));
    }
    if p > 0.0 && classes < 2 {
        return Err(Error::config("action swapping needs at least two classes"));
    }
    let mut out = queue.clone();
    for slot in out.items.iter_mut() {
        if p > 0.0 && rng.random_bool(p) {
            let r = rng.random_range(0..classes - 1);
            *slot = if r >= *slot { r + 1 } else { r };
        }
    }
    Ok(out)
}

/// Applies a [`CorruptionSpec`] from its own random stream and counts how
/// often it actually perturbed something.
#[derive(Debug, Clone)]
pub struct Corruptor {
    spec: CorruptionSpec,
    rng: Rng,
    applied: u64,
}

impl Corruptor {
    pub fn new(spec: CorruptionSpec, seed: Seed) -> Result<Self> {
        spec.validate()?;
        Ok(Corruptor {
            spec,
            rng: seed.child("corruption").rng(),
            applied: 0,
        })
    }

    pub fn spec(&self) -> CorruptionSpec {
        self.spec
    }

    /// Number of corruption applications so far.
    pub fn applied(&self) -> u64 {
        self.applied
    }

    pub fn swap(&mut self, queue: &HistoryQueue, classes: usize, mode: Mode) -> Result<HistoryQueue> {
        if mode == Mode::Infer || self.spec.kind != CorruptionKind::Swap {
            return Ok(queue.clone());
        }
        self.applied += 1;
        corrupt_swap(queue, self.spec.p, classes, &mut self.rng)
    }

    pub fn noise(&mut self, rows: usize, cols: usize, mode: Mode) -> Result<Option<NoiseDraw>> {
        if mode == Mode::Infer || self.spec.kind != CorruptionKind::Noise {
            return Ok(None);
        }
        self.applied += 1;
        draw_noise(rows, cols, self.spec.p, self.spec.sigma, &mut self.rng).map(Some)
    }
}
