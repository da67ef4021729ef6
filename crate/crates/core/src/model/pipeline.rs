//! Inference over whole episodes: recognizing completed actions into the
//! history queue and anticipating the next action at every step.

use super::{Model, Sample};
use crate::error::{Error, Result};
use crate::history::{ActionVocabulary, EmbeddingTable, HistoryQueue};
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand::Rng as _;

/// Visual tokens of the selected keyframe of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTokens {
    pub rgb: Tensor,
    pub depth: Tensor,
}

/// Produces the "completed action" label for a step.
pub enum Recognizer<'a> {
    /// A trained recognition model fed with its own earlier predictions.
    Model {
        model: &'a Model,
        table: &'a EmbeddingTable,
    },
    /// Always returns the true action.
    Oracle,
    /// True action, replaced by a uniformly drawn wrong one with probability
    /// `error_rate`.
    Noisy { error_rate: f64, rng: Rng },
}

/// Where the anticipator's history comes from.
pub enum HistorySource<'a, 'b> {
    GroundTruth,
    Recognizer(&'b mut Recognizer<'a>),
    /// One queue per anticipated step.
    External(&'b [HistoryQueue]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepPrediction {
    pub step: usize,
    pub logits: Vec<f64>,
    pub target: usize,
    pub history: Vec<usize>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Takes the argmax of a recognizer's logits and pushes it as a completed
/// action.
pub fn recognize_from_logits(
    logits: &[f64],
    queue: &mut HistoryQueue,
    vocab: &ActionVocabulary,
) -> Result<usize> {
    if logits.len() != vocab.len() {
        return Err(Error::Dimension {
            op: "recognize",
            left: (1, logits.len()),
            right: (1, vocab.len()),
        });
    }
    let id = argmax(logits);
    queue.push_completed(id, vocab)?;
    Ok(id)
}

fn sample_for(model: &Model, tokens: &StepTokens, history: Option<&HistoryQueue>, target: usize) -> Sample {
    let m = model.cfg.modalities;
    Sample {
        rgb: m.rgb.then(|| tokens.rgb.clone()),
        depth: m.depth.then(|| tokens.depth.clone()),
        history: if m.ah { history.cloned() } else { None },
        target,
    }
}

/// Recognizes the action of one step and pushes it onto `queue`, which also
/// serves as a model recognizer's own history input.
pub fn recognize_step(
    recognizer: &mut Recognizer<'_>,
    tokens: &StepTokens,
    truth: usize,
    queue: &mut HistoryQueue,
    vocab: &ActionVocabulary,
) -> Result<usize> {
    vocab.check(truth)?;
    match recognizer {
        Recognizer::Model { model, table } => {
            if model.cfg.classes != vocab.len() {
                return Err(Error::config(format!(
                    "recognizer has {} classes, vocabulary has {}",
                    model.cfg.classes,
                    vocab.len()
                )));
            }
            let s = sample_for(model, tokens, Some(queue), truth);
            let y = model.logits(&[s], Some(table))?;
            recognize_from_logits(y.row(0), queue, vocab)
        }
        Recognizer::Oracle => {
            queue.push_completed(truth, vocab)?;
            Ok(truth)
        }
        Recognizer::Noisy { error_rate, rng } => {
            let c = vocab.len();
            let id = if c > 1 && rng.random_bool(error_rate.clamp(0.0, 1.0)) {
                let k = rng.random_range(0..c - 1);
                if k >= truth {
                    k + 1
                } else {
                    k
                }
            } else {
                truth
            };
            queue.push_completed(id, vocab)?;
            Ok(id)
        }
    }
}

/// Anticipates `actions[i + 1]` at every step `i` but the last. The history at
/// step `i` covers the actions completed up to and including step `i`.
pub fn anticipate_episode(
    model: &Model,
    table: Option<&EmbeddingTable>,
    vocab: &ActionVocabulary,
    steps: &[StepTokens],
    actions: &[usize],
    history: HistorySource<'_, '_>,
) -> Result<Vec<StepPrediction>> {
    if steps.len() != actions.len() {
        return Err(Error::data(format!(
            "{} steps but {} actions",
            steps.len(),
            actions.len()
        )));
    }
    let n = actions.len().saturating_sub(1);
    if n == 0 {
        return Ok(Vec::new());
    }
    let cap = model.cfg.history_len;
    let queues: Vec<HistoryQueue> = match history {
        HistorySource::GroundTruth => {
            let mut q = HistoryQueue::new(cap)?;
            let mut out = Vec::with_capacity(n);
            for &a in &actions[..n] {
                q.push_completed(a, vocab)?;
                out.push(q.clone());
            }
            out
        }
        HistorySource::Recognizer(rec) => {
            let mut q = HistoryQueue::new(cap)?;
            let mut out = Vec::with_capacity(n);
            for (tokens, &a) in steps[..n].iter().zip(&actions[..n]) {
                recognize_step(rec, tokens, a, &mut q, vocab)?;
                out.push(q.clone());
            }
            out
        }
        HistorySource::External(qs) => {
            if qs.len() < n {
                return Err(Error::data(format!(
                    "external history has {} steps, episode needs {n}",
                    qs.len()
                )));
            }
            qs[..n]
                .iter()
                .map(|q| HistoryQueue::from_items(cap, &q.items()))
                .collect::<Result<_>>()?
        }
    };
    let batch: Vec<Sample> = (0..n)
        .map(|i| sample_for(model, &steps[i], Some(&queues[i]), actions[i + 1]))
        .collect();
    let logits = model.logits(&batch, table)?;
    Ok((0..n)
        .map(|i| StepPrediction {
            step: i,
            logits: logits.row(i).to_vec(),
            target: actions[i + 1],
            history: queues[i].items(),
        })
        .collect())
}
