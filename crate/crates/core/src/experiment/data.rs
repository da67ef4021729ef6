//! Turning episodes into model samples and scoring models on whole episodes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::history::HistoryQueue;
use crate::model::{anticipate_episode, HistorySource, Model, ModelConfig, Recognizer, Sample, StepTokens, Task};
use crate::rng::Seed;
use crate::synth::{Dataset, Episode, Split, WorldSpec};
use crate::tensor::Tensor;
use crate::train::MetricsRecord;

fn sample(cfg: &ModelConfig, tokens: StepTokens, history: Option<HistoryQueue>, target: usize) -> Sample {
    let m = cfg.modalities;
    Sample {
        rgb: m.rgb.then_some(tokens.rgb.clone()),
        depth: m.depth.then_some(tokens.depth),
        history: if m.ah { history } else { None },
        target,
    }
}

/// Samples with ground-truth history. Anticipation pairs step `i` with the
/// action of step `i + 1` and a history ending at action `i`; recognition
/// pairs step `i` with its own action and the history before it.
pub fn episode_samples(cfg: &ModelConfig, ep: &Episode) -> Result<Vec<Sample>> {
    let vocab_len = cfg.classes;
    let mut q = HistoryQueue::new(cfg.history_len)?;
    let mut out = Vec::with_capacity(ep.len());
    for (i, st) in ep.steps.iter().enumerate() {
        if st.action >= vocab_len {
            return Err(Error::Label {
                target: st.action,
                classes: vocab_len,
            });
        }
        let tokens = st.selected_tokens(cfg.keyframe, cfg.threshold)?;
        match cfg.task {
            Task::Anticipate => {
                push(&mut q, st.action);
                if let Some(next) = ep.steps.get(i + 1) {
                    out.push(sample(cfg, tokens, Some(q.clone()), next.action));
                }
            }
            Task::Recognize => {
                out.push(sample(cfg, tokens, Some(q.clone()), st.action));
                push(&mut q, st.action);
            }
        }
    }
    Ok(out)
}

/// Ground-truth histories never repeat an action back to back, so a raw push
/// equals a completed-action push.
fn push(q: &mut HistoryQueue, a: usize) {
    if q.newest() != Some(a) {
        q.push_raw(a);
    }
}

pub fn split_samples(ds: &Dataset, split: Split, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    check_compatible(ds, cfg)?;
    let parts = ds
        .split(split)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|ep| episode_samples(cfg, ep))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn check_compatible(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    check_compatible_spec(&ds.spec, cfg)
}

pub fn check_compatible_spec(s: &WorldSpec, cfg: &ModelConfig) -> Result<()> {
    if cfg.classes != s.classes || cfg.d != s.d || cfg.text_dim != s.text_dim {
        return Err(Error::config(format!(
            "model expects classes={} d={} text_dim={}, world has classes={} d={} text_dim={}",
            cfg.classes, cfg.d, cfg.text_dim, s.classes, s.d, s.text_dim
        )));
    }
    Ok(())
}

/// How the anticipator's history is produced at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalHistory<'a> {
    GroundTruth,
    /// A trained recognizer feeding its own predictions back.
    Recognizer(&'a Model),
    /// The true action, replaced by a random wrong one at this rate.
    Noisy(f64),
    /// One queue per anticipated step of the split, episode order.
    External(&'a [HistoryQueue]),
}

impl EvalHistory<'_> {
    /// `GT` or `Pred`, as history sources are labelled in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            EvalHistory::GroundTruth => "GT",
            _ => "Pred",
        }
    }
}

/// Logits and targets of every anticipated step in `split`, episode order.
pub fn anticipation_logits(
    model: &Model,
    ds: &Dataset,
    split: Split,
    history: EvalHistory<'_>,
    seed: Seed,
) -> Result<(Tensor, Vec<usize>)> {
    check_compatible(ds, &model.cfg)?;
    if model.cfg.task != Task::Anticipate {
        return Err(Error::config("evaluating anticipation with a recognition model"));
    }
    let vocab = ds.vocabulary()?;
    let table = ds.embedding_table();
    let eps: Vec<(usize, &Episode)> = ds
        .episodes
        .iter()
        .enumerate()
        .filter(|(i, _)| ds.splits[*i] == split)
        .collect();
    let mut offsets = Vec::with_capacity(eps.len());
    let mut total = 0;
    for (_, ep) in &eps {
        offsets.push(total);
        total += ep.len().saturating_sub(1);
    }
    if let EvalHistory::External(qs) = history {
        if qs.len() != total {
            return Err(Error::data(format!(
                "external history has {} steps, split `{}` anticipates {total}",
                qs.len(),
                split.key()
            )));
        }
    }
    let per_episode = eps
        .par_iter()
        .zip(&offsets)
        .map(|(&(i, ep), &offset)| {
            let cfg = &model.cfg;
            let steps = ep
                .steps
                .iter()
                .map(|s| s.selected_tokens(cfg.keyframe, cfg.threshold))
                .collect::<Result<Vec<_>>>()?;
            let actions = ep.actions();
            let rec_table;
            let mut rec = match history {
                EvalHistory::GroundTruth | EvalHistory::External(_) => None,
                EvalHistory::Recognizer(r) => {
                    check_compatible(ds, &r.cfg)?;
                    if r.cfg.task != Task::Recognize {
                        return Err(Error::config("history recognizer must be a recognition model"));
                    }
                    rec_table = ds.embedding_table();
                    Some(Recognizer::Model {
                        model: r,
                        table: &rec_table,
                    })
                }
                EvalHistory::Noisy(rate) => Some(Recognizer::Noisy {
                    error_rate: rate,
                    rng: seed.child("recognizer").index(i as u64).rng(),
                }),
            };
            let source = match (rec.as_mut(), history) {
                (None, EvalHistory::External(qs)) => HistorySource::External(&qs[offset..]),
                (None, _) => HistorySource::GroundTruth,
                (Some(r), _) => HistorySource::Recognizer(r),
            };
            anticipate_episode(model, Some(&table), &vocab, &steps, &actions, source)
        })
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<_> = per_episode.into_iter().flatten().collect();
    if preds.is_empty() {
        return Err(Error::data(format!("split `{}` has nothing to anticipate", split.key())));
    }
    let c = model.cfg.classes;
    let mut logits = Tensor::zeros(preds.len(), c);
    for (r, p) in preds.iter().enumerate() {
        logits.row_mut(r).copy_from_slice(&p.logits);
    }
    Ok((logits, preds.iter().map(|p| p.target).collect()))
}

pub fn evaluate_anticipation(
    model: &Model,
    ds: &Dataset,
    split: Split,
    history: EvalHistory<'_>,
    seed: Seed,
) -> Result<MetricsRecord> {
    let (logits, targets) = anticipation_logits(model, ds, split, history, seed)?;
    MetricsRecord::compute(&logits, &targets)
}
