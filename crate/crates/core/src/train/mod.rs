//! Training loop with early stopping, evaluation metrics and the modality
//! agreement breakdown.

mod agreement;
mod metrics;

pub use agreement::{agreement_breakdown, agreement_csv, write_agreement_csv, AgreementBreakdown};
pub use metrics::{
    class_mean_top5_recall, rank_of, top_k_accuracy, top_k_hits, ClassRecall, MetricsRecord,
};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::history::{Corruptor, EmbeddingTable, Mode};
use crate::model::{Model, Sample};
use crate::rng::Seed;
use crate::tensor::{AdamW, Graph, ParameterSet, Tensor};

/// Validation metric that drives early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Monitor {
    Top1,
    Recall5,
}

impl Monitor {
    pub fn key(self) -> &'static str {
        match self {
            Monitor::Top1 => "top1",
            Monitor::Recall5 => "recall5",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        match s {
            "top1" => Some(Monitor::Top1),
            "recall5" => Some(Monitor::Recall5),
            _ => None,
        }
    }

    pub fn read(self, logits: &Tensor, targets: &[usize]) -> Result<f64> {
        match self {
            Monitor::Top1 => top_k_accuracy(logits, targets, 1),
            Monitor::Recall5 => class_mean_top5_recall(logits, targets),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub patience: usize,
    pub improvement_threshold: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub monitor: Monitor,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 100,
            patience: 10,
            improvement_threshold: 0.001,
            batch_size: 32,
            lr: 5e-5,
            weight_decay: 0.01,
            monitor: Monitor::Top1,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs, patience and batch size must be positive"));
        }
        if self.patience > self.epochs {
            return Err(Error::config(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr) || !positive(self.improvement_threshold) || !positive(self.weight_decay) {
            return Err(Error::config(
                "learning rate, weight decay and improvement threshold must be positive",
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Waiting,
    Stop,
}

/// Patience counter over a validation metric where larger is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    threshold: f64,
    best: Option<(usize, f64)>,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, threshold: f64) -> Self {
        EarlyStopping {
            patience,
            threshold,
            best: None,
            waited: 0,
        }
    }

    /// Records the metric of `epoch` (1-based). An epoch improves when it beats
    /// the best so far by at least the threshold, with 1e-12 slack so that a
    /// gain of exactly the threshold counts despite rounding.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        let improved = match self.best {
            None => true,
            Some((_, best)) => metric - best >= self.threshold - 1e-12,
        };
        if improved {
            self.best = Some((epoch, metric));
            self.waited = 0;
            return Verdict::Improved;
        }
        self.waited += 1;
        if self.waited >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Waiting
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Anything the early-stopping loop can drive.
pub trait Trainable {
    type Snapshot;
    /// One pass over the training data; returns the mean loss.
    fn train_epoch(&mut self, epoch: usize) -> Result<f64>;
    fn validate(&mut self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
    pub train_loss: Vec<f64>,
    pub validation: Vec<f64>,
}

/// Runs epochs until patience runs out, then restores the best epoch.
pub fn fit<T: Trainable>(t: &mut T, spec: &TrainSpec) -> Result<FitReport> {
    spec.validate()?;
    let mut stopper = EarlyStopping::new(spec.patience, spec.improvement_threshold);
    let mut best = None;
    let mut report = FitReport {
        epochs_run: 0,
        best_epoch: 0,
        best_metric: f64::NAN,
        stopped_early: false,
        train_loss: Vec::new(),
        validation: Vec::new(),
    };
    for epoch in 1..=spec.epochs {
        report.train_loss.push(t.train_epoch(epoch)?);
        let m = t.validate()?;
        report.validation.push(m);
        report.epochs_run = epoch;
        match stopper.observe(epoch, m) {
            Verdict::Improved => best = Some(t.snapshot()),
            Verdict::Waiting => {}
            Verdict::Stop => {
                report.stopped_early = true;
                break;
            }
        }
    }
    let (epoch, metric) = stopper.best().expect("at least one epoch ran");
    report.best_epoch = epoch;
    report.best_metric = metric;
    t.restore(best.expect("first epoch always improves"));
    Ok(report)
}

/// Gradient-descent training of a [`Model`] on prepared samples.
pub struct ModelTrainer<'a> {
    pub model: Model,
    train: &'a [Sample],
    val: &'a [Sample],
    table: Option<&'a EmbeddingTable>,
    corruptor: Corruptor,
    opt: AdamW,
    batch_size: usize,
    monitor: Monitor,
    seed: Seed,
}

impl<'a> ModelTrainer<'a> {
    pub fn new(
        model: Model,
        train: &'a [Sample],
        val: &'a [Sample],
        table: Option<&'a EmbeddingTable>,
        spec: &TrainSpec,
    ) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::data("training and validation splits must be non-empty"));
        }
        let seed = Seed::new(spec.seed);
        Ok(ModelTrainer {
            corruptor: Corruptor::new(model.cfg.corruption, seed)?,
            model,
            train,
            val,
            table,
            opt: spec.optimizer(),
            batch_size: spec.batch_size,
            monitor: spec.monitor,
            seed,
        })
    }

    pub fn corruptions_applied(&self) -> u64 {
        self.corruptor.applied()
    }
}

/// Inference logits over `samples`, computed in fixed-size chunks.
pub fn predict(model: &Model, samples: &[Sample], table: Option<&EmbeddingTable>) -> Result<Tensor> {
    let parts = samples
        .chunks(256)
        .map(|c| model.logits(c, table))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::vstack(&refs)
}

pub fn evaluate(model: &Model, samples: &[Sample], table: Option<&EmbeddingTable>) -> Result<MetricsRecord> {
    let targets: Vec<usize> = samples.iter().map(|s| s.target).collect();
    MetricsRecord::compute(&predict(model, samples, table)?, &targets)
}

impl Trainable for ModelTrainer<'_> {
    type Snapshot = ParameterSet;

    fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.seed.child("order").index(epoch as u64).rng());
        let mut total = 0.0;
        for chunk in order.chunks(self.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| self.train[i].clone()).collect();
            let targets: Vec<usize> = batch.iter().map(|s| s.target).collect();
            let mut g = Graph::new();
            let logits = self
                .model
                .forward(&mut g, &batch, self.table, Mode::Train, Some(&mut self.corruptor))?;
            let loss = g.cross_entropy(logits, &targets)?;
            g.backward(loss)?;
            total += g.value(loss).get(0, 0) * chunk.len() as f64;
            self.model.params.zero_grad();
            g.store_grads(&mut self.model.params)?;
            self.opt.step(&mut self.model.params)?;
        }
        self.model.params.zero_grad();
        Ok(total / self.train.len() as f64)
    }

    fn validate(&mut self) -> Result<f64> {
        let targets: Vec<usize> = self.val.iter().map(|s| s.target).collect();
        self.monitor
            .read(&predict(&self.model, self.val, self.table)?, &targets)
    }

    fn snapshot(&self) -> ParameterSet {
        self.model.params.clone()
    }

    fn restore(&mut self, snapshot: ParameterSet) {
        self.model.params = snapshot;
    }
}

/// Trains `model` with early stopping and returns the best-epoch model.
pub fn train_model(
    model: Model,
    train: &[Sample],
    val: &[Sample],
    table: Option<&EmbeddingTable>,
    spec: &TrainSpec,
) -> Result<(Model, FitReport)> {
    let mut t = ModelTrainer::new(model, train, val, table, spec)?;
    let report = fit(&mut t, spec)?;
    Ok((t.model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replays a fixed metric sequence; the "parameters" are the epoch number.
    struct Scripted {
        metrics: Vec<f64>,
        epoch: usize,
        restored: Option<usize>,
    }

    impl Trainable for Scripted {
        type Snapshot = usize;
        fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
            self.epoch = epoch;
            Ok(0.0)
        }
        fn validate(&mut self) -> Result<f64> {
            Ok(self.metrics[(self.epoch - 1).min(self.metrics.len() - 1)])
        }
        fn snapshot(&self) -> usize {
            self.epoch
        }
        fn restore(&mut self, s: usize) {
            self.restored = Some(s);
        }
    }

    fn run(metrics: Vec<f64>, epochs: usize) -> (FitReport, usize) {
        let mut s = Scripted {
            metrics,
            epoch: 0,
            restored: None,
        };
        let spec = TrainSpec {
            epochs,
            ..TrainSpec::default()
        };
        let r = fit(&mut s, &spec).unwrap();
        (r, s.restored.unwrap())
    }

    #[test]
    fn hand_trace_stops_at_fourteen_with_epoch_four() {
        let mut m = vec![0.5, 0.6, 0.6005, 0.62];
        m.extend([0.62; 10]);
        let (r, restored) = run(m, 100);
        assert_eq!(r.epochs_run, 14);
        assert_eq!(r.best_epoch, 4);
        assert_eq!(restored, 4);
        assert!(r.stopped_early);
    }

    #[test]
    fn frozen_metric_runs_patience_plus_one() {
        let (r, restored) = run(vec![0.3], 100);
        assert_eq!(r.epochs_run, 11);
        assert_eq!(restored, 1);
    }

    #[test]
    fn exact_threshold_gains_never_stop() {
        let m: Vec<f64> = (0..40).map(|i| 0.1 + 0.001 * i as f64).collect();
        let (r, restored) = run(m, 40);
        assert_eq!(r.epochs_run, 40);
        assert!(!r.stopped_early);
        assert_eq!(restored, 40);
    }

    #[test]
    fn defaults_match_recipe() {
        let s = TrainSpec::default();
        assert_eq!(
            (s.epochs, s.patience, s.batch_size),
            (100, 10, 32)
        );
        assert_eq!((s.improvement_threshold, s.lr, s.weight_decay), (0.001, 5e-5, 0.01));
        assert_eq!(s.monitor, Monitor::Top1);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            TrainSpec { patience: 200, ..TrainSpec::default() },
            TrainSpec { batch_size: 0, ..TrainSpec::default() },
            TrainSpec { lr: -1.0, ..TrainSpec::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
