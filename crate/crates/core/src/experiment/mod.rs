//! Experiment recipes shared by the command line and the acceptance suite.

pub mod commands;
mod data;

pub use data::{
    anticipation_logits, check_compatible, check_compatible_spec, episode_samples, evaluate_anticipation, split_samples,
    EvalHistory,
};

use crate::error::Result;
use crate::model::{Modalities, Model, ModelConfig, Task};
use crate::rng::Seed;
use crate::synth::{Dataset, Split, WorldSpec};
use crate::train::{train_model, FitReport, TrainSpec};

/// Small model sized for the synthetic worlds.
pub fn desk_model(spec: &WorldSpec, modalities: Modalities) -> ModelConfig {
    ModelConfig {
        d: spec.d,
        layers: 1,
        heads: 2,
        text_dim: spec.text_dim,
        classes: spec.classes,
        modalities,
        ..ModelConfig::full_size(spec.classes)
    }
}

/// Short, higher-learning-rate schedule that converges on the synthetic
/// worlds in seconds.
pub fn desk_training(seed: u64) -> TrainSpec {
    TrainSpec {
        epochs: 40,
        patience: 6,
        lr: 3e-3,
        seed,
        ..TrainSpec::default()
    }
}

/// Initializes from `spec.seed` and trains on the train split, stopping on
/// the validation split.
pub fn fit_model(ds: &Dataset, cfg: &ModelConfig, spec: &TrainSpec) -> Result<(Model, FitReport)> {
    let train = split_samples(ds, Split::Train, cfg)?;
    let val = split_samples(ds, Split::Val, cfg)?;
    let model = Model::new(cfg.clone(), Seed::new(spec.seed))?;
    let table = ds.embedding_table();
    train_model(model, &train, &val, cfg.modalities.ah.then_some(&table), spec)
}

/// The recognizer paired with an anticipator: same settings, recognition
/// task, the anticipator's visual inputs plus history. A history-only
/// anticipator is paired with an RGB, depth and history recognizer.
pub fn recognizer_config(cfg: &ModelConfig) -> ModelConfig {
    let modalities = if cfg.modalities.visual() {
        Modalities {
            ah: true,
            ..cfg.modalities
        }
    } else {
        Modalities::ALL
    };
    ModelConfig {
        task: Task::Recognize,
        modalities,
        corruption: crate::history::CorruptionSpec::none(),
        ..cfg.clone()
    }
}
