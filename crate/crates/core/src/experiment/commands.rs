//! The command-line experiments. Every command reads a [`RunConfig`] and
//! writes under its output directory:
//!
//! ```text
//! dataset/                  exported world
//! model.ckpt                anticipation model
//! recognizer.ckpt           paired recognizer, for models with history input
//! train.json                fit reports
//! metrics-<source>.json     evaluation on the test split
//! ablate-<axis>.csv         one row per variant and history source
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::{evaluate_anticipation, fit_model, recognizer_config, EvalHistory};
use crate::config::{HistoryChoice, RunConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::gradcheck::{self, SuiteReport};
use crate::history::{load_external_history, CorruptionSpec, HistoryQueue};
use crate::io::write_atomic;
use crate::keyframe::{blur_stats_from_variances, load_windows, BlurReport, FrameWindow, KeyframePolicy};
use crate::model::{load_checkpoint, save_checkpoint, Modalities, Model, ModelConfig};
use crate::rng::Seed;
use crate::synth::{export_dataset, import_dataset, Dataset, Split};
use crate::tensor::{OpKind, Tensor};
use crate::train::{FitReport, MetricsRecord};

/// File layout of a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn dataset(&self) -> PathBuf {
        self.0.join("dataset")
    }

    pub fn model(&self) -> PathBuf {
        self.0.join("model.ckpt")
    }

    pub fn recognizer(&self) -> PathBuf {
        self.0.join("recognizer.ckpt")
    }

    pub fn train_report(&self) -> PathBuf {
        self.0.join("train.json")
    }

    pub fn metrics(&self, history: &HistoryChoice) -> PathBuf {
        let tag = match history {
            HistoryChoice::GroundTruth => "gt",
            HistoryChoice::Recognizer => "recognizer",
            HistoryChoice::Noisy(_) => "noisy",
            HistoryChoice::File(_) => "file",
        };
        self.0.join(format!("metrics-{tag}.json"))
    }

    pub fn ablation(&self, axis: Axis) -> PathBuf {
        self.0.join(format!("ablate-{}.csv", axis.key()))
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::data(format!("serializing: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Generates the configured world and exports it to `out/dataset`.
pub fn cmd_synth(rc: &RunConfig) -> Result<String> {
    let ds = Dataset::generate(&rc.world)?;
    let dir = RunDir(rc.out.clone()).dataset();
    export_dataset(&ds, &dir)?;
    let steps: usize = ds.episodes.iter().map(|e| e.len()).sum();
    Ok(format!(
        "wrote {} episodes ({steps} steps, {} classes) to {}\n",
        ds.episodes.len(),
        ds.spec.classes,
        dir.display()
    ))
}

/// Imports `out/dataset` and checks it was generated from the configured
/// world.
pub fn load_dataset(rc: &RunConfig) -> Result<Dataset> {
    let dir = RunDir(rc.out.clone()).dataset();
    if !dir.join("manifest.txt").is_file() {
        return Err(Error::config(format!(
            "no dataset at {}; run `synth` with the same configuration first",
            dir.display()
        )));
    }
    let ds = import_dataset(&dir)?;
    if ds.spec != rc.world {
        return Err(Error::config(format!(
            "dataset at {} was generated from a different world configuration",
            dir.display()
        )));
    }
    Ok(ds)
}

#[derive(Serialize)]
struct FitEntry {
    model: String,
    fit: FitReport,
}

#[derive(Serialize)]
struct TrainReport {
    model: FitEntry,
    recognizer: Option<FitEntry>,
}

/// Trains the anticipation model and, when it reads a history, its paired
/// recognizer.
pub fn cmd_train(rc: &RunConfig) -> Result<String> {
    let ds = load_dataset(rc)?;
    let run = RunDir(rc.out.clone());
    let (model, fit) = fit_model(&ds, &rc.model, &rc.train)?;
    save_checkpoint(&run.model(), &model)?;
    let mut text = format!(
        "model {}: {} epochs, best validation {:.4} at epoch {}\n",
        rc.model, fit.epochs_run, fit.best_metric, fit.best_epoch
    );
    let recognizer = if rc.model.modalities.ah {
        let cfg = recognizer_config(&rc.model);
        let (rec, rfit) = fit_model(&ds, &cfg, &rc.train)?;
        save_checkpoint(&run.recognizer(), &rec)?;
        text.push_str(&format!(
            "recognizer {cfg}: {} epochs, best validation {:.4} at epoch {}\n",
            rfit.epochs_run, rfit.best_metric, rfit.best_epoch
        ));
        Some(FitEntry {
            model: cfg.to_string(),
            fit: rfit,
        })
    } else {
        None
    };
    let report = TrainReport {
        model: FitEntry {
            model: rc.model.to_string(),
            fit,
        },
        recognizer,
    };
    write_atomic(&run.train_report(), to_json(&report)?.as_bytes())?;
    Ok(text)
}

/// Evaluation on the test split, as written to `metrics-<source>.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    /// `GT` or `Pred`.
    pub history_source: String,
    pub history: String,
    pub split: String,
    pub seed: u64,
    pub metrics: MetricsRecord,
}

impl EvalReport {
    /// One aligned result line: model, history source, top-1, top-5, recall.
    pub fn row(&self) -> String {
        format!(
            "{:<40} {:<4} {:>6.2} {:>6.2} {:>6.2}\n",
            self.model,
            self.history_source,
            100.0 * self.metrics.top1,
            100.0 * self.metrics.top5,
            100.0 * self.metrics.recall_at_5_class_mean
        )
    }
}

fn eval_seed(rc: &RunConfig) -> Seed {
    Seed::new(rc.seed).child("eval")
}

/// Scores a model on the test split with the history source of `choice`.
/// `recognizer` is required for [`HistoryChoice::Recognizer`].
pub fn evaluate_with(
    model: &Model,
    ds: &Dataset,
    choice: &HistoryChoice,
    recognizer: Option<&Model>,
    seed: Seed,
) -> Result<MetricsRecord> {
    let external: Vec<HistoryQueue>;
    let history = match choice {
        _ if !model.cfg.modalities.ah => EvalHistory::GroundTruth,
        HistoryChoice::GroundTruth => EvalHistory::GroundTruth,
        HistoryChoice::Noisy(r) => EvalHistory::Noisy(*r),
        HistoryChoice::Recognizer => EvalHistory::Recognizer(
            recognizer.ok_or_else(|| Error::config("recognizer history requested without a recognizer"))?,
        ),
        HistoryChoice::File(p) => {
            external = load_external_history(p, &ds.vocabulary()?, model.cfg.history_len)?;
            EvalHistory::External(&external)
        }
    };
    evaluate_anticipation(model, ds, Split::Test, history, seed)
}

/// Loads the trained model and scores it on the test split.
pub fn cmd_eval(rc: &RunConfig) -> Result<EvalReport> {
    let ds = load_dataset(rc)?;
    let run = RunDir(rc.out.clone());
    let model = load_checkpoint(&run.model(), Some(&rc.model))?;
    let recognizer = if rc.history == HistoryChoice::Recognizer && rc.model.modalities.ah {
        Some(load_checkpoint(&run.recognizer(), Some(&recognizer_config(&rc.model)))?)
    } else {
        None
    };
    let metrics = evaluate_with(&model, &ds, &rc.history, recognizer.as_ref(), eval_seed(rc))?;
    let report = EvalReport {
        model: rc.model.modalities.label().to_string(),
        history_source: rc.history.label().to_string(),
        history: rc.history.key(),
        split: Split::Test.key().to_string(),
        seed: rc.seed,
        metrics,
    };
    write_atomic(&run.metrics(&rc.history), to_json(&report)?.as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Modalities,
    Fusion,
    Keyframe,
    Corruption,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Modalities, Axis::Fusion, Axis::Keyframe, Axis::Corruption];

    pub fn key(self) -> &'static str {
        match self {
            Axis::Modalities => "modalities",
            Axis::Fusion => "fusion",
            Axis::Keyframe => "keyframe",
            Axis::Corruption => "corruption",
        }
    }

    pub fn from_key(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.key() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis `{s}` (expected modalities, fusion, keyframe or corruption)")))
    }

    /// Labelled model configurations along this axis, derived from `base`.
    pub fn variants(self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Axis::Modalities => [Modalities::RGB, Modalities::RGB_DEPTH, Modalities::AH, Modalities::RGB_AH, Modalities::ALL]
                .into_iter()
                .map(|m| (m.label().to_string(), with(&|c| c.modalities = m)))
                .collect(),
            Axis::Fusion => FusionVariant::ALL
                .into_iter()
                .map(|v| (v.label().to_string(), with(&|c| c.fusion = v)))
                .collect(),
            Axis::Keyframe => KeyframePolicy::ALL
                .into_iter()
                .map(|p| (p.label().to_string(), with(&|c| c.keyframe = p)))
                .collect(),
            Axis::Corruption => {
                let mut v = vec![
                    ("None".to_string(), with(&|c| c.corruption = CorruptionSpec::none())),
                    ("Noise".to_string(), with(&|c| c.corruption = CorruptionSpec::noise(0.1, 0.03))),
                ];
                for p in [0.1, 0.2, 0.3, 0.4, 0.5] {
                    v.push((format!("Swap p={p:.1}"), with(&|c| c.corruption = CorruptionSpec::swap(p))));
                }
                v
            }
        }
    }
}

/// One ablation result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: &'static str,
    pub variant: String,
    /// `None` for models without history input, otherwise `GT` or `Pred`.
    pub ah_source: &'static str,
    pub top1: f64,
    pub top5: f64,
    pub recall5: f64,
    pub epochs: usize,
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["axis", "variant", "ah_source", "top1", "top5", "recall5", "epochs"])
        .map_err(|e| Error::data(format!("writing CSV: {e}")))?;
    for r in rows {
        w.write_record([
            r.axis.to_string(),
            r.variant.clone(),
            r.ah_source.to_string(),
            format!("{:.2}", 100.0 * r.top1),
            format!("{:.2}", 100.0 * r.top5),
            format!("{:.2}", 100.0 * r.recall5),
            r.epochs.to_string(),
        ])
        .map_err(|e| Error::data(format!("writing CSV: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(format!("writing CSV: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::data(format!("writing CSV: {e}")))
}

/// Trains every variant of `axis` under the run's seeds and scores it with
/// ground-truth history and with the run's predicted-history source. When
/// the run asks for ground truth, the predicted rows use trained
/// recognizers: one per set of input modalities, otherwise configured as the
/// base model.
pub fn ablate(rc: &RunConfig, ds: &Dataset, axis: Axis) -> Result<Vec<AblationRow>> {
    let variants = axis.variants(&rc.model);
    let pred = match &rc.history {
        HistoryChoice::GroundTruth => HistoryChoice::Recognizer,
        other => other.clone(),
    };
    let mut rec_configs: Vec<ModelConfig> = Vec::new();
    if pred == HistoryChoice::Recognizer {
        for (_, cfg) in variants.iter().filter(|(_, c)| c.modalities.ah) {
            let rc_cfg = recognizer_config(&ModelConfig {
                modalities: cfg.modalities,
                ..rc.model.clone()
            });
            if !rec_configs.contains(&rc_cfg) {
                rec_configs.push(rc_cfg);
            }
        }
    }
    let jobs: Vec<&ModelConfig> = variants.iter().map(|(_, c)| c).chain(&rec_configs).collect();
    let trained = jobs
        .par_iter()
        .map(|cfg| fit_model(ds, cfg, &rc.train))
        .collect::<Result<Vec<_>>>()?;
    let (models, recognizers) = trained.split_at(variants.len());
    let seed = eval_seed(rc);
    let mut rows = Vec::new();
    for ((label, cfg), (model, fit)) in variants.iter().zip(models) {
        let sources: Vec<(&'static str, &HistoryChoice)> = if cfg.modalities.ah {
            vec![("GT", &HistoryChoice::GroundTruth), ("Pred", &pred)]
        } else {
            vec![("None", &HistoryChoice::GroundTruth)]
        };
        for (tag, choice) in sources {
            let rec = rec_configs
                .iter()
                .position(|c| c.modalities == recognizer_config(cfg).modalities)
                .map(|i| &recognizers[i].0);
            let m = evaluate_with(model, ds, choice, rec, seed)?;
            rows.push(AblationRow {
                axis: axis.key(),
                variant: label.clone(),
                ah_source: tag,
                top1: m.top1,
                top5: m.top5,
                recall5: m.recall_at_5_class_mean,
                epochs: fit.epochs_run,
            });
        }
    }
    Ok(rows)
}

/// Runs [`ablate`] on `out/dataset` and writes `ablate-<axis>.csv`.
pub fn cmd_ablate(rc: &RunConfig, axis: Axis) -> Result<String> {
    let ds = load_dataset(rc)?;
    let csv = ablation_csv(&ablate(rc, &ds, axis)?)?;
    write_atomic(&RunDir(rc.out.clone()).ablation(axis), csv.as_bytes())?;
    Ok(csv)
}

/// Attaches flattened pixels as embeddings so the centroid policies can run
/// on bare frames.
fn with_pixel_embeddings(w: FrameWindow) -> Result<FrameWindow> {
    if w.embeddings.is_some() {
        return Ok(w);
    }
    let n = w.frames[0].pixels().len();
    if w.frames.iter().any(|f| f.pixels().len() != n) {
        return Err(Error::Frame("frames of one window differ in size".into()));
    }
    let data = w.frames.iter().flat_map(|f| f.pixels().iter().copied()).collect();
    let emb = Tensor::from_vec(w.frames.len(), n, data)?;
    FrameWindow::new(w.frames, Some(emb))
}

/// Keyframe choice for every window of a frame manifest plus the blur
/// statistics of the whole stream.
pub fn cmd_keyframes(manifest: &Path, policy: KeyframePolicy, threshold: f64) -> Result<(String, BlurReport)> {
    let windows = load_windows(manifest)?;
    let mut listing = String::from("window frames chosen variance\n");
    let mut vars = Vec::with_capacity(windows.len());
    for (i, w) in windows.into_iter().enumerate() {
        let w = match policy {
            KeyframePolicy::Cosine | KeyframePolicy::L2 => with_pixel_embeddings(w)?,
            _ => w,
        };
        let v = w.variances();
        let k = policy.select_from(&v, w.embeddings.as_ref(), threshold)?;
        listing.push_str(&format!("{i} {} {k} {:.2}\n", w.len(), v[k]));
        vars.push(v);
    }
    let report = blur_stats_from_variances(vars.iter().map(Vec::as_slice), threshold)?;
    Ok((listing, report))
}

/// Blur statistics of a frame manifest, or of every step window of the
/// configured world when no manifest is given.
pub fn cmd_blur_stats(rc: &RunConfig, manifest: Option<&Path>) -> Result<BlurReport> {
    let threshold = rc.model.threshold;
    match manifest {
        Some(m) => Ok(cmd_keyframes(m, KeyframePolicy::Blur, threshold)?.1),
        None => {
            let ds = Dataset::generate(&rc.world)?;
            blur_stats_from_variances(
                ds.episodes
                    .iter()
                    .flat_map(|e| e.steps.iter().map(|s| s.variances.as_slice())),
                threshold,
            )
        }
    }
}

pub fn blur_report_json(r: &BlurReport) -> Result<String> {
    to_json(r)
}

/// Runs the finite-difference suite; with `fault`, the named operator's
/// backward pass is perturbed. Any failure is a check error carrying the
/// report.
pub fn cmd_gradcheck(fault: Option<&str>) -> Result<SuiteReport> {
    let fault = fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| Error::config(format!("unknown operator `{name}`"))))
        .transpose()?;
    let report = gradcheck::suite(2, fault)?;
    if report.passed() {
        Ok(report)
    } else {
        Err(Error::Check(report.text()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Overrides;

    fn tiny(dir: &Path) -> RunConfig {
        let text = "[world]\nepisodes = 12\nclasses = 6\nmin_len = 3\nmax_len = 5\n[train]\nepochs = 2\npatience = 1\n";
        let ov = Overrides {
            out: Some(dir.to_path_buf()),
            ..Overrides::default()
        };
        RunConfig::from_text(text, "t", &ov).unwrap()
    }

    #[test]
    fn axes_have_the_table_row_sets() {
        let base = RunConfig::default_with(&Overrides::default()).unwrap().model;
        let labels = |a: Axis| a.variants(&base).into_iter().map(|v| v.0).collect::<Vec<_>>();
        assert_eq!(labels(Axis::Keyframe), ["None", "Cos", "L2", "Blur"]);
        assert_eq!(
            labels(Axis::Corruption),
            ["None", "Noise", "Swap p=0.1", "Swap p=0.2", "Swap p=0.3", "Swap p=0.4", "Swap p=0.5"]
        );
        assert_eq!(labels(Axis::Fusion).len(), 16);
        assert_eq!(labels(Axis::Modalities).len(), 5);
        assert!(Axis::from_key("colour").is_err());
    }

    #[test]
    fn eval_without_dataset_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_eval(&tiny(dir.path())).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{err}");
    }

    #[test]
    fn world_mismatch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let rc = tiny(dir.path());
        cmd_synth(&rc).unwrap();
        let mut other = rc.clone();
        other.world.alpha = 0.1;
        assert!(matches!(load_dataset(&other), Err(Error::Config(_))));
    }

    #[test]
    fn train_then_eval_writes_tagged_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let mut rc = tiny(dir.path());
        cmd_synth(&rc).unwrap();
        cmd_train(&rc).unwrap();
        assert!(RunDir(rc.out.clone()).recognizer().is_file());
        let gt = cmd_eval(&rc).unwrap();
        rc.history = HistoryChoice::Recognizer;
        let pred = cmd_eval(&rc).unwrap();
        assert_eq!((gt.history_source.as_str(), pred.history_source.as_str()), ("GT", "Pred"));
        assert_eq!(gt.metrics.samples, pred.metrics.samples);
    }
}
