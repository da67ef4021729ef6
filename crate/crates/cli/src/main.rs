use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use glimpse::config::{HistoryChoice, Overrides, RunConfig};
use glimpse::experiment::commands::{
    blur_report_json, cmd_ablate, cmd_blur_stats, cmd_eval, cmd_gradcheck, cmd_keyframes, cmd_synth, cmd_train, Axis,
};
use glimpse::keyframe::KeyframePolicy;
use glimpse::{Error, Result};

/// Single-frame action anticipation experiments on synthetic assembly worlds.
#[derive(Debug, Parser)]
#[command(name = "glimpse", version)]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// World preset: ikea-like, meccano-like or assembly-like.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// gt, recognizer, noisy:RATE or file:PATH.
    #[arg(long = "history-source", global = true)]
    history_source: Option<String>,
    /// Laplacian variance threshold for blur keyframe selection.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Perturbs one operator's gradient so the check must fail.
    #[arg(long = "inject-fault", global = true, hide = true)]
    inject_fault: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the world and export it to OUT/dataset.
    Synth,
    /// Train the model (and its recognizer) on OUT/dataset.
    Train,
    /// Score OUT/model.ckpt on the test split.
    Eval,
    /// Train and score every variant of one axis.
    Ablate {
        /// modalities, fusion, keyframe or corruption.
        axis: String,
    },
    /// Pick a keyframe in every window of a frame manifest.
    Keyframes {
        manifest: PathBuf,
        /// none, cos, l2 or blur.
        #[arg(long, default_value = "blur")]
        policy: String,
    },
    /// Blur statistics of a frame manifest or of the configured world.
    BlurStats {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference check of every operator and fusion variant.
    Gradcheck,
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        preset: cli.preset.clone(),
        history: cli.history_source.as_deref().map(HistoryChoice::parse).transpose()?,
        threshold: cli.threshold,
    };
    match &cli.config {
        Some(p) => RunConfig::load(p, &ov),
        None => RunConfig::default_with(&ov),
    }
}

fn threads() -> Result<()> {
    let Ok(v) = std::env::var("GLIMPSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("GLIMPSE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<String> {
    threads()?;
    match &cli.command {
        Command::Synth => cmd_synth(&run_config(cli)?),
        Command::Train => cmd_train(&run_config(cli)?),
        Command::Eval => Ok(cmd_eval(&run_config(cli)?)?.row()),
        Command::Ablate { axis } => {
            let axis = Axis::from_key(axis)?;
            cmd_ablate(&run_config(cli)?, axis)
        }
        Command::Keyframes { manifest, policy } => {
            let policy = KeyframePolicy::from_key(policy)
                .ok_or_else(|| Error::config(format!("unknown keyframe policy `{policy}`")))?;
            let threshold = cli.threshold.unwrap_or(run_config(cli)?.model.threshold);
            let (listing, report) = cmd_keyframes(manifest, policy, threshold)?;
            Ok(listing + &blur_report_json(&report)?)
        }
        Command::BlurStats { manifest } => blur_report_json(&cmd_blur_stats(&run_config(cli)?, manifest.as_deref())?),
        Command::Gradcheck => Ok(cmd_gradcheck(cli.inject_fault.as_deref())?.text()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(Error::Check(report)) => {
            print!("{report}");
            eprintln!("glimpse: check failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("glimpse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
