use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Parser;
use serde::{Deserialize, Serialize};
use superglue_core::checkpoint::{load_train_state, save_checkpoint, save_train_state, TrainState};
use superglue_core::model::{Model, ModelConfig};
use superglue_core::synthgen::{generate_scene, SceneConfig, TrainingPair};
use superglue_core::training::{train_loop, AdamState, SyntheticSource, TrainConfig};

#[derive(Parser)]
pub struct Args {
    /// Training configuration (JSON, schema version 1).
    #[arg(long)]
    config: PathBuf,

    /// Checkpoint path; the metrics log goes to `<out>.metrics.jsonl` and the
    /// resumable training state to `<out>.train-state`.
    #[arg(long)]
    out: PathBuf,

    /// Continue from the training state written by a previous run.
    #[arg(long)]
    resume: bool,
}

pub const CONFIG_VERSION: u32 = 1;

/// On-disk training configuration. Unknown keys are errors.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub version: u32,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SceneConfig,
}

impl TrainFileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: TrainFileConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if config.version != CONFIG_VERSION {
            bail!("unsupported config version {} (expected {CONFIG_VERSION})", config.version);
        }
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }
}

/// Validation pairs derive from a stream disjoint from the training slots.
pub fn validation_pairs(data: &SceneConfig, seed: u64, count: usize) -> Result<Vec<TrainingPair>> {
    (0..count as u64)
        .map(|i| {
            let mut rng = superglue_core::rng::stream_rng(seed, &[0x76616c, i]);
            Ok(generate_scene(&mut rng, data)?)
        })
        .collect()
}

pub fn train_state_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".train-state");
    out.with_file_name(name)
}

pub fn metrics_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".metrics.jsonl");
    out.with_file_name(name)
}

pub fn run(args: Args) -> Result<()> {
    if !args.config.exists() {
        return Err(crate::UsageError(format!("config file {} does not exist", args.config.display())).into());
    }
    let config = TrainFileConfig::load(&args.config)?;
    let state_path = train_state_path(&args.out);

    let (mut model, adam, start_iteration, initial_best) = if args.resume {
        let state = load_train_state(&state_path)
            .with_context(|| format!("loading training state {}", state_path.display()))?;
        if state.model.config != config.model {
            bail!("training state was produced by a different model configuration");
        }
        let best = state.best_model.clone().map(|m| (state.best_score, m));
        println!("resuming from iteration {}", state.iteration);
        (state.model.clone(), state.adam, state.iteration, best)
    } else {
        (Model::init(config.model.clone(), config.init_seed)?, AdamState::new(), 0, None)
    };

    let validation = validation_pairs(&config.data, config.train.seed, config.train.val_pairs)?;
    let source = SyntheticSource { config: config.data.clone(), seed: config.train.seed };

    let metrics_file = metrics_path(&args.out);
    let mut metrics_out = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_file)
        .with_context(|| format!("opening metrics log {}", metrics_file.display()))?;

    let started = std::time::Instant::now();
    let outcome = train_loop(
        &mut model,
        &config.train,
        &source,
        &validation,
        adam,
        start_iteration,
        initial_best,
        |record| {
            let line = serde_json::to_string(record).expect("metrics record serializes");
            let _ = writeln!(metrics_out, "{line}");
            println!(
                "iter {:6}  loss {:10.4}  P {:.4}  R {:.4}  MS {:.4}  lr {:.3e}",
                record.iter, record.loss, record.precision, record.recall, record.matching_score, record.lr
            );
        },
    )?;

    if let Some(at) = outcome.exhausted_at {
        eprintln!("warning: data source exhausted at iteration {at}; stopping early");
    }

    save_checkpoint(&args.out, &outcome.best)
        .with_context(|| format!("writing checkpoint {}", args.out.display()))?;
    let state = TrainState {
        model: outcome.model,
        adam: outcome.adam,
        iteration: outcome.completed_iterations,
        best_score: outcome.best_score,
        best_model: Some(outcome.best),
    };
    save_train_state(&state_path, &state)
        .with_context(|| format!("writing training state {}", state_path.display()))?;
    println!(
        "finished at iteration {} in {:.1}s; checkpoint {} (best validation P*R {:.4})",
        outcome.completed_iterations,
        started.elapsed().as_secs_f64(),
        args.out.display(),
        state.best_score.max(0.0)
    );
    Ok(())
}
