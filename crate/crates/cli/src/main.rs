//! Command-line driver: data generation, training, matching, evaluation,
//! benchmarking, property verification, and SVG visualization.

mod bench_cmd;
mod eval_cmd;
mod gen_data;
mod match_cmd;
mod svg;
mod train_cmd;
mod verify_cmd;
mod viz_cmd;

use clap::{Parser, Subcommand};

/// Errors that reflect bad invocations rather than runtime failures; they
/// exit with status 2, like argument-parsing errors.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "superglue", version, about = "Attentional graph matching of local features")]
struct Cli {
    /// Worker threads for data generation and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a regenerable synthetic-dataset manifest (and optionally export pairs).
    GenData(gen_data::Args),
    /// Train a matcher from a JSON config; checkpoints the best model by validation score.
    Train(train_cmd::Args),
    /// Match two feature files with a trained model.
    Match(match_cmd::Args),
    /// Homography-estimation evaluation of a matcher over a dataset manifest.
    EvalHomography(eval_cmd::Args),
    /// Render keypoints and matches side by side as SVG.
    Viz(viz_cmd::Args),
    /// Wall-time of the network and matching blocks across keypoint counts.
    Bench(bench_cmd::Args),
    /// Run the property suite (equivariance, transport, gradients).
    Verify(verify_cmd::Args),
}

fn main() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(err) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: failed to configure {jobs} worker threads: {err}");
            std::process::exit(1);
        }
    }
    let result = match cli.command {
        Command::GenData(args) => gen_data::run(args),
        Command::Train(args) => train_cmd::run(args),
        Command::Match(args) => match_cmd::run(args),
        Command::EvalHomography(args) => eval_cmd::run(args),
        Command::Viz(args) => viz_cmd::run(args),
        Command::Bench(args) => bench_cmd::run(args),
        Command::Verify(args) => verify_cmd::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        let code = if err.downcast_ref::<UsageError>().is_some() { 2 } else { 1 };
        std::process::exit(code);
    }
}
