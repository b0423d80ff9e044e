use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;
use superglue_core::checkpoint::load_checkpoint;
use superglue_core::model::{Model, ModelConfig};
use superglue_core::property_suite::{
    json_report, junit_xml, run_equivariance_suite, run_gradient_suite, run_transport_suite,
};

#[derive(Parser)]
pub struct Args {
    /// Model for the equivariance checks; a seeded untrained desk-scale
    /// model is used when absent.
    #[arg(long)]
    model: Option<PathBuf>,

    /// Trials per equivariance / transport property.
    #[arg(long, default_value_t = 100)]
    trials: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// JUnit-style XML report path.
    #[arg(long)]
    xml: Option<PathBuf>,

    /// JSON verdict report path.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let model = match &args.model {
        Some(path) => load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?.0,
        None => Model::init(ModelConfig::desk(), args.seed)?,
    };

    let mut cases = Vec::new();
    cases.extend(run_equivariance_suite(&model, args.trials, args.seed)?);
    cases.extend(run_transport_suite(args.trials, args.seed)?);
    cases.extend(run_gradient_suite(args.seed)?);

    let failures: Vec<_> = cases.iter().filter(|c| !c.passed).collect();
    for case in &cases {
        if case.passed {
            println!("pass  {}", case.name);
        } else {
            println!("FAIL  {}  {}", case.name, case.detail);
        }
    }
    println!("{} checks, {} failures", cases.len(), failures.len());

    if let Some(path) = &args.xml {
        std::fs::write(path, junit_xml(&cases)).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.json {
        std::fs::write(path, json_report(&cases)?).with_context(|| format!("writing {}", path.display()))?;
    }
    if !failures.is_empty() {
        bail!("{} property checks failed", failures.len());
    }
    Ok(())
}
