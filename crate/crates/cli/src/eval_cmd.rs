use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use superglue_core::checkpoint::load_checkpoint;
use superglue_core::eval::{evaluate_manifest, nn_match, EvalReport, NnFilter};
use superglue_core::matcher::MatchSet;
use superglue_core::model::Model;
use superglue_core::synthgen::{DatasetManifest, TrainingPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatcherKind {
    /// Trained attentional matcher.
    Superglue,
    /// Plain nearest neighbor on descriptors.
    Nn,
    /// Nearest neighbor with the mutual check.
    NnMutual,
    /// Nearest neighbor with the ratio test.
    NnRatio,
}

#[derive(Parser)]
pub struct Args {
    /// SGWT checkpoint (required for the superglue matcher).
    #[arg(long)]
    model: Option<PathBuf>,

    /// Dataset manifest to evaluate on (pairs are regenerated).
    #[arg(long)]
    manifest: PathBuf,

    #[arg(long, value_enum)]
    matcher: MatcherKind,

    /// Ratio bound for the nn-ratio matcher.
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,

    /// Report JSON output path.
    #[arg(long)]
    out: PathBuf,

    /// Seed for the RANSAC sampler.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// AUC integration threshold in pixels.
    #[arg(long, default_value_t = 10.0)]
    auc_threshold: f64,
}

fn predictor(
    kind: MatcherKind,
    model: Option<Model>,
    ratio: f64,
) -> impl Fn(&TrainingPair) -> superglue_core::Result<MatchSet> + Sync {
    move |pair: &TrainingPair| match kind {
        MatcherKind::Superglue => {
            let model = model.as_ref().expect("superglue matcher needs a model");
            Ok(model.forward(&pair.features_a, &pair.features_b, false)?.matches)
        }
        MatcherKind::Nn => nn_match(&pair.features_a.descriptors, &pair.features_b.descriptors, NnFilter::Plain),
        MatcherKind::NnMutual => {
            nn_match(&pair.features_a.descriptors, &pair.features_b.descriptors, NnFilter::Mutual)
        }
        MatcherKind::NnRatio => {
            nn_match(&pair.features_a.descriptors, &pair.features_b.descriptors, NnFilter::Ratio(ratio))
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(manifest)
}

pub fn run(args: Args) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let model = match (args.matcher, &args.model) {
        (MatcherKind::Superglue, Some(path)) => {
            Some(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?.0)
        }
        (MatcherKind::Superglue, None) => {
            return Err(crate::UsageError("--matcher superglue requires --model".into()).into())
        }
        (_, _) => None,
    };
    let name = match args.matcher {
        MatcherKind::Superglue => "superglue",
        MatcherKind::Nn => "nn",
        MatcherKind::NnMutual => "nn-mutual",
        MatcherKind::NnRatio => "nn-ratio",
    };
    let report: EvalReport = evaluate_manifest(
        &manifest,
        name,
        predictor(args.matcher, model, args.ratio),
        args.seed,
        args.auc_threshold,
    )?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{} over {} pairs: AUC(RANSAC) {:.4}  AUC(DLT) {:.4}  P {:.4}  R {:.4}  MS {:.4}",
        report.matcher, report.num_pairs, report.auc_ransac, report.auc_dlt, report.precision,
        report.recall, report.matching_score
    );
    Ok(())
}
