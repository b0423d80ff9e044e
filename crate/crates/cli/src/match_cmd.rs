use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use serde::Serialize;
use superglue_core::checkpoint::load_checkpoint;
use superglue_core::features::read_features;
use superglue_core::gnn::EdgeType;
use superglue_core::matcher::MatchSet;

#[derive(Parser)]
pub struct Args {
    /// SGWT checkpoint.
    #[arg(long)]
    model: PathBuf,

    #[arg(long)]
    features_a: PathBuf,

    #[arg(long)]
    features_b: PathBuf,

    /// Confidence threshold for retaining matches (default: the model's).
    #[arg(long)]
    threshold: Option<f64>,

    /// Match JSON output path.
    #[arg(long)]
    out: PathBuf,

    /// Also write per-layer attention weights to this JSON file.
    #[arg(long)]
    record_attention: Option<PathBuf>,
}

#[derive(Serialize)]
struct AttentionJson {
    layers: Vec<AttentionLayerJson>,
}

#[derive(Serialize)]
struct AttentionLayerJson {
    edge_type: EdgeType,
    /// Per head, row-major weight matrices for image-A queries.
    weights_a: Vec<Vec<Vec<f64>>>,
    weights_b: Vec<Vec<Vec<f64>>>,
}

pub fn write_match_json(path: &std::path::Path, matches: &MatchSet) -> Result<()> {
    let json = serde_json::to_string_pretty(matches)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn run(args: Args) -> Result<()> {
    let (mut model, _params) =
        load_checkpoint(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    if let Some(threshold) = args.threshold {
        model.config.match_threshold = threshold;
    }
    let features_a = read_features(&args.features_a)
        .with_context(|| format!("reading {}", args.features_a.display()))?;
    let features_b = read_features(&args.features_b)
        .with_context(|| format!("reading {}", args.features_b.display()))?;

    let out = model.forward(&features_a, &features_b, args.record_attention.is_some())?;
    write_match_json(&args.out, &out.matches)?;
    println!(
        "{} matches ({} and {} keypoints unmatched) -> {}",
        out.matches.matches.len(),
        out.matches.unmatched_a.len(),
        out.matches.unmatched_b.len(),
        args.out.display()
    );

    if let Some(path) = &args.record_attention {
        let record = out.attention.expect("attention recording was requested");
        let to_rows = |t: &superglue_core::autodiff::Tensor| -> Vec<Vec<f64>> {
            (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
        };
        let json = AttentionJson {
            layers: record
                .iter()
                .map(|layer| AttentionLayerJson {
                    edge_type: layer.edge_type,
                    weights_a: layer.weights_a.iter().map(&to_rows).collect(),
                    weights_b: layer.weights_b.iter().map(&to_rows).collect(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&json)?)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("attention record -> {}", path.display());
    }
    Ok(())
}
