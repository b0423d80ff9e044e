use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;
use superglue_core::features::read_features;
use superglue_core::matcher::MatchSet;
use superglue_core::synthgen::LabelsJson;

use crate::svg;

#[derive(Parser)]
pub struct Args {
    /// Match JSON produced by the match or eval commands.
    #[arg(long)]
    matches: PathBuf,

    #[arg(long)]
    features_a: PathBuf,

    #[arg(long)]
    features_b: PathBuf,

    /// Labels JSON; when given, lines are green (correct) or red (wrong)
    /// instead of confidence-colored.
    #[arg(long)]
    labels: Option<PathBuf>,

    /// SVG output path.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let features_a = read_features(&args.features_a)
        .with_context(|| format!("reading {}", args.features_a.display()))?;
    let features_b = read_features(&args.features_b)
        .with_context(|| format!("reading {}", args.features_b.display()))?;
    let matches: MatchSet = serde_json::from_str(
        &std::fs::read_to_string(&args.matches)
            .with_context(|| format!("reading {}", args.matches.display()))?,
    )
    .with_context(|| format!("parsing {}", args.matches.display()))?;

    for m in &matches.matches {
        if m.i >= features_a.len() || m.j >= features_b.len() {
            bail!(
                "match ({}, {}) is out of bounds for {} x {} keypoints",
                m.i,
                m.j,
                features_a.len(),
                features_b.len()
            );
        }
    }

    let labels = match &args.labels {
        Some(path) => {
            let json: LabelsJson = serde_json::from_str(
                &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            )?;
            Some(json.labels())
        }
        None => None,
    };

    let rendered = svg::render(&features_a, &features_b, &matches, labels.as_ref());
    std::fs::write(&args.out, rendered).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
