use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use rayon::prelude::*;
use superglue_core::features::write_features;
use superglue_core::synthgen::{DatasetManifest, HomographyConfig, LabelsJson, SceneConfig};

#[derive(Parser)]
pub struct Args {
    /// Manifest path to write.
    #[arg(long)]
    out: PathBuf,

    /// Number of pairs described by the manifest.
    #[arg(long)]
    pairs: usize,

    /// Master seed; pairs derive from (seed, index).
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, default_value_t = 50)]
    num_points: usize,

    #[arg(long, default_value_t = 32)]
    descriptor_dim: usize,

    /// Std of the per-coordinate Gaussian descriptor perturbation.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,

    /// Fraction of true correspondences deleted from one side.
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,

    /// Random unmatched keypoints appended to each side.
    #[arg(long, default_value_t = 10)]
    distractors: usize,

    /// Image size as WxH.
    #[arg(long, default_value = "640x480", value_parser = parse_size)]
    image_size: (f64, f64),

    /// Also write each pair as SGFM feature files plus a labels JSON into
    /// this directory.
    #[arg(long)]
    export: Option<PathBuf>,
}

fn parse_size(text: &str) -> std::result::Result<(f64, f64), String> {
    let (w, h) = text.split_once('x').ok_or_else(|| format!("expected WxH, got {text:?}"))?;
    let w: f64 = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h: f64 = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    if w <= 0.0 || h <= 0.0 {
        return Err("image dimensions must be positive".into());
    }
    Ok((w, h))
}

pub fn run(args: Args) -> Result<()> {
    let config = SceneConfig {
        num_points: args.num_points,
        image_size: args.image_size,
        descriptor_dim: args.descriptor_dim,
        descriptor_noise: args.noise,
        dropout_rate: args.dropout,
        num_distractors: args.distractors,
        match_threshold: 3.0,
        unmatched_threshold: 3.0,
        homography: HomographyConfig::default_for(args.image_size),
    };
    let manifest = DatasetManifest::new(args.pairs, args.seed, config);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&args.out, &json).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote manifest for {} pairs to {}", args.pairs, args.out.display());

    if let Some(dir) = &args.export {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        (0..args.pairs).into_par_iter().try_for_each(|i| -> Result<()> {
            let pair = manifest.pair(i)?;
            write_features(&dir.join(format!("pair_{i:05}_a.sgfm")), &pair.features_a)?;
            write_features(&dir.join(format!("pair_{i:05}_b.sgfm")), &pair.features_b)?;
            let labels = LabelsJson::new(&pair.labels, &pair.homography);
            std::fs::write(
                dir.join(format!("pair_{i:05}_labels.json")),
                serde_json::to_string_pretty(&labels)?,
            )?;
            Ok(())
        })?;
        println!("exported {} pairs to {}", args.pairs, dir.display());
    }
    Ok(())
}
