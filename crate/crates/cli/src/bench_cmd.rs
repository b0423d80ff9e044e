use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use serde::Serialize;
use superglue_core::checkpoint::load_checkpoint;
use superglue_core::synthgen::{HomographyConfig, SceneConfig};

#[derive(Parser)]
pub struct Args {
    /// SGWT checkpoint.
    #[arg(long)]
    model: PathBuf,

    /// Keypoint counts to benchmark, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    keypoints: Vec<usize>,

    /// Timed runs per keypoint count (after one warmup).
    #[arg(long, default_value_t = 5)]
    repeats: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Optional JSON output path (a table prints to stdout regardless).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct BenchRow {
    keypoints: usize,
    gnn_ms_mean: f64,
    gnn_ms_stddev: f64,
    matching_ms_mean: f64,
    matching_ms_stddev: f64,
    total_ms_mean: f64,
}

fn mean_stddev(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn run(args: Args) -> Result<()> {
    let (model, _) =
        load_checkpoint(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let mut rows = Vec::new();
    println!("{:>10} {:>14} {:>14} {:>12}", "keypoints", "gnn (ms)", "matching (ms)", "total (ms)");
    for &count in &args.keypoints {
        let scene = SceneConfig {
            num_points: count,
            image_size: (640.0, 480.0),
            descriptor_dim: model.config.descriptor_dim,
            descriptor_noise: 0.1,
            dropout_rate: 0.0,
            num_distractors: 0,
            match_threshold: 3.0,
            unmatched_threshold: 3.0,
            homography: HomographyConfig::default_for((640.0, 480.0)),
        };
        let mut rng = superglue_core::rng::stream_rng(args.seed, &[0x62656e6368, count as u64]);
        let pair = superglue_core::synthgen::generate_scene(&mut rng, &scene)?;

        // warmup, then timed repeats
        let _ = model.forward_timed(&pair.features_a, &pair.features_b)?;
        let mut gnn_ms = Vec::with_capacity(args.repeats.max(1));
        let mut matching_ms = Vec::with_capacity(args.repeats.max(1));
        for _ in 0..args.repeats.max(1) {
            let (_, timings) = model.forward_timed(&pair.features_a, &pair.features_b)?;
            gnn_ms.push(timings.gnn_seconds * 1e3);
            matching_ms.push(timings.matching_seconds * 1e3);
        }
        let (gm, gs) = mean_stddev(&gnn_ms);
        let (mm, ms) = mean_stddev(&matching_ms);
        println!("{count:>10} {gm:>9.2}+/-{gs:<4.2} {mm:>9.2}+/-{ms:<4.2} {:>12.2}", gm + mm);
        rows.push(BenchRow {
            keypoints: count,
            gnn_ms_mean: gm,
            gnn_ms_stddev: gs,
            matching_ms_mean: mm,
            matching_ms_stddev: ms,
            total_ms_mean: gm + mm,
        });
    }
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&rows)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
