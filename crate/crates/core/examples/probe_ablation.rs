use std::time::Instant;
use rayon::prelude::*;
use superglue_core::model::{Model, ModelConfig, Variant};
use superglue_core::synthgen::{generate_scene, SceneConfig, TrainingPair};
use superglue_core::training::*;
use superglue_core::rng::stream_rng;

fn main() {
    let scene = SceneConfig::desk_default();
    let eval_pairs: Vec<TrainingPair> = (0..128u64)
        .map(|i| {
            let mut rng = stream_rng(5150, &[i]);
            generate_scene(&mut rng, &scene).unwrap()
        })
        .collect();

    for iters in [500u64, 1000, 2000] {
        for variant in [Variant::Full, Variant::NoCross, Variant::NoGnn] {
            let mut precisions = Vec::new();
            let mut recalls = Vec::new();
            let t0 = Instant::now();
            for seed in 0..3u64 {
                let mut mc = ModelConfig::desk();
                mc.normalize_mlp = false;
                mc.variant = variant;
                mc.sinkhorn_iterations = 30;
                let mut model = Model::init(mc, 300 + seed).unwrap();
                let tcfg = TrainConfig {
                    learning_rate: 3e-3,
                    decay_factor: 0.999,
                    decay_start: iters * 3 / 4,
                    iterations: iters,
                    batch_size: 4,
                    seed: 400 + seed,
                    eval_interval: iters,
                    val_pairs: 0,
                };
                let source = SyntheticSource { config: scene.clone(), seed: tcfg.seed };
                let outcome = train_loop(&mut model, &tcfg, &source, &[], AdamState::new(), 0, None, |_| {}).unwrap();
                let mut m = outcome.model;
                m.config.sinkhorn_iterations = 50;
                let preds: Vec<_> = eval_pairs
                    .par_iter()
                    .map(|p| m.forward(&p.features_a, &p.features_b, false).unwrap().matches)
                    .collect();
                let (p, r, _) = evaluate_pr(&eval_pairs, &preds);
                precisions.push(p);
                recalls.push(r);
            }
            precisions.sort_by(|a, b| a.partial_cmp(b).unwrap());
            recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
            println!(
                "iters {iters:5} {variant:?}: P median {:.4} (all {:.4}/{:.4}/{:.4}) R median {:.4} [{:.0}s]",
                precisions[1], precisions[0], precisions[1], precisions[2], recalls[1],
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
