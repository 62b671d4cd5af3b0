//! Probe: train with a 1% memory and report per-mode accuracy, to see where
//! the damage relative to baseline comes from.

use reco_core::eval::{mode_report, zero_shot_classify, InferenceMode, Refiner};
use reco_core::fusion::{self, FusionConfig};
use reco_core::tensor::Tensor;
use reco_core::training::{train_fusion, RetrievalBackend, TrainConfig};
use reco_core::world::{generate_world, subsample_memory, WorldSpec};

fn main() {
    for seed in 0..2u64 {
        let spec = WorldSpec { seed, ..WorldSpec::default() };
        let world = generate_world(&spec).unwrap();
        let frac: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
        let subset = subsample_memory(&world.memory, frac, seed).unwrap();
        let baseline = zero_shot_classify(&world.task, InferenceMode::None, None).unwrap();
        let batch: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(128);
        let epochs: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(10);
        let cfg = TrainConfig { epochs, batch_size: batch, seed, ..TrainConfig::default() };
        let outcome =
            train_fusion(&world.train, &RetrievalBackend::Exact(&subset), &cfg, FusionConfig::default())
                .unwrap();
        let refiner = Refiner::standard(&outcome.params, &subset, cfg.k.min(subset.len()));
        let report = mode_report(&world.task, &refiner).unwrap();

        // adapter-only probe: run the branches with an empty retrieved set
        let empty: Vec<Tensor<f64>> = (0..world.task.queries.rows()).map(|_| Tensor::zeros(vec![0, world.spec.dim])).collect();
        let refs: Vec<&Tensor<f64>> = empty.iter().collect();
        let v_adapter = fusion::refine_batch(&outcome.params, fusion::Branch::Image, &world.task.queries, &refs).unwrap();
        let cempty: Vec<Tensor<f64>> = (0..world.task.class_embeddings.rows()).map(|_| Tensor::zeros(vec![0, world.spec.dim])).collect();
        let crefs: Vec<&Tensor<f64>> = cempty.iter().collect();
        let t_adapter = fusion::refine_batch(&outcome.params, fusion::Branch::Text, &world.task.class_embeddings, &crefs).unwrap();
        let mut task2 = world.task.clone();
        task2.queries = v_adapter;
        task2.class_embeddings = t_adapter;
        let adapter_acc = zero_shot_classify(&task2, InferenceMode::None, None).unwrap();

        println!(
            "seed {seed}: baseline {:.3} | v-only {:.3} | t-only {:.3} | both {:.3} | adapter-only {:.3} | inv_tau {:.2}",
            baseline,
            report.accuracy_image,
            report.accuracy_text,
            report.accuracy_both,
            adapter_acc,
            outcome.metrics.last().map(|m| m.inv_tau).unwrap_or(f64::NAN)
        );
    }
}
