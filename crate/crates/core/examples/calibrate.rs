//! Calibration harness for the default world constants: reports baseline
//! accuracy, refined accuracy per inference mode, and retrieval hit rates
//! over a few seeds.

use reco_core::eval::{mode_report, zero_shot_classify, InferenceMode, Refiner};
use reco_core::fusion::FusionConfig;
use reco_core::training::{train_fusion, RetrievalBackend, TrainConfig};
use reco_core::world::{generate_world, world_report, WorldSpec};

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.parse::<u64>().unwrap())
        .map(|n| (0..n).collect())
        .unwrap_or_else(|| vec![0, 1, 2]);
    let mut deltas = Vec::new();
    for seed in seeds {
        let t0 = std::time::Instant::now();
        let spec = WorldSpec { seed, ..WorldSpec::default() };
        let world = generate_world(&spec).unwrap();
        let report = world_report(&world).unwrap();
        let baseline = zero_shot_classify(&world.task, InferenceMode::None, None).unwrap();

        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let fusion_cfg = FusionConfig { dim: spec.dim, ..Default::default() };
        let outcome =
            train_fusion(&world.train, &RetrievalBackend::Exact(&world.memory), &cfg, fusion_cfg)
                .unwrap();
        let refiner = Refiner::standard(&outcome.params, &world.memory, cfg.k);
        let modes = mode_report(&world.task, &refiner).unwrap();
        let first_loss = outcome.metrics.first().map(|m| m.loss).unwrap_or(f64::NAN);
        let last_loss = outcome.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
        deltas.push(modes.accuracy_both - baseline);
        println!(
            "seed {seed}: baseline {:.3} | image {:.3} text {:.3} both {:.3} | hit img {:.3} txt {:.3} | loss {:.1} -> {:.1} | inv_tau {:.1} | {:.1}s",
            baseline,
            modes.accuracy_image,
            modes.accuracy_text,
            modes.accuracy_both,
            report.image_hit_rate,
            report.text_hit_rate,
            first_loss,
            last_loss,
            outcome.metrics.last().map(|m| m.inv_tau).unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64(),
        );
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    println!("mean delta(both - baseline): {:.3}", mean);
}
