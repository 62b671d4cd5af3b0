//! Five training seeds on a fixed world: top-1 mean and standard deviation.

use reco_core::eval::{zero_shot_classify, InferenceMode, Refiner};
use reco_core::fusion::FusionConfig;
use reco_core::training::{train_fusion, RetrievalBackend, TrainConfig};
use reco_core::world::{generate_world, WorldSpec};

fn main() {
    let world = generate_world(&WorldSpec::default()).unwrap();
    let mut accs = Vec::new();
    for seed in 0..5u64 {
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let outcome = train_fusion(
            &world.train,
            &RetrievalBackend::Exact(&world.memory),
            &cfg,
            FusionConfig::default(),
        )
        .unwrap();
        let refiner = Refiner::standard(&outcome.params, &world.memory, cfg.k);
        let acc = zero_shot_classify(&world.task, InferenceMode::RefineBoth, Some(&refiner)).unwrap();
        println!("train seed {seed}: {acc:.4}");
        accs.push(acc);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
    println!("mean {:.4}  std {:.4}", mean, var.sqrt());
}
