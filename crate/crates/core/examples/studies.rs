//! Study harness: runs the search/fusion grid, the k sweep and the memory
//! update study on the default world to validate orderings while tuning
//! generator constants.

use reco_core::eval::{run_k_sweep, run_memory_update, run_search_fusion_grid};
use reco_core::fusion::FusionConfig;
use reco_core::training::TrainConfig;
use reco_core::world::{generate_world, WorldSpec};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "grid".to_string());
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = WorldSpec { seed, ..WorldSpec::default() };
    let world = generate_world(&spec).unwrap();
    let epochs: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let budget = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let fusion_cfg = FusionConfig { dim: spec.dim, ..Default::default() };

    match which.as_str() {
        "grid" => {
            let t0 = std::time::Instant::now();
            let grid = run_search_fusion_grid(&world, &budget, fusion_cfg).unwrap();
            print!("{}", grid.to_csv());
            println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
        }
        "ksweep" => {
            let t0 = std::time::Instant::now();
            let sweep = run_k_sweep(&world, &budget, &[1, 2, 5, 10], &[0, 1, 2, 5, 10, 20]).unwrap();
            print!("{}", sweep.to_csv());
            println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
        }
        "memupdate" => {
            let t0 = std::time::Instant::now();
            let study = run_memory_update(&world, &budget, &[0.01, 0.1, 1.0]).unwrap();
            print!("{}", study.to_csv());
            println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
        }
        other => eprintln!("unknown study {other}"),
    }
}
