//! Fast generator-constant scan: baseline accuracy and the four mean-fusion
//! grid cells (no training needed) across candidate constants and seeds.

use reco_core::eval::{zero_shot_classify, FusionFn, InferenceMode, Refiner};
use reco_core::retrieval::{FetchModality, SearchMode};
use reco_core::world::{generate_world, world_report, WorldSpec};

fn main() {
    for junk in [0.6, 0.9, 1.2, 1.5, 1.8] {
        let mut base_all = Vec::new();
        let mut uni_uni_all = Vec::new();
        let mut uni_cross_all = Vec::new();
        let mut hit_t = Vec::new();
        let mut hit_i = Vec::new();
        for seed in 0..4u64 {
            let spec = WorldSpec {
                memory_artifact: junk,
                seed,
                ..WorldSpec::default()
            };
            let w = generate_world(&spec).unwrap();
            let baseline = zero_shot_classify(&w.task, InferenceMode::None, None).unwrap();
            let mean_cell = |search, fetch| {
                let r = Refiner {
                    params: None,
                    memory: &w.memory,
                    fusion: FusionFn::Mean,
                    search_mode: search,
                    fetch_modality: fetch,
                    k_prime: 10,
                };
                zero_shot_classify(&w.task, InferenceMode::RefineBoth, Some(&r)).unwrap()
            };
            base_all.push(baseline);
            uni_uni_all.push(mean_cell(SearchMode::Uni, FetchModality::Same));
            uni_cross_all.push(mean_cell(SearchMode::Uni, FetchModality::Opposite));
            let rep = world_report(&w).unwrap();
            hit_t.push(rep.text_hit_rate);
            hit_i.push(rep.image_hit_rate);
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "junk={junk}: base {:.3} (min {:.3} max {:.3}) | mean-uni-uni {:.3} | mean-uni-cross {:.3} | txt-hit {:.3} | img-hit {:.3}",
            avg(&base_all),
            base_all.iter().cloned().fold(f64::INFINITY, f64::min),
            base_all.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            avg(&uni_uni_all),
            avg(&uni_cross_all),
            avg(&hit_t),
            avg(&hit_i),
        );
    }
}
