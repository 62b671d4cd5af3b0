use reco_core::fusion::{self, FusionConfig, FusionParams};
use reco_core::loss::{self, Reduction, TemperatureParam};
use reco_core::rng::Rng;
use reco_core::tape::Tape;
use reco_core::tensor::{normalize, Tensor};

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            normalize(&mut v, "r").unwrap();
            v
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn main() {
    let mut rng = Rng::new(0);
    let (n, d, k) = (128usize, 64usize, 10usize);
    let cfg = FusionConfig::new(d, 4, 1, 1.0);
    let params = FusionParams::random(cfg, 1, 0.1).unwrap();
    let v = unit_rows(&mut rng, n, d);
    let t = unit_rows(&mut rng, n, d);
    let sets: Vec<Tensor<f64>> = (0..n).map(|_| unit_rows(&mut rng, k, d)).collect();
    let refs: Vec<&Tensor<f64>> = sets.iter().collect();

    let start = std::time::Instant::now();
    let iters = 20;
    for _ in 0..iters {
        let mut tape = Tape::new();
        let vi = tape.constant(v.clone());
        let ti = tape.constant(t.clone());
        let tv = loss::insert_temperature(&mut tape, &TemperatureParam::default_init());
        let iv = fusion::insert_branch(&mut tape, &params.image);
        let tvr = fusion::insert_branch(&mut tape, &params.text);
        let (tok_v, s) = fusion::build_tokens(&v, &refs).unwrap();
        let tok_v = tape.constant(tok_v);
        let vb = fusion::forward_refine(&mut tape, &iv, &cfg, tok_v, n, s).unwrap();
        let (tok_t, s2) = fusion::build_tokens(&t, &refs).unwrap();
        let tok_t = tape.constant(tok_t);
        let tb = fusion::forward_refine(&mut tape, &tvr, &cfg, tok_t, n, s2).unwrap();
        let (l, _) = loss::total_loss_on_tape(&mut tape, vi, ti, vb, tb, tv.inv_tau, Reduction::Sum).unwrap();
        tape.backward(l).unwrap();
        std::hint::black_box(tape.grad(tv.leaf));
    }
    let dt = start.elapsed().as_secs_f64() / iters as f64;
    println!("per-step: {:.1} ms  ({:.1} steps/s)", dt * 1e3, 1.0 / dt);
}
