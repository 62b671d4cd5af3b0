//! Central finite-difference verification of analytic gradients.
//!
//! This is the independent oracle for every backward rule in the crate: it
//! only needs the objective as a black-box function of the parameters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scale floor in the relative-error denominator. With a pass threshold of
/// rtol this makes the criterion equivalent to |fd - an| <= atol + rtol*|fd|
/// with atol = rtol * REL_FLOOR, so exactly-zero gradients compare cleanly.
pub const REL_FLOOR: f64 = 1e-2;

/// Compare an analytic gradient against central finite differences.
///
/// `f` evaluates the scalar objective at a parameter point; `params` is the
/// base point and `analytic` the gradient to verify, tensor by tensor.
/// Returns the worst relative error over all coordinates, where
/// `rel = |an - fd| / (REL_FLOOR + |an| + |fd|)`.
///
/// `f` must be deterministic; it is evaluated twice at the base point and a
/// mismatch is an error. It must also be (twice) differentiable at the point,
/// which is the caller's responsibility.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    assert_eq!(params.len(), analytic.len(), "one gradient tensor per parameter tensor");
    let base1 = f(params)?;
    let base2 = f(params)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::NonDeterministic(base1, base2));
    }

    let mut point: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (ti, grad) in analytic.iter().enumerate() {
        assert_eq!(
            grad.shape(),
            params[ti].shape(),
            "gradient shape mismatch for parameter {ti}"
        );
        for ci in 0..grad.len() {
            let orig = point[ti].data()[ci];
            point[ti].data_mut()[ci] = orig + h;
            let up = f(&point)?;
            point[ti].data_mut()[ci] = orig - h;
            let down = f(&point)?;
            point[ti].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grad.data()[ci];
            let rel = (an - fd).abs() / (REL_FLOOR + an.abs() + fd.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Configuration for the end-to-end gradient verification of the fusion and
/// loss pipeline.
#[derive(Debug, Clone, Copy)]
pub struct PipelineCheck {
    pub seeds: u64,
    pub batch: usize,
    pub dim: usize,
    pub k: usize,
    pub heads: usize,
    pub step: f64,
}

impl Default for PipelineCheck {
    fn default() -> Self {
        PipelineCheck { seeds: 20, batch: 8, dim: 16, k: 4, heads: 4, step: 1e-4 }
    }
}

/// Verify the analytic gradients of the whole refine-and-contrast graph —
/// every fusion parameter of both branches plus the log temperature —
/// against central finite differences, over `seeds` random batches. Returns
/// the worst relative error seen.
pub fn check_pipeline_gradients(cfg: &PipelineCheck) -> Result<f64> {
    use crate::fusion::{self, FusionConfig, FusionParams};
    use crate::loss::{self, Reduction, TemperatureParam};
    use crate::tape::Tape;

    let fusion_cfg = FusionConfig::new(cfg.dim, cfg.heads, 1, 1.0);
    let mut worst = 0.0f64;
    for seed in 0..cfg.seeds {
        let mut rng = crate::rng::Rng::substream(seed, 0x67636b); // "gck"
        let unit_rows = |rng: &mut crate::rng::Rng, n: usize| -> Tensor<f64> {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let mut v: Vec<f64> = (0..cfg.dim).map(|_| rng.normal()).collect();
                    crate::tensor::normalize(&mut v, "gradcheck row").expect("nonzero");
                    v
                })
                .collect();
            Tensor::from_rows(&rows).expect("rows")
        };
        let v = unit_rows(&mut rng, cfg.batch);
        let t = unit_rows(&mut rng, cfg.batch);
        let v_neighbors: Vec<Tensor<f64>> = (0..cfg.batch).map(|_| unit_rows(&mut rng, cfg.k)).collect();
        let t_neighbors: Vec<Tensor<f64>> = (0..cfg.batch).map(|_| unit_rows(&mut rng, cfg.k)).collect();
        let params = FusionParams::random(fusion_cfg, seed, 0.2)?;
        let temp = TemperatureParam::default_init();

        // flatten: all named tensors plus the temperature, in a fixed order
        let mut point: Vec<Tensor<f64>> =
            params.named_tensors().into_iter().map(|(_, p)| p.clone()).collect();
        point.push(Tensor::scalar(temp.log_inv_tau));

        let eval_at = |point: &[Tensor<f64>]| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
            let mut p = params.clone();
            for ((_, dst), src) in p.named_tensors_mut().into_iter().zip(point.iter()) {
                dst.data_mut().copy_from_slice(src.data());
            }
            let tp = TemperatureParam { log_inv_tau: point.last().expect("temperature").item() };

            let mut tape = Tape::new();
            let vi = tape.constant(v.clone());
            let ti = tape.constant(t.clone());
            let temp_var = loss::insert_temperature(&mut tape, &tp);
            let iv = fusion::insert_branch(&mut tape, &p.image);
            let tv = fusion::insert_branch(&mut tape, &p.text);
            let refs_v: Vec<&Tensor<f64>> = v_neighbors.iter().collect();
            let (tok_v, s) = fusion::build_tokens(&v, &refs_v)?;
            let tok_v = tape.constant(tok_v);
            let v_bar = fusion::forward_refine(&mut tape, &iv, &fusion_cfg, tok_v, cfg.batch, s)?;
            let refs_t: Vec<&Tensor<f64>> = t_neighbors.iter().collect();
            let (tok_t, s2) = fusion::build_tokens(&t, &refs_t)?;
            let tok_t = tape.constant(tok_t);
            let t_bar = fusion::forward_refine(&mut tape, &tv, &fusion_cfg, tok_t, cfg.batch, s2)?;
            let (l, _) =
                loss::total_loss_on_tape(&mut tape, vi, ti, v_bar, t_bar, temp_var.inv_tau, Reduction::Sum)?;
            let value = tape.value(l).item();
            tape.backward(l)?;
            let mut grads = fusion::branch_grads(&tape, &iv);
            grads.extend(fusion::branch_grads(&tape, &tv));
            grads.push(tape.grad(temp_var.leaf).expect("temperature grad").clone());
            Ok((value, Some(grads)))
        };

        let (_, analytic) = eval_at(&point)?;
        let analytic = analytic.expect("gradients");
        let f = |p: &[Tensor<f64>]| -> Result<f64> { Ok(eval_at(p)?.0) };
        let err = finite_diff_check(f, &point, &analytic, cfg.step)?;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
