//! Training loop for the fusion branches and the temperature.
//!
//! The backbone is frozen: the dataset and memory are read-only inputs, and
//! only fusion parameters plus `log_inv_tau` receive updates. Retrieval
//! against a frozen memory never changes across epochs, so neighbours are
//! fetched once per run and cached. Runs are bit-reproducible for a fixed
//! seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig, FusionParams};
use crate::ivf::ApproxIndex;
use crate::loss::{self, Reduction, TemperatureParam};
use crate::memory::{MemoryStore, Modality};
use crate::retrieval::{self, FetchModality, RetrievalConfig, SearchMode};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Real;

/// Aligned unit-norm training pairs with a provenance tag. When the pairs
/// were drawn from the same universe as the memory, self-retrieval must be
/// excluded or the fusion learns to copy the query back.
#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub v: Tensor<Real>,
    pub t: Tensor<Real>,
    pub provenance: String,
    pub shares_memory_provenance: bool,
}

impl TrainDataset {
    pub fn len(&self) -> usize {
        self.v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.v.cols()
    }

    pub fn content_crc(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in self.v.data().iter().chain(self.t.data()) {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }
}

/// Which branch(es) the objective trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchMode {
    Both,
    ImageOnly,
    TextOnly,
}

impl std::str::FromStr for BranchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(BranchMode::Both),
            "image_only" | "image" => Ok(BranchMode::ImageOnly),
            "text_only" | "text" => Ok(BranchMode::TextOnly),
            other => Err(Error::InvalidConfig(format!("unknown branch mode '{other}'"))),
        }
    }
}

/// Retrieval source for training: exact scan or an inverted-file index per
/// searched side.
pub enum RetrievalBackend<'a> {
    Exact(&'a MemoryStore),
    Approx {
        store: &'a MemoryStore,
        image_index: &'a ApproxIndex,
        text_index: &'a ApproxIndex,
        n_probe: usize,
    },
}

impl<'a> RetrievalBackend<'a> {
    pub fn store(&self) -> &'a MemoryStore {
        match self {
            RetrievalBackend::Exact(s) => s,
            RetrievalBackend::Approx { store, .. } => store,
        }
    }

    pub fn retrieve(
        &self,
        query: &[Real],
        cfg: &RetrievalConfig,
        query_modality: Modality,
        query_id: u64,
    ) -> Result<retrieval::NeighborSet> {
        match self {
            RetrievalBackend::Exact(store) => {
                retrieval::knn_exact_with_id(query, store, cfg, query_modality, query_id)
            }
            RetrievalBackend::Approx { store, image_index, text_index, n_probe } => {
                let index = match cfg.search_side(query_modality) {
                    Modality::Image => image_index,
                    Modality::Text => text_index,
                };
                crate::ivf::knn_approx_with_id(
                    query,
                    index,
                    store,
                    cfg,
                    *n_probe,
                    query_modality,
                    query_id,
                )
            }
        }
    }
}

/// Hyperparameters. Batch size 256 is the desk-scale stand-in for the
/// full-scale 4096; learning rate, weight decay, schedule shape and epoch
/// count keep their full-scale values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Neighbours retrieved per query at training time.
    pub k: usize,
    pub seed: u64,
    pub branch_mode: BranchMode,
    pub search_mode: SearchMode,
    pub fetch_modality: FetchModality,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 10,
            base_lr: 1e-3,
            weight_decay: 1e-5,
            warmup_frac: 0.05,
            k: 10,
            seed: 0,
            branch_mode: BranchMode::Both,
            search_mode: SearchMode::Uni,
            fetch_modality: FetchModality::Opposite,
            reduction: Reduction::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.k == 0 {
            return Err(Error::InvalidConfig("batch_size and k must be >= 1".into()));
        }
        if self.base_lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidConfig("warmup fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn retrieval_config(&self, exclude_self: bool) -> RetrievalConfig {
        RetrievalConfig {
            k: self.k,
            k_prime: self.k,
            search_mode: self.search_mode,
            fetch_modality: self.fetch_modality,
            exclude_self,
        }
    }
}

/// One metrics record per optimization step, serialized as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub loss_terms: [f64; 3],
    pub lr: f64,
    pub grad_norm: f64,
    pub inv_tau: f64,
}

/// Trained parameters plus the per-step log.
pub struct TrainOutcome {
    pub params: FusionParams,
    pub temperature: TemperatureParam,
    pub metrics: Vec<StepMetrics>,
}

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay to zero.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    debug_assert!(step < total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let denom = total_steps.saturating_sub(warmup_steps);
    if denom == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / denom as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam moments with decoupled weight decay. Decay never touches layer-norm
/// parameters or the temperature; those move only through gradient steps.
struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Tensor<Real>>,
    v: Vec<Tensor<Real>>,
    step: usize,
}

impl AdamW {
    fn new(shapes: &[Vec<usize>], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut [&mut Tensor<Real>],
        grads: &[Tensor<Real>],
        lr: f64,
        decay_allowed: &[bool],
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), (m, v)), &decay) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(decay_allowed)
        {
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let mut pv = p.data()[i];
                if decay {
                    pv -= lr * self.weight_decay * pv;
                }
                pv -= lr * mhat / (vhat.sqrt() + self.eps);
                p.data_mut()[i] = pv;
            }
        }
    }
}

fn decay_allowed(name: &str) -> bool {
    // layer-norm parameters and the temperature are excluded from decay
    !(name.contains("ln") || name.contains("final") || name.contains("gain") || name.contains("temperature"))
}

/// Retrieve neighbours for every dataset row on one branch, once.
fn cache_neighbors(
    queries: &Tensor<Real>,
    backend: &RetrievalBackend,
    cfg: &RetrievalConfig,
    modality: Modality,
) -> Result<Vec<Tensor<Real>>> {
    let mut out = Vec::with_capacity(queries.rows());
    for i in 0..queries.rows() {
        let ns = backend.retrieve(queries.row(i), cfg, modality, i as u64)?;
        out.push(ns.fetched);
    }
    Ok(out)
}

/// Train the fusion module (and temperature) on a paired-embedding dataset
/// with retrieval from the memory. The dataset and memory are never mutated.
pub fn train_fusion(
    dataset: &TrainDataset,
    backend: &RetrievalBackend,
    cfg: &TrainConfig,
    fusion_cfg: FusionConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fusion_cfg.validate()?;
    let store = backend.store();
    if dataset.dim() != store.dim() || dataset.dim() != fusion_cfg.dim {
        return Err(Error::DimMismatch { expected: store.dim(), got: dataset.dim() });
    }

    let mut params = FusionParams::init(fusion_cfg, cfg.seed)?;
    let mut temperature = TemperatureParam::default_init();
    let mut metrics = Vec::new();

    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params, temperature, metrics });
    }
    let n = dataset.len();
    let steps_per_epoch = n / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds the {} training pairs",
            cfg.batch_size, n
        )));
    }
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = (cfg.warmup_frac * total_steps as f64).round() as usize;

    let rcfg = cfg.retrieval_config(dataset.shares_memory_provenance);
    let train_image = cfg.branch_mode != BranchMode::TextOnly;
    let train_text = cfg.branch_mode != BranchMode::ImageOnly;
    let image_neighbors =
        if train_image { cache_neighbors(&dataset.v, backend, &rcfg, Modality::Image)? } else { Vec::new() };
    let text_neighbors =
        if train_text { cache_neighbors(&dataset.t, backend, &rcfg, Modality::Text)? } else { Vec::new() };

    // optimizer over all named tensors plus the temperature (always last)
    let names: Vec<String> = params
        .named_tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .chain(std::iter::once("temperature.log_inv_tau".to_string()))
        .collect();
    let shapes: Vec<Vec<usize>> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .chain(std::iter::once(vec![1]))
        .collect();
    let decay_mask: Vec<bool> = names.iter().map(|n| decay_allowed(n)).collect();
    let mut opt = AdamW::new(&shapes, cfg.weight_decay);

    let mut rng = crate::rng::Rng::substream(cfg.seed, 0x747261696e); // "train"
    let mut order: Vec<usize> = (0..n).collect();
    let mut consecutive_bad = 0usize;
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let bsz = chunk.len();
            let v_batch = gather_rows(&dataset.v, chunk);
            let t_batch = gather_rows(&dataset.t, chunk);

            let mut tape = Tape::new();
            let v_const = tape.constant(v_batch.clone());
            let t_const = tape.constant(t_batch.clone());
            let temp_var = loss::insert_temperature(&mut tape, &temperature);

            let image_vars = train_image.then(|| fusion::insert_branch(&mut tape, &params.image));
            let text_vars = train_text.then(|| fusion::insert_branch(&mut tape, &params.text));

            let v_bar = match &image_vars {
                Some(vars) => {
                    let sets: Vec<&Tensor<Real>> =
                        chunk.iter().map(|&i| &image_neighbors[i]).collect();
                    let (tokens, s) = fusion::build_tokens(&v_batch, &sets)?;
                    let tid = tape.constant(tokens);
                    Some(fusion::forward_refine(&mut tape, vars, &fusion_cfg, tid, bsz, s)?)
                }
                None => None,
            };
            let t_bar = match &text_vars {
                Some(vars) => {
                    let sets: Vec<&Tensor<Real>> =
                        chunk.iter().map(|&i| &text_neighbors[i]).collect();
                    let (tokens, s) = fusion::build_tokens(&t_batch, &sets)?;
                    let tid = tape.constant(tokens);
                    Some(fusion::forward_refine(&mut tape, vars, &fusion_cfg, tid, bsz, s)?)
                }
                None => None,
            };

            let (loss_id, terms) = match cfg.branch_mode {
                BranchMode::Both => loss::total_loss_on_tape(
                    &mut tape,
                    v_const,
                    t_const,
                    v_bar.expect("image branch active"),
                    t_bar.expect("text branch active"),
                    temp_var.inv_tau,
                    cfg.reduction,
                )?,
                BranchMode::ImageOnly => {
                    let l = loss::info_nce_on_tape(
                        &mut tape,
                        v_bar.expect("image branch active"),
                        t_const,
                        temp_var.inv_tau,
                        cfg.reduction,
                    )?;
                    (l, [0.0, tape.value(l).item(), 0.0])
                }
                BranchMode::TextOnly => {
                    let l = loss::info_nce_on_tape(
                        &mut tape,
                        v_const,
                        t_bar.expect("text branch active"),
                        temp_var.inv_tau,
                        cfg.reduction,
                    )?;
                    (l, [0.0, 0.0, tape.value(l).item()])
                }
            };

            let loss_value = tape.value(loss_id).item();
            let lr = cosine_lr(step, total_steps, cfg.base_lr, warmup_steps);
            if !loss_value.is_finite() {
                consecutive_bad += 1;
                if consecutive_bad >= 3 {
                    return Err(Error::Diverged(consecutive_bad));
                }
                metrics.push(StepMetrics {
                    step,
                    loss: loss_value,
                    loss_terms: terms,
                    lr,
                    grad_norm: f64::NAN,
                    inv_tau: temperature.inv_tau(),
                });
                step += 1;
                continue;
            }
            consecutive_bad = 0;

            tape.backward(loss_id)?;

            let mut grads: Vec<Tensor<Real>> = Vec::with_capacity(names.len());
            match &image_vars {
                Some(vars) => grads.extend(fusion::branch_grads(&tape, vars)),
                None => grads.extend(zero_like_branch(&params, Modality::Image)),
            }
            match &text_vars {
                Some(vars) => grads.extend(fusion::branch_grads(&tape, vars)),
                None => grads.extend(zero_like_branch(&params, Modality::Text)),
            }
            grads.push(tape.grad(temp_var.leaf).expect("temperature leaf").clone());

            let grad_norm =
                grads.iter().flat_map(|g| g.data()).map(|&g| g * g).sum::<f64>().sqrt();

            let mut temp_tensor = Tensor::scalar(temperature.log_inv_tau);
            {
                let mut targets: Vec<&mut Tensor<Real>> =
                    params.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
                targets.push(&mut temp_tensor);
                opt.update(&mut targets, &grads, lr, &decay_mask);
            }
            temperature.log_inv_tau = temp_tensor.item();

            metrics.push(StepMetrics {
                step,
                loss: loss_value,
                loss_terms: terms,
                lr,
                grad_norm,
                inv_tau: temperature.inv_tau(),
            });
            step += 1;
        }
    }

    Ok(TrainOutcome { params, temperature, metrics })
}

fn gather_rows(src: &Tensor<Real>, idx: &[usize]) -> Tensor<Real> {
    let d = src.cols();
    let mut out = Tensor::zeros(vec![idx.len(), d]);
    for (row, &i) in idx.iter().enumerate() {
        out.row_mut(row).copy_from_slice(src.row(i));
    }
    out
}

fn zero_like_branch(params: &FusionParams, side: Modality) -> Vec<Tensor<Real>> {
    let branch = match side {
        Modality::Image => &params.image,
        Modality::Text => &params.text,
    };
    let mut shapes = Vec::new();
    for l in &branch.layers {
        for t in [
            &l.ln1_gain, &l.ln1_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
            &l.ln2_gain, &l.ln2_bias, &l.w_in, &l.b_in, &l.w_out, &l.b_out,
        ] {
            shapes.push(Tensor::zeros(t.shape().to_vec()));
        }
    }
    shapes.push(Tensor::zeros(branch.final_gain.shape().to_vec()));
    shapes.push(Tensor::zeros(branch.final_bias.shape().to_vec()));
    shapes
}

/// Write the metrics log as JSON lines.
pub fn write_metrics_jsonl(path: &std::path::Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoint_is_exactly_base_lr() {
        assert_eq!(cosine_lr(10, 100, 1e-3, 10), 1e-3);
        assert_eq!(cosine_lr(0, 100, 1e-3, 10), 0.0);
    }

    #[test]
    fn decay_midpoint_is_half() {
        let lr = cosine_lr(55, 100, 1e-3, 10);
        assert!((lr - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn final_step_is_near_zero() {
        let total = 100;
        let lr = cosine_lr(total - 1, total, 1e-3, 10);
        let bound = 1e-3 * 0.5 * (1.0 - (std::f64::consts::PI * (89.0 / 90.0)).cos());
        assert!(lr <= bound + 1e-15);
        assert!(lr < 1e-5);
    }

    #[test]
    fn no_warmup_is_pure_cosine() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 0), 1e-3);
    }

    #[test]
    fn weight_decay_exclusions_hold_under_zero_gradient() {
        // with zero gradients, decayed tensors shrink and excluded ones do not
        let shapes = vec![vec![2, 2], vec![2]];
        let mut opt = AdamW::new(&shapes, 0.1);
        let mut w = Tensor::full(vec![2, 2], 1.0);
        let mut g = Tensor::full(vec![2], 1.0);
        let grads = vec![Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![2])];
        {
            let mut targets: Vec<&mut Tensor<Real>> = vec![&mut w, &mut g];
            opt.update(&mut targets, &grads, 0.5, &[true, false]);
        }
        assert!(w.data().iter().all(|&v| (v - 0.95).abs() < 1e-12), "decayed: {:?}", w.data());
        assert!(g.data().iter().all(|&v| v == 1.0), "excluded: {:?}", g.data());
    }

    #[test]
    fn decay_exclusion_list_covers_norm_params_and_temperature() {
        assert!(!decay_allowed("image.layer0.ln1_gain"));
        assert!(!decay_allowed("image.layer0.ln2_bias"));
        assert!(!decay_allowed("text.final_gain"));
        assert!(!decay_allowed("text.final_bias"));
        assert!(!decay_allowed("temperature.log_inv_tau"));
        assert!(decay_allowed("image.layer0.wq"));
        assert!(decay_allowed("image.layer0.b_in"));
        assert!(decay_allowed("text.layer0.bo"));
    }
}
