//! Zero-shot evaluation and the ablation studies.
//!
//! Classification assigns each query to the class embedding with the highest
//! cosine similarity; retrieval ranks the opposite side's rows. Inference
//! modes decide which sides are refined with retrieved knowledge first. The
//! baseline mode never touches fusion parameters or the memory, so it is the
//! pure frozen-encoder path by construction.
//!
//! Every function here is deterministic in its inputs; ties in any argmax or
//! ranking break toward the lower index.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{self, FusionParams};
use crate::memory::{MemoryStore, Modality};
use crate::retrieval::{knn_exact_with_id, FetchModality, RetrievalConfig, SearchMode};
use crate::tensor::{self, Tensor};
use crate::training::{train_fusion, RetrievalBackend, TrainConfig};
use crate::world::{subsample_memory, LabeledEvalTask, World, ID_LABEL_BASE};
use crate::Real;

/// Which sides are refined at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    None,
    RefineImage,
    RefineText,
    RefineBoth,
}

impl InferenceMode {
    pub fn refines_image(self) -> bool {
        matches!(self, InferenceMode::RefineImage | InferenceMode::RefineBoth)
    }

    pub fn refines_text(self) -> bool {
        matches!(self, InferenceMode::RefineText | InferenceMode::RefineBoth)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::None => "none",
            InferenceMode::RefineImage => "image",
            InferenceMode::RefineText => "text",
            InferenceMode::RefineBoth => "both",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InferenceMode::None),
            "image" => Ok(InferenceMode::RefineImage),
            "text" => Ok(InferenceMode::RefineText),
            "both" => Ok(InferenceMode::RefineBoth),
            other => Err(Error::InvalidConfig(format!("unknown inference mode '{other}'"))),
        }
    }
}

/// Fusion function applied to retrieved items at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionFn {
    Transformer,
    Mean,
}

impl FusionFn {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionFn::Transformer => "transformer",
            FusionFn::Mean => "mean",
        }
    }
}

/// Everything needed to refine embeddings at inference time.
pub struct Refiner<'a> {
    pub params: Option<&'a FusionParams>,
    pub memory: &'a MemoryStore,
    pub fusion: FusionFn,
    pub search_mode: SearchMode,
    pub fetch_modality: FetchModality,
    pub k_prime: usize,
}

impl<'a> Refiner<'a> {
    /// Transformer fusion with uni-modal search and cross-modal fetch.
    pub fn standard(params: &'a FusionParams, memory: &'a MemoryStore, k_prime: usize) -> Self {
        Refiner {
            params: Some(params),
            memory,
            fusion: FusionFn::Transformer,
            search_mode: SearchMode::Uni,
            fetch_modality: FetchModality::Opposite,
            k_prime,
        }
    }

    fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: self.k_prime,
            k_prime: self.k_prime,
            search_mode: self.search_mode,
            fetch_modality: self.fetch_modality,
            exclude_self: false,
        }
    }

    /// Refine each row of `queries` with its retrieved items.
    pub fn refine(&self, queries: &Tensor<Real>, modality: Modality) -> Result<Tensor<Real>> {
        let cfg = self.retrieval_config();
        let mut fetched = Vec::with_capacity(queries.rows());
        for i in 0..queries.rows() {
            let ns = knn_exact_with_id(queries.row(i), self.memory, &cfg, modality, i as u64)?;
            fetched.push(ns.fetched);
        }
        match self.fusion {
            FusionFn::Transformer => {
                let params = self.params.ok_or_else(|| {
                    Error::InvalidConfig("transformer fusion needs parameters".into())
                })?;
                let branch = match modality {
                    Modality::Image => fusion::Branch::Image,
                    Modality::Text => fusion::Branch::Text,
                };
                let refs: Vec<&Tensor<Real>> = fetched.iter().collect();
                fusion::refine_batch(params, branch, queries, &refs)
            }
            FusionFn::Mean => {
                let mut out = Tensor::zeros(vec![queries.rows(), queries.cols()]);
                for i in 0..queries.rows() {
                    let fused = fusion::fuse_mean(queries.row(i), &fetched[i])?;
                    out.row_mut(i).copy_from_slice(&fused);
                }
                Ok(out)
            }
        }
    }
}

fn argmax_row(scores: &[Real]) -> usize {
    let mut best = 0usize;
    for (j, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = j;
        }
    }
    best
}

/// Top-1 zero-shot classification accuracy under the chosen mode. Mode
/// `None` ignores `refiner` entirely.
pub fn zero_shot_classify(
    task: &LabeledEvalTask,
    mode: InferenceMode,
    refiner: Option<&Refiner>,
) -> Result<f64> {
    if task.queries.cols() != task.class_embeddings.cols() {
        return Err(Error::DimMismatch {
            expected: task.class_embeddings.cols(),
            got: task.queries.cols(),
        });
    }
    let need = mode.refines_image() || mode.refines_text();
    let refiner = match (need, refiner) {
        (true, None) => {
            return Err(Error::InvalidConfig("refine modes need a refiner".into()));
        }
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };
    let queries = match refiner {
        Some(r) if mode.refines_image() => r.refine(&task.queries, task.query_modality)?,
        _ => task.queries.clone(),
    };
    let classes = match refiner {
        Some(r) if mode.refines_text() => r.refine(&task.class_embeddings, task.class_modality)?,
        _ => task.class_embeddings.clone(),
    };
    let scores = tensor::matmul_nt(&queries, &classes)?;
    let mut correct = 0usize;
    for i in 0..queries.rows() {
        if argmax_row(scores.row(i)) == task.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.rows() as f64)
}

/// recall@R for text-to-image and image-to-text over aligned pairs.
pub fn retrieval_eval(
    v: &Tensor<Real>,
    t: &Tensor<Real>,
    mode: InferenceMode,
    refiner: Option<&Refiner>,
    r: usize,
) -> Result<RetrievalScores> {
    if v.shape() != t.shape() {
        return Err(Error::ShapeMismatch(format!("pairs {:?} vs {:?}", v.shape(), t.shape())));
    }
    let n = v.rows();
    if r > n || r == 0 {
        return Err(Error::InvalidConfig(format!("recall@{r} over {n} pairs")));
    }
    let refiner = match (mode.refines_image() || mode.refines_text(), refiner) {
        (true, None) => return Err(Error::InvalidConfig("refine modes need a refiner".into())),
        (true, Some(rf)) => Some(rf),
        (false, _) => None,
    };
    let vr = match refiner {
        Some(rf) if mode.refines_image() => rf.refine(v, Modality::Image)?,
        _ => v.clone(),
    };
    let tr = match refiner {
        Some(rf) if mode.refines_text() => rf.refine(t, Modality::Text)?,
        _ => t.clone(),
    };
    let sims = tensor::matmul_nt(&vr, &tr)?; // [image, text]
    let rank_of = |scores: Vec<(Real, usize)>, target: usize| -> usize {
        let mut sorted = scores;
        sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        sorted.iter().position(|&(_, j)| j == target).unwrap()
    };
    let mut t2i = 0usize;
    let mut i2t = 0usize;
    for i in 0..n {
        let col: Vec<(Real, usize)> = (0..n).map(|row| (sims.data()[row * n + i], row)).collect();
        if rank_of(col, i) < r {
            t2i += 1;
        }
        let row: Vec<(Real, usize)> = sims.row(i).iter().cloned().zip(0..n).collect();
        if rank_of(row, i) < r {
            i2t += 1;
        }
    }
    Ok(RetrievalScores { t2i: t2i as f64 / n as f64, i2t: i2t as f64 / n as f64 })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RetrievalScores {
    pub t2i: f64,
    pub i2t: f64,
}

// ---------------------------------------------------------------------------
// study: search/fusion grid

/// One cell of the search x fetch x fusion grid.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub search: String,
    pub fetch: String,
    pub fusion: String,
    pub accuracy: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchFusionGrid {
    pub baseline: f64,
    pub cells: Vec<AblationCell>,
}

impl SearchFusionGrid {
    pub fn cell(&self, search: SearchMode, fetch: FetchModality, fusion: FusionFn) -> &AblationCell {
        self.cells
            .iter()
            .find(|c| {
                c.search == search_name(search)
                    && c.fetch == fetch_name(fetch)
                    && c.fusion == fusion.as_str()
            })
            .expect("grid holds all eight cells")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("search,fetch,fusion,accuracy,delta\n");
        out.push_str(&format!("none,none,none,{:.6},0.000000\n", self.baseline));
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                c.search, c.fetch, c.fusion, c.accuracy, c.delta
            ));
        }
        out
    }
}

fn search_name(s: SearchMode) -> &'static str {
    match s {
        SearchMode::Uni => "uni",
        SearchMode::Cross => "cross",
    }
}

fn fetch_name(f: FetchModality) -> &'static str {
    match f {
        FetchModality::Same => "uni",
        FetchModality::Opposite => "cross",
    }
}

/// Train and evaluate the four search x fetch combinations under transformer
/// fusion, and evaluate the four under parameter-free mean fusion. All cells
/// are scored in refine-both mode against the same baseline.
pub fn run_search_fusion_grid(
    world: &World,
    budget: &TrainConfig,
    fusion_cfg: fusion::FusionConfig,
) -> Result<SearchFusionGrid> {
    let baseline = zero_shot_classify(&world.task, InferenceMode::None, None)?;
    let combos = [
        (SearchMode::Uni, FetchModality::Opposite),
        (SearchMode::Cross, FetchModality::Opposite),
        (SearchMode::Uni, FetchModality::Same),
        (SearchMode::Cross, FetchModality::Same),
    ];
    let mut cells = Vec::with_capacity(8);
    for (search, fetch) in combos {
        let cfg = TrainConfig { search_mode: search, fetch_modality: fetch, ..*budget };
        let outcome = train_fusion(
            &world.train,
            &RetrievalBackend::Exact(&world.memory),
            &cfg,
            fusion_cfg,
        )?;
        let refiner = Refiner {
            params: Some(&outcome.params),
            memory: &world.memory,
            fusion: FusionFn::Transformer,
            search_mode: search,
            fetch_modality: fetch,
            k_prime: budget.k,
        };
        let acc = zero_shot_classify(&world.task, InferenceMode::RefineBoth, Some(&refiner))?;
        cells.push(AblationCell {
            search: search_name(search).into(),
            fetch: fetch_name(fetch).into(),
            fusion: FusionFn::Transformer.as_str().into(),
            accuracy: acc,
            delta: acc - baseline,
        });
    }
    for (search, fetch) in combos {
        let refiner = Refiner {
            params: None,
            memory: &world.memory,
            fusion: FusionFn::Mean,
            search_mode: search,
            fetch_modality: fetch,
            k_prime: budget.k,
        };
        let acc = zero_shot_classify(&world.task, InferenceMode::RefineBoth, Some(&refiner))?;
        cells.push(AblationCell {
            search: search_name(search).into(),
            fetch: fetch_name(fetch).into(),
            fusion: FusionFn::Mean.as_str().into(),
            accuracy: acc,
            delta: acc - baseline,
        });
    }
    Ok(SearchFusionGrid { baseline, cells })
}

// ---------------------------------------------------------------------------
// study: k / k' sweep

#[derive(Debug, Clone, Serialize)]
pub struct KSweep {
    pub baseline: f64,
    pub k_values: Vec<usize>,
    pub k_prime_values: Vec<usize>,
    /// accuracy[i][j] for k_values[i] evaluated at k_prime_values[j];
    /// k' = 0 entries are the no-retrieval baseline.
    pub accuracy: Vec<Vec<f64>>,
}

impl KSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,k_prime,accuracy\n");
        for (i, &k) in self.k_values.iter().enumerate() {
            for (j, &kp) in self.k_prime_values.iter().enumerate() {
                out.push_str(&format!("{k},{kp},{:.6}\n", self.accuracy[i][j]));
            }
        }
        out
    }
}

/// Train once per k, evaluate at every k'. k' = 0 disables retrieval and
/// scores the baseline.
pub fn run_k_sweep(
    world: &World,
    budget: &TrainConfig,
    k_values: &[usize],
    k_prime_values: &[usize],
) -> Result<KSweep> {
    let baseline = zero_shot_classify(&world.task, InferenceMode::None, None)?;
    let mut accuracy = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let cfg = TrainConfig { k, ..*budget };
        let outcome = train_fusion(
            &world.train,
            &RetrievalBackend::Exact(&world.memory),
            &cfg,
            fusion::FusionConfig { dim: world.spec.dim, ..Default::default() },
        )?;
        let mut row = Vec::with_capacity(k_prime_values.len());
        for &kp in k_prime_values {
            if kp == 0 {
                row.push(baseline);
                continue;
            }
            let refiner = Refiner::standard(&outcome.params, &world.memory, kp);
            row.push(zero_shot_classify(&world.task, InferenceMode::RefineBoth, Some(&refiner))?);
        }
        accuracy.push(row);
    }
    Ok(KSweep {
        baseline,
        k_values: k_values.to_vec(),
        k_prime_values: k_prime_values.to_vec(),
        accuracy,
    })
}

// ---------------------------------------------------------------------------
// study: memory fraction at train vs inference

#[derive(Debug, Clone, Serialize)]
pub struct MemoryUpdateRow {
    pub fraction: f64,
    pub subset_accuracy: f64,
    pub full_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryUpdateStudy {
    pub baseline: f64,
    pub rows: Vec<MemoryUpdateRow>,
}

impl MemoryUpdateStudy {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,subset_accuracy,full_accuracy,baseline\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                r.fraction, r.subset_accuracy, r.full_accuracy, self.baseline
            ));
        }
        out
    }
}

/// Train against a subsampled memory, then evaluate with that subset and
/// with the full memory.
pub fn run_memory_update(
    world: &World,
    budget: &TrainConfig,
    fractions: &[f64],
) -> Result<MemoryUpdateStudy> {
    let baseline = zero_shot_classify(&world.task, InferenceMode::None, None)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let subset = subsample_memory(&world.memory, fraction, budget.seed)?;
        let outcome = train_fusion(
            &world.train,
            &RetrievalBackend::Exact(&subset),
            budget,
            fusion::FusionConfig { dim: world.spec.dim, ..Default::default() },
        )?;
        let k_eff = budget.k.min(subset.len());
        let sub_refiner = Refiner::standard(&outcome.params, &subset, k_eff);
        let subset_accuracy =
            zero_shot_classify(&world.task, InferenceMode::RefineBoth, Some(&sub_refiner))?;
        let full_refiner = Refiner::standard(&outcome.params, &world.memory, budget.k);
        let full_accuracy =
            zero_shot_classify(&world.task, InferenceMode::RefineBoth, Some(&full_refiner))?;
        rows.push(MemoryUpdateRow { fraction, subset_accuracy, full_accuracy });
    }
    Ok(MemoryUpdateStudy { baseline, rows })
}

// ---------------------------------------------------------------------------
// qualitative neighbour dumps

#[derive(Debug, Clone, Serialize)]
pub struct NeighborDumpSide {
    pub ids: Vec<u64>,
    pub similarities: Vec<f64>,
    pub label_match: Vec<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NeighborDumpRow {
    pub query_id: u64,
    pub query_label: usize,
    pub uni: NeighborDumpSide,
    pub cross: NeighborDumpSide,
}

#[derive(Debug, Clone, Serialize)]
pub struct NeighborDumpSummary {
    pub rows: usize,
    pub uni_label_match_rate: f64,
    pub cross_label_match_rate: f64,
}

/// For each labelled query, record its top-k neighbours under uni-modal and
/// cross-modal search with label-match flags, as JSON lines. Returns the
/// aggregate match rates.
pub fn dump_neighbors(
    queries: &Tensor<Real>,
    labels: &[usize],
    query_modality: Modality,
    memory: &MemoryStore,
    k: usize,
    path: &std::path::Path,
) -> Result<NeighborDumpSummary> {
    let mut out = String::new();
    let mut uni_hits = 0usize;
    let mut cross_hits = 0usize;
    let mut total = 0usize;
    for i in 0..queries.rows() {
        let mut sides = Vec::with_capacity(2);
        for search in [SearchMode::Uni, SearchMode::Cross] {
            let cfg = RetrievalConfig {
                k,
                k_prime: k,
                search_mode: search,
                fetch_modality: FetchModality::Opposite,
                exclude_self: false,
            };
            let ns = knn_exact_with_id(queries.row(i), memory, &cfg, query_modality, i as u64)?;
            let ids: Vec<u64> = ns.indices.iter().map(|&idx| memory.ids()[idx]).collect();
            let label_match: Vec<bool> =
                ids.iter().map(|&id| (id / ID_LABEL_BASE) as usize == labels[i]).collect();
            match search {
                SearchMode::Uni => uni_hits += label_match.iter().filter(|&&b| b).count(),
                SearchMode::Cross => cross_hits += label_match.iter().filter(|&&b| b).count(),
            }
            sides.push(NeighborDumpSide { ids, similarities: ns.similarities, label_match });
        }
        total += k;
        let cross = sides.pop().expect("two sides");
        let uni = sides.pop().expect("two sides");
        let row = NeighborDumpRow { query_id: i as u64, query_label: labels[i], uni, cross };
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(NeighborDumpSummary {
        rows: queries.rows(),
        uni_label_match_rate: if total == 0 { 0.0 } else { uni_hits as f64 / total as f64 },
        cross_label_match_rate: if total == 0 { 0.0 } else { cross_hits as f64 / total as f64 },
    })
}

/// Per-task best-mode report: evaluate every inference mode and pick the
/// argmax, the validation-style mode selection.
#[derive(Debug, Clone, Serialize)]
pub struct ModeReport {
    pub accuracy_none: f64,
    pub accuracy_image: f64,
    pub accuracy_text: f64,
    pub accuracy_both: f64,
    pub best_mode: String,
}

pub fn mode_report(task: &LabeledEvalTask, refiner: &Refiner) -> Result<ModeReport> {
    let accuracy_none = zero_shot_classify(task, InferenceMode::None, None)?;
    let accuracy_image = zero_shot_classify(task, InferenceMode::RefineImage, Some(refiner))?;
    let accuracy_text = zero_shot_classify(task, InferenceMode::RefineText, Some(refiner))?;
    let accuracy_both = zero_shot_classify(task, InferenceMode::RefineBoth, Some(refiner))?;
    let modes = [
        (accuracy_none, "none"),
        (accuracy_image, "image"),
        (accuracy_text, "text"),
        (accuracy_both, "both"),
    ];
    let best = modes
        .iter()
        .fold(modes[0], |acc, &m| if m.0 > acc.0 { m } else { acc });
    Ok(ModeReport {
        accuracy_none,
        accuracy_image,
        accuracy_text,
        accuracy_both,
        best_mode: best.1.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::world::{generate_world, WorldSpec};

    fn tiny_world(seed: u64) -> World {
        generate_world(&WorldSpec {
            n_coarse: 4,
            n_fine: 4,
            held_out_fine_per_coarse: 2,
            dim: 32,
            memory_size: 512,
            train_size: 128,
            eval_size: 64,
            seed,
            ..WorldSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn noiseless_world_baseline_is_perfect() {
        // fully clean limit: no sampling noise, perfectly aligned modal fine
        // directions, no fine attenuation on the text side
        let w = generate_world(&WorldSpec {
            n_coarse: 4,
            n_fine: 4,
            held_out_fine_per_coarse: 2,
            dim: 32,
            memory_size: 64,
            train_size: 32,
            eval_size: 64,
            image_noise: 0.0,
            text_noise: 0.0,
            memory_image_noise: 0.0,
            memory_text_noise: 0.0,
            fine_wobble: 0.0,
            instance_signal: 0.0,
            common_class_alignment: 1.0,
            rare_class_alignment: 1.0,
            memory_artifact: 0.0,
            query_text_fine: 0.9,
            seed: 1,
            ..WorldSpec::default()
        })
        .unwrap();
        let acc = zero_shot_classify(&w.task, InferenceMode::None, None).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn baseline_matches_independent_argmax_oracle() {
        let w = tiny_world(2);
        let acc = zero_shot_classify(&w.task, InferenceMode::None, None).unwrap();
        // independent path: plain loops over raw rows
        let mut correct = 0usize;
        for i in 0..w.task.queries.rows() {
            let q = w.task.queries.row(i);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for c in 0..w.task.class_embeddings.rows() {
                let mut s = 0.0;
                for (a, b) in q.iter().zip(w.task.class_embeddings.row(c)) {
                    s += a * b;
                }
                if s > best.0 {
                    best = (s, c);
                }
            }
            if best.1 == w.task.labels[i] {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / w.task.queries.rows() as f64);
    }

    #[test]
    fn zero_shot_is_deterministic() {
        let w = tiny_world(3);
        let a = zero_shot_classify(&w.task, InferenceMode::None, None).unwrap();
        let b = zero_shot_classify(&w.task, InferenceMode::None, None).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn identical_pairs_have_unit_recall() {
        let mut rng = Rng::new(4);
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|_| {
                let mut v: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
                tensor::normalize(&mut v, "row").unwrap();
                v
            })
            .collect();
        let v = Tensor::from_rows(&rows).unwrap();
        let scores = retrieval_eval(&v, &v, InferenceMode::None, None, 1).unwrap();
        assert_eq!(scores.t2i, 1.0);
        assert_eq!(scores.i2t, 1.0);
    }

    #[test]
    fn decorrelated_pairs_recall_near_chance() {
        let mut total = 0.0;
        let n = 32;
        let seeds = 10;
        for seed in 0..seeds {
            let mut rng = Rng::new(50 + seed);
            let mk = |rng: &mut Rng| {
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        let mut v: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
                        tensor::normalize(&mut v, "row").unwrap();
                        v
                    })
                    .collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let v = mk(&mut rng);
            let t = mk(&mut rng);
            let scores = retrieval_eval(&v, &t, InferenceMode::None, None, 1).unwrap();
            total += (scores.t2i + scores.i2t) / 2.0;
        }
        let mean = total / seeds as f64;
        let chance = 1.0 / n as f64;
        assert!((mean - chance).abs() < 0.04, "recall {mean} vs chance {chance}");
    }

    #[test]
    fn recall_r_bounds_checked() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(retrieval_eval(&v, &v, InferenceMode::None, None, 3).is_err());
        assert!(retrieval_eval(&v, &v, InferenceMode::None, None, 0).is_err());
    }

    #[test]
    fn mean_fusion_refiner_runs_without_params() {
        let w = tiny_world(5);
        let refiner = Refiner {
            params: None,
            memory: &w.memory,
            fusion: FusionFn::Mean,
            search_mode: SearchMode::Uni,
            fetch_modality: FetchModality::Opposite,
            k_prime: 5,
        };
        let acc =
            zero_shot_classify(&w.task, InferenceMode::RefineBoth, Some(&refiner)).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn untrained_transformer_refiner_stays_near_baseline() {
        let w = tiny_world(6);
        let params =
            FusionParams::init(fusion::FusionConfig { dim: 32, ..Default::default() }, 0).unwrap();
        let baseline = zero_shot_classify(&w.task, InferenceMode::None, None).unwrap();
        let refiner = Refiner::standard(&params, &w.memory, 5);
        let acc = zero_shot_classify(&w.task, InferenceMode::RefineBoth, Some(&refiner)).unwrap();
        assert!((acc - baseline).abs() < 0.15, "init refine {acc} vs baseline {baseline}");
    }

    #[test]
    fn neighbor_dump_trivial_cases() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("reco-dump-test-{}.jsonl", std::process::id()));

        // empty query list -> empty report
        let w = tiny_world(7);
        let empty = Tensor::zeros(vec![0, 32]);
        let summary =
            dump_neighbors(&empty, &[], Modality::Image, &w.memory, 5, &path).unwrap();
        assert_eq!(summary.rows, 0);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");

        // noiseless world: uni-search matches are all same-label
        let wn = generate_world(&WorldSpec {
            n_coarse: 4,
            n_fine: 4,
            held_out_fine_per_coarse: 2,
            dim: 32,
            memory_size: 256,
            train_size: 32,
            eval_size: 32,
            image_noise: 0.0,
            text_noise: 0.0,
            memory_image_noise: 0.0,
            memory_text_noise: 0.0,
            fine_wobble: 0.0,
            memory_artifact: 0.0,
            instance_signal: 0.0,
            seed: 8,
            ..WorldSpec::default()
        })
        .unwrap();
        let summary = dump_neighbors(
            &wn.task.queries,
            &wn.ground_truth.eval_labels,
            Modality::Image,
            &wn.memory,
            10,
            &path,
        )
        .unwrap();
        assert_eq!(summary.uni_label_match_rate, 1.0);
        let _ = std::fs::remove_file(&path);
    }
}
