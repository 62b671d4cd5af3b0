//! Synthetic frozen-encoder worlds.
//!
//! Each world draws per-class prototype directions and emits unit-norm
//! embedding pairs for a train split, an eval split and a memory. Coarse
//! concepts share one direction across modalities (coarse alignment is
//! strong), while each fine class has an image-side and a text-side fine
//! direction whose cosine is `cross_modal_alignment` — cross-modal
//! fine-grained alignment is weak both because the query text carries an
//! attenuated fine weight and because the two modal fine directions only
//! partially agree. The memory carries the full fine weight on both sides:
//! it is the cleaner paired evidence the mechanism retrieves.
//!
//! Everything is driven by seeded substreams, so a seed reproduces a world
//! bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::{self, BankManifest};
use crate::error::{Error, Result};
use crate::memory::{MemoryStore, Modality};
use crate::retrieval::{knn_exact, RetrievalConfig};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};
use crate::training::TrainDataset;
use crate::Real;

/// Memory entry ids encode the fine label as `label * ID_LABEL_BASE + index`
/// so qualitative dumps can tell whether retrieved items share the query's
/// class.
pub const ID_LABEL_BASE: u64 = 1_000_000;

/// Generator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub dim: usize,
    /// Weight of the shared coarse direction, both modalities, all splits.
    pub coarse_signal: f64,
    /// Fine-direction weight of train/eval image embeddings.
    pub query_image_fine: f64,
    /// Fine-direction weight of train-split text embeddings. Captions paired
    /// with images describe them well, so this sits near the image weight.
    pub train_text_fine: f64,
    /// Fine-direction weight of eval text embeddings and class names
    /// (attenuated: terse class names underspecify fine identity).
    pub query_text_fine: f64,
    /// Fine-direction weight of memory image embeddings.
    pub memory_image_fine: f64,
    /// Fine-direction weight of memory text embeddings (the memory is
    /// cleaner: near the image-side weight).
    pub memory_text_fine: f64,
    /// Cosine between the fine directions of two classes in the same coarse
    /// group (per modality): lookalike siblings. This is what keeps
    /// nearest-neighbour retrieval imperfect and fine-grained confusion real.
    pub sibling_fine_cos: f64,
    /// Cosine between image-side and text-side fine directions of the
    /// common classes (the ones training pairs come from): the frozen
    /// encoder aligns frequent concepts well.
    pub common_class_alignment: f64,
    /// Same cosine for the held-out classes of the eval task: rare concepts
    /// are weakly aligned across modalities, which is the gap retrieval has
    /// to close.
    pub rare_class_alignment: f64,
    /// Weight of a corpus-artifact direction shared by every memory entry
    /// (per side): the boilerplate component of web-scraped pairs. Queries
    /// and class names never carry it.
    pub memory_artifact: f64,
    /// Weight of a per-pair instance direction shared by the two sides of a
    /// pair (the specific content an image shares with its own caption
    /// beyond the class). Class-name embeddings carry none.
    pub instance_signal: f64,
    pub image_noise: f64,
    pub text_noise: f64,
    /// Per-item wobble of the fine direction: each sampled item's fine
    /// component points to normalize(f_class + wobble * g_item) rather than
    /// exactly f_class, independently per side. Lookalike
    /// items of sibling classes can then outrank same-class items in
    /// nearest-neighbour search, which is what keeps retrieval purity below
    /// one. Class-name embeddings carry no wobble.
    pub fine_wobble: f64,
    /// Per-entry sampling noise of memory embeddings. Web items are
    /// individually noisy even when the pairing is clean, which keeps
    /// nearest-neighbour purity below one and gives the fusion something to
    /// filter.
    pub memory_image_noise: f64,
    pub memory_text_noise: f64,
    pub memory_size: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Fine classes per coarse concept reserved for the eval task. Training
    /// never sees them; their knowledge exists only in the memory, which is
    /// what makes the task zero-shot.
    pub held_out_fine_per_coarse: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_coarse: 32,
            n_fine: 16,
            dim: 64,
            coarse_signal: 1.0,
            query_image_fine: 0.9,
            train_text_fine: 0.80,
            query_text_fine: 0.55,
            memory_image_fine: 0.9,
            memory_text_fine: 0.85,
            sibling_fine_cos: 0.55,
            common_class_alignment: 0.7,
            rare_class_alignment: 0.40,
            memory_artifact: 0.85,
            instance_signal: 0.25,
            image_noise: 0.12,
            text_noise: 0.38,
            fine_wobble: 0.8,
            memory_image_noise: 0.5,
            memory_text_noise: 0.5,
            memory_size: 32768,
            train_size: 3072,
            eval_size: 512,
            held_out_fine_per_coarse: 8,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn n_classes(&self) -> usize {
        self.n_coarse * self.n_fine
    }

    /// Global fine-class ids seen at training time: the first
    /// `n_fine - held_out` of every coarse block.
    pub fn train_classes(&self) -> Vec<usize> {
        let keep = self.n_fine - self.held_out_fine_per_coarse;
        (0..self.n_coarse)
            .flat_map(|g| (0..keep).map(move |f| g * self.n_fine + f))
            .collect()
    }

    /// Global fine-class ids reserved for evaluation: the last
    /// `held_out` of every coarse block.
    pub fn eval_classes(&self) -> Vec<usize> {
        let keep = self.n_fine - self.held_out_fine_per_coarse;
        (0..self.n_coarse)
            .flat_map(|g| (keep..self.n_fine).map(move |f| g * self.n_fine + f))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 1 || self.memory_size < 1 || self.train_size < 1 || self.eval_size < 1 {
            return Err(Error::InvalidConfig("all world counts must be >= 1".into()));
        }
        if self.n_fine < 2 {
            return Err(Error::InvalidConfig(
                "n_fine must be >= 2: with a single fine class per coarse concept no fine-grained task exists".into(),
            ));
        }
        if self.held_out_fine_per_coarse < 1 || self.held_out_fine_per_coarse >= self.n_fine {
            return Err(Error::InvalidConfig(format!(
                "held_out_fine_per_coarse must lie in [1, n_fine): got {} of {}",
                self.held_out_fine_per_coarse, self.n_fine
            )));
        }
        if self.dim < self.n_coarse {
            return Err(Error::InvalidConfig(format!(
                "dim {} is below n_coarse {}; prototypes would be degenerate",
                self.dim, self.n_coarse
            )));
        }
        for (name, v) in [
            ("coarse_signal", self.coarse_signal),
            ("query_image_fine", self.query_image_fine),
            ("train_text_fine", self.train_text_fine),
            ("query_text_fine", self.query_text_fine),
            ("memory_artifact", self.memory_artifact),
            ("instance_signal", self.instance_signal),
            ("memory_image_fine", self.memory_image_fine),
            ("memory_text_fine", self.memory_text_fine),
            ("image_noise", self.image_noise),
            ("text_noise", self.text_noise),
            ("fine_wobble", self.fine_wobble),
            ("memory_image_noise", self.memory_image_noise),
            ("memory_text_noise", self.memory_text_noise),
        ] {
            if v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        for (name, v) in [
            ("sibling_fine_cos", self.sibling_fine_cos),
            ("common_class_alignment", self.common_class_alignment),
            ("rare_class_alignment", self.rare_class_alignment),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Zero-shot classification task: image-side queries against text-side class
/// embeddings.
#[derive(Debug, Clone)]
pub struct LabeledEvalTask {
    pub queries: Tensor<Real>,
    /// Row index into `class_embeddings` for each query.
    pub labels: Vec<usize>,
    pub class_embeddings: Tensor<Real>,
    /// Global fine-class id of each class-embedding row.
    pub class_global_ids: Vec<usize>,
    pub query_modality: Modality,
    pub class_modality: Modality,
}

/// Labels of every generated row, for diagnostics and qualitative dumps.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub train_labels: Vec<usize>,
    pub eval_labels: Vec<usize>,
    pub memory_labels: Vec<usize>,
    pub coarse_of: Vec<usize>,
    pub n_classes: usize,
}

/// A generated world: train split, memory, aligned eval pairs and the
/// classification task over them.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub train: TrainDataset,
    pub memory: MemoryStore,
    pub eval_v: Tensor<Real>,
    pub eval_t: Tensor<Real>,
    pub task: LabeledEvalTask,
    pub ground_truth: GroundTruth,
}

struct Prototypes {
    coarse: Vec<Vec<Real>>,
    fine_image: Vec<Vec<Real>>,
    fine_text: Vec<Vec<Real>>,
    artifact_image: Vec<Real>,
    artifact_text: Vec<Real>,
}

fn unit_vec(rng: &mut Rng, d: usize) -> Vec<Real> {
    loop {
        let mut v: Vec<Real> = (0..d).map(|_| rng.normal()).collect();
        if tensor::normalize(&mut v, "prototype").is_ok() {
            return v;
        }
    }
}

fn draw_prototypes(spec: &WorldSpec, rng: &mut Rng) -> Result<Prototypes> {
    let d = spec.dim;
    let coarse: Vec<Vec<Real>> = (0..spec.n_coarse).map(|_| unit_vec(rng, d)).collect();
    let c = spec.n_classes();
    let mut fine_image = Vec::with_capacity(c);
    let mut fine_text = Vec::with_capacity(c);
    let artifact_image = unit_vec(rng, d);
    let artifact_text = unit_vec(rng, d);
    let eval_classes = spec.eval_classes();

    // A unit vector at exactly cos = rho to `base`, using `raw` for the
    // orthogonal part.
    let at_cos = |base: &[Real], mut raw: Vec<Real>, rho: f64| -> Result<Vec<Real>> {
        let proj = tensor::dot(&raw, base);
        for (rv, &bv) in raw.iter_mut().zip(base) {
            *rv -= proj * bv;
        }
        tensor::normalize(&mut raw, "orthogonal complement")?;
        let orth = (1.0 - rho * rho).sqrt();
        Ok(base.iter().zip(&raw).map(|(&b, &r)| rho * b + orth * r).collect())
    };

    // Per coarse group, one fine anchor per modality: sibling classes share
    // sqrt(sibling_fine_cos) of it, so lookalikes stay lookalikes in both
    // modalities. Anchors align across modalities like common concepts do.
    let gamma = spec.sibling_fine_cos.sqrt();
    let orth_gamma = (1.0 - gamma * gamma).sqrt();
    let mut anchors_img = Vec::with_capacity(spec.n_coarse);
    let mut anchors_txt = Vec::with_capacity(spec.n_coarse);
    for _ in 0..spec.n_coarse {
        let a_img = unit_vec(rng, d);
        let a_txt = at_cos(&a_img, unit_vec(rng, d), spec.common_class_alignment)?;
        anchors_img.push(a_img);
        anchors_txt.push(a_txt);
    }

    for label in 0..c {
        let rho = if eval_classes.contains(&label) {
            spec.rare_class_alignment
        } else {
            spec.common_class_alignment
        };
        let group = label / spec.n_fine;
        let u_img = unit_vec(rng, d);
        let u_txt = at_cos(&u_img, unit_vec(rng, d), rho)?;
        let mix = |anchor: &[Real], unique: &[Real]| -> Vec<Real> {
            anchor.iter().zip(unique).map(|(&a, &u)| gamma * a + orth_gamma * u).collect()
        };
        fine_image.push(mix(&anchors_img[group], &u_img));
        fine_text.push(mix(&anchors_txt[group], &u_txt));
    }

    // non-collinearity construction check; a class's own image/text fine
    // directions and same-group siblings are intentionally correlated and
    // share a group tag
    let mut tagged: Vec<(usize, &Vec<Real>)> = Vec::new();
    for (i, p) in coarse.iter().enumerate() {
        tagged.push((i, p));
    }
    for (i, p) in fine_image.iter().enumerate() {
        tagged.push((spec.n_coarse + i / spec.n_fine, p));
    }
    for (i, p) in fine_text.iter().enumerate() {
        tagged.push((spec.n_coarse + i / spec.n_fine, p));
    }
    for i in 0..tagged.len() {
        for j in (i + 1)..tagged.len() {
            if tagged[i].0 == tagged[j].0 {
                continue;
            }
            let cos = tensor::dot(tagged[i].1, tagged[j].1).abs();
            if cos > 0.95 {
                return Err(Error::InvalidConfig(format!(
                    "prototype directions nearly collinear (|cos| = {cos:.3})"
                )));
            }
        }
    }
    Ok(Prototypes { coarse, fine_image, fine_text, artifact_image, artifact_text })
}

fn sample(
    protos: &Prototypes,
    spec: &WorldSpec,
    rng: &mut Rng,
    label: usize,
    modality: Modality,
    fine_weight: f64,
    artifact_weight: f64,
    instance: Option<&[Real]>,
    noise: f64,
    wobble_dir: Option<&[Real]>,
) -> Vec<Real> {
    let d = spec.dim;
    let coarse = &protos.coarse[label / spec.n_fine];
    let (fine, artifact) = match modality {
        Modality::Image => (&protos.fine_image[label], &protos.artifact_image),
        Modality::Text => (&protos.fine_text[label], &protos.artifact_text),
    };
    let mut fine_dir: Vec<Real> = match wobble_dir {
        Some(g) => fine.iter().zip(g).map(|(&f, &gv)| f + spec.fine_wobble * gv).collect(),
        None => fine.clone(),
    };
    if wobble_dir.is_some() {
        tensor::normalize(&mut fine_dir, "wobbled fine direction").expect("nonzero");
    }
    let noise_w = noise / (d as f64).sqrt();
    let mut v: Vec<Real> = (0..d)
        .map(|j| {
            spec.coarse_signal * coarse[j]
                + fine_weight * fine_dir[j]
                + artifact_weight * artifact[j]
                + instance.map_or(0.0, |g| spec.instance_signal * g[j])
                + noise_w * rng.normal()
        })
        .collect();
    tensor::normalize(&mut v, "sample").expect("signal plus noise is nonzero");
    v
}

/// Generate a world from its spec. Identical specs produce bit-identical
/// worlds.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut proto_rng = Rng::substream(spec.seed, 0x70726f746f); // "proto"
    let protos = draw_prototypes(spec, &mut proto_rng)?;
    let c = spec.n_classes();

    let mut memory_rng = Rng::substream(spec.seed, 0x6d656d); // "mem"
    let mut memory_pairs = Vec::with_capacity(spec.memory_size);
    let mut memory_labels = Vec::with_capacity(spec.memory_size);
    for i in 0..spec.memory_size {
        let label = i % c;
        let inst = unit_vec(&mut memory_rng, spec.dim);
        let wob_v = unit_vec(&mut memory_rng, spec.dim);
        let wob_t = unit_vec(&mut memory_rng, spec.dim);
        let v = sample(&protos, spec, &mut memory_rng, label, Modality::Image, spec.memory_image_fine, spec.memory_artifact, Some(&inst), spec.memory_image_noise, Some(&wob_v));
        let t = sample(&protos, spec, &mut memory_rng, label, Modality::Text, spec.memory_text_fine, spec.memory_artifact, Some(&inst), spec.memory_text_noise, Some(&wob_t));
        memory_pairs.push((v, t, label as u64 * ID_LABEL_BASE + i as u64));
        memory_labels.push(label);
    }
    let memory = MemoryStore::build(&memory_pairs)?;

    let train_classes = spec.train_classes();
    let mut train_rng = Rng::substream(spec.seed, 0x7472); // "tr"
    let mut train_v = Vec::with_capacity(spec.train_size);
    let mut train_t = Vec::with_capacity(spec.train_size);
    let mut train_labels = Vec::with_capacity(spec.train_size);
    for i in 0..spec.train_size {
        let label = train_classes[i % train_classes.len()];
        let inst = unit_vec(&mut train_rng, spec.dim);
        let wob_v = unit_vec(&mut train_rng, spec.dim);
        let wob_t = unit_vec(&mut train_rng, spec.dim);
        train_v.push(sample(&protos, spec, &mut train_rng, label, Modality::Image, spec.query_image_fine, 0.0, Some(&inst), spec.image_noise, Some(&wob_v)));
        train_t.push(sample(&protos, spec, &mut train_rng, label, Modality::Text, spec.train_text_fine, 0.0, Some(&inst), spec.text_noise, Some(&wob_t)));
        train_labels.push(label);
    }
    let train = TrainDataset {
        v: Tensor::from_rows(&train_v)?,
        t: Tensor::from_rows(&train_t)?,
        provenance: format!("world-seed-{}", spec.seed),
        shares_memory_provenance: true,
    };

    let eval_classes = spec.eval_classes();
    let mut eval_rng = Rng::substream(spec.seed, 0x6576); // "ev"
    let mut eval_v = Vec::with_capacity(spec.eval_size);
    let mut eval_t = Vec::with_capacity(spec.eval_size);
    let mut eval_labels = Vec::with_capacity(spec.eval_size);
    let mut task_labels = Vec::with_capacity(spec.eval_size);
    for i in 0..spec.eval_size {
        let local = i % eval_classes.len();
        let label = eval_classes[local];
        let inst = unit_vec(&mut eval_rng, spec.dim);
        let wob_v = unit_vec(&mut eval_rng, spec.dim);
        let wob_t = unit_vec(&mut eval_rng, spec.dim);
        eval_v.push(sample(&protos, spec, &mut eval_rng, label, Modality::Image, spec.query_image_fine, 0.0, Some(&inst), spec.image_noise, Some(&wob_v)));
        eval_t.push(sample(&protos, spec, &mut eval_rng, label, Modality::Text, spec.query_text_fine, 0.0, Some(&inst), spec.text_noise, Some(&wob_t)));
        eval_labels.push(label);
        task_labels.push(local);
    }
    let eval_v = Tensor::from_rows(&eval_v)?;
    let eval_t = Tensor::from_rows(&eval_t)?;

    let mut class_rng = Rng::substream(spec.seed, 0x636c73); // "cls"
    let class_rows: Vec<Vec<Real>> = eval_classes
        .iter()
        .map(|&label| sample(&protos, spec, &mut class_rng, label, Modality::Text, spec.query_text_fine, 0.0, None, spec.text_noise, None))
        .collect();
    let task = LabeledEvalTask {
        queries: eval_v.clone(),
        labels: task_labels,
        class_embeddings: Tensor::from_rows(&class_rows)?,
        class_global_ids: eval_classes.clone(),
        query_modality: Modality::Image,
        class_modality: Modality::Text,
    };

    Ok(World {
        spec: *spec,
        train,
        memory,
        eval_v,
        eval_t,
        task,
        ground_truth: GroundTruth {
            train_labels,
            eval_labels,
            memory_labels,
            coarse_of: (0..c).map(|l| l / spec.n_fine).collect(),
            n_classes: c,
        },
    })
}

/// Cosine statistics and retrieval hit rates of a generated world.
#[derive(Debug, Clone, Serialize)]
pub struct WorldReport {
    /// Mean cosine between same-class / different-class image pairs.
    pub image_intra_cos: f64,
    pub image_inter_cos: f64,
    pub text_intra_cos: f64,
    pub text_inter_cos: f64,
    /// Mean cosine of aligned cross-modal pairs.
    pub cross_modal_pair_cos: f64,
    /// Fraction of top-10 uni-modal image-search neighbours sharing the
    /// query's fine label, over eval queries.
    pub image_hit_rate: f64,
    /// Same for eval text rows against the memory text side.
    pub text_hit_rate: f64,
}

pub fn world_report(world: &World) -> Result<WorldReport> {
    let gt = &world.ground_truth;
    let pairs_stats = |m: &Tensor<Real>, labels: &[usize]| -> (f64, f64) {
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        let n = m.rows().min(256);
        for i in 0..n {
            for j in (i + 1)..n {
                let cos = tensor::dot(m.row(i), m.row(j));
                if labels[i] == labels[j] {
                    intra = (intra.0 + cos, intra.1 + 1);
                } else {
                    inter = (inter.0 + cos, inter.1 + 1);
                }
            }
        }
        (intra.0 / intra.1.max(1) as f64, inter.0 / inter.1.max(1) as f64)
    };
    let (image_intra, image_inter) = pairs_stats(&world.eval_v, &gt.eval_labels);
    let (text_intra, text_inter) = pairs_stats(&world.eval_t, &gt.eval_labels);
    let cross: f64 = (0..world.eval_v.rows())
        .map(|i| tensor::dot(world.eval_v.row(i), world.eval_t.row(i)))
        .sum::<f64>()
        / world.eval_v.rows() as f64;

    let k = 10.min(world.memory.len());
    let hit_rate = |queries: &Tensor<Real>, modality: Modality| -> Result<f64> {
        let cfg = RetrievalConfig {
            k,
            k_prime: k,
            search_mode: crate::retrieval::SearchMode::Uni,
            fetch_modality: crate::retrieval::FetchModality::Opposite,
            exclude_self: false,
        };
        let mut hits = 0usize;
        let mut total = 0usize;
        for i in 0..queries.rows() {
            let ns = knn_exact(queries.row(i), &world.memory, &cfg, modality)?;
            for &idx in &ns.indices {
                if gt.memory_labels[idx] == gt.eval_labels[i] {
                    hits += 1;
                }
                total += 1;
            }
        }
        Ok(hits as f64 / total.max(1) as f64)
    };
    Ok(WorldReport {
        image_intra_cos: image_intra,
        image_inter_cos: image_inter,
        text_intra_cos: text_intra,
        text_inter_cos: text_inter,
        cross_modal_pair_cos: cross,
        image_hit_rate: hit_rate(&world.eval_v, Modality::Image)?,
        text_hit_rate: hit_rate(&world.eval_t, Modality::Text)?,
    })
}

/// Deterministically subsample a fraction of the memory.
pub fn subsample_memory(store: &MemoryStore, fraction: f64, seed: u64) -> Result<MemoryStore> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("memory fraction {fraction} outside [0, 1]")));
    }
    let keep_n = ((store.len() as f64 * fraction).round() as usize).max(1);
    if keep_n >= store.len() {
        return Ok(store.clone());
    }
    let mut idx: Vec<usize> = (0..store.len()).collect();
    let mut rng = Rng::substream(seed, 0x737562); // "sub"
    rng.shuffle(&mut idx);
    let mut keep: Vec<usize> = idx.into_iter().take(keep_n).collect();
    keep.sort_unstable();
    store.subset(&keep)
}

// ---------------------------------------------------------------------------
// world archive

#[derive(Serialize, Deserialize)]
struct SplitRow {
    v: Vec<Real>,
    t: Vec<Real>,
    fine_label: usize,
    coarse_label: usize,
}

#[derive(Serialize, Deserialize)]
struct ClassRow {
    t: Vec<Real>,
    fine_label: usize,
    coarse_label: usize,
}

#[derive(Serialize, Deserialize)]
struct WorldMeta {
    spec: WorldSpec,
    provenance: String,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Write the archive: memory bank (+ manifest), train/eval/class JSON lines
/// and the resolved spec.
pub fn save_world(world: &World, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = BankManifest {
        dim: world.memory.dim(),
        count: world.memory.len(),
        created: format!("seed-{}", world.spec.seed),
        source: world.train.provenance.clone(),
        dedupe_threshold: None,
    };
    bank::save_bank(&world.memory, &dir.join("memory.bank"), &manifest)?;

    let gt = &world.ground_truth;
    let spec = &world.spec;
    write_jsonl(
        &dir.join("train.jsonl"),
        (0..world.train.len()).map(|i| SplitRow {
            v: world.train.v.row(i).to_vec(),
            t: world.train.t.row(i).to_vec(),
            fine_label: gt.train_labels[i],
            coarse_label: gt.train_labels[i] / spec.n_fine,
        }),
    )?;
    write_jsonl(
        &dir.join("eval.jsonl"),
        (0..world.eval_v.rows()).map(|i| SplitRow {
            v: world.eval_v.row(i).to_vec(),
            t: world.eval_t.row(i).to_vec(),
            fine_label: gt.eval_labels[i],
            coarse_label: gt.eval_labels[i] / spec.n_fine,
        }),
    )?;
    write_jsonl(
        &dir.join("classes.jsonl"),
        (0..world.task.class_embeddings.rows()).map(|i| ClassRow {
            t: world.task.class_embeddings.row(i).to_vec(),
            fine_label: world.task.class_global_ids[i],
            coarse_label: world.task.class_global_ids[i] / spec.n_fine,
        }),
    )?;
    let meta = WorldMeta { spec: world.spec, provenance: world.train.provenance.clone() };
    std::fs::write(dir.join("world.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Load an archive written by [`save_world`]. Note the memory passes through
/// f32 bank storage, so its rows are f32-rounded relative to the generator's
/// output; the splits round-trip exactly through JSON.
pub fn load_world(dir: &Path) -> Result<World> {
    let meta: WorldMeta = serde_json::from_slice(&std::fs::read(dir.join("world.json"))?)?;
    let spec = meta.spec;
    let memory = bank::load_bank(&dir.join("memory.bank"))?;
    let memory_labels: Vec<usize> =
        memory.ids().iter().map(|&id| (id / ID_LABEL_BASE) as usize).collect();

    let train_rows: Vec<SplitRow> = read_jsonl(&dir.join("train.jsonl"))?;
    let eval_rows: Vec<SplitRow> = read_jsonl(&dir.join("eval.jsonl"))?;
    let class_rows: Vec<ClassRow> = read_jsonl(&dir.join("classes.jsonl"))?;

    let train_labels: Vec<usize> = train_rows.iter().map(|r| r.fine_label).collect();
    let eval_labels: Vec<usize> = eval_rows.iter().map(|r| r.fine_label).collect();
    let train = TrainDataset {
        v: Tensor::from_rows(&train_rows.iter().map(|r| r.v.clone()).collect::<Vec<_>>())?,
        t: Tensor::from_rows(&train_rows.iter().map(|r| r.t.clone()).collect::<Vec<_>>())?,
        provenance: meta.provenance,
        shares_memory_provenance: true,
    };
    let eval_v = Tensor::from_rows(&eval_rows.iter().map(|r| r.v.clone()).collect::<Vec<_>>())?;
    let eval_t = Tensor::from_rows(&eval_rows.iter().map(|r| r.t.clone()).collect::<Vec<_>>())?;
    let class_embeddings =
        Tensor::from_rows(&class_rows.iter().map(|r| r.t.clone()).collect::<Vec<_>>())?;
    let class_global_ids: Vec<usize> = class_rows.iter().map(|r| r.fine_label).collect();
    let task_labels: Vec<usize> = eval_labels
        .iter()
        .map(|g| {
            class_global_ids.iter().position(|c| c == g).ok_or_else(|| {
                Error::InvalidConfig(format!("eval label {g} missing from classes.jsonl"))
            })
        })
        .collect::<Result<_>>()?;
    let task = LabeledEvalTask {
        queries: eval_v.clone(),
        labels: task_labels,
        class_embeddings,
        class_global_ids,
        query_modality: Modality::Image,
        class_modality: Modality::Text,
    };
    let n_classes = spec.n_classes();
    Ok(World {
        spec,
        train,
        memory,
        eval_v,
        eval_t,
        task,
        ground_truth: GroundTruth {
            train_labels,
            eval_labels,
            memory_labels,
            coarse_of: (0..n_classes).map(|l| l / spec.n_fine).collect(),
            n_classes,
        },
    })
}
