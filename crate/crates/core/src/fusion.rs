//! Learned fusion of an embedding with its retrieved neighbours.
//!
//! Each branch (image, text; parameters never shared) is a stack of pre-LN
//! transformer encoder blocks applied to the token sequence
//! `[query, r_1, ..., r_k]` with no positional encodings, followed by a final
//! layer norm. The refined embedding is the query-position token, L2
//! normalized. Retrieved tokens are canonically ordered before the forward
//! pass so that any permutation of the same retrieved set produces a
//! bit-identical result.
//!
//! Attention and MLP output projections start at zero, so an untrained module
//! behaves near-identity: the refined embedding is the normalized LN image of
//! the query.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{self, Tensor};
use crate::Real;

pub const LN_EPS: Real = 1e-5;

/// Which fusion branch to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Image,
    Text,
}

/// Architecture of one branch: width, heads, block count, MLP width ratio.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: f64,
}

impl FusionConfig {
    pub fn new(dim: usize, heads: usize, layers: usize, mlp_ratio: f64) -> Self {
        FusionConfig { dim, heads, layers, mlp_ratio }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("fusion dim and heads must be >= 1".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { dim: 64, heads: 4, layers: 1, mlp_ratio: 1.0 }
    }
}

/// Parameters of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor<Real>,
    pub ln1_bias: Tensor<Real>,
    pub wq: Tensor<Real>,
    pub bq: Tensor<Real>,
    pub wk: Tensor<Real>,
    pub bk: Tensor<Real>,
    pub wv: Tensor<Real>,
    pub bv: Tensor<Real>,
    pub wo: Tensor<Real>,
    pub bo: Tensor<Real>,
    pub ln2_gain: Tensor<Real>,
    pub ln2_bias: Tensor<Real>,
    pub w_in: Tensor<Real>,
    pub b_in: Tensor<Real>,
    pub w_out: Tensor<Real>,
    pub b_out: Tensor<Real>,
}

/// Parameters of one branch: the blocks plus the final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor<Real>,
    pub final_bias: Tensor<Real>,
}

/// All learnable fusion weights. Image and text branches have identical
/// architecture but disjoint storage. The temperature lives with the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub config: FusionConfig,
    pub image: BranchParams,
    pub text: BranchParams,
}

impl FusionParams {
    /// Identity-leaning initialization: truncated-normal(0.02) input
    /// projections, zero biases, zero attention/MLP output projections.
    pub fn init(config: FusionConfig, seed: u64) -> Result<FusionParams> {
        config.validate()?;
        let mut rng = crate::rng::Rng::substream(seed, 0x66757365); // "fuse"
        let branch = |rng: &mut crate::rng::Rng| BranchParams {
            layers: (0..config.layers)
                .map(|_| {
                    let d = config.dim;
                    let hd = config.hidden_dim();
                    let tn = |rng: &mut crate::rng::Rng, rows: usize, cols: usize| {
                        Tensor::new(
                            vec![rows, cols],
                            (0..rows * cols).map(|_| rng.trunc_normal(0.02)).collect(),
                        )
                        .expect("init shape")
                    };
                    LayerParams {
                        ln1_gain: Tensor::full(vec![d], 1.0),
                        ln1_bias: Tensor::zeros(vec![d]),
                        wq: tn(rng, d, d),
                        bq: Tensor::zeros(vec![d]),
                        wk: tn(rng, d, d),
                        bk: Tensor::zeros(vec![d]),
                        wv: tn(rng, d, d),
                        bv: Tensor::zeros(vec![d]),
                        wo: Tensor::zeros(vec![d, d]),
                        bo: Tensor::zeros(vec![d]),
                        ln2_gain: Tensor::full(vec![d], 1.0),
                        ln2_bias: Tensor::zeros(vec![d]),
                        w_in: tn(rng, d, hd),
                        b_in: Tensor::zeros(vec![hd]),
                        w_out: Tensor::zeros(vec![hd, d]),
                        b_out: Tensor::zeros(vec![d]),
                    }
                })
                .collect(),
            final_gain: Tensor::full(vec![config.dim], 1.0),
            final_bias: Tensor::zeros(vec![config.dim]),
        };
        let image = branch(&mut rng);
        let text = branch(&mut rng);
        Ok(FusionParams { config, image, text })
    }

    /// Fully random parameters (no zero projections); used by gradient
    /// verification so every coordinate participates in the loss.
    pub fn random(config: FusionConfig, seed: u64, std: f64) -> Result<FusionParams> {
        let mut p = FusionParams::init(config, seed)?;
        let mut rng = crate::rng::Rng::substream(seed, 0x72616e64); // "rand"
        for (name, t) in p.named_tensors_mut() {
            let is_gain = name.ends_with("gain");
            for v in t.data_mut() {
                *v = if is_gain { 1.0 + rng.normal() * 0.1 } else { rng.normal() * std };
            }
        }
        Ok(p)
    }

    pub fn branch(&self, branch: Branch) -> &BranchParams {
        match branch {
            Branch::Image => &self.image,
            Branch::Text => &self.text,
        }
    }

    /// All tensors, prefixed `image.` / `text.`, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<Real>)> {
        let mut out = Vec::new();
        for (prefix, b) in [("image", &self.image), ("text", &self.text)] {
            for (li, l) in b.layers.iter().enumerate() {
                for (field, t) in layer_fields(l) {
                    out.push((format!("{prefix}.layer{li}.{field}"), t));
                }
            }
            out.push((format!("{prefix}.final_gain"), &b.final_gain));
            out.push((format!("{prefix}.final_bias"), &b.final_bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<Real>)> {
        let mut out = Vec::new();
        for (prefix, b) in [("image", &mut self.image), ("text", &mut self.text)] {
            for (li, l) in b.layers.iter_mut().enumerate() {
                for (field, t) in layer_fields_mut(l) {
                    out.push((format!("{prefix}.layer{li}.{field}"), t));
                }
            }
            out.push((format!("{prefix}.final_gain"), &mut b.final_gain));
            out.push((format!("{prefix}.final_bias"), &mut b.final_bias));
        }
        out
    }

    pub fn total_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn layer_fields(l: &LayerParams) -> Vec<(&'static str, &Tensor<Real>)> {
    vec![
        ("ln1_gain", &l.ln1_gain),
        ("ln1_bias", &l.ln1_bias),
        ("wq", &l.wq),
        ("bq", &l.bq),
        ("wk", &l.wk),
        ("bk", &l.bk),
        ("wv", &l.wv),
        ("bv", &l.bv),
        ("wo", &l.wo),
        ("bo", &l.bo),
        ("ln2_gain", &l.ln2_gain),
        ("ln2_bias", &l.ln2_bias),
        ("w_in", &l.w_in),
        ("b_in", &l.b_in),
        ("w_out", &l.w_out),
        ("b_out", &l.b_out),
    ]
}

fn layer_fields_mut(l: &mut LayerParams) -> Vec<(&'static str, &mut Tensor<Real>)> {
    vec![
        ("ln1_gain", &mut l.ln1_gain),
        ("ln1_bias", &mut l.ln1_bias),
        ("wq", &mut l.wq),
        ("bq", &mut l.bq),
        ("wk", &mut l.wk),
        ("bk", &mut l.bk),
        ("wv", &mut l.wv),
        ("bv", &mut l.bv),
        ("wo", &mut l.wo),
        ("bo", &mut l.bo),
        ("ln2_gain", &mut l.ln2_gain),
        ("ln2_bias", &mut l.ln2_bias),
        ("w_in", &mut l.w_in),
        ("b_in", &mut l.b_in),
        ("w_out", &mut l.w_out),
        ("b_out", &mut l.b_out),
    ]
}

/// Exact learnable-parameter count for the given architecture.
///
/// Per block: 4(d^2+d) attention, two LNs of 2d each, d*hd+hd and hd*d+d for
/// the MLP. Per branch: blocks plus a final LN (2d) — with zero blocks only
/// the final LN remains. The temperature is counted with the loss, not here.
pub fn param_count(config: &FusionConfig, branches: usize) -> usize {
    let d = config.dim;
    let hd = config.hidden_dim();
    let per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * hd + hd) + (hd * d + d);
    branches * (config.layers * per_layer + 2 * d)
}

/// Tape handles for one branch's parameters.
pub struct BranchVars {
    pub layers: Vec<Vec<VarId>>,
    pub final_gain: VarId,
    pub final_bias: VarId,
}

/// Insert a branch's tensors as trainable leaves, in `named_tensors` order.
pub fn insert_branch(tape: &mut Tape<Real>, branch: &BranchParams) -> BranchVars {
    let layers = branch
        .layers
        .iter()
        .map(|l| layer_fields(l).into_iter().map(|(_, t)| tape.leaf(t.clone().with_grad())).collect())
        .collect();
    BranchVars {
        layers,
        final_gain: tape.leaf(branch.final_gain.clone().with_grad()),
        final_bias: tape.leaf(branch.final_bias.clone().with_grad()),
    }
}

/// Same insertion but as constants, for inference.
pub fn insert_branch_frozen(tape: &mut Tape<Real>, branch: &BranchParams) -> BranchVars {
    let layers = branch
        .layers
        .iter()
        .map(|l| layer_fields(l).into_iter().map(|(_, t)| tape.constant(t.clone())).collect())
        .collect();
    BranchVars {
        layers,
        final_gain: tape.constant(branch.final_gain.clone()),
        final_bias: tape.constant(branch.final_bias.clone()),
    }
}

/// Collect the branch's gradients after backward, in `named_tensors` order.
pub fn branch_grads(tape: &Tape<Real>, vars: &BranchVars) -> Vec<Tensor<Real>> {
    let mut out = Vec::new();
    for layer in &vars.layers {
        for &id in layer {
            out.push(tape.grad(id).expect("trainable leaf").clone());
        }
    }
    out.push(tape.grad(vars.final_gain).expect("trainable leaf").clone());
    out.push(tape.grad(vars.final_bias).expect("trainable leaf").clone());
    out
}

/// Run the branch over `n_seq` packed token sequences of length `seq_len`
/// (query at position 0 of each). Returns the n_seq x d refined matrix,
/// row-normalized.
pub fn forward_refine(
    tape: &mut Tape<Real>,
    vars: &BranchVars,
    config: &FusionConfig,
    tokens: VarId,
    n_seq: usize,
    seq_len: usize,
) -> Result<VarId> {
    let mut x = tokens;
    for layer in &vars.layers {
        let [ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, w_in, b_in, w_out, b_out] =
            layer[..]
        else {
            return Err(Error::InvalidConfig("layer variable set incomplete".into()));
        };
        let h = tape.layer_norm(x, ln1_gain, ln1_bias, LN_EPS)?;
        let q0 = tape.matmul(h, wq)?;
        let q = tape.add_row_bias(q0, bq)?;
        let k0 = tape.matmul(h, wk)?;
        let k = tape.add_row_bias(k0, bk)?;
        let v0 = tape.matmul(h, wv)?;
        let v = tape.add_row_bias(v0, bv)?;
        let attn = tape.attention(q, k, v, n_seq, seq_len, config.heads)?;
        let o0 = tape.matmul(attn, wo)?;
        let o = tape.add_row_bias(o0, bo)?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, ln2_gain, ln2_bias, LN_EPS)?;
        let m0 = tape.matmul(h2, w_in)?;
        let m1 = tape.add_row_bias(m0, b_in)?;
        let m2 = tape.gelu(m1);
        let m3 = tape.matmul(m2, w_out)?;
        let m = tape.add_row_bias(m3, b_out)?;
        x = tape.add(x, m)?;
    }
    let readout = tape.select_rows(x, seq_len, 0)?;
    let f = tape.layer_norm(readout, vars.final_gain, vars.final_bias, LN_EPS)?;
    tape.normalize_rows(f)
}

/// Pack queries and their retrieved rows into one token matrix of
/// `n * (k + 1)` rows. Retrieved rows are sorted into a canonical order so
/// the result is identical for any permutation of the same retrieved set.
pub fn build_tokens(queries: &Tensor<Real>, fetched: &[&Tensor<Real>]) -> Result<(Tensor<Real>, usize)> {
    let n = queries.rows();
    if fetched.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} queries but {} retrieved sets",
            n,
            fetched.len()
        )));
    }
    let d = queries.cols();
    let k = fetched.first().map(|f| f.rows()).unwrap_or(0);
    let s = k + 1;
    let mut tokens = Tensor::zeros(vec![n * s, d]);
    for i in 0..n {
        let f = fetched[i];
        if f.rows() != k {
            return Err(Error::ShapeMismatch(format!(
                "retrieved set {} has {} rows, expected {}",
                i,
                f.rows(),
                k
            )));
        }
        if k > 0 && f.cols() != d {
            return Err(Error::DimMismatch { expected: d, got: f.cols() });
        }
        tokens.row_mut(i * s).copy_from_slice(queries.row(i));
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            f.row(a)
                .iter()
                .zip(f.row(b))
                .find_map(|(x, y)| {
                    let c = x.total_cmp(y);
                    (c != std::cmp::Ordering::Equal).then_some(c)
                })
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for (slot, &src) in order.iter().enumerate() {
            tokens.row_mut(i * s + 1 + slot).copy_from_slice(f.row(src));
        }
    }
    Ok((tokens, s))
}

/// Refine one embedding with its retrieved rows through the chosen branch.
pub fn fuse_transformer(
    params: &FusionParams,
    branch: Branch,
    x: &[Real],
    fetched: &Tensor<Real>,
) -> Result<Vec<Real>> {
    let queries = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let out = refine_batch(params, branch, &queries, &[fetched])?;
    Ok(out.row(0).to_vec())
}

/// Refine a batch; `fetched[i]` holds the rows retrieved for query i and all
/// sets must have the same size.
pub fn refine_batch(
    params: &FusionParams,
    branch: Branch,
    queries: &Tensor<Real>,
    fetched: &[&Tensor<Real>],
) -> Result<Tensor<Real>> {
    if queries.cols() != params.config.dim {
        return Err(Error::DimMismatch { expected: params.config.dim, got: queries.cols() });
    }
    let (tokens, s) = build_tokens(queries, fetched)?;
    let n = queries.rows();
    let mut tape = Tape::new();
    let vars = insert_branch_frozen(&mut tape, params.branch(branch));
    let t = tape.constant(tokens);
    let out = forward_refine(&mut tape, &vars, &params.config, t, n, s)?;
    Ok(tape.value(out).clone())
}

/// Parameter-free baseline: mean of the query and its retrieved rows,
/// re-normalized. With no retrieved rows the query is returned unchanged.
pub fn fuse_mean(x: &[Real], fetched: &Tensor<Real>) -> Result<Vec<Real>> {
    if fetched.rows() == 0 {
        return Ok(x.to_vec());
    }
    if fetched.cols() != x.len() {
        return Err(Error::DimMismatch { expected: x.len(), got: fetched.cols() });
    }
    let k = fetched.rows();
    let mut acc = x.to_vec();
    for i in 0..k {
        for (a, &v) in acc.iter_mut().zip(fetched.row(i)) {
            *a += v;
        }
    }
    let scale = 1.0 / (k as Real + 1.0);
    for a in acc.iter_mut() {
        *a *= scale;
    }
    if tensor::norm2(&acc) <= 1e-12 {
        return Err(Error::DegenerateFusion);
    }
    tensor::normalize(&mut acc, "fuse_mean")?;
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn unit(rng: &mut Rng, d: usize) -> Vec<Real> {
        let mut v: Vec<Real> = (0..d).map(|_| rng.normal()).collect();
        tensor::normalize(&mut v, "test").unwrap();
        v
    }

    #[test]
    fn empty_retrieval_is_defined() {
        let cfg = FusionConfig::new(16, 4, 1, 1.0);
        let params = FusionParams::init(cfg, 0).unwrap();
        let mut rng = Rng::new(1);
        let x = unit(&mut rng, 16);
        let out = fuse_transformer(&params, Branch::Image, &x, &Tensor::zeros(vec![0, 16])).unwrap();
        assert_eq!(out.len(), 16);
        assert!((tensor::norm2(&out) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn permutation_of_retrieved_rows_is_bit_identical() {
        let cfg = FusionConfig::new(16, 4, 2, 2.0);
        let params = FusionParams::random(cfg, 3, 0.2).unwrap();
        let mut rng = Rng::new(2);
        let x = unit(&mut rng, 16);
        let rows: Vec<Vec<Real>> = (0..5).map(|_| unit(&mut rng, 16)).collect();
        let base = fuse_transformer(&params, Branch::Text, &x, &Tensor::from_rows(&rows).unwrap()).unwrap();
        let mut order: Vec<usize> = (0..5).collect();
        for trial in 0..20 {
            let mut r = Rng::new(100 + trial);
            r.shuffle(&mut order);
            let permuted: Vec<Vec<Real>> = order.iter().map(|&i| rows[i].clone()).collect();
            let out =
                fuse_transformer(&params, Branch::Text, &x, &Tensor::from_rows(&permuted).unwrap())
                    .unwrap();
            for (a, b) in base.iter().zip(&out) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn refined_rows_are_unit_norm() {
        let cfg = FusionConfig::default();
        let params = FusionParams::random(cfg, 5, 0.3).unwrap();
        let mut rng = Rng::new(4);
        let queries = Tensor::from_rows(&(0..6).map(|_| unit(&mut rng, 64)).collect::<Vec<_>>()).unwrap();
        let sets: Vec<Tensor<Real>> = (0..6)
            .map(|_| Tensor::from_rows(&(0..4).map(|_| unit(&mut rng, 64)).collect::<Vec<_>>()).unwrap())
            .collect();
        let refs: Vec<&Tensor<Real>> = sets.iter().collect();
        let out = refine_batch(&params, Branch::Image, &queries, &refs).unwrap();
        for i in 0..6 {
            assert!((tensor::norm2(out.row(i)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn init_is_near_identity() {
        let cfg = FusionConfig::default();
        let params = FusionParams::init(cfg, 9).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let x = unit(&mut rng, 64);
            let fetched =
                Tensor::from_rows(&(0..8).map(|_| unit(&mut rng, 64)).collect::<Vec<_>>()).unwrap();
            let out = fuse_transformer(&params, Branch::Image, &x, &fetched).unwrap();
            let cos = tensor::dot(&x, &out);
            assert!(cos > 0.9, "init cosine {cos}");
        }
    }

    #[test]
    fn matches_straight_line_reference() {
        let cfg = FusionConfig::new(16, 4, 1, 1.0);
        let params = FusionParams::random(cfg, 11, 0.25).unwrap();
        let mut rng = Rng::new(6);
        let x = unit(&mut rng, 16);
        let fetched = Tensor::from_rows(&(0..4).map(|_| unit(&mut rng, 16)).collect::<Vec<_>>()).unwrap();
        let got = fuse_transformer(&params, Branch::Image, &x, &fetched).unwrap();
        let expect = straight_line_reference(&params.image, &cfg, &x, &fetched);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    /// Independent re-implementation of the branch forward pass with plain
    /// loops: the oracle for the tape path.
    fn straight_line_reference(
        branch: &BranchParams,
        cfg: &FusionConfig,
        x: &[Real],
        fetched: &Tensor<Real>,
    ) -> Vec<Real> {
        let d = cfg.dim;
        let k = fetched.rows();
        let s = k + 1;
        // canonical neighbour order, as the fusion applies
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            for (xa, xb) in fetched.row(a).iter().zip(fetched.row(b)) {
                match xa.total_cmp(xb) {
                    std::cmp::Ordering::Equal => continue,
                    other => return other,
                }
            }
            std::cmp::Ordering::Equal
        });
        let mut tokens = vec![vec![0.0; d]; s];
        tokens[0] = x.to_vec();
        for (slot, &src) in order.iter().enumerate() {
            tokens[slot + 1] = fetched.row(src).to_vec();
        }

        let ln = |row: &[Real], gain: &[Real], bias: &[Real]| -> Vec<Real> {
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * inv * gain[j] + bias[j]).collect()
        };
        let proj = |rows: &[Vec<Real>], w: &Tensor<Real>, b: &[Real]| -> Vec<Vec<Real>> {
            let cols = w.cols();
            rows.iter()
                .map(|r| {
                    (0..cols)
                        .map(|j| {
                            let mut acc = b[j];
                            for (i, &v) in r.iter().enumerate() {
                                acc += v * w.data()[i * cols + j];
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };

        for l in &branch.layers {
            let h: Vec<Vec<Real>> =
                tokens.iter().map(|r| ln(r, l.ln1_gain.data(), l.ln1_bias.data())).collect();
            let q = proj(&h, &l.wq, l.bq.data());
            let kk = proj(&h, &l.wk, l.bk.data());
            let v = proj(&h, &l.wv, l.bv.data());
            let dh = d / cfg.heads;
            let mut attn = vec![vec![0.0; d]; s];
            for head in 0..cfg.heads {
                let c0 = head * dh;
                for ti in 0..s {
                    let mut scores = vec![0.0; s];
                    for tj in 0..s {
                        let mut acc = 0.0;
                        for c in 0..dh {
                            acc += q[ti][c0 + c] * kk[tj][c0 + c];
                        }
                        scores[tj] = acc / (dh as Real).sqrt();
                    }
                    let mx = scores.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                    let exps: Vec<Real> = scores.iter().map(|&z| (z - mx).exp()).collect();
                    let sum: Real = exps.iter().sum();
                    for tj in 0..s {
                        let p = exps[tj] / sum;
                        for c in 0..dh {
                            attn[ti][c0 + c] += p * v[tj][c0 + c];
                        }
                    }
                }
            }
            let o = proj(&attn, &l.wo, l.bo.data());
            for ti in 0..s {
                for j in 0..d {
                    tokens[ti][j] += o[ti][j];
                }
            }
            let h2: Vec<Vec<Real>> =
                tokens.iter().map(|r| ln(r, l.ln2_gain.data(), l.ln2_bias.data())).collect();
            let m1 = proj(&h2, &l.w_in, l.b_in.data());
            let m2: Vec<Vec<Real>> = m1
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|&v| {
                            let u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
                            0.5 * v * (1.0 + u.tanh())
                        })
                        .collect()
                })
                .collect();
            let m3 = proj(&m2, &l.w_out, l.b_out.data());
            for ti in 0..s {
                for j in 0..d {
                    tokens[ti][j] += m3[ti][j];
                }
            }
        }
        let mut out = ln(&tokens[0], branch.final_gain.data(), branch.final_bias.data());
        tensor::normalize(&mut out, "reference").unwrap();
        out
    }

    #[test]
    fn mean_fusion_trivial_cases() {
        let mut rng = Rng::new(7);
        let x = unit(&mut rng, 8);
        // no retrieval: exactly x
        let out = fuse_mean(&x, &Tensor::zeros(vec![0, 8])).unwrap();
        assert_eq!(out, x);
        // one duplicate row: still x (up to normalization noise)
        let dup = Tensor::from_rows(&[x.clone()]).unwrap();
        let out = fuse_mean(&x, &dup).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
        // two opposite rows orthogonal to x cancel
        let mut r1 = unit(&mut rng, 8);
        let proj = tensor::dot(&r1, &x);
        for (v, &xv) in r1.iter_mut().zip(&x) {
            *v -= proj * xv;
        }
        tensor::normalize(&mut r1, "r1").unwrap();
        let r2: Vec<Real> = r1.iter().map(|v| -v).collect();
        let out = fuse_mean(&x, &Tensor::from_rows(&[r1, r2]).unwrap()).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_fusion_degenerate_is_error() {
        let x = vec![1.0, 0.0];
        let opp = Tensor::from_rows(&[vec![-1.0, 0.0]]).unwrap();
        assert!(matches!(fuse_mean(&x, &opp), Err(Error::DegenerateFusion)));
    }

    #[test]
    fn param_count_matches_tensor_enumeration() {
        for (d, h, l, r) in [(16, 4, 1, 1.0), (16, 4, 0, 1.0), (64, 4, 2, 2.0), (32, 8, 3, 0.5)] {
            let cfg = FusionConfig::new(d, h, l, r);
            let params = FusionParams::init(cfg, 0).unwrap();
            assert_eq!(
                param_count(&cfg, 2),
                params.total_params(),
                "closed form disagrees with enumeration for d={d} h={h} l={l} r={r}"
            );
        }
    }

    #[test]
    fn zero_layers_leaves_only_final_norm() {
        let cfg = FusionConfig::new(16, 4, 0, 1.0);
        assert_eq!(param_count(&cfg, 1), 2 * 16);
    }

    #[test]
    fn mlp_ratio_one_approaches_reported_size_at_width_512() {
        // d=512, h=8, L=1, both branches: find the ratio whose total is
        // closest to 3.16M parameters.
        let target = 3_160_000i64;
        let mut best = (f64::INFINITY, 0.0, 0usize);
        for r in [0.5, 1.0, 2.0, 4.0] {
            let cfg = FusionConfig::new(512, 8, 1, r);
            let count = param_count(&cfg, 2);
            let gap = (count as i64 - target).abs() as f64;
            if gap < best.0 {
                best = (gap, r, count);
            }
        }
        assert_eq!(best.1, 1.0, "ratio 1.0 should be nearest the reported size");
        assert_eq!(best.2, 3_158_016);
    }

    #[test]
    fn branches_have_disjoint_storage() {
        let cfg = FusionConfig::new(16, 4, 1, 1.0);
        let mut params = FusionParams::init(cfg, 1).unwrap();
        let before = params.text.layers[0].wq.clone();
        for v in params.image.layers[0].wq.data_mut() {
            *v += 1.0;
        }
        assert_eq!(params.text.layers[0].wq, before);
    }
}
