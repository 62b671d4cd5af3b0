//! Bidirectional contrastive loss with learnable temperature, and the
//! three-term training objective.
//!
//! The loss of a batch of n aligned pairs is the sum over rows of two
//! softmax cross-entropy terms (image-to-text and text-to-image) sharing one
//! temperature; both the plain evaluation and the tape path stabilize with
//! per-row max subtraction. The total objective aligns refined-with-refined
//! plus both refined-with-original cross terms — there is no
//! original-with-original term, since the frozen backbone makes it constant.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{self, Tensor};
use crate::Real;

/// Upper clamp on 1/tau; gradient is gated to zero while active.
pub const MAX_INV_TAU: Real = 100.0;

/// Learnable temperature, parameterized in log space so 1/tau stays positive.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemperatureParam {
    pub log_inv_tau: Real,
}

impl TemperatureParam {
    /// Initialize at tau = 0.07, the usual contrastive-pretraining start.
    pub fn default_init() -> Self {
        TemperatureParam { log_inv_tau: (1.0 / 0.07f64).ln() }
    }

    pub fn from_tau(tau: Real) -> Self {
        TemperatureParam { log_inv_tau: (1.0 / tau).ln() }
    }

    /// Effective 1/tau, clamped to (0, MAX_INV_TAU].
    pub fn inv_tau(&self) -> Real {
        self.log_inv_tau.exp().min(MAX_INV_TAU)
    }
}

/// Sum reduction follows the objective as written; mean is available for
/// training-scale stability. Verification uses the sum form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Aligned embedding batch: row i of every present matrix refers to the same
/// underlying pair.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub v: Tensor<Real>,
    pub t: Tensor<Real>,
    pub v_bar: Option<Tensor<Real>>,
    pub t_bar: Option<Tensor<Real>>,
}

fn check_aligned(v: &Tensor<Real>, t: &Tensor<Real>) -> Result<usize> {
    if v.shape() != t.shape() || v.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "contrastive sides {:?} vs {:?}",
            v.shape(),
            t.shape()
        )));
    }
    if v.rows() == 0 {
        return Err(Error::InvalidConfig("empty contrastive batch".into()));
    }
    Ok(v.rows())
}

/// Plain (non-differentiable) evaluation of the contrastive loss.
pub fn info_nce(
    v: &Tensor<Real>,
    t: &Tensor<Real>,
    temp: &TemperatureParam,
    reduction: Reduction,
) -> Result<Real> {
    let n = check_aligned(v, t)?;
    let sims = tensor::matmul_nt(v, t)?;
    sims.ensure_finite("similarity matrix")?;
    let inv_tau = temp.inv_tau();
    let mut loss = 0.0;
    // rows: each image against all texts
    for i in 0..n {
        let row: Vec<Real> = sims.row(i).iter().map(|&s| s * inv_tau).collect();
        loss += lse_slice(&row) - row[i];
    }
    // columns: each text against all images
    for j in 0..n {
        let col: Vec<Real> = (0..n).map(|i| sims.data()[i * n + j] * inv_tau).collect();
        loss += lse_slice(&col) - col[j];
    }
    Ok(match reduction {
        Reduction::Sum => loss,
        Reduction::Mean => loss / n as Real,
    })
}

fn lse_slice(xs: &[Real]) -> Real {
    let mx = xs.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    mx + xs.iter().map(|&x| (x - mx).exp()).sum::<Real>().ln()
}

/// Three-term objective on plain tensors. Requires both refined matrices.
pub fn total_loss(batch: &ContrastiveBatch, temp: &TemperatureParam, reduction: Reduction) -> Result<Real> {
    let v_bar = batch.v_bar.as_ref().ok_or_else(|| {
        Error::InvalidConfig("total loss requires the refined image matrix".into())
    })?;
    let t_bar = batch.t_bar.as_ref().ok_or_else(|| {
        Error::InvalidConfig("total loss requires the refined text matrix".into())
    })?;
    check_aligned(&batch.v, &batch.t)?;
    Ok(info_nce(v_bar, t_bar, temp, reduction)?
        + info_nce(v_bar, &batch.t, temp, reduction)?
        + info_nce(&batch.v, t_bar, temp, reduction)?)
}

/// Tape handles for the temperature: the leaf and the clamped 1/tau node.
pub struct TempVar {
    pub leaf: VarId,
    pub inv_tau: VarId,
}

/// Insert the temperature as a trainable leaf; returns exp(log_inv_tau)
/// clamped to MAX_INV_TAU.
pub fn insert_temperature(tape: &mut Tape<Real>, temp: &TemperatureParam) -> TempVar {
    let leaf = tape.leaf(Tensor::scalar(temp.log_inv_tau).with_grad());
    let e = tape.exp(leaf);
    let inv_tau = tape.clamp_max(e, MAX_INV_TAU);
    TempVar { leaf, inv_tau }
}

/// Differentiable contrastive loss between two n x d nodes.
pub fn info_nce_on_tape(
    tape: &mut Tape<Real>,
    v: VarId,
    t: VarId,
    inv_tau: VarId,
    reduction: Reduction,
) -> Result<VarId> {
    let n = tape.value(v).rows();
    if tape.value(v).shape() != tape.value(t).shape() {
        return Err(Error::ShapeMismatch(format!(
            "contrastive sides {:?} vs {:?}",
            tape.value(v).shape(),
            tape.value(t).shape()
        )));
    }
    let sims = tape.matmul_nt(v, t)?;
    let z = tape.scale_by_scalar(sims, inv_tau)?;
    let lse_r = tape.log_sum_exp_rows(z)?;
    let lse_c = tape.log_sum_exp_cols(z)?;
    let dg = tape.diag(z)?;
    let sr = tape.sum(lse_r);
    let sc = tape.sum(lse_c);
    let sd = tape.sum(dg);
    let sums = tape.add(sr, sc)?;
    let sd2 = tape.scale(sd, 2.0);
    let loss = tape.sub(sums, sd2)?;
    Ok(match reduction {
        Reduction::Sum => loss,
        Reduction::Mean => tape.scale(loss, 1.0 / n as Real),
    })
}

/// Differentiable three-term objective; returns the total and the three term
/// values in order (refined-refined, refined-image/original-text,
/// original-image/refined-text).
pub fn total_loss_on_tape(
    tape: &mut Tape<Real>,
    v: VarId,
    t: VarId,
    v_bar: VarId,
    t_bar: VarId,
    inv_tau: VarId,
    reduction: Reduction,
) -> Result<(VarId, [Real; 3])> {
    let l_rr = info_nce_on_tape(tape, v_bar, t_bar, inv_tau, reduction)?;
    let l_rt = info_nce_on_tape(tape, v_bar, t, inv_tau, reduction)?;
    let l_vr = info_nce_on_tape(tape, v, t_bar, inv_tau, reduction)?;
    let partial = tape.add(l_rr, l_rt)?;
    let total = tape.add(partial, l_vr)?;
    let terms = [tape.value(l_rr).item(), tape.value(l_rt).item(), tape.value(l_vr).item()];
    Ok((total, terms))
}
