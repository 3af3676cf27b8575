//! Polarization objective over gate masks.
//!
//! `l_filter` steers each gated block's mask mass toward `v_user`, weighted by
//! `w_l = 1.5 - v_masks_l / I` so sparser blocks are penalized harder. The
//! bi-modal term `Σ σ(1 − σ)` vanishes only at saturated gates. The CLS slot
//! contributes a constant 1 to every mass and nothing to the bi-modal sum.

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid_scalar, Tape, Var};
use crate::config::{check_gamma, FilterTargetMode, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerSettings {
    pub seq_len: usize,
    /// Total block count `L`; gated blocks are `L - 1`.
    pub blocks: usize,
    pub gamma: f64,
    pub lambda_filter: f64,
    pub lambda_bi: f64,
    pub mode: FilterTargetMode,
}

impl RegularizerSettings {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            seq_len: cfg.seq_len,
            blocks: cfg.blocks,
            gamma: cfg.gamma,
            lambda_filter: cfg.lambda_filter,
            lambda_bi: cfg.lambda_bi,
            mode: cfg.filter_target_mode,
        }
    }

    pub fn user_mass(&self) -> f64 {
        let i = self.seq_len as f64;
        match self.mode {
            FilterTargetMode::PerBlock => i * self.gamma,
            FilterTargetMode::PaperLiteral => i * self.blocks as f64 * self.gamma,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub l_filter: f64,
    pub bi_modal: f64,
    pub polar: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(task: f64, l_filter: f64, bi_modal: f64, lambda_filter: f64, lambda_bi: f64) -> Self {
        let polar = lambda_filter * l_filter + lambda_bi * bi_modal;
        Self {
            task,
            l_filter,
            bi_modal,
            polar,
            total: task + polar,
        }
    }
}

/// `1 + Σ_{i≥1} σ(m_i)`.
pub fn mask_mass(m: &Tensor) -> f64 {
    1.0 + m.data().iter().skip(1).map(|&v| sigmoid_scalar(v)).sum::<f64>()
}

pub fn filter_weight(mass: f64, seq_len: usize) -> f64 {
    1.5 - mass / seq_len as f64
}

fn check_masks(masks: &[Tensor], s: &RegularizerSettings) -> Result<()> {
    check_gamma(s.gamma)?;
    if masks.len() + 1 != s.blocks {
        return Err(Error::config(
            "masks",
            format!("{} mask vectors for {} blocks", masks.len(), s.blocks),
        ));
    }
    if let Some(m) = masks.iter().find(|m| m.numel() != s.seq_len) {
        return Err(Error::Shape {
            op: "regularizer",
            left: m.shape().to_vec(),
            right: vec![s.seq_len],
        });
    }
    Ok(())
}

/// `(1/(L-1)) Σ_l |w_l (v_masks_l − v_user)|`.
pub fn filter_loss(masks: &[Tensor], s: &RegularizerSettings) -> Result<f64> {
    check_masks(masks, s)?;
    let target = s.user_mass();
    let sum: f64 = masks
        .iter()
        .map(|m| {
            let mass = mask_mass(m);
            (filter_weight(mass, s.seq_len) * (mass - target)).abs()
        })
        .sum();
    Ok(sum / masks.len() as f64)
}

/// `Σ_l Σ_{i≥1} σ(m_i)(1 − σ(m_i))`.
pub fn bi_modal_penalty(masks: &[Tensor]) -> f64 {
    masks
        .iter()
        .flat_map(|m| m.data().iter().skip(1))
        .map(|&v| {
            let s = sigmoid_scalar(v);
            s * (1.0 - s)
        })
        .sum()
}

pub fn polar_and_total(task: f64, masks: &[Tensor], s: &RegularizerSettings) -> Result<LossBreakdown> {
    let l_filter = filter_loss(masks, s)?;
    let bi = bi_modal_penalty(masks);
    Ok(LossBreakdown::new(task, l_filter, bi, s.lambda_filter, s.lambda_bi))
}

/// Tape handles for the regularizer terms.
pub struct PolarVars {
    pub l_filter: Var,
    pub bi_modal: Var,
    pub polar: Var,
}

/// `w_l` for every gated block at the current mask values.
pub fn filter_weights(masks: &[Tensor], seq_len: usize) -> Vec<f64> {
    masks.iter().map(|m| filter_weight(mask_mass(m), seq_len)).collect()
}

/// Differentiable `L_polar`. `w_l` is evaluated from current values and
/// enters as a constant coefficient.
pub fn polar_on_tape(tape: &mut Tape, masks: &[Var], s: &RegularizerSettings) -> Result<PolarVars> {
    let values: Vec<Tensor> = masks.iter().map(|&m| tape.value(m).clone()).collect();
    check_masks(&values, s)?;
    let weights = filter_weights(&values, s.seq_len);
    polar_with_weights(tape, masks, s, &weights)
}

/// `L_polar` with caller-fixed `w_l`, e.g. to hold them still under finite differences.
pub fn polar_with_weights(
    tape: &mut Tape,
    masks: &[Var],
    s: &RegularizerSettings,
    weights: &[f64],
) -> Result<PolarVars> {
    let values: Vec<Tensor> = masks.iter().map(|&m| tape.value(m).clone()).collect();
    check_masks(&values, s)?;
    if weights.len() != masks.len() {
        return Err(Error::config(
            "weights",
            format!("{} filter weights for {} gated blocks", weights.len(), masks.len()),
        ));
    }
    let target = s.user_mass();
    let mut gated = vec![1.0; s.seq_len];
    gated[0] = 0.0;

    let mut filter_terms = Vec::with_capacity(masks.len());
    let mut bi_terms = Vec::with_capacity(masks.len());
    for (&m, &w) in masks.iter().zip(weights) {
        let sig = tape.sigmoid(m);
        let gated_mass = tape.dot_const(sig, &gated)?;
        // w * (1 + gated_mass - target)
        let term = tape.affine(gated_mass, w, w * (1.0 - target));
        filter_terms.push(tape.abs(term));

        let one_minus = tape.affine(sig, -1.0, 1.0);
        let prod = tape.mul(sig, one_minus)?;
        bi_terms.push(tape.dot_const(prod, &gated)?);
    }

    let filter_sum = sum_scalars(tape, &filter_terms)?;
    let l_filter = tape.affine(filter_sum, 1.0 / masks.len() as f64, 0.0);
    let bi_modal = sum_scalars(tape, &bi_terms)?;
    let a = tape.affine(l_filter, s.lambda_filter, 0.0);
    let b = tape.affine(bi_modal, s.lambda_bi, 0.0);
    let polar = tape.add(a, b)?;
    Ok(PolarVars {
        l_filter,
        bi_modal,
        polar,
    })
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Share of gated `σ(m)` values within `tol` of 0 or 1.
pub fn polarization_fraction(masks: &[Tensor], tol: f64) -> f64 {
    let (mut near, mut total) = (0usize, 0usize);
    for v in masks.iter().flat_map(|m| m.data().iter().skip(1)) {
        let s = sigmoid_scalar(*v);
        total += 1;
        if s <= tol || s >= 1.0 - tol {
            near += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        near as f64 / total as f64
    }
}
