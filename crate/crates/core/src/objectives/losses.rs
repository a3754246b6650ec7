use serde::{Deserialize, Serialize};

use crate::autograd::BCE_CLAMP;
use crate::corpus::{TokenSeq, PAD};
use crate::error::{invalid, Error, Result};
use crate::noise::CorruptionLabel;
use crate::tensor::{log_softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub r: f64,
    pub emlm: f64,
    pub g: f64,
    pub rtd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { r: 1.0, emlm: 1.0, g: 1.0, rtd: 25.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("r", self.r), ("emlm", self.emlm), ("g", self.g), ("rtd", self.rtd)] {
            if !(w >= 0.0 && w.is_finite()) {
                return invalid(format!("loss weight {name} = {w} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Loss values that went into one objective; `None` means the loss is not
/// part of this model.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossInputs {
    pub r: f64,
    pub emlm: Option<f64>,
    pub g: Option<f64>,
    pub rtd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_emlm: f64,
    pub l_g: f64,
    pub l_rtd: f64,
    /// Effective weights; zero for absent losses.
    pub weights: LossWeights,
    pub total: f64,
}

/// The terms of the weighted sum, in the fixed order R, eMLM, G, RTD.
pub(crate) fn effective_weights(inputs: &LossInputs, w: &LossWeights) -> LossWeights {
    LossWeights {
        r: w.r,
        emlm: if inputs.emlm.is_some() { w.emlm } else { 0.0 },
        g: if inputs.g.is_some() { w.g } else { 0.0 },
        rtd: if inputs.rtd.is_some() { w.rtd } else { 0.0 },
    }
}

pub fn total_loss(inputs: LossInputs, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let w = effective_weights(&inputs, weights);
    let (e, g, d) = (inputs.emlm.unwrap_or(0.0), inputs.g.unwrap_or(0.0), inputs.rtd.unwrap_or(0.0));
    let mut total = 0.0;
    for (wi, li) in [(w.r, inputs.r), (w.emlm, e), (w.g, g), (w.rtd, d)] {
        total += wi * li;
    }
    Ok(LossBreakdown { l_r: inputs.r, l_emlm: e, l_g: g, l_rtd: d, weights: w, total })
}

/// Mean teacher-forced NLL of `target` under `logits` (one row per target
/// position); PAD targets are skipped.
pub fn loss_reconstruction(logits: &Matrix, target: &TokenSeq) -> Result<f64> {
    if logits.rows != target.len() {
        return Err(Error::LengthMismatch(format!("{} logit rows for {} targets", logits.rows, target.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, &t) in target.ids.iter().enumerate() {
        if t == PAD {
            continue;
        }
        sum -= log_softmax(logits.row(r))[t as usize];
        n += 1;
    }
    if n == 0 {
        return invalid("no non-PAD targets");
    }
    Ok(sum / n as f64)
}

fn masked_nll(dists: &[Vec<f64>], original: &TokenSeq, masked_positions: &[usize]) -> Result<f64> {
    if masked_positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    if dists.len() != masked_positions.len() {
        return Err(Error::LengthMismatch(format!(
            "{} distributions for {} masked positions",
            dists.len(),
            masked_positions.len()
        )));
    }
    let mut sum = 0.0;
    for (d, &p) in dists.iter().zip(masked_positions) {
        let t = *original.ids.get(p).ok_or_else(|| Error::InvalidArgument(format!("position {p} out of range")))?;
        sum -= d[t as usize].ln();
    }
    Ok(sum / masked_positions.len() as f64)
}

/// Mean NLL of the original tokens at masked positions under the encoder
/// MLM distributions (one per position).
pub fn loss_emlm(dists: &[Vec<f64>], original: &TokenSeq, masked_positions: &[usize]) -> Result<f64> {
    masked_nll(dists, original, masked_positions)
}

/// Same contract as [`loss_emlm`] over the generator's distributions.
pub fn loss_generator(dists: &[Vec<f64>], original: &TokenSeq, masked_positions: &[usize]) -> Result<f64> {
    masked_nll(dists, original, masked_positions)
}

/// Mean binary cross-entropy of the probability of Original. Returns the
/// loss and how many probabilities were clamped into `[1e-7, 1 − 1e-7]`.
pub fn loss_rtd(probs: &[f64], labels: &[CorruptionLabel]) -> Result<(f64, usize)> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    if probs.is_empty() {
        return invalid("no positions");
    }
    let mut clamped = 0;
    let mut sum = 0.0;
    for (&p, l) in probs.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return invalid(format!("probability {p} outside [0, 1]"));
        }
        let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        clamped += usize::from(q != p);
        sum -= if l.is_original() { q.ln() } else { (1.0 - q).ln() };
    }
    Ok((sum / probs.len() as f64, clamped))
}
