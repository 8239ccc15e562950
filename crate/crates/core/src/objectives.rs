//! Cross-view triplet loss, cross-modality binary cross-entropy and their
//! weighted sum.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Triplet margin α.
    pub margin: f64,
    /// Weight β of the cross-modality term.
    pub cross_weight: f64,
    /// Probabilities are clamped into `[ε, 1 − ε]` before taking logs.
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: 1.0, cross_weight: 1.0, prob_clamp: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.cross_weight >= 0.0) {
            return Err(Error::Config("margin and cross weight must be non-negative".into()));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::Config("probability clamp must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Batch mean of `max(‖a − p‖² − ‖a − n‖² + margin, 0)` over `[B, D]` inputs.
pub fn triplet_loss<T: Real>(g: &mut Graph<T>, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let s = g.shape(anchor).to_vec();
    if s.len() != 2 || g.shape(positive) != s.as_slice() || g.shape(negative) != s.as_slice() {
        return Err(Error::Shape(format!(
            "triplet inputs {:?}, {:?}, {:?} must share one [B, D] shape",
            s,
            g.shape(positive),
            g.shape(negative)
        )));
    }
    let ap = g.sub(anchor, positive)?;
    let an = g.sub(anchor, negative)?;
    let d_ap = g.sum_sq_rows(ap)?;
    let d_an = g.sum_sq_rows(an)?;
    let diff = g.sub(d_ap, d_an)?;
    let shifted = g.offset(diff, margin);
    let hinge = g.relu(shifted);
    g.mean(hinge)
}

/// Binary cross-entropy summed over the `J` predictions of each sample and
/// averaged over the batch. `probs` and `labels` are `[B, J]` row-major.
pub fn cross_modality_loss<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[u8], clamp: f64) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 2 || s[0] * s[1] != labels.len() || s[0] == 0 {
        return Err(Error::Shape(format!("{} labels for predictions of shape {:?}", labels.len(), s)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Contract(format!("label {bad} is not 0 or 1")));
    }
    let p = g.clamp(probs, clamp, 1.0 - clamp);
    let log_p = g.log(p);
    let neg = g.scale(p, -1.0);
    let one_minus = g.offset(neg, 1.0);
    let log_q = g.log(one_minus);
    let y: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
    let y_not: Vec<f64> = labels.iter().map(|&y| 1.0 - y as f64).collect();
    let yv = g.input(Tensor::from_f64(&s, &y)?);
    let nv = g.input(Tensor::from_f64(&s, &y_not)?);
    let pos = g.mul(yv, log_p)?;
    let negt = g.mul(nv, log_q)?;
    let total = g.add(pos, negt)?;
    let sum = g.sum(total);
    Ok(g.scale(sum, -1.0 / s[0] as f64))
}

/// `l_triplet + β · l_cross`
pub fn combined_loss<T: Real>(g: &mut Graph<T>, l_triplet: Var, l_cross: Var, beta: f64) -> Result<Var> {
    let weighted = g.scale(l_cross, beta);
    g.add(l_triplet, weighted)
}
