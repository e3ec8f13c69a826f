//! Hard segmentation metrics computed on argmax predictions.

use serde::Serialize;

use crate::error::{FctError, Result};
use crate::tensor::Tensor;

use super::loss::DICE_SMOOTH;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiceScores {
    /// Dice of every class, background included.
    pub per_class: Vec<f64>,
    /// Mean over the foreground classes `1..K`.
    pub mean: f64,
}

/// Per-class `(2|P∩T| + ε) / (|P| + |T| + ε)` over one-hot `[..., K]`
/// tensors, pooled over all leading axes.
pub fn dice_coefficient(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<DiceScores> {
    if pred.shape() != target.shape() || pred.ndim() == 0 {
        return Err(FctError::shape(format!(
            "dice needs equal one-hot shapes, got {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let k = *pred.shape().last().unwrap();
    let mut inter = vec![0.0f64; k];
    let mut sp = vec![0.0f64; k];
    let mut st = vec![0.0f64; k];
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let c = i % k;
        inter[c] += (p * t) as f64;
        sp[c] += p as f64;
        st[c] += t as f64;
    }
    let per_class: Vec<f64> = (0..k)
        .map(|c| (2.0 * inter[c] + DICE_SMOOTH) / (sp[c] + st[c] + DICE_SMOOTH))
        .collect();
    Ok(DiceScores {
        mean: foreground_mean(&per_class),
        per_class,
    })
}

pub(crate) fn foreground_mean(per_class: &[f64]) -> f64 {
    if per_class.len() < 2 {
        return per_class.first().copied().unwrap_or(1.0);
    }
    per_class[1..].iter().sum::<f64>() / (per_class.len() - 1) as f64
}

/// Dice from label maps directly (same result as one-hot encoding both).
pub fn dice_from_labels(pred: &[u16], target: &[u16], k: usize) -> Result<DiceScores> {
    if pred.len() != target.len() {
        return Err(FctError::shape(format!(
            "label maps differ in length: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let mut inter = vec![0u64; k];
    let mut sp = vec![0u64; k];
    let mut st = vec![0u64; k];
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p as usize, t as usize);
        if p >= k || t >= k {
            return Err(FctError::invalid(format!("label {} is not below K = {k}", p.max(t))));
        }
        sp[p] += 1;
        st[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    let per_class: Vec<f64> = (0..k)
        .map(|c| (2.0 * inter[c] as f64 + DICE_SMOOTH) / ((sp[c] + st[c]) as f64 + DICE_SMOOTH))
        .collect();
    Ok(DiceScores {
        mean: foreground_mean(&per_class),
        per_class,
    })
}

/// `(TPR, TNR)` of binary masks. An empty denominator (no positives, or no
/// negatives, in the target) yields 1.0 for that rate.
pub fn sensitivity_specificity(pred: &[bool], target: &[bool]) -> (f64, f64) {
    let (mut tp, mut fn_, mut tn, mut fp) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(target) {
        match (p, t) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
        }
    }
    let rate = |a: u64, b: u64| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
    (rate(tp, fn_), rate(tn, fp))
}

/// Argmax over the last axis of `[N,H,W,K]` logits.
pub fn argmax_labels(logits: &Tensor<f32>) -> Vec<u16> {
    let k = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u16
        })
        .collect()
}
