use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

/// Precision, recall and F1 of the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// False when there are neither positive predictions nor positive labels;
    /// F1 is then reported as 0.
    pub defined: bool,
}

impl BinaryScores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            defined: tp + fp + fn_ > 0,
        }
    }
}

/// Textbook F1 of boolean predictions.
pub fn binary_scores(pred: &[bool], truth: &[bool]) -> Result<BinaryScores> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(BinaryScores::from_counts(tp, fp, fn_))
}

/// F1 where a flag within `[t, t+delay]` of a true anomaly at `t` counts as a
/// hit. Each true anomaly absorbs at most one flag (the earliest unmatched
/// one in its window); remaining flags are false positives.
pub fn f1_with_delay(pred: &[bool], truth: &[bool], delay: usize) -> Result<BinaryScores> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut used = vec![false; pred.len()];
    let mut tp = 0;
    let mut fn_ = 0;
    for t in (0..truth.len()).filter(|&t| truth[t]) {
        let hi = (t + delay).min(pred.len() - 1);
        match (t..=hi).find(|&s| pred[s] && !used[s]) {
            Some(s) => {
                used[s] = true;
                tp += 1;
            }
            None => fn_ += 1,
        }
    }
    let fp = pred.iter().zip(&used).filter(|(&p, &u)| p && !u).count();
    Ok(BinaryScores::from_counts(tp, fp, fn_))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delay_boundary() {
        let mut truth = vec![false; 20];
        truth[3] = true;
        let mut at7 = vec![false; 20];
        at7[10] = true;
        let s = f1_with_delay(&at7, &truth, 7).unwrap();
        assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (1, 0, 0));
        let mut at8 = vec![false; 20];
        at8[11] = true;
        let s = f1_with_delay(&at8, &truth, 7).unwrap();
        assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (0, 1, 1));
    }

    #[test]
    fn no_positives_is_undefined() {
        let s = binary_scores(&[false; 4], &[false; 4]).unwrap();
        assert!(!s.defined);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn mae_and_mse() {
        assert_eq!(mse(&[1.0, 3.0], &[0.0, 0.0]), 5.0);
        assert_eq!(mae(&[1.0, -3.0], &[0.0, 0.0]), 2.0);
    }
}
