//! Evaluation metrics: per-event log-likelihoods, RMSE over predicted
//! inter-event times, accuracy and support-weighted F1.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean log-likelihood of the time model per predicted event.
    pub time_ll_per_event: f64,
    /// Mean joint (time + type) log-likelihood per predicted event.
    pub joint_ll_per_event: f64,
    pub rmse: f64,
    pub accuracy: f64,
    pub f1_weighted: f64,
    pub per_class: Vec<ClassScore>,
    pub event_count: usize,
}

/// Per-class precision/recall/F1 from a confusion matrix. A class with zero
/// precision + recall gets F1 = 0; classes absent from the truth carry zero
/// support and therefore zero weight.
pub fn classification_scores(truth: &[usize], predicted: &[usize], k: usize) -> Vec<ClassScore> {
    assert_eq!(truth.len(), predicted.len(), "label arrays differ in length");
    assert!(!truth.is_empty(), "empty label arrays");
    let mut confusion = vec![0usize; k * k];
    for (&t, &p) in truth.iter().zip(predicted) {
        assert!(t < k && p < k, "label out of range");
        confusion[t * k + p] += 1;
    }
    (0..k)
        .map(|c| {
            let tp = confusion[c * k + c];
            let support: usize = (0..k).map(|j| confusion[c * k + j]).sum();
            let predicted_c: usize = (0..k).map(|i| confusion[i * k + c]).sum();
            let precision = if predicted_c > 0 {
                tp as f64 / predicted_c as f64
            } else {
                0.0
            };
            let recall = if support > 0 {
                tp as f64 / support as f64
            } else {
                0.0
            };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScore {
                class: c,
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

/// Per-class F1 weighted by true-class support fractions.
pub fn f1_weighted(truth: &[usize], predicted: &[usize], k: usize) -> f64 {
    let scores = classification_scores(truth, predicted, k);
    let total: usize = scores.iter().map(|s| s.support).sum();
    scores
        .iter()
        .map(|s| s.f1 * s.support as f64 / total as f64)
        .sum()
}

pub fn accuracy(truth: &[usize], predicted: &[usize]) -> f64 {
    assert_eq!(truth.len(), predicted.len());
    assert!(!truth.is_empty());
    let hits = truth.iter().zip(predicted).filter(|(t, p)| t == p).count();
    hits as f64 / truth.len() as f64
}

pub fn rmse(truth: &[f64], predicted: &[f64]) -> f64 {
    assert_eq!(truth.len(), predicted.len());
    assert!(!truth.is_empty());
    let sq: f64 = truth
        .iter()
        .zip(predicted)
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    (sq / truth.len() as f64).sqrt()
}
