use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub label: String,
    pub value: f64,
}

/// Per-class metric values and their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub aggregate: f64,
    pub per_class: Vec<ClassMetric>,
    pub config_digest: String,
}

impl EvalReport {
    /// Builds a report whose aggregate is the mean of `per_class`.
    pub fn from_entries(protocol: impl Into<String>, per_class: Vec<ClassMetric>) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::InsufficientData("no classes to aggregate".into()));
        }
        let aggregate = per_class.iter().map(|m| m.value).sum::<f64>() / per_class.len() as f64;
        Ok(Self {
            protocol: protocol.into(),
            aggregate,
            per_class,
            config_digest: String::new(),
        })
    }

    pub fn with_digest(mut self, digest: impl Into<String>) -> Self {
        self.config_digest = digest.into();
        self
    }
}

/// Class-balanced accuracy: per-class accuracy averaged over the classes that
/// occur in `truths`.
pub fn mean_accuracy(predictions: &[usize], truths: &[usize], label_set: &[String]) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::InsufficientData("no predictions to score".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            actual: predictions.len(),
        });
    }
    let mut correct = vec![0usize; label_set.len()];
    let mut count = vec![0usize; label_set.len()];
    for (&p, &t) in predictions.iter().zip(truths) {
        if t >= label_set.len() {
            return Err(Error::InvalidConfig(format!("truth index {t} outside label set")));
        }
        count[t] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    let per_class = label_set
        .iter()
        .enumerate()
        .filter(|&(c, _)| count[c] > 0)
        .map(|(c, label)| ClassMetric {
            label: label.clone(),
            value: correct[c] as f64 / count[c] as f64,
        })
        .collect();
    EvalReport::from_entries("mean-accuracy", per_class)
}

/// Average precision of one ranking, or `None` without positives. Scores are
/// sorted descending with ties kept in input order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Mean over classes of the average precision of each class's score ranking.
///
/// `scores[c][v]` is the score of video `v` for class `c`; `truths[v]` lists
/// the classes video `v` carries. Classes without positives are skipped.
pub fn mean_average_precision(
    scores: &[Vec<f64>],
    truths: &[Vec<usize>],
    label_set: &[String],
) -> Result<EvalReport> {
    if scores.len() != label_set.len() {
        return Err(Error::DimensionMismatch {
            expected: label_set.len(),
            actual: scores.len(),
        });
    }
    let mut per_class = Vec::new();
    for (c, (class_scores, label)) in scores.iter().zip(label_set).enumerate() {
        if class_scores.len() != truths.len() {
            return Err(Error::DimensionMismatch {
                expected: truths.len(),
                actual: class_scores.len(),
            });
        }
        let positive: Vec<bool> = truths.iter().map(|t| t.contains(&c)).collect();
        match average_precision(class_scores, &positive) {
            Some(ap) => per_class.push(ClassMetric {
                label: label.clone(),
                value: ap,
            }),
            None => warn!("class {label:?} has no positives; excluded from mAP"),
        }
    }
    EvalReport::from_entries("mean-average-precision", per_class)
}
