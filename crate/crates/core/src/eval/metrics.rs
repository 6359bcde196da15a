use serde::{Deserialize, Serialize};

use crate::error::{Result, VcrError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    /// `None` for classes with no test instance.
    pub per_class: Vec<Option<f64>>,
    pub correct: usize,
    pub total: usize,
}

/// Top-1 and per-class accuracy.
pub fn evaluate(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<Accuracy> {
    if predictions.is_empty() {
        return Err(VcrError::invalid("cannot evaluate an empty prediction list"));
    }
    if predictions.len() != labels.len() {
        return Err(VcrError::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(VcrError::invalid(format!("label {bad} out of range for {class_count} classes")));
    }
    let mut hits = vec![0usize; class_count];
    let mut totals = vec![0usize; class_count];
    for (&p, &l) in predictions.iter().zip(labels) {
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Accuracy {
        top1: correct as f64 / predictions.len() as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        correct,
        total: predictions.len(),
    })
}
