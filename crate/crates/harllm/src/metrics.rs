//! Classification metrics over integer class ids, computed in f64.

use serde::Serialize;

use crate::{Error, Result};

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_pairs(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<Self> {
        if y_true.is_empty() {
            return Err(Error::UndefinedMetric(
                "metrics over an empty prediction set".into(),
            ));
        }
        if y_true.len() != y_pred.len() {
            return Err(Error::shape("confusion_matrix", &[y_true.len()], &[y_pred.len()]));
        }
        let mut counts = vec![0u64; k * k];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= k || p >= k {
                return Err(Error::Index(format!(
                    "class id {} out of range for {k} classes",
                    t.max(p)
                )));
            }
            counts[t * k + p] += 1;
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.k).map(|p| self.count(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.k).map(|t| self.count(t, class)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.k).map(|c| self.count(c, c)).sum();
        correct as f64 / self.total() as f64
    }
}

/// Precision, recall and F1 for one class; 0/0 ratios collapse to 0.
#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub total: u64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn class_metrics(cm: &ConfusionMatrix, class: usize) -> ClassMetrics {
    let tp = cm.count(class, class) as f64;
    let precision = ratio(tp, cm.predicted(class) as f64);
    let recall = ratio(tp, cm.support(class) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    ClassMetrics {
        precision,
        recall,
        f1,
        support: cm.support(class),
    }
}

/// F1 per class averaged with weights support/total.
pub fn weighted_f1(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total() as f64;
    (0..cm.num_classes())
        .map(|c| cm.support(c) as f64 / total * class_metrics(cm, c).f1)
        .sum()
}

pub fn evaluate(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<EvalReport> {
    let cm = ConfusionMatrix::from_pairs(y_true, y_pred, k)?;
    let per_class: Vec<ClassMetrics> = (0..k).map(|c| class_metrics(&cm, c)).collect();
    let confusion: Vec<Vec<u64>> = (0..k)
        .map(|t| (0..k).map(|p| cm.count(t, p)).collect())
        .collect();
    Ok(EvalReport {
        accuracy: cm.accuracy(),
        weighted_f1: weighted_f1(&cm),
        per_class,
        confusion,
        total: cm.total(),
    })
}
