//! Classification metrics.

use alloc::vec;

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Accuracy,
    MacroF1,
    AvgPerClassAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Accuracy, Metric::MacroF1, Metric::AvgPerClassAccuracy];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
            Metric::AvgPerClassAccuracy => "avg_per_class_accuracy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

/// Classes present in `labels` contribute to the macro averages; the others are skipped.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], metric: Metric) -> Result<f64> {
    ensure!(!labels.is_empty(), "metrics need at least one sample");
    ensure!(predictions.len() == labels.len(), "{} predictions for {} labels", predictions.len(), labels.len());
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    if metric == Metric::Accuracy {
        return Ok(correct as f64 / labels.len() as f64);
    }
    let k = 1 + labels.iter().chain(predictions).copied().max().unwrap_or(0);
    let mut tp = vec![0usize; k];
    let mut support = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        support[y] += 1;
        predicted[p] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let present: alloc::vec::Vec<usize> = (0..k).filter(|&c| support[c] > 0).collect();
    let total: f64 = present
        .iter()
        .map(|&c| match metric {
            Metric::AvgPerClassAccuracy => tp[c] as f64 / support[c] as f64,
            _ => 2.0 * tp[c] as f64 / (support[c] + predicted[c]) as f64,
        })
        .sum();
    Ok(total / present.len() as f64)
}
