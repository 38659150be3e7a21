//! Confusion matrices, accuracy / macro-F1, and k-fold aggregation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::model::Task;

/// Square count matrix, rows = actual class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u64>>", into = "Vec<Vec<u64>>")]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl TryFrom<Vec<Vec<u64>>> for ConfusionMatrix {
    type Error = Error;

    fn try_from(counts: Vec<Vec<u64>>) -> Result<Self> {
        ConfusionMatrix::new(counts)
    }
}

impl From<ConfusionMatrix> for Vec<Vec<u64>> {
    fn from(cm: ConfusionMatrix) -> Self {
        cm.counts
    }
}

impl ConfusionMatrix {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::Data(
                "confusion matrix must be square and non-empty".into(),
            ));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// True per-class counts.
    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_totals(&self) -> Vec<u64> {
        (0..self.classes())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Data(format!(
                "class count mismatch: {} vs {}",
                self.classes(),
                other.classes()
            )));
        }
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
        Ok(())
    }
}

pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &a) in preds.iter().zip(labels) {
        if p >= classes || a >= classes {
            return Err(Error::Data(format!(
                "class index out of range for {classes} classes"
            )));
        }
        cm.counts[a][p] += 1;
    }
    Ok(cm)
}

/// Accuracy and macro-F1. A class whose precision + recall is zero (or
/// undefined) contributes an F1 of 0.
pub fn metrics(cm: &ConfusionMatrix) -> Result<(f64, f64)> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let accuracy = cm.trace() as f64 / total as f64;
    let rows = cm.row_totals();
    let cols = cm.column_totals();
    let f1_sum: f64 = (0..cm.classes())
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let precision = if cols[c] == 0 {
                0.0
            } else {
                tp / cols[c] as f64
            };
            let recall = if rows[c] == 0 {
                0.0
            } else {
                tp / rows[c] as f64
            };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .sum();
    Ok((accuracy, f1_sum / cm.classes() as f64))
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub n: u64,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let (accuracy, macro_f1) = metrics(&confusion)?;
        Ok(EvalReport {
            accuracy,
            macro_f1,
            n: confusion.total(),
            confusion,
        })
    }

    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        Self::from_confusion(confusion_matrix(preds, labels, classes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub confusion_sum: ConfusionMatrix,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation over folds, plus the summed confusion.
pub fn aggregate_folds(reports: &[EvalReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Data("no fold reports to aggregate".into()))?;
    let mut sum = ConfusionMatrix::zeros(first.confusion.classes());
    for r in reports {
        sum.add(&r.confusion)?;
    }
    let acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let f1: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&acc);
    let (f1_mean, f1_std) = mean_std(&f1);
    Ok(AggregateReport {
        accuracy_mean,
        accuracy_std,
        f1_mean,
        f1_std,
        confusion_sum: sum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

/// The report file written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: Task,
    pub fusion: FusionKind,
    pub folds: Vec<FoldMetrics>,
    pub aggregate: AggregateReport,
}

impl Report {
    pub fn new(task: Task, fusion: FusionKind, folds: &[EvalReport]) -> Result<Self> {
        Ok(Report {
            task,
            fusion,
            aggregate: aggregate_folds(folds)?,
            folds: folds
                .iter()
                .map(|r| FoldMetrics {
                    accuracy: r.accuracy,
                    macro_f1: r.macro_f1,
                    confusion: r.confusion.clone(),
                })
                .collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
