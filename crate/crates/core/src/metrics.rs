//! Confusion-matrix metrics with support weighting.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(logits: ArrayView2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Recall per class.
    pub per_class_acc: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub support: Vec<usize>,
    pub weighted_acc: f64,
    pub weighted_f1: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<Array2<usize>> {
    if labels.len() != preds.len() {
        return Err(Error::invalid_input(format!("{} labels vs {} predictions", labels.len(), preds.len())));
    }
    let mut m = Array2::zeros((n_classes, n_classes));
    for (&l, &p) in labels.iter().zip(preds) {
        if l >= n_classes || p >= n_classes {
            return Err(Error::invalid_input(format!("class index out of range: label {l}, prediction {p}")));
        }
        m[[l, p]] += 1;
    }
    Ok(m)
}

impl MetricsReport {
    pub fn from_confusion(confusion: &Array2<usize>) -> Self {
        let c = confusion.nrows();
        let total: usize = confusion.sum();
        let mut per_class_acc = vec![0.0; c];
        let mut per_class_f1 = vec![0.0; c];
        let mut support = vec![0; c];
        for k in 0..c {
            let tp = confusion[[k, k]];
            let row: usize = confusion.row(k).sum();
            let col: usize = confusion.column(k).sum();
            support[k] = row;
            if row > 0 {
                per_class_acc[k] = tp as f64 / row as f64;
            }
            let denom = row + col;
            if tp > 0 && denom > 0 {
                per_class_f1[k] = 2.0 * tp as f64 / denom as f64;
            }
        }
        let weigh = |vals: &[f64]| {
            if total == 0 {
                0.0
            } else {
                vals.iter().zip(&support).map(|(v, &s)| v * s as f64).sum::<f64>() / total as f64
            }
        };
        MetricsReport {
            weighted_acc: weigh(&per_class_acc),
            weighted_f1: weigh(&per_class_f1),
            per_class_acc,
            per_class_f1,
            support,
            confusion: confusion.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn from_predictions(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<Self> {
        Ok(Self::from_confusion(&confusion_matrix(labels, preds, n_classes)?))
    }

    /// Plain-text table of per-class and weighted values.
    pub fn table(&self) -> String {
        let mut out = String::from("class  support     acc      f1\n");
        for k in 0..self.per_class_acc.len() {
            out += &format!(
                "{:>5}  {:>7}  {:>6.4}  {:>6.4}\n",
                k, self.support[k], self.per_class_acc[k], self.per_class_f1[k]
            );
        }
        out += &format!(
            "{:>5}  {:>7}  {:>6.4}  {:>6.4}\n",
            "w-avg",
            self.support.iter().sum::<usize>(),
            self.weighted_acc,
            self.weighted_f1
        );
        out
    }
}
