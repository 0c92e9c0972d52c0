//! Multi-class log loss, accuracy and confusion matrices.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability clip applied before taking logs.
pub const LOGLOSS_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub labels: Vec<usize>,
}

impl Prediction {
    pub fn new(probs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let [n, m] = probs.dims2()?;
        if labels.len() != n {
            return Err(Error::DimensionMismatch(format!("{} labels for {n} probability rows", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::LabelOutOfRange { label, classes: m });
        }
        for (i, row) in probs.data().chunks(m).enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!("probability row {i} sums to {total}")));
            }
        }
        Ok(Prediction { probs, labels })
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn predicted_labels(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

/// First index of the largest entry in each row.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let m = probs.cols();
    probs
        .data()
        .chunks(m)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}

/// `-(1/N) Σᵢ ln clip(p[i, yᵢ])`.
pub fn multiclass_logloss(pred: &Prediction) -> Result<f64> {
    let n = pred.labels.len();
    if n == 0 {
        return Err(Error::Empty("log loss of zero samples".into()));
    }
    let m = pred.classes();
    let total: f64 = pred
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| pred.probs.data()[i * m + y].clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS).ln())
        .sum();
    Ok(-total / n as f64)
}

pub fn accuracy(true_labels: &[usize], predicted: &[usize]) -> Result<f64> {
    if true_labels.len() != predicted.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            predicted.len()
        )));
    }
    if true_labels.is_empty() {
        return Err(Error::Empty("accuracy of zero samples".into()));
    }
    let hits = true_labels.iter().zip(predicted).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / true_labels.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<u64> {
        (0..self.classes()).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    /// Renders the matrix as an aligned table headed by `names`.
    pub fn table(&self, names: &[&str]) -> String {
        let width = names.iter().map(|n| n.len()).max().unwrap_or(1).max(4);
        let mut out = format!("{:>width$}", "");
        for name in names {
            out.push_str(&format!(" {name:>width$}"));
        }
        out.push('\n');
        for (name, row) in names.iter().zip(&self.counts) {
            out.push_str(&format!("{name:>width$}"));
            for v in row {
                out.push_str(&format!(" {v:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(f, "{}", cells.join("\t"))?;
        }
        Ok(())
    }
}

pub fn confusion_matrix(true_labels: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        for label in [t, p] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub logloss: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_prediction(pred: &Prediction) -> Result<Self> {
        let predicted = pred.predicted_labels();
        Ok(MetricsReport {
            samples: pred.labels.len(),
            logloss: multiclass_logloss(pred)?,
            accuracy: accuracy(&pred.labels, &predicted)?,
            confusion: confusion_matrix(&pred.labels, &predicted, pred.classes())?,
        })
    }
}
