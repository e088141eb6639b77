use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification metrics over one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Builds the confusion matrix and macro-averaged scores. A class with no
/// predicted (or no true) samples contributes 0 precision (or recall).
pub fn compute_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        let bad = if y >= classes { Some(y) } else if p >= classes { Some(p) } else { None };
        if let Some(label) = bad {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: classes,
            });
        }
        confusion[y][p] += 1;
    }
    let total = predictions.len() as f64;
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let tp = confusion[c][c] as f64;
        let predicted: u64 = (0..classes).map(|r| confusion[r][c]).sum();
        let actual: u64 = confusion[c].iter().sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        p_sum += precision;
        r_sum += recall;
        f_sum += f1;
    }
    let k = classes as f64;
    Ok(MetricsReport {
        samples: predictions.len(),
        accuracy: correct as f64 / total,
        macro_precision: p_sum / k,
        macro_recall: r_sum / k,
        macro_f1: f_sum / k,
        confusion,
    })
}

impl MetricsReport {
    /// Delimited text form: a header of scalar metrics, then the confusion
    /// matrix with one row per true class.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "samples\t{}\naccuracy\t{:.6}\nmacro_precision\t{:.6}\nmacro_recall\t{:.6}\nmacro_f1\t{:.6}\nconfusion (rows = true class, columns = predicted)\n",
            self.samples, self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1
        );
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&cells.join("\t"));
            s.push('\n');
        }
        s
    }
}

/// Mean and sample standard deviation of repeated-run accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl RunStats {
    pub fn from_runs(runs: Vec<f64>) -> Result<Self> {
        if runs.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two runs for a sample std, got {}",
                runs.len()
            )));
        }
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let var = runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            runs,
            mean,
            std: var.sqrt(),
        })
    }
}
