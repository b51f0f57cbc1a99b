//! Accuracy with a normal-approximation (Wald) 95% interval, recall,
//! confusion matrices, and experiment reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::online::HarvestCounts;
use crate::pipeline::{Evaluation, PatientClass, PatientVerdict};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("input error: {0}")]
    Input(String),
    #[error("recall undefined: class {0} has no members")]
    RecallUndefined(usize),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<u64>>", try_from = "Vec<Vec<u64>>")]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.n + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth * self.n..(truth + 1) * self.n]
            .iter()
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    /// Diagonal over row total.
    pub fn recall(&self, class: usize) -> Result<f64, MetricsError> {
        match self.row_total(class) {
            0 => Err(MetricsError::RecallUndefined(class)),
            t => Ok(self.get(class, class) as f64 / t as f64),
        }
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n).map(<[u64]>::to_vec).collect()
    }
}

impl From<ConfusionMatrix> for Vec<Vec<u64>> {
    fn from(m: ConfusionMatrix) -> Self {
        m.rows()
    }
}

impl TryFrom<Vec<Vec<u64>>> for ConfusionMatrix {
    type Error = String;

    fn try_from(rows: Vec<Vec<u64>>) -> Result<Self, Self::Error> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err("confusion matrix must be square".into());
        }
        Ok(Self {
            n,
            counts: rows.into_iter().flatten().collect(),
        })
    }
}

/// `(p, 1.96 * sqrt(p (1 - p) / n))` with `p = correct / n`.
pub fn accuracy_ci(correct: usize, n: usize) -> Result<(f64, f64), MetricsError> {
    if n == 0 {
        return Err(MetricsError::Input("n must be >= 1".into()));
    }
    if correct > n {
        return Err(MetricsError::Input(format!("{correct} correct out of {n}")));
    }
    let p = correct as f64 / n as f64;
    Ok((p, Z_95 * (p * (1.0 - p) / n as f64).sqrt()))
}

/// Round half away from zero to `decimals` places.
pub fn round_half_away(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (x * scale).round() / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Baseline,
    OnlineUnsupervised,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Baseline => write!(f, "Baseline"),
            Method::OnlineUnsupervised => write!(f, "Online Unsupervised"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub experiment_id: String,
    pub test_set: String,
    pub method: Method,
    pub accuracy: f64,
    pub ci_half_width: f64,
    pub n_patients: usize,
    pub per_quarter_accuracy: Option<Vec<f64>>,
    /// Rows: true Healthy/Covid/Cap; columns: predicted.
    pub confusion: ConfusionMatrix,
    pub harvest_log: Option<Vec<HarvestCounts>>,
    /// Predicted class per patient id, in arrival order.
    pub predictions: Vec<(String, PatientClass)>,
}

/// Assemble a report from verdicts and the matching true labels.
pub fn build_report(
    experiment_id: &str,
    test_set: &str,
    method: Method,
    verdicts: &[PatientVerdict],
    truth: &[PatientClass],
    per_quarter_accuracy: Option<Vec<f64>>,
    harvest_log: Option<Vec<HarvestCounts>>,
) -> Result<ExperimentReport, MetricsError> {
    if verdicts.len() != truth.len() {
        return Err(MetricsError::Input(format!(
            "{} verdicts for {} labels",
            verdicts.len(),
            truth.len()
        )));
    }
    let predicted: Vec<_> = verdicts.iter().map(|v| v.predicted).collect();
    let eval = Evaluation::from_predictions(truth, &predicted);
    let (accuracy, ci_half_width) = accuracy_ci(eval.confusion.trace() as usize, verdicts.len())?;
    Ok(ExperimentReport {
        experiment_id: experiment_id.to_string(),
        test_set: test_set.to_string(),
        method,
        accuracy,
        ci_half_width,
        n_patients: verdicts.len(),
        per_quarter_accuracy,
        confusion: eval.confusion,
        harvest_log,
        predictions: verdicts
            .iter()
            .map(|v| (v.patient_id.clone(), v.predicted))
            .collect(),
    })
}

pub fn write_report(report: &ExperimentReport, path: &Path) -> Result<(), MetricsError> {
    let json = serde_json::to_string_pretty(report).map_err(|e| MetricsError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, json + "\n").map_err(|e| MetricsError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_report(path: &Path) -> Result<ExperimentReport, MetricsError> {
    let err = |message: String| MetricsError::Io {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

/// `"0.900 +- 0.107"`
pub fn format_accuracy(accuracy: f64, half_width: f64) -> String {
    format!(
        "{:.3} +- {:.3}",
        round_half_away(accuracy, 3),
        round_half_away(half_width, 3)
    )
}

/// Plain-text results table: Exp, Test set, Model, Accuracy +- CI.
pub fn render_table(reports: &[ExperimentReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:<10} {:<22} Accuracy",
        "Exp", "Test set", "Model"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<8} {:<10} {:<22} {}",
            r.experiment_id,
            r.test_set,
            r.method.to_string(),
            format_accuracy(r.accuracy, r.ci_half_width)
        );
    }
    out
}

/// CSV columns, in order.
pub const CSV_HEADER: [&str; 6] = [
    "experiment",
    "test_set",
    "method",
    "accuracy",
    "ci_half_width",
    "n_patients",
];

pub fn render_csv(reports: &[ExperimentReport]) -> Result<String, MetricsError> {
    let io = |e: csv::Error| MetricsError::Input(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in reports {
        w.write_record([
            r.experiment_id.clone(),
            r.test_set.clone(),
            r.method.to_string(),
            format!("{:.3}", round_half_away(r.accuracy, 3)),
            format!("{:.3}", round_half_away(r.ci_half_width, 3)),
            r.n_patients.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| MetricsError::Input(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MetricsError::Input(e.to_string()))
}
