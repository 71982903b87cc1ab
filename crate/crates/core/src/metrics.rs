//! One-vs-rest precision, recall and F1 per class, their macro average,
//! and comparison-table rendering. All metrics are percentages.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Label;
use crate::models::NUM_CLASSES;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("label {0} outside 0..3")]
    LabelOutOfRange(usize),
    #[error("true and predicted label lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cannot average an empty list of reports")]
    Empty,
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(truth: &[usize], predicted: &[usize]) -> Result<Self, MetricsError> {
        if truth.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch(truth.len(), predicted.len()));
        }
        let mut cm = Self::new();
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.accumulate(t, p)?;
        }
        Ok(cm)
    }

    pub fn accumulate(&mut self, truth: usize, predicted: usize) -> Result<(), MetricsError> {
        for l in [truth, predicted] {
            if l >= NUM_CLASSES {
                return Err(MetricsError::LabelOutOfRange(l));
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    /// Elementwise sum, for combining evaluation shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    /// `100 · trace / total`, 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total()).0
    }

    pub fn class_metrics(&self, class: usize) -> ClassMetrics {
        let tp = self.counts[class][class];
        let predicted: u64 = (0..NUM_CLASSES).map(|r| self.counts[r][class]).sum();
        let actual: u64 = self.counts[class].iter().sum();
        ClassMetrics::from_counts(tp, predicted - tp, actual - tp)
    }
}

/// `100 · num / den`, with 0/0 defined as 0 (flagged by the bool).
fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (100.0 * num as f64 / den as f64, false)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some quantity was 0/0 and defined as 0.
    pub degenerate: bool,
}

impl ClassMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let (precision, dp) = ratio(tp, tp + fp);
        let (recall, dr) = ratio(tp, tp + fn_);
        let (f1, df) = if precision + recall == 0.0 {
            (0.0, true)
        } else {
            (2.0 * precision * recall / (precision + recall), false)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            degenerate: dp || dr || df,
        }
    }
}

/// Unweighted means of precision, recall and F1, each taken independently.
pub fn macro_average(classes: &[ClassMetrics]) -> (f64, f64, f64) {
    let n = classes.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / n;
    (mean(|c| c.precision), mean(|c| c.recall), mean(|c| c.f1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Indexed by class: neutral, positive, negative.
    pub classes: [ClassMetrics; NUM_CLASSES],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let classes = [0, 1, 2].map(|c| cm.class_metrics(c));
        let (macro_precision, macro_recall, macro_f1) = macro_average(&classes);
        EvalReport {
            classes,
            macro_precision,
            macro_recall,
            macro_f1,
            accuracy: cm.accuracy(),
            confusion: *cm,
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Result<Self, MetricsError> {
        Ok(Self::from_confusion(&ConfusionMatrix::from_pairs(truth, predicted)?))
    }

    /// Arithmetic mean of every metric across `reports`; the confusion
    /// matrices are summed.
    pub fn average(reports: &[EvalReport]) -> Result<Self, MetricsError> {
        let n = reports.len();
        if n == 0 {
            return Err(MetricsError::Empty);
        }
        let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        let classes = [0, 1, 2].map(|c| ClassMetrics {
            precision: mean(&|r| r.classes[c].precision),
            recall: mean(&|r| r.classes[c].recall),
            f1: mean(&|r| r.classes[c].f1),
            degenerate: reports.iter().any(|r| r.classes[c].degenerate),
        });
        let mut confusion = ConfusionMatrix::new();
        reports.iter().for_each(|r| confusion.merge(&r.confusion));
        Ok(EvalReport {
            classes,
            macro_precision: mean(&|r| r.macro_precision),
            macro_recall: mean(&|r| r.macro_recall),
            macro_f1: mean(&|r| r.macro_f1),
            accuracy: mean(&|r| r.accuracy),
            confusion,
        })
    }

    pub fn degenerate_classes(&self) -> Vec<Label> {
        Label::ALL.into_iter().filter(|l| self.classes[l.index()].degenerate).collect()
    }
}

type MetricRow = (&'static str, fn(&ClassMetrics) -> f64, f64);

/// Plain-text comparison table: one block of P/R/F1 rows per model,
/// class columns, then the macro average. Two decimals.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:<5}  {:>8}  {:>8}  {:>8}  {:>8}", "Model", "Index", "Neutral", "Positive", "Negative", "Macro");
    for (name, r) in rows {
        let lines: [MetricRow; 3] = [
            ("P", |c| c.precision, r.macro_precision),
            ("R", |c| c.recall, r.macro_recall),
            ("F1", |c| c.f1, r.macro_f1),
        ];
        for (i, (idx, get, mac)) in lines.iter().enumerate() {
            let label = if i == 0 { name.as_str() } else { "" };
            let _ = writeln!(
                out,
                "{label:<width$}  {idx:<5}  {:>8.2}  {:>8.2}  {:>8.2}  {mac:>8.2}",
                get(&r.classes[0]),
                get(&r.classes[1]),
                get(&r.classes[2]),
            );
        }
        let flagged = r.degenerate_classes();
        if !flagged.is_empty() {
            let names: Vec<&str> = flagged.iter().map(|l| l.name()).collect();
            let _ = writeln!(out, "{:<width$}  warning: 0/0 metrics set to 0 for {}", "", names.join(", "));
        }
    }
    out
}

#[derive(Serialize)]
struct JsonRow<'a> {
    model: &'a str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

/// Machine-readable equivalent of [`format_table`].
pub fn to_json(rows: &[(String, EvalReport)]) -> String {
    let rows: Vec<JsonRow> = rows.iter().map(|(model, report)| JsonRow { model, report }).collect();
    serde_json::to_string_pretty(&rows).expect("reports are plain data")
}
