//! Confusion matrix, one-vs-rest per-class metrics, overall accuracy and
//! report rendering.
//!
//! The JSON report has the shape
//!
//! ```json
//! { "overall_accuracy": 0.95,
//!   "classes": [ { "key": "cavity_spot", "tp": 19, "fp": 1, "fn": 0, "tn": 60,
//!                  "precision": 0.95, "recall": 1.0, "specificity": 0.98,
//!                  "f1": 0.97, "degenerate": false } ] }
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CarrotClass, NUM_CLASSES};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(truth: &[CarrotClass], predicted: &[CarrotClass]) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::Argument(format!(
            "label lists differ in length: {} true vs {} predicted",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (t, p) in truth.iter().zip(predicted) {
        cm.counts[t.id()][p.id()] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: CarrotClass,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: f64, den: f64, degenerate: &mut bool) -> f64 {
    if den == 0.0 {
        *degenerate = true;
        0.0
    } else {
        num / den
    }
}

/// Harmonic mean of precision and recall; `(0, true)` when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> (f64, bool) {
    let mut degenerate = false;
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut degenerate);
    (f1, degenerate)
}

/// One-vs-rest reduction of the matrix for `class`.
pub fn class_metrics(cm: &ConfusionMatrix, class: CarrotClass) -> ClassMetrics {
    let c = class.id();
    let tp = cm.counts[c][c];
    let row: u64 = cm.counts[c].iter().sum();
    let col: u64 = cm.counts.iter().map(|r| r[c]).sum();
    let (fp, fn_) = (col - tp, row - tp);
    let tn = cm.total() - tp - fp - fn_;
    let mut degenerate = false;
    let precision = ratio(tp as f64, (tp + fp) as f64, &mut degenerate);
    let recall = ratio(tp as f64, (tp + fn_) as f64, &mut degenerate);
    let specificity = ratio(tn as f64, (tn + fp) as f64, &mut degenerate);
    let (f1, f1_degenerate) = f1_score(precision, recall);
    ClassMetrics { class, tp, fp, fn_, tn, precision, recall, specificity, f1, degenerate: degenerate || f1_degenerate }
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    match cm.total() {
        0 => Err(EvalError::Degenerate("accuracy of an empty confusion matrix".into())),
        total => Ok(cm.trace() as f64 / total as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub confusion: ConfusionMatrix,
    pub classes: Vec<ClassMetrics>,
    pub overall_accuracy: f64,
}

impl EvaluationReport {
    pub fn from_labels(truth: &[CarrotClass], predicted: &[CarrotClass]) -> Result<Self, EvalError> {
        let cm = confusion(truth, predicted)?;
        Ok(Self {
            classes: CarrotClass::ALL.iter().map(|&c| class_metrics(&cm, c)).collect(),
            overall_accuracy: overall_accuracy(&cm)?,
            confusion: cm,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Self::Text),
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown report format '{other}' (expected text, json or csv)")),
        }
    }
}

#[derive(Serialize)]
struct JsonClass<'a> {
    key: &'a str,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    tn: u64,
    precision: f64,
    recall: f64,
    specificity: f64,
    f1: f64,
    degenerate: bool,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    overall_accuracy: f64,
    classes: Vec<JsonClass<'a>>,
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Render per-class precision, recall and F1 (percentages, 2 decimals) plus
/// overall accuracy. JSON carries raw fractions.
pub fn render_report(metrics: &[ClassMetrics], overall_accuracy: f64, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => {
            let mut s = format!("{:<14} {:>10} {:>10} {:>10}\n", "Class", "Precision", "Recall", "F1-score");
            for m in metrics {
                let flag = if m.degenerate { " *" } else { "" };
                let _ = writeln!(
                    s,
                    "{:<14} {:>9}% {:>9}% {:>9}%{flag}",
                    m.class.display_name(),
                    pct(m.precision),
                    pct(m.recall),
                    pct(m.f1)
                );
            }
            let _ = writeln!(s, "Overall accuracy: {}%", pct(overall_accuracy));
            if metrics.iter().any(|m| m.degenerate) {
                s.push_str("* zero denominator, reported as 0\n");
            }
            s
        }
        ReportFormat::Json => {
            let report = JsonReport {
                overall_accuracy,
                classes: metrics
                    .iter()
                    .map(|m| JsonClass {
                        key: m.class.key(),
                        tp: m.tp,
                        fp: m.fp,
                        fn_: m.fn_,
                        tn: m.tn,
                        precision: m.precision,
                        recall: m.recall,
                        specificity: m.specificity,
                        f1: m.f1,
                        degenerate: m.degenerate,
                    })
                    .collect(),
            };
            serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
        }
        ReportFormat::Csv => {
            let mut s = String::from("class,precision,recall,specificity,f1,degenerate,overall_accuracy\n");
            for m in metrics {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    m.class.key(),
                    pct(m.precision),
                    pct(m.recall),
                    pct(m.specificity),
                    pct(m.f1),
                    m.degenerate,
                    pct(overall_accuracy)
                );
            }
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use CarrotClass::*;

    fn labels(ids: &[usize]) -> Vec<CarrotClass> {
        ids.iter().map(|&i| CarrotClass::from_id(i).unwrap()).collect()
    }

    #[test]
    fn confusion_examples() {
        let all = labels(&[0, 0, 1, 1, 2, 2, 3, 3]);
        let cm = confusion(&all, &all).unwrap();
        for i in 0..4 {
            assert_eq!(cm.counts[i][i], 2);
        }
        assert_eq!(cm.total(), 8);
        assert_eq!(confusion(&[], &[]).unwrap(), ConfusionMatrix::default());

        let cm = confusion(&labels(&[0, 0, 1]), &labels(&[0, 1, 1])).unwrap();
        assert_eq!((cm.counts[0][0], cm.counts[0][1], cm.counts[1][1]), (1, 1, 1));
        assert_eq!(cm.total(), 3);
        assert!(confusion(&labels(&[0]), &[]).is_err());
    }

    #[test]
    fn table_two_f1_values() {
        // Precision/recall pairs and printed F1 for Cavity Spot and Leaf Blight.
        let (f1, _) = f1_score(0.995, 0.988);
        assert!((f1 * 100.0 - 99.15).abs() <= 0.01, "{f1}");
        let (f1, _) = f1_score(0.990, 0.985);
        assert!((f1 * 100.0 - 98.74).abs() <= 0.01 || (f1 * 100.0 - 98.75).abs() <= 0.01, "{f1}");
    }

    #[test]
    fn perfect_and_inverted_matrices() {
        let all = labels(&[0, 1, 2, 3, 0, 1, 2, 3]);
        let cm = confusion(&all, &all).unwrap();
        for c in CarrotClass::ALL {
            let m = class_metrics(&cm, c);
            assert_eq!((m.precision, m.recall, m.specificity, m.f1), (1.0, 1.0, 1.0, 1.0));
            assert!(!m.degenerate);
        }
        assert_eq!(overall_accuracy(&cm).unwrap(), 1.0);

        let shifted: Vec<_> = all.iter().map(|c| CarrotClass::from_id((c.id() + 1) % 4).unwrap()).collect();
        assert_eq!(overall_accuracy(&confusion(&all, &shifted).unwrap()).unwrap(), 0.0);

        let mut cm = ConfusionMatrix::default();
        cm.counts[0][0] = 96;
        cm.counts[1][2] = 4;
        assert!((overall_accuracy(&cm).unwrap() - 0.96).abs() < 1e-15);
        assert!(overall_accuracy(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let cm = confusion(&[Healthy, Healthy], &[Healthy, Healthy]).unwrap();
        let m = class_metrics(&cm, LeafBlight);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(m.degenerate);
        assert!(!class_metrics(&cm, Healthy).degenerate || class_metrics(&cm, Healthy).specificity == 0.0);
    }

    fn table_two_metrics() -> Vec<ClassMetrics> {
        let rows =
            [(CavitySpot, 0.995, 0.988), (Healthy, 1.0, 1.0), (LeafBlight, 0.990, 0.985), (FreshCarrot, 1.0, 1.0)];
        rows.iter()
            .map(|&(class, p, r)| ClassMetrics {
                class,
                tp: 0,
                fp: 0,
                fn_: 0,
                tn: 0,
                precision: p,
                recall: r,
                specificity: 1.0,
                f1: f1_score(p, r).0,
                degenerate: false,
            })
            .collect()
    }

    #[test]
    fn text_report_reproduces_table_two() {
        let text = render_report(&table_two_metrics(), 0.9981, ReportFormat::Text);
        assert!(text.contains("Cavity Spot"));
        assert!(text.contains("99.50%") && text.contains("98.80%") && text.contains("99.15%"));
        assert!(text.contains("99.00%") && text.contains("98.50%") && text.contains("98.75%"));
        assert!(text.contains("Overall accuracy: 99.81%"));
    }

    #[test]
    fn json_and_csv_reports() {
        let report = EvaluationReport::from_labels(&labels(&[0, 1, 2, 3, 3]), &labels(&[0, 1, 2, 3, 2])).unwrap();
        let json = render_report(&report.classes, report.overall_accuracy, ReportFormat::Json);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["overall_accuracy"], 0.8);
        assert_eq!(v["classes"].as_array().unwrap().len(), 4);
        let fresh = &v["classes"][3];
        assert_eq!(fresh["key"], "fresh_carrot");
        assert_eq!((fresh["tp"].as_u64(), fresh["fn"].as_u64()), (Some(1), Some(1)));
        for key in ["fp", "tn", "precision", "recall", "specificity", "f1", "degenerate"] {
            assert!(fresh.get(key).is_some(), "{key}");
        }
        let again = serde_json::to_string_pretty(&v).unwrap() + "\n";
        assert_eq!(serde_json::from_str::<serde_json::Value>(&again).unwrap(), v);

        let csv = render_report(&report.classes, report.overall_accuracy, ReportFormat::Csv);
        assert_eq!(csv.lines().count(), 5);
    }

    /// Independent recount straight from label pairs.
    fn brute(truth: &[usize], pred: &[usize], c: usize) -> (u64, u64, u64, u64) {
        let mut t = (0, 0, 0, 0);
        for (&a, &b) in truth.iter().zip(pred) {
            match (a == c, b == c) {
                (true, true) => t.0 += 1,
                (false, true) => t.1 += 1,
                (true, false) => t.2 += 1,
                (false, false) => t.3 += 1,
            }
        }
        t
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(pairs in prop::collection::vec((0usize..4, 0usize..4), 0..1000)) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let cm = confusion(&labels(&t), &labels(&p)).unwrap();
            let mut tp_sum = 0;
            for c in CarrotClass::ALL {
                let m = class_metrics(&cm, c);
                let (tp, fp, fn_, tn) = brute(&t, &p, c.id());
                prop_assert_eq!((m.tp, m.fp, m.fn_, m.tn), (tp, fp, fn_, tn));
                prop_assert_eq!(tp + fp + fn_ + tn, t.len() as u64);
                tp_sum += tp;
                let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
                let (pr, rc) = (div(tp, tp + fp), div(tp, tp + fn_));
                prop_assert!((m.precision - pr).abs() <= 1e-12);
                prop_assert!((m.recall - rc).abs() <= 1e-12);
                prop_assert!((m.specificity - div(tn, tn + fp)).abs() <= 1e-12);
                let f1 = if pr + rc == 0.0 { 0.0 } else { 2.0 * pr * rc / (pr + rc) };
                prop_assert!((m.f1 - f1).abs() <= 1e-12);
                if pr > 0.0 && rc > 0.0 {
                    prop_assert!(m.f1 >= pr.min(rc) - 1e-12 && m.f1 <= pr.max(rc) + 1e-12);
                }
            }
            prop_assert_eq!(tp_sum, cm.trace());
        }
    }
}
