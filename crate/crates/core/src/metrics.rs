//! Per-class one-vs-rest metrics and their macro averages.
//!
//! Degenerate ratios follow fixed conventions: a 0/0 precision, recall, F1,
//! accuracy or kappa is 0, and a specificity with `TN + FP = 0` is 1.
//! Average precision is the non-interpolated area under the PR curve.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CONVENTIONS: &str = "0/0 -> 0 for precision, recall, F1, accuracy and kappa; \
specificity with TN+FP=0 -> 1; AP is non-interpolated (mean precision at each positive rank, \
ties broken by lower sample index); macro values are unweighted means over classes";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
}

pub fn confusion_counts(predicted: &[usize], actual: &[usize], num_classes: usize) -> Result<ConfusionCounts> {
    if predicted.len() != actual.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&bad) = predicted.iter().chain(actual).find(|&&c| c >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes,
        });
    }
    let n = predicted.len() as u64;
    let mut per_class = vec![ClassCounts::default(); num_classes];
    for (&p, &a) in predicted.iter().zip(actual) {
        if p == a {
            per_class[p].tp += 1;
        } else {
            per_class[p].fp += 1;
            per_class[a].fn_ += 1;
        }
    }
    for c in &mut per_class {
        c.tn = n - c.tp - c.fp - c.fn_;
    }
    Ok(ConfusionCounts { per_class })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// The threshold metrics for one class (everything except AP).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateMetrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub pr_f1: f64,
    pub ss_f1: f64,
    pub accuracy: f64,
    pub kappa: f64,
}

impl RateMetrics {
    /// Each value is a single ratio of exact integer expressions, so it is
    /// the correctly rounded value of its rational definition.
    pub fn from_counts(c: &ClassCounts) -> Self {
        let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
        // sensitivity = a/b and specificity = s/t, with the 0/0 conventions
        let (a, b) = if tp + fn_ == 0.0 { (0.0, 1.0) } else { (tp, tp + fn_) };
        let (s, t) = if tn + fp == 0.0 { (1.0, 1.0) } else { (tn, tn + fp) };
        RateMetrics {
            precision: ratio(tp, tp + fp),
            recall: a / b,
            specificity: s / t,
            // 2PR/(P+R) and 2·sens·spec/(sens+spec) with the fractions cleared
            pr_f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            ss_f1: ratio(2.0 * a * s, a * t + s * b),
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            kappa: ratio(
                2.0 * (tp * tn - fp * fn_),
                (tp + fp) * (fp + tn) + (tp + fn_) * (fn_ + tn),
            ),
        }
    }
}

pub fn per_class_metrics(counts: &ConfusionCounts) -> Vec<RateMetrics> {
    counts.per_class.iter().map(RateMetrics::from_counts).collect()
}

/// Non-interpolated average precision of one class.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} targets",
            scores.len(),
            positives.len()
        )));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub map: f64,
    /// AP per class; `None` where the class has no positive sample.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Mean of per-class AP over classes with at least one positive.
pub fn mean_average_precision(probabilities: &Matrix, actual: &[usize]) -> Result<MapResult> {
    if probabilities.rows() != actual.len() {
        return Err(Error::shape(
            "mean_average_precision",
            probabilities.shape(),
            (actual.len(), 1),
        ));
    }
    let c = probabilities.cols();
    if let Some(&bad) = actual.iter().find(|&&a| a >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: c,
        });
    }
    let probs_t = probabilities.transpose();
    let mut per_class = Vec::with_capacity(c);
    let mut skipped = Vec::new();
    for class in 0..c {
        let positives: Vec<bool> = actual.iter().map(|&a| a == class).collect();
        match average_precision(probs_t.row(class), &positives) {
            Ok(ap) => per_class.push(Some(ap)),
            Err(Error::NoPositives) => {
                skipped.push(class);
                per_class.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let aps: Vec<f64> = per_class.iter().flatten().copied().collect();
    if aps.is_empty() {
        return Err(Error::NoPositives);
    }
    Ok(MapResult {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        per_class,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub pr_f1: f64,
    pub ss_f1: f64,
    pub average_precision: Option<f64>,
    pub accuracy: f64,
    pub kappa: f64,
    pub counts: ClassCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub pr_f1: f64,
    pub ss_f1: f64,
    #[serde(rename = "map")]
    pub mean_average_precision: f64,
    pub accuracy: f64,
    pub kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: IndexMap<String, ClassReport>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub skipped_classes: Vec<String>,
    pub conventions: String,
}

/// Per-class metrics and their unweighted means.
pub fn macro_report(
    probabilities: &Matrix,
    predicted: &[usize],
    actual: &[usize],
    class_names: &[String],
) -> Result<MetricsReport> {
    let c = class_names.len();
    if probabilities.cols() != c {
        return Err(Error::shape("macro_report", probabilities.shape(), (actual.len(), c)));
    }
    let counts = confusion_counts(predicted, actual, c)?;
    let rates = per_class_metrics(&counts);
    let map = mean_average_precision(probabilities, actual)?;

    let mut per_class = IndexMap::with_capacity(c);
    for (k, name) in class_names.iter().enumerate() {
        let r = rates[k];
        per_class.insert(
            name.clone(),
            ClassReport {
                precision: r.precision,
                recall: r.recall,
                specificity: r.specificity,
                pr_f1: r.pr_f1,
                ss_f1: r.ss_f1,
                average_precision: map.per_class[k],
                accuracy: r.accuracy,
                kappa: r.kappa,
                counts: counts.per_class[k],
            },
        );
    }
    let mean = |f: fn(&RateMetrics) -> f64| rates.iter().map(f).sum::<f64>() / c as f64;
    Ok(MetricsReport {
        per_class,
        macro_avg: MacroMetrics {
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            specificity: mean(|r| r.specificity),
            pr_f1: mean(|r| r.pr_f1),
            ss_f1: mean(|r| r.ss_f1),
            mean_average_precision: map.map,
            accuracy: mean(|r| r.accuracy),
            kappa: mean(|r| r.kappa),
        },
        skipped_classes: map.skipped.iter().map(|&k| class_names[k].clone()).collect(),
        conventions: CONVENTIONS.to_string(),
    })
}

/// Class-level P-R F1 table: one row per model, one column per class plus
/// the average, values in percent.
pub fn render_class_table(rows: &[(&str, &MetricsReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let classes: Vec<&String> = first.per_class.keys().collect();
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<name_w$}", "Model");
    for c in &classes {
        out.push_str(&format!(" | {:>7}", c));
    }
    out.push_str(&format!(" | {:>7}\n", "Average"));
    out.push_str(&"-".repeat(name_w + 10 * (classes.len() + 1)));
    out.push('\n');
    for (name, report) in rows {
        out.push_str(&format!("{name:<name_w$}"));
        for c in &classes {
            let v = report.per_class.get(*c).map_or(f64::NAN, |r| r.pr_f1);
            out.push_str(&format!(" | {:>7.2}", 100.0 * v));
        }
        out.push_str(&format!(" | {:>7.2}\n", 100.0 * report.macro_avg.pr_f1));
    }
    out
}

/// Macro summary: one row per model with all eight metrics, in percent.
pub fn render_summary_table(rows: &[(&str, &MetricsReport)]) -> String {
    let headers = [
        "Precision",
        "Recall",
        "Specificity",
        "P-R F1",
        "S-S F1",
        "MAP",
        "Accuracy",
        "Kappa",
    ];
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<name_w$}", "Method");
    for h in headers {
        out.push_str(&format!(" | {h:>11}"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + 14 * headers.len()));
    out.push('\n');
    for (name, r) in rows {
        let m = &r.macro_avg;
        out.push_str(&format!("{name:<name_w$}"));
        for v in [
            m.precision,
            m.recall,
            m.specificity,
            m.pr_f1,
            m.ss_f1,
            m.mean_average_precision,
            m.accuracy,
            m.kappa,
        ] {
            out.push_str(&format!(" | {:>11.2}", 100.0 * v));
        }
        out.push('\n');
    }
    out
}
