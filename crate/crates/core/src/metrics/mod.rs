//! Binary classification metrics with competitive as the positive class.
//!
//! * [`roc_auc`]: the Mann–Whitney statistic, ties between a positive and a
//!   negative score count one half.
//! * [`best_threshold`]: exhaustive search over score midpoints plus the 0.0
//!   and 1.0 sentinels, predicting competitive iff `score >= threshold`.
//! * [`macro_metrics`]: unweighted means over both classes; any 0/0 ratio is
//!   defined as 0 and flagged.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod cv;

pub use cv::{cross_validate, CvConfig, CvError, CvReport, FoldReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric undefined: labels contain a single class")]
    SingleClass,
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("score at position {0} is not finite")]
    NonFinite(usize),
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    Ok(())
}

fn check_both_classes(labels: &[bool]) -> Result<(), MetricsError> {
    if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
        Ok(())
    } else {
        Err(MetricsError::SingleClass)
    }
}

/// Area under the ROC curve, `labels[i] == true` marking competitive.
///
/// Sorts once and sweeps groups of equal scores, so it runs in O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_inputs(scores, labels)?;
    check_both_classes(labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut negatives_below = 0.0f64;
    let mut wins = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        let (mut pos, mut neg) = (0.0f64, 0.0f64);
        while i < order.len() && scores[order[i]] == value {
            if labels[order[i]] {
                pos += 1.0;
            } else {
                neg += 1.0;
            }
            i += 1;
        }
        wins += pos * negatives_below + 0.5 * pos * neg;
        negatives_below += neg;
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    Ok(wins / (n_pos * n_neg))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    F1Macro,
    BalancedAccuracy,
}

impl Criterion {
    pub fn value(self, m: &MacroMetrics) -> f64 {
        match self {
            Criterion::F1Macro => m.f1_macro,
            Criterion::BalancedAccuracy => m.balanced_accuracy,
        }
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f1_macro" => Ok(Criterion::F1Macro),
            "balanced_accuracy" => Ok(Criterion::BalancedAccuracy),
            other => Err(format!("unknown criterion `{other}` (expected f1_macro or balanced_accuracy)")),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::F1Macro => "f1_macro",
            Criterion::BalancedAccuracy => "balanced_accuracy",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionMatrix, MetricsError> {
    check_inputs(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub recall_macro: f64,
    pub precision_macro: f64,
    pub balanced_accuracy: f64,
    pub f1_macro: f64,
    /// Some precision, recall or F1 term had a zero denominator.
    pub zero_division: bool,
}

struct Ratio {
    zero_division: bool,
}

impl Ratio {
    fn of(&mut self, num: u64, den: u64) -> f64 {
        if den == 0 {
            self.zero_division = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    }
}

fn balanced_accuracy(cm: &ConfusionMatrix, ratio: &mut Ratio) -> f64 {
    let true_positive_rate = ratio.of(cm.tp, cm.tp + cm.fn_);
    let true_negative_rate = ratio.of(cm.tn, cm.tn + cm.fp);
    (true_positive_rate + true_negative_rate) / 2.0
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MacroMetrics, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::EmptyConfusion);
    }
    let mut r = Ratio { zero_division: false };
    let recall_pos = r.of(cm.tp, cm.tp + cm.fn_);
    let recall_neg = r.of(cm.tn, cm.tn + cm.fp);
    let precision_pos = r.of(cm.tp, cm.tp + cm.fp);
    let precision_neg = r.of(cm.tn, cm.tn + cm.fn_);
    let f1_pos = r.of(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_);
    let f1_neg = r.of(2 * cm.tn, 2 * cm.tn + cm.fn_ + cm.fp);
    let balanced = balanced_accuracy(cm, &mut r);
    Ok(MacroMetrics {
        recall_macro: (recall_pos + recall_neg) / 2.0,
        precision_macro: (precision_pos + precision_neg) / 2.0,
        balanced_accuracy: balanced,
        f1_macro: (f1_pos + f1_neg) / 2.0,
        zero_division: r.zero_division,
    })
}

/// Sentinels 0.0 and 1.0 plus midpoints of adjacent distinct scores, ascending.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out: Vec<f64> = sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    out.push(0.0);
    out.push(1.0);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub value: f64,
}

/// Threshold maximizing `criterion`; ties go to the smaller threshold.
pub fn best_threshold(scores: &[f64], labels: &[bool], criterion: Criterion) -> Result<ThresholdChoice, MetricsError> {
    check_inputs(scores, labels)?;
    check_both_classes(labels)?;
    let mut best: Option<ThresholdChoice> = None;
    for threshold in candidate_thresholds(scores) {
        let value = criterion.value(&macro_metrics(&confusion(scores, labels, threshold)?)?);
        let better = match best {
            None => true,
            Some(b) => value.partial_cmp(&b.value) == Some(Ordering::Greater),
        };
        if better {
            best = Some(ThresholdChoice { threshold, value });
        }
    }
    best.ok_or(MetricsError::SingleClass)
}

/// One row of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub roc_auc: f64,
    pub best_threshold: f64,
    pub recall_macro: f64,
    pub precision_macro: f64,
    pub balanced_accuracy: f64,
    pub f1_macro: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_division: bool,
}

/// Metrics at a fixed threshold.
pub fn evaluate_at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsReport, MetricsError> {
    let auc = roc_auc(scores, labels)?;
    let m = macro_metrics(&confusion(scores, labels, threshold)?)?;
    Ok(MetricsReport {
        roc_auc: auc,
        best_threshold: threshold,
        recall_macro: m.recall_macro,
        precision_macro: m.precision_macro,
        balanced_accuracy: m.balanced_accuracy,
        f1_macro: m.f1_macro,
        zero_division: m.zero_division,
    })
}

/// Metrics at the threshold selected on the same scores.
pub fn evaluate(scores: &[f64], labels: &[bool], criterion: Criterion) -> Result<MetricsReport, MetricsError> {
    let choice = best_threshold(scores, labels, criterion)?;
    evaluate_at(scores, labels, choice.threshold)
}
