//! Result tables and score-file evaluation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{BinaryLabel, FoldedDataset};
use crate::jsonl::{self, JsonlError};
use crate::metrics::{best_threshold, evaluate_at, Criterion, MetricsError, MetricsReport};

/// Row key column, followed by [`METRIC_COLUMNS`].
pub const ROW_KEY_COLUMN: &str = "Examined Hyper Parameter";

pub const METRIC_COLUMNS: [&str; 6] = [
    "ROC AUC binary",
    "Best Threshold",
    "Recall macro",
    "Precision macro",
    "Balanced Accuracy",
    "F1 macro",
];

/// One table row: what was varied plus the six metric columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    #[serde(rename = "Examined Hyper Parameter")]
    pub examined: String,
    #[serde(rename = "ROC AUC binary")]
    pub roc_auc_binary: f64,
    #[serde(rename = "Best Threshold")]
    pub best_threshold: f64,
    #[serde(rename = "Recall macro")]
    pub recall_macro: f64,
    #[serde(rename = "Precision macro")]
    pub precision_macro: f64,
    #[serde(rename = "Balanced Accuracy")]
    pub balanced_accuracy: f64,
    #[serde(rename = "F1 macro")]
    pub f1_macro: f64,
}

impl ResultRow {
    pub fn new(examined: impl Into<String>, m: &MetricsReport) -> Self {
        Self {
            examined: examined.into(),
            roc_auc_binary: m.roc_auc,
            best_threshold: m.best_threshold,
            recall_macro: m.recall_macro,
            precision_macro: m.precision_macro,
            balanced_accuracy: m.balanced_accuracy,
            f1_macro: m.f1_macro,
        }
    }

    /// Metric values in [`METRIC_COLUMNS`] order.
    pub fn values(&self) -> [f64; 6] {
        [
            self.roc_auc_binary,
            self.best_threshold,
            self.recall_macro,
            self.precision_macro,
            self.balanced_accuracy,
            self.f1_macro,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultGroup {
    pub title: String,
    pub rows: Vec<ResultRow>,
}

/// Several experiments laid out as one grouped table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub columns: Vec<String>,
    pub groups: Vec<ResultGroup>,
}

impl ResultsTable {
    pub fn standard_columns() -> Vec<String> {
        std::iter::once(ROW_KEY_COLUMN).chain(METRIC_COLUMNS).map(String::from).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &ResultRow> {
        self.groups.iter().flat_map(|g| g.rows.iter())
    }

    /// Tab-separated rendering with group titles on their own lines.
    pub fn to_tsv(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for g in &self.groups {
            out.push_str(&g.title);
            out.push('\n');
            for r in &g.rows {
                out.push_str(&r.examined);
                for v in r.values() {
                    out.push_str(&format!("\t{v:.4}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the dataset's JSONL serialization, equal to the hash of a dataset
/// file written by this crate.
pub fn dataset_hash(folded: &FoldedDataset) -> Result<String, JsonlError> {
    Ok(sha256_hex(&jsonl::to_bytes(&folded.inputs)?))
}

/// One scored example, as written by `overlapctl score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub event_id: String,
    pub fold: usize,
    pub label: BinaryLabel,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    /// Chosen on the rows outside the test fold.
    NonTestFolds,
    /// No other rows were present, so the test fold chose its own threshold.
    TestFold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProvenance {
    pub scores_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_sha256: Option<String>,
    pub criterion: Criterion,
    pub test_fold: usize,
    pub threshold_source: ThresholdSource,
    pub n_test: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_division: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub columns: Vec<String>,
    pub row: ResultRow,
    pub provenance: EvalProvenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub criterion: Criterion,
    pub test_fold: usize,
    pub row_label: String,
    pub dataset_sha256: Option<String>,
    pub config: Option<serde_json::Value>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            criterion: Criterion::default(),
            test_fold: crate::dataset::DEFAULT_TEST_FOLD,
            row_label: "baseline".into(),
            dataset_sha256: None,
            config: None,
        }
    }
}

/// Evaluates the test-fold rows of a score file at a threshold chosen on the
/// other rows (or on the test rows themselves when nothing else is present).
pub fn evaluate_scores(records: &[ScoreRecord], options: &EvalOptions) -> Result<EvalReport, MetricsError> {
    let split = |test: bool| -> (Vec<f64>, Vec<bool>) {
        records
            .iter()
            .filter(|r| (r.fold == options.test_fold) == test)
            .map(|r| (r.score, r.label.is_positive()))
            .unzip()
    };
    let (test_scores, test_labels) = split(true);
    let (other_scores, other_labels) = split(false);
    let (choice, source) = if other_scores.is_empty() {
        (best_threshold(&test_scores, &test_labels, options.criterion)?, ThresholdSource::TestFold)
    } else {
        (best_threshold(&other_scores, &other_labels, options.criterion)?, ThresholdSource::NonTestFolds)
    };
    let metrics = evaluate_at(&test_scores, &test_labels, choice.threshold)?;
    let bytes = jsonl::to_bytes(records).expect("score records serialize");
    Ok(EvalReport {
        columns: ResultsTable::standard_columns(),
        row: ResultRow::new(options.row_label.clone(), &metrics),
        provenance: EvalProvenance {
            scores_sha256: sha256_hex(&bytes),
            dataset_sha256: options.dataset_sha256.clone(),
            criterion: options.criterion,
            test_fold: options.test_fold,
            threshold_source: source,
            n_test: test_scores.len(),
            zero_division: metrics.zero_division,
            config: options.config.clone(),
        },
    })
}
