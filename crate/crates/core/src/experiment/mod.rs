//! Experiment grids over a scoring backend.
//!
//! An [`ExperimentConfig`] fixes the input variant and the fine-tuning
//! hyperparameters and lists the learning rates to try. Each learning rate
//! runs one full cross-validation; the test-fold metrics become one row of
//! the report. Config files are JSON, or TOML when the path ends in `.toml`:
//!
//! ```toml
//! name = "experiment2"
//! group = "Experiment 2. Learning rate adjustment"
//! context_variant = "both"
//! learning_rates = [1e-6, 3e-6, 5e-6, 7e-6, 9e-6]
//! epochs = 5
//! seed = 13
//! trainer = "python -m my_trainer"
//! ```

use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::backend::{Hyperparameters, ScoringBackend, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_MAX_LENGTH, DEFAULT_WEIGHT_DECAY};
use crate::dataset::{ContextVariant, FoldedDataset};
use crate::jsonl::JsonlError;
use crate::metrics::{cross_validate, Criterion, CvConfig, CvError, CvReport};

pub mod report;
pub mod wire;

pub use report::{
    dataset_hash, evaluate_scores, sha256_hex, EvalOptions, EvalReport, ResultGroup, ResultRow, ResultsTable,
    ScoreRecord, METRIC_COLUMNS, ROW_KEY_COLUMN,
};
pub use wire::{call_trainer, TrainRequest, TrainResponse, TrainerLocator, WireBackend};

pub const LEARNING_RATE_GRID: [f64; 5] = [1e-6, 3e-6, 5e-6, 7e-6, 9e-6];
pub const BEST_LEARNING_RATE: f64 = 7e-6;
pub const DEFAULT_TIMEOUT_SECS: u64 = 3600;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment config: {0}")]
    Config(String),
    #[error("dataset was built with variant {dataset}, experiment expects {expected}")]
    VariantMismatch { dataset: ContextVariant, expected: ContextVariant },
    #[error("learning rate {learning_rate:e}: {source}")]
    Cv {
        learning_rate: f64,
        #[source]
        source: CvError,
    },
    #[error("hashing dataset: {0}")]
    Hash(#[from] JsonlError),
    #[error("reading {path}: {message}")]
    Read { path: String, message: String },
}

fn de_variant<'de, D: Deserializer<'de>>(d: D) -> Result<ContextVariant, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Name(String),
        Full(ContextVariant),
    }
    match Raw::deserialize(d)? {
        Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        Raw::Full(v) => Ok(v),
    }
}

fn default_epochs() -> u32 {
    DEFAULT_EPOCHS
}
fn default_batch_size() -> u32 {
    DEFAULT_BATCH_SIZE
}
fn default_weight_decay() -> f64 {
    DEFAULT_WEIGHT_DECAY
}
fn default_max_length() -> u32 {
    DEFAULT_MAX_LENGTH
}
fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_parallel() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Table group title; experiments sharing one are shown together.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(deserialize_with = "de_variant")]
    pub context_variant: ContextVariant,
    pub learning_rates: Vec<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: u32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_max_length")]
    pub max_length: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<TrainerLocator>,
    #[serde(default)]
    pub criterion: Criterion,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Learning rates evaluated at the same time.
    #[serde(default = "default_parallel")]
    pub max_parallel_rows: usize,
}

impl ExperimentConfig {
    pub fn new(name: impl Into<String>, context_variant: ContextVariant, learning_rates: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            group: None,
            context_variant,
            learning_rates,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            max_length: DEFAULT_MAX_LENGTH,
            seed: 0,
            warmup_steps: None,
            max_grad_norm: None,
            trainer: None,
            criterion: Criterion::default(),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            max_parallel_rows: 1,
        }
    }

    pub fn with_group(mut self, group: &str) -> Self {
        self.group = Some(group.to_string());
        self
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.name.trim().is_empty() {
            return bad("name must not be empty".into());
        }
        if self.learning_rates.is_empty() {
            return bad("learning_rates must not be empty".into());
        }
        if let Some(lr) = self.learning_rates.iter().find(|lr| !(lr.is_finite() && **lr > 0.0)) {
            return bad(format!("learning rate {lr} is not a positive number"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_length == 0 {
            return bad("epochs, batch_size and max_length must be positive".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.max_parallel_rows == 0 {
            return bad("max_parallel_rows must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    pub fn hyperparameters(&self, learning_rate: f64) -> Hyperparameters {
        Hyperparameters {
            learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            max_length: self.max_length,
            seed: self.seed,
            warmup_steps: self.warmup_steps,
            max_grad_norm: self.max_grad_norm,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    /// Label of a report row: the learning rate when several are compared,
    /// otherwise the input variant.
    pub fn row_label(&self, learning_rate: f64) -> String {
        if self.learning_rates.len() > 1 {
            return format!("Lr: {learning_rate:e}");
        }
        match self.context_variant {
            ContextVariant::InterrupterOnly => "Input: interrupter only".into(),
            ContextVariant::BothSpeakers => "Input: both speakers".into(),
            ContextVariant::Extended { .. } => "The extended context".into(),
        }
    }
}

pub const GROUP_SPEAKERS: &str = "Experiment 1. Influence of speakers' context";
pub const GROUP_LEARNING_RATE: &str = "Experiment 2. Learning rate adjustment";
pub const GROUP_EXTENDED: &str = "Experiment 3. Influence of the extended context";

/// The standard experiment suite, in table order.
pub fn presets() -> Vec<ExperimentConfig> {
    vec![
        ExperimentConfig::new("experiment1-interrupter", ContextVariant::InterrupterOnly, vec![3e-6]).with_group(GROUP_SPEAKERS),
        ExperimentConfig::new("experiment1-both", ContextVariant::BothSpeakers, vec![3e-6]).with_group(GROUP_SPEAKERS),
        ExperimentConfig::new("experiment2", ContextVariant::BothSpeakers, LEARNING_RATE_GRID.to_vec())
            .with_group(GROUP_LEARNING_RATE),
        ExperimentConfig::new(
            "experiment3",
            ContextVariant::Extended {
                extension_width: crate::dataset::DEFAULT_EXTENSION_WIDTH,
            },
            vec![BEST_LEARNING_RATE],
        )
        .with_group(GROUP_EXTENDED),
    ]
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    presets().into_iter().find(|c| c.name == name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_sha256: String,
    pub n_examples: usize,
    pub n_folds: usize,
    pub test_fold: usize,
    pub fold_seed: u64,
    pub variant: ContextVariant,
    pub config: ExperimentConfig,
    pub tool: String,
}

/// Full cross-validation record behind one report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetail {
    pub learning_rate: f64,
    pub cv: CvReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub columns: Vec<String>,
    /// Test-fold metrics, one row per learning rate in config order.
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunDetail>,
    pub provenance: Provenance,
}

impl ExperimentReport {
    /// Canonical bytes: pretty JSON with a trailing newline.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }
}

/// Lays reports out as one grouped table; consecutive reports with the same
/// group title share a group.
pub fn tabulate(reports: &[ExperimentReport]) -> ResultsTable {
    let mut groups: Vec<ResultGroup> = Vec::new();
    for r in reports {
        let title = r.group.clone().unwrap_or_else(|| r.name.clone());
        match groups.last_mut() {
            Some(g) if g.title == title => g.rows.extend(r.rows.iter().cloned()),
            _ => groups.push(ResultGroup {
                title,
                rows: r.rows.clone(),
            }),
        }
    }
    ResultsTable {
        columns: ResultsTable::standard_columns(),
        groups,
    }
}

/// Runs one cross-validation per learning rate and assembles the report.
///
/// Up to `max_parallel_rows` learning rates run at once; rows are always
/// reported in config order, so the result does not depend on scheduling.
pub fn run_experiment<B>(config: &ExperimentConfig, folded: &FoldedDataset, backend: &B) -> Result<ExperimentReport, ExperimentError>
where
    B: ScoringBackend + Sync,
{
    config.validate()?;
    if let Some(dataset) = folded.variant {
        if dataset != config.context_variant {
            return Err(ExperimentError::VariantMismatch {
                dataset,
                expected: config.context_variant,
            });
        }
    }
    let dataset_sha256 = dataset_hash(folded)?;

    let run_one = |lr: f64| -> Result<CvReport, ExperimentError> {
        log::info!("{}: learning rate {lr:e}", config.name);
        let cv = CvConfig {
            hyperparameters: config.hyperparameters(lr),
            criterion: config.criterion,
        };
        cross_validate(folded, backend, &cv).map_err(|source| {
            log::error!("{}: learning rate {lr:e} aborted: {source}", config.name);
            ExperimentError::Cv { learning_rate: lr, source }
        })
    };

    let mut results: Vec<Result<CvReport, ExperimentError>> = Vec::with_capacity(config.learning_rates.len());
    for chunk in config.learning_rates.chunks(config.max_parallel_rows) {
        if chunk.len() == 1 {
            results.push(run_one(chunk[0]));
            continue;
        }
        thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&lr| s.spawn(move || run_one(lr))).collect();
            for h in handles {
                results.push(h.join().expect("experiment row panicked"));
            }
        });
    }

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (&lr, result) in config.learning_rates.iter().zip(results) {
        let cv = result?;
        rows.push(ResultRow::new(config.row_label(lr), &cv.test.metrics));
        runs.push(RunDetail { learning_rate: lr, cv });
    }

    Ok(ExperimentReport {
        name: config.name.clone(),
        group: config.group.clone(),
        columns: ResultsTable::standard_columns(),
        rows,
        runs,
        provenance: Provenance {
            dataset_sha256,
            n_examples: folded.inputs.len(),
            n_folds: folded.n_folds,
            test_fold: folded.test_fold,
            fold_seed: folded.seed,
            variant: config.context_variant,
            config: config.clone(),
            tool: concat!("overlapctl ", env!("CARGO_PKG_VERSION")).to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ConstantBackend;
    use crate::dataset::{assign_folds, BinaryLabel, ModelInput};

    fn dataset(variant: ContextVariant) -> FoldedDataset {
        let labels: Vec<BinaryLabel> = (0..40)
            .map(|i| if i % 2 == 0 { BinaryLabel::Competitive } else { BinaryLabel::NonCompetitive })
            .collect();
        let folds = assign_folds(&labels, 10, 3).unwrap();
        let inputs = labels
            .iter()
            .zip(folds)
            .enumerate()
            .map(|(i, (&label, fold))| ModelInput {
                event_id: format!("e{i:02}"),
                segment_a: "a".into(),
                segment_b: "b".into(),
                label,
                fold,
                client_is_interrupter: false,
            })
            .collect();
        FoldedDataset::new(inputs, 10, 9, 3, Some(variant)).unwrap()
    }

    #[test]
    fn defaults_and_toml() {
        let cfg = ExperimentConfig::from_toml(
            "name = \"x\"\ncontext_variant = \"extended\"\nlearning_rates = [7e-6]\ntrainer = \"http://localhost:9/t\"\n",
        )
        .unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.weight_decay, cfg.max_length), (5, 16, 0.01, 128));
        assert_eq!(cfg.context_variant, ContextVariant::Extended { extension_width: 8 });
        assert!(matches!(cfg.trainer, Some(TrainerLocator::Http(_))));
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("name = \"x\"\ncontext_variant = \"both\"\nlearning_rates = []\n").is_err());
        assert!(ExperimentConfig::from_toml("name = \"x\"\ncontext_variant = \"both\"\nlearning_rates = [1e-5]\nlr = 1\n").is_err());
    }

    #[test]
    fn constant_backend_gives_one_half_row() {
        let cfg = ExperimentConfig::new("c", ContextVariant::BothSpeakers, vec![1e-5]);
        let report = run_experiment(&cfg, &dataset(ContextVariant::BothSpeakers), &ConstantBackend(0.5)).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].roc_auc_binary, 0.5);
        assert_eq!(report.rows[0].examined, "Input: both speakers");
    }

    #[test]
    fn variant_mismatch_is_rejected() {
        let cfg = ExperimentConfig::new("c", ContextVariant::InterrupterOnly, vec![1e-5]);
        assert!(matches!(
            run_experiment(&cfg, &dataset(ContextVariant::BothSpeakers), &ConstantBackend(0.5)),
            Err(ExperimentError::VariantMismatch { .. })
        ));
    }

    #[test]
    fn parallel_rows_match_sequential_bytes() {
        let mut cfg = preset("experiment2").unwrap();
        let data = dataset(ContextVariant::BothSpeakers);
        let seq = run_experiment(&cfg, &data, &ConstantBackend(0.5)).unwrap();
        cfg.max_parallel_rows = 3;
        let mut par = run_experiment(&cfg, &data, &ConstantBackend(0.5)).unwrap();
        par.provenance.config.max_parallel_rows = 1;
        assert_eq!(seq.to_json_bytes(), par.to_json_bytes());
        let labels: Vec<&str> = seq.rows.iter().map(|r| r.examined.as_str()).collect();
        assert_eq!(labels, ["Lr: 1e-6", "Lr: 3e-6", "Lr: 5e-6", "Lr: 7e-6", "Lr: 9e-6"]);
    }
}
