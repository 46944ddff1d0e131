//! Scoring backends: anything that trains on labeled inputs and scores others.
//!
//! The cross-validation loop owns fold logic and metrics; a backend only sees
//! one train/validation/evaluation split at a time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ModelInput;

pub const DEFAULT_EPOCHS: u32 = 5;
pub const DEFAULT_BATCH_SIZE: u32 = 16;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
pub const DEFAULT_MAX_LENGTH: u32 = 128;

/// Fine-tuning hyperparameters forwarded to a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: u32,
    pub weight_decay: f64,
    pub max_length: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            learning_rate: 7e-6,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            max_length: DEFAULT_MAX_LENGTH,
            seed: 0,
            warmup_steps: None,
            max_grad_norm: None,
        }
    }
}

/// Validation curves after one epoch. Absent when the split had no validation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub val_loss: Option<f64>,
    pub val_roc_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub per_epoch: Vec<EpochMetrics>,
    /// P(competitive) for each evaluation example, in order.
    pub eval_scores: Vec<f64>,
    pub backend_info: String,
}

/// One train/validation/evaluation split handed to a backend.
#[derive(Debug, Clone)]
pub struct TrainJob<'a> {
    pub hyperparameters: &'a Hyperparameters,
    pub train: Vec<&'a ModelInput>,
    pub validation: Vec<&'a ModelInput>,
    pub evaluation: Vec<&'a ModelInput>,
}

/// Structured rejection of a malformed trainer response.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("protocol error at `{field}`: {reason}")]
pub struct ProtocolError {
    pub field: String,
    pub reason: String,
}

impl ProtocolError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("backend reported failure: {message}")]
    Reported { message: String },
    #[error("backend exited with {status}: {diagnostics}")]
    Exited { status: String, diagnostics: String },
    #[error("backend timed out after {0} s")]
    Timeout(u64),
    #[error("backend transport: {0}")]
    Transport(String),
    #[error("training failed: {0}")]
    Training(String),
}

pub trait ScoringBackend {
    fn train_and_score(&self, job: &TrainJob<'_>) -> Result<TrainOutcome, BackendError>;
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for &B {
    fn train_and_score(&self, job: &TrainJob<'_>) -> Result<TrainOutcome, BackendError> {
        (**self).train_and_score(job)
    }
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for Box<B> {
    fn train_and_score(&self, job: &TrainJob<'_>) -> Result<TrainOutcome, BackendError> {
        (**self).train_and_score(job)
    }
}

/// Scores every example with the same value; useful as an uninformative reference.
#[derive(Debug, Clone, Copy)]
pub struct ConstantBackend(pub f64);

impl ScoringBackend for ConstantBackend {
    fn train_and_score(&self, job: &TrainJob<'_>) -> Result<TrainOutcome, BackendError> {
        Ok(TrainOutcome {
            per_epoch: (1..=job.hyperparameters.epochs)
                .map(|epoch| EpochMetrics {
                    epoch,
                    val_loss: None,
                    val_roc_auc: None,
                })
                .collect(),
            eval_scores: vec![self.0; job.evaluation.len()],
            backend_info: format!("constant {}", self.0),
        })
    }
}
