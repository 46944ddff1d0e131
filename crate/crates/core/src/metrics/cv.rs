//! Cross-validation with a held-out test fold.
//!
//! For every fold `v` other than the test fold, the backend trains on the
//! remaining non-test folds and scores `v`. The decision threshold is then
//! chosen once on the pooled validation scores, the backend is retrained on
//! all non-test folds, and the test fold is scored at that threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{best_threshold, evaluate, evaluate_at, Criterion, MetricsError, MetricsReport};
use crate::backend::{BackendError, EpochMetrics, Hyperparameters, ScoringBackend, TrainJob, TrainOutcome};
use crate::dataset::{FoldedDataset, ModelInput};

#[derive(Debug, Error)]
pub enum CvError {
    #[error("fold {fold}: {source}")]
    Backend {
        fold: usize,
        #[source]
        source: BackendError,
    },
    #[error("fold {fold}: {source}")]
    Metrics {
        fold: usize,
        #[source]
        source: MetricsError,
    },
    #[error("fold {fold}: backend returned invalid scores: {reason}")]
    InvalidScores { fold: usize, reason: String },
    #[error("cross-validation configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub hyperparameters: Hyperparameters,
    pub criterion: Criterion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_examples: usize,
    pub metrics: MetricsReport,
    pub per_epoch: Vec<EpochMetrics>,
    pub backend_info: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub criterion: Criterion,
    /// One report per validation fold, ascending fold order.
    pub validation: Vec<FoldReport>,
    /// Metrics over all validation scores at the pooled threshold.
    pub pooled_validation: MetricsReport,
    /// Test-fold metrics at the pooled validation threshold.
    pub test: FoldReport,
}

fn labels_of(inputs: &[&ModelInput]) -> Vec<bool> {
    inputs.iter().map(|i| i.label.is_positive()).collect()
}

fn check_outcome(fold: usize, outcome: &TrainOutcome, expected: usize) -> Result<(), CvError> {
    if outcome.eval_scores.len() != expected {
        return Err(CvError::InvalidScores {
            fold,
            reason: format!("expected {expected} scores, got {}", outcome.eval_scores.len()),
        });
    }
    if let Some((i, s)) = outcome
        .eval_scores
        .iter()
        .enumerate()
        .find(|(_, s)| !(0.0..=1.0).contains(*s))
    {
        return Err(CvError::InvalidScores {
            fold,
            reason: format!("score {s} at position {i} outside [0, 1]"),
        });
    }
    Ok(())
}

pub fn cross_validate<B: ScoringBackend>(
    folded: &FoldedDataset,
    backend: &B,
    config: &CvConfig,
) -> Result<CvReport, CvError> {
    if folded.n_folds < 2 || folded.test_fold >= folded.n_folds {
        return Err(CvError::Config(format!(
            "need at least 2 folds and a test fold in range, got n_folds={} test_fold={}",
            folded.n_folds, folded.test_fold
        )));
    }
    let hp = &config.hyperparameters;
    let run = |fold: usize, job: TrainJob<'_>| -> Result<TrainOutcome, CvError> {
        let outcome = backend
            .train_and_score(&job)
            .map_err(|source| CvError::Backend { fold, source })?;
        check_outcome(fold, &outcome, job.evaluation.len())?;
        Ok(outcome)
    };

    let mut validation = Vec::new();
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    for v in folded.validation_folds() {
        let train: Vec<&ModelInput> = folded
            .inputs
            .iter()
            .filter(|i| i.fold != v && i.fold != folded.test_fold)
            .collect();
        let held_out = folded.fold(v);
        let outcome = run(
            v,
            TrainJob {
                hyperparameters: hp,
                train,
                validation: held_out.clone(),
                evaluation: held_out.clone(),
            },
        )?;
        let labels = labels_of(&held_out);
        let metrics = evaluate(&outcome.eval_scores, &labels, config.criterion)
            .map_err(|source| CvError::Metrics { fold: v, source })?;
        pooled_scores.extend_from_slice(&outcome.eval_scores);
        pooled_labels.extend(labels);
        validation.push(FoldReport {
            fold: v,
            n_examples: held_out.len(),
            metrics,
            per_epoch: outcome.per_epoch,
            backend_info: outcome.backend_info,
        });
    }

    let pooled_fold = folded.test_fold;
    let choice = best_threshold(&pooled_scores, &pooled_labels, config.criterion)
        .map_err(|source| CvError::Metrics { fold: pooled_fold, source })?;
    let pooled_validation = evaluate_at(&pooled_scores, &pooled_labels, choice.threshold)
        .map_err(|source| CvError::Metrics { fold: pooled_fold, source })?;

    let t = folded.test_fold;
    let train: Vec<&ModelInput> = folded.inputs.iter().filter(|i| i.fold != t).collect();
    let test_inputs = folded.fold(t);
    let outcome = run(
        t,
        TrainJob {
            hyperparameters: hp,
            train,
            validation: Vec::new(),
            evaluation: test_inputs.clone(),
        },
    )?;
    let metrics = evaluate_at(&outcome.eval_scores, &labels_of(&test_inputs), choice.threshold)
        .map_err(|source| CvError::Metrics { fold: t, source })?;

    Ok(CvReport {
        criterion: config.criterion,
        validation,
        pooled_validation,
        test: FoldReport {
            fold: t,
            n_examples: test_inputs.len(),
            metrics,
            per_epoch: outcome.per_epoch,
            backend_info: outcome.backend_info,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ConstantBackend;
    use crate::dataset::{assign_folds, BinaryLabel};

    struct OracleBackend;

    impl ScoringBackend for OracleBackend {
        fn train_and_score(&self, job: &TrainJob<'_>) -> Result<TrainOutcome, BackendError> {
            Ok(TrainOutcome {
                per_epoch: Vec::new(),
                eval_scores: job.evaluation.iter().map(|i| f64::from(i.label.target())).collect(),
                backend_info: "oracle".into(),
            })
        }
    }

    struct Failing;

    impl ScoringBackend for Failing {
        fn train_and_score(&self, _job: &TrainJob<'_>) -> Result<TrainOutcome, BackendError> {
            Err(BackendError::Training("boom".into()))
        }
    }

    fn dataset(n: usize) -> FoldedDataset {
        let labels: Vec<BinaryLabel> = (0..n)
            .map(|i| if i % 3 == 0 { BinaryLabel::NonCompetitive } else { BinaryLabel::Competitive })
            .collect();
        let folds = assign_folds(&labels, 10, 1).unwrap();
        let inputs = labels
            .iter()
            .zip(folds)
            .enumerate()
            .map(|(i, (&label, fold))| ModelInput {
                event_id: format!("e{i}"),
                segment_a: "a".into(),
                segment_b: "b".into(),
                label,
                fold,
                client_is_interrupter: i % 2 == 0,
            })
            .collect();
        FoldedDataset::new(inputs, 10, 9, 1, None).unwrap()
    }

    #[test]
    fn constant_backend_gives_half_auc() {
        let report = cross_validate(&dataset(60), &ConstantBackend(0.5), &CvConfig::default()).unwrap();
        assert_eq!(report.validation.len(), 9);
        assert!(report.validation.iter().all(|f| f.metrics.roc_auc == 0.5));
        assert_eq!(report.test.metrics.roc_auc, 0.5);
        assert_eq!(report.test.fold, 9);
    }

    #[test]
    fn oracle_backend_is_perfect() {
        let report = cross_validate(&dataset(60), &OracleBackend, &CvConfig::default()).unwrap();
        for f in report.validation.iter().chain(std::iter::once(&report.test)) {
            let m = f.metrics;
            assert_eq!(
                (m.roc_auc, m.recall_macro, m.precision_macro, m.balanced_accuracy, m.f1_macro),
                (1.0, 1.0, 1.0, 1.0, 1.0)
            );
        }
        let t = report.test.metrics.best_threshold;
        assert!(t > 0.0 && t <= 1.0);
        let folds: Vec<usize> = report.validation.iter().map(|f| f.fold).collect();
        assert_eq!(folds, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn backend_failure_carries_fold() {
        match cross_validate(&dataset(60), &Failing, &CvConfig::default()) {
            Err(CvError::Backend { fold, .. }) => assert_eq!(fold, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_scores_rejected() {
        match cross_validate(&dataset(60), &ConstantBackend(1.5), &CvConfig::default()) {
            Err(CvError::InvalidScores { fold: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
