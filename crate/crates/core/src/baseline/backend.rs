use super::{featurize, fit_vocabulary, predict_proba, BaselineConfig, LogRegTrainer, SparseVector, Vocabulary};
use crate::backend::{BackendError, EpochMetrics, ScoringBackend, TrainJob, TrainOutcome};
use crate::dataset::ModelInput;
use crate::metrics::roc_auc;

/// Runs the baseline classifier behind the [`ScoringBackend`] interface.
///
/// Gradient-descent iterations are split into as many checkpoints as the
/// requested epochs; validation loss and ROC AUC are reported at each one.
#[derive(Debug, Clone, Default)]
pub struct BaselineBackend {
    pub config: BaselineConfig,
    /// Use the request's learning rate instead of `config.train.learning_rate`.
    pub use_request_learning_rate: bool,
}

impl BaselineBackend {
    pub fn new(config: BaselineConfig) -> Self {
        Self {
            config,
            use_request_learning_rate: false,
        }
    }
}

fn vectors(inputs: &[&ModelInput], vocab: &Vocabulary) -> Vec<SparseVector> {
    inputs.iter().map(|i| featurize(&i.segment_a, &i.segment_b, vocab)).collect()
}

fn mean_nll(probs: &[f64], labels: &[bool]) -> f64 {
    let eps = 1e-15;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

impl ScoringBackend for BaselineBackend {
    fn train_and_score(&self, job: &TrainJob<'_>) -> Result<TrainOutcome, BackendError> {
        let hp = job.hyperparameters;
        let mut train_cfg = self.config.train.clone();
        if self.use_request_learning_rate {
            train_cfg.learning_rate = hp.learning_rate;
        }
        let corpus: Vec<(&str, &str)> = job
            .train
            .iter()
            .map(|i| (i.segment_a.as_str(), i.segment_b.as_str()))
            .collect();
        let vocab = fit_vocabulary(&corpus, self.config.ngram_range, self.config.min_df)
            .map_err(|e| BackendError::Training(e.to_string()))?;
        let train_x = vectors(&job.train, &vocab);
        let train_y: Vec<bool> = job.train.iter().map(|i| i.label.is_positive()).collect();
        let val_x = vectors(&job.validation, &vocab);
        let val_y: Vec<bool> = job.validation.iter().map(|i| i.label.is_positive()).collect();

        let max_epochs = train_cfg.max_epochs;
        let mut trainer = LogRegTrainer::new(&train_x, &train_y, vocab.len(), train_cfg.clone())
            .map_err(|e| BackendError::Training(e.to_string()))?;

        let checkpoints = hp.epochs.max(1) as usize;
        let mut per_epoch = Vec::with_capacity(checkpoints);
        for epoch in 1..=checkpoints {
            let target = (max_epochs * epoch).div_ceil(checkpoints);
            while trainer.epochs_run() < target && trainer.step().is_some() {}
            let (val_loss, val_roc_auc) = if val_x.is_empty() {
                (None, None)
            } else {
                let probs: Vec<f64> = val_x
                    .iter()
                    .map(|x| predict_proba(trainer.model(), x))
                    .collect::<Result<_, _>>()
                    .map_err(|e| BackendError::Training(e.to_string()))?;
                (Some(mean_nll(&probs, &val_y)), roc_auc(&probs, &val_y).ok())
            };
            per_epoch.push(EpochMetrics {
                epoch: epoch as u32,
                val_loss,
                val_roc_auc,
            });
        }

        let model = trainer.into_model();
        let eval_scores = job
            .evaluation
            .iter()
            .map(|i| predict_proba(&model, &featurize(&i.segment_a, &i.segment_b, &vocab)))
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| BackendError::Training(e.to_string()))?;

        Ok(TrainOutcome {
            per_epoch,
            eval_scores,
            backend_info: format!(
                "baseline logreg: ngrams {}-{}, min_df {}, lr {}, l2 {}, {} of {} iterations, {} features",
                self.config.ngram_range.lo,
                self.config.ngram_range.hi,
                self.config.min_df,
                train_cfg.learning_rate,
                train_cfg.l2_lambda,
                model.training_log.len(),
                max_epochs,
                vocab.len()
            ),
        })
    }
}
