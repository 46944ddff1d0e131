//! L2-regularized logistic regression trained by full-batch gradient descent.
//!
//! Objective over `n` examples with weights `w` (bias last, not regularized):
//!
//! ```text
//! L(w) = (1/n) Σ [ softplus(z_i) - y_i z_i ] + (λ/2) Σ_{j<V} w_j²,   z_i = w·x_i + b
//! ```

use serde::{Deserialize, Serialize};

use super::{BaselineError, SparseVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-4,
            learning_rate: 0.1,
            max_epochs: 200,
            tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    /// Feature weights followed by the bias.
    pub weights: Vec<f64>,
    pub l2_lambda: f64,
    pub training_log: Vec<f64>,
}

impl LogRegModel {
    pub fn zeros(n_features: usize, l2_lambda: f64) -> Self {
        Self {
            weights: vec![0.0; n_features + 1],
            l2_lambda,
            training_log: Vec::new(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn bias(&self) -> f64 {
        self.weights[self.weights.len() - 1]
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn score(weights: &[f64], x: &SparseVector) -> f64 {
    let bias = weights[weights.len() - 1];
    bias + x.entries.iter().map(|&(i, v)| weights[i] * v).sum::<f64>()
}

fn check_dim(weights: &[f64], x: &SparseVector) -> Result<(), BaselineError> {
    if x.dim + 1 != weights.len() || x.entries.iter().any(|&(i, _)| i >= x.dim) {
        return Err(BaselineError::DimensionMismatch {
            expected: weights.len() - 1,
            got: x.dim,
        });
    }
    Ok(())
}

/// P(competitive | x).
pub fn predict_proba(model: &LogRegModel, x: &SparseVector) -> Result<f64, BaselineError> {
    check_dim(&model.weights, x)?;
    Ok(sigmoid(score(&model.weights, x)))
}

fn check_data(weights: &[f64], features: &[SparseVector], labels: &[bool]) -> Result<(), BaselineError> {
    if features.len() != labels.len() {
        return Err(BaselineError::Usage(format!(
            "{} feature vectors but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.is_empty() {
        return Err(BaselineError::Usage("no training examples".into()));
    }
    features.iter().try_for_each(|x| check_dim(weights, x))
}

/// Regularized mean negative log-likelihood.
pub fn loss(weights: &[f64], features: &[SparseVector], labels: &[bool], l2_lambda: f64) -> Result<f64, BaselineError> {
    check_data(weights, features, labels)?;
    Ok(loss_unchecked(weights, features, labels, l2_lambda))
}

fn loss_unchecked(weights: &[f64], features: &[SparseVector], labels: &[bool], l2_lambda: f64) -> f64 {
    let n = features.len() as f64;
    let nll: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let z = score(weights, x);
            softplus(z) - if y { z } else { 0.0 }
        })
        .sum();
    let reg: f64 = weights[..weights.len() - 1].iter().map(|w| w * w).sum();
    nll / n + 0.5 * l2_lambda * reg
}

/// Analytic gradient of [`loss`].
pub fn gradient(
    weights: &[f64],
    features: &[SparseVector],
    labels: &[bool],
    l2_lambda: f64,
) -> Result<Vec<f64>, BaselineError> {
    check_data(weights, features, labels)?;
    Ok(gradient_unchecked(weights, features, labels, l2_lambda))
}

fn gradient_unchecked(weights: &[f64], features: &[SparseVector], labels: &[bool], l2_lambda: f64) -> Vec<f64> {
    let n = features.len() as f64;
    let bias_idx = weights.len() - 1;
    let mut grad = vec![0.0; weights.len()];
    for (x, &y) in features.iter().zip(labels) {
        let residual = sigmoid(score(weights, x)) - f64::from(u8::from(y));
        for &(i, v) in &x.entries {
            grad[i] += residual * v;
        }
        grad[bias_idx] += residual;
    }
    for g in &mut grad {
        *g /= n;
    }
    for (g, w) in grad[..bias_idx].iter_mut().zip(&weights[..bias_idx]) {
        *g += l2_lambda * w;
    }
    grad
}

/// Stepwise trainer; [`train_logreg`] drives it to convergence.
#[derive(Debug)]
pub struct LogRegTrainer<'a> {
    features: &'a [SparseVector],
    labels: &'a [bool],
    config: TrainConfig,
    model: LogRegModel,
    last_loss: f64,
    converged: bool,
}

impl<'a> LogRegTrainer<'a> {
    pub fn new(features: &'a [SparseVector], labels: &'a [bool], n_features: usize, config: TrainConfig) -> Result<Self, BaselineError> {
        let model = LogRegModel::zeros(n_features, config.l2_lambda);
        check_data(&model.weights, features, labels)?;
        let positives = labels.iter().filter(|&&y| y).count();
        if positives == 0 || positives == labels.len() {
            return Err(BaselineError::SingleClass(u8::from(labels[0])));
        }
        let last_loss = loss_unchecked(&model.weights, features, labels, config.l2_lambda);
        Ok(Self {
            features,
            labels,
            config,
            model,
            last_loss,
            converged: false,
        })
    }

    pub fn epochs_run(&self) -> usize {
        self.model.training_log.len()
    }

    /// True once the loss improvement fell below `tol` or `max_epochs` ran out.
    pub fn is_done(&self) -> bool {
        self.converged || self.epochs_run() >= self.config.max_epochs
    }

    pub fn model(&self) -> &LogRegModel {
        &self.model
    }

    /// One gradient step; returns the new loss, or `None` when training is done.
    pub fn step(&mut self) -> Option<f64> {
        if self.is_done() {
            return None;
        }
        let lambda = self.config.l2_lambda;
        let grad = gradient_unchecked(&self.model.weights, self.features, self.labels, lambda);
        for (w, g) in self.model.weights.iter_mut().zip(&grad) {
            *w -= self.config.learning_rate * g;
        }
        let current = loss_unchecked(&self.model.weights, self.features, self.labels, lambda);
        self.model.training_log.push(current);
        if self.last_loss - current < self.config.tol {
            self.converged = true;
        }
        self.last_loss = current;
        Some(current)
    }

    pub fn into_model(self) -> LogRegModel {
        self.model
    }
}

pub fn train_logreg(features: &[SparseVector], labels: &[bool], config: &TrainConfig) -> Result<LogRegModel, BaselineError> {
    let dim = features.first().map_or(0, |x| x.dim);
    let mut trainer = LogRegTrainer::new(features, labels, dim, config.clone())?;
    while trainer.step().is_some() {}
    Ok(trainer.into_model())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Vec<f64>, Vec<SparseVector>, Vec<bool>) {
        let weights = (0..=dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let features = (0..n)
            .map(|_| SparseVector::from_dense(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let labels = (0..n).map(|_| rng.random_bool(0.5)).collect();
        (weights, features, labels)
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = LogRegModel::zeros(3, 0.0);
        for x in [SparseVector::zeros(3), SparseVector::from_dense(&[1.0, -2.0, 0.5])] {
            assert_eq!(predict_proba(&m, &x).unwrap(), 0.5);
        }
    }

    #[test]
    fn separable_toy_set_is_fit() {
        let features: Vec<SparseVector> = [1.0, 1.0, -1.0, -1.0].iter().map(|&v| SparseVector::from_dense(&[v])).collect();
        let labels = [true, true, false, false];
        let model = train_logreg(&features, &labels, &TrainConfig::default()).unwrap();
        let accuracy = features
            .iter()
            .zip(labels)
            .filter(|(x, y)| (predict_proba(&model, x).unwrap() >= 0.5) == *y)
            .count();
        assert_eq!(accuracy, 4);
        assert!(model.weights[0] > 0.0);
    }

    #[test]
    fn single_class_rejected() {
        let features = vec![SparseVector::from_dense(&[1.0]); 2];
        assert_eq!(
            train_logreg(&features, &[true, true], &TrainConfig::default()),
            Err(BaselineError::SingleClass(1))
        );
    }

    #[test]
    fn dimension_mismatch() {
        let m = LogRegModel::zeros(3, 0.0);
        assert_eq!(
            predict_proba(&m, &SparseVector::zeros(2)),
            Err(BaselineError::DimensionMismatch { expected: 3, got: 2 })
        );
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, x, y) = random_instance(&mut rng, 8, 5);
        let g = gradient(&w, &x, &y, 0.3).unwrap();
        let h = 1e-5;
        for j in 0..w.len() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[j] += h;
            minus[j] -= h;
            let numeric = (loss(&plus, &x, &y, 0.3).unwrap() - loss(&minus, &x, &y, 0.3).unwrap()) / (2.0 * h);
            let rel = (g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= 1e-5, "component {j}: analytic {} numeric {numeric}", g[j]);
        }
    }

    #[test]
    fn complementary_model_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, xs, _) = random_instance(&mut rng, 20, 4);
        let m = LogRegModel { weights: w.clone(), l2_lambda: 0.0, training_log: Vec::new() };
        let neg = LogRegModel { weights: w.iter().map(|v| -v).collect(), ..m.clone() };
        for x in &xs {
            let s = predict_proba(&m, x).unwrap() + predict_proba(&neg, x).unwrap();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn negated_input_with_zero_bias_is_complementary() {
        let m = LogRegModel { weights: vec![0.7, -1.2, 0.0], l2_lambda: 0.0, training_log: Vec::new() };
        let x = SparseVector::from_dense(&[0.3, 0.9]);
        let s = predict_proba(&m, &x).unwrap() + predict_proba(&m, &x.negated()).unwrap();
        assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn probability_monotone_in_positively_weighted_feature() {
        let m = LogRegModel { weights: vec![0.7, -1.2, 0.1], l2_lambda: 0.0, training_log: Vec::new() };
        let mut prev = 0.0;
        for step in 0..50 {
            let p = predict_proba(&m, &SparseVector::from_dense(&[step as f64 * 0.2 - 5.0, 0.4])).unwrap();
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn loss_is_non_increasing_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (_, x, y) = random_instance(&mut rng, 40, 6);
        let cfg = TrainConfig { max_epochs: 300, tol: 0.0, ..TrainConfig::default() };
        let a = train_logreg(&x, &y, &cfg).unwrap();
        assert!(a.training_log.windows(2).all(|w| w[1] <= w[0]));
        let b = train_logreg(&x, &y, &cfg).unwrap();
        assert_eq!(a.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>(), b.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>());
    }
}
