//! Bag-of-n-grams + logistic regression baseline.
//!
//! N-grams are extracted separately from the two segments and prefixed with
//! their role (`a:` for the interrupted speaker, `b:` for the interrupter), so
//! the same word carries different weight depending on who said it. Features
//! are tf-idf weighted with smoothed idf `ln((1 + N) / (1 + df)) + 1` and
//! L2-normalized.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod backend;
mod logreg;
pub mod model_file;

pub use backend::BaselineBackend;
pub use logreg::{gradient, loss, predict_proba, sigmoid, train_logreg, LogRegModel, LogRegTrainer, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("vector has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training requires both classes; got only label {0}")]
    SingleClass(u8),
}

/// Lowercases and splits on every run of characters that are neither letters nor digits.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered: String = text.chars().flat_map(char::to_lowercase).collect();
    lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramRange {
    pub lo: usize,
    pub hi: usize,
}

impl NgramRange {
    pub fn new(lo: usize, hi: usize) -> Result<Self, BaselineError> {
        if lo == 0 || lo > hi {
            return Err(BaselineError::Usage(format!("invalid n-gram range ({lo}, {hi})")));
        }
        Ok(Self { lo, hi })
    }
}

impl Default for NgramRange {
    fn default() -> Self {
        Self { lo: 1, hi: 2 }
    }
}

fn push_ngrams(prefix: &str, text: &str, range: NgramRange, out: &mut Vec<String>) {
    let tokens = tokenize(text);
    for n in range.lo..=range.hi {
        for window in tokens.windows(n) {
            out.push(format!("{prefix}:{}", window.join(" ")));
        }
    }
}

/// Role-prefixed n-grams of a two-segment document, with repetitions.
pub fn document_ngrams(segment_a: &str, segment_b: &str, range: NgramRange) -> Vec<String> {
    let mut out = Vec::new();
    push_ngrams("a", segment_a, range, &mut out);
    push_ngrams("b", segment_b, range, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    features: Vec<String>,
    df: Vec<u32>,
    n_documents: usize,
    ngram_range: NgramRange,
    min_df: u32,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from stored parts; features must be sorted and unique.
    pub fn from_parts(
        features: Vec<String>,
        df: Vec<u32>,
        n_documents: usize,
        ngram_range: NgramRange,
        min_df: u32,
    ) -> Result<Self, BaselineError> {
        if features.len() != df.len() {
            return Err(BaselineError::Usage("feature and df lengths differ".into()));
        }
        if features.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BaselineError::Usage("features must be strictly increasing".into()));
        }
        let index = features.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
        Ok(Self {
            features,
            df,
            n_documents,
            ngram_range,
            min_df,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, ngram: &str) -> Option<usize> {
        self.index.get(ngram).copied()
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn document_frequencies(&self) -> &[u32] {
        &self.df
    }

    pub fn n_documents(&self) -> usize {
        self.n_documents
    }

    pub fn ngram_range(&self) -> NgramRange {
        self.ngram_range
    }

    pub fn min_df(&self) -> u32 {
        self.min_df
    }

    pub fn idf(&self, feature: usize) -> f64 {
        let n = self.n_documents as f64;
        ((1.0 + n) / (1.0 + f64::from(self.df[feature]))).ln() + 1.0
    }
}

/// Fits the n-gram vocabulary; features are indexed in lexicographic order.
pub fn fit_vocabulary<A, B>(
    corpus: &[(A, B)],
    ngram_range: NgramRange,
    min_df: u32,
) -> Result<Vocabulary, BaselineError>
where
    A: AsRef<str>,
    B: AsRef<str>,
{
    if corpus.is_empty() {
        return Err(BaselineError::Usage("cannot fit a vocabulary on an empty corpus".into()));
    }
    let mut df: BTreeMap<String, u32> = BTreeMap::new();
    for (a, b) in corpus {
        let unique: BTreeSet<String> = document_ngrams(a.as_ref(), b.as_ref(), ngram_range).into_iter().collect();
        for g in unique {
            *df.entry(g).or_default() += 1;
        }
    }
    let (features, counts): (Vec<String>, Vec<u32>) = df.into_iter().filter(|(_, c)| *c >= min_df).unzip();
    Vocabulary::from_parts(features, counts, corpus.len(), ngram_range, min_df)
}

/// Sparse vector with indices strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        Self {
            dim: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn negated(&self) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|&(i, v)| (i, -v)).collect(),
        }
    }
}

/// Tf-idf weighting followed by L2 normalization; unknown n-grams are ignored.
pub fn featurize(segment_a: &str, segment_b: &str, vocab: &Vocabulary) -> SparseVector {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for g in document_ngrams(segment_a, segment_b, vocab.ngram_range) {
        if let Some(i) = vocab.index_of(&g) {
            *counts.entry(i).or_default() += 1.0;
        }
    }
    let mut entries: Vec<(usize, f64)> = counts.into_iter().map(|(i, tf)| (i, tf * vocab.idf(i))).collect();
    let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for e in &mut entries {
            e.1 /= norm;
        }
    }
    SparseVector {
        dim: vocab.len(),
        entries,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub ngram_range: NgramRange,
    pub min_df: u32,
    pub train: TrainConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            ngram_range: NgramRange::default(),
            min_df: 2,
            train: TrainConfig::default(),
        }
    }
}

/// A fitted vocabulary together with its trained weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineClassifier {
    pub vocabulary: Vocabulary,
    pub model: LogRegModel,
}

impl BaselineClassifier {
    pub fn fit<'a, I>(examples: I, config: &BaselineConfig) -> Result<Self, BaselineError>
    where
        I: IntoIterator<Item = (&'a str, &'a str, bool)>,
    {
        let examples: Vec<(&str, &str, bool)> = examples.into_iter().collect();
        let corpus: Vec<(&str, &str)> = examples.iter().map(|(a, b, _)| (*a, *b)).collect();
        let vocabulary = fit_vocabulary(&corpus, config.ngram_range, config.min_df)?;
        let features: Vec<SparseVector> = corpus.iter().map(|(a, b)| featurize(a, b, &vocabulary)).collect();
        let labels: Vec<bool> = examples.iter().map(|e| e.2).collect();
        let model = train_logreg(&features, &labels, &config.train)?;
        Ok(Self { vocabulary, model })
    }

    /// P(competitive) for one two-segment input.
    pub fn score(&self, segment_a: &str, segment_b: &str) -> f64 {
        let x = featurize(segment_a, segment_b, &self.vocabulary);
        predict_proba(&self.model, &x).expect("featurize matches vocabulary dimension")
    }
}
