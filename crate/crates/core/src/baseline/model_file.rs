//! Line-oriented model file for [`BaselineClassifier`].
//!
//! The first line is a header object; every following line holds one
//! feature in vocabulary order:
//!
//! ```text
//! {"format":"overlapctl-baseline","version":1,"ngram_range":{"lo":1,"hi":2},"min_df":2,"n_documents":120,"n_features":2,"l2_lambda":0.0001,"bias":-0.03,"training_log":[...]}
//! {"feature":"a:алло","df":4,"weight":0.12}
//! {"feature":"b:стоп","df":9,"weight":1.4}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BaselineClassifier, BaselineError, LogRegModel, NgramRange, Vocabulary};

pub const FORMAT: &str = "overlapctl-baseline";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file line {line}: {source}")]
    Decode {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("model file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    ngram_range: NgramRange,
    min_df: u32,
    n_documents: usize,
    n_features: usize,
    l2_lambda: f64,
    bias: f64,
    training_log: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureLine {
    feature: String,
    df: u32,
    weight: f64,
}

fn encode<T: Serialize, W: Write>(w: &mut W, value: &T) -> Result<(), ModelFileError> {
    serde_json::to_writer(&mut *w, value).map_err(|e| ModelFileError::Io(e.into()))?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_model<W: Write>(writer: W, clf: &BaselineClassifier) -> Result<(), ModelFileError> {
    let mut w = BufWriter::new(writer);
    let vocab = &clf.vocabulary;
    if clf.model.n_features() != vocab.len() {
        return Err(BaselineError::DimensionMismatch {
            expected: vocab.len(),
            got: clf.model.n_features(),
        }
        .into());
    }
    encode(
        &mut w,
        &Header {
            format: FORMAT.into(),
            version: VERSION,
            ngram_range: vocab.ngram_range(),
            min_df: vocab.min_df(),
            n_documents: vocab.n_documents(),
            n_features: vocab.len(),
            l2_lambda: clf.model.l2_lambda,
            bias: clf.model.bias(),
            training_log: clf.model.training_log.clone(),
        },
    )?;
    for ((feature, &df), &weight) in vocab
        .features()
        .iter()
        .zip(vocab.document_frequencies())
        .zip(&clf.model.weights)
    {
        encode(
            &mut w,
            &FeatureLine {
                feature: feature.clone(),
                df,
                weight,
            },
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(reader: R) -> Result<BaselineClassifier, ModelFileError> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|source| ModelFileError::Decode { line: 1, source })?,
        None => return Err(ModelFileError::Invalid("empty file".into())),
    };
    if header.format != FORMAT || header.version != VERSION {
        return Err(ModelFileError::Invalid(format!(
            "unsupported format {:?} version {}",
            header.format, header.version
        )));
    }
    let mut features = Vec::with_capacity(header.n_features);
    let mut df = Vec::with_capacity(header.n_features);
    let mut weights = Vec::with_capacity(header.n_features + 1);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: FeatureLine =
            serde_json::from_str(&line).map_err(|source| ModelFileError::Decode { line: i + 1, source })?;
        features.push(f.feature);
        df.push(f.df);
        weights.push(f.weight);
    }
    if features.len() != header.n_features {
        return Err(ModelFileError::Invalid(format!(
            "header declares {} features, file has {}",
            header.n_features,
            features.len()
        )));
    }
    weights.push(header.bias);
    let vocabulary = Vocabulary::from_parts(features, df, header.n_documents, header.ngram_range, header.min_df)?;
    Ok(BaselineClassifier {
        vocabulary,
        model: LogRegModel {
            weights,
            l2_lambda: header.l2_lambda,
            training_log: header.training_log,
        },
    })
}

pub fn save(path: &Path, clf: &BaselineClassifier) -> Result<(), ModelFileError> {
    write_model(File::create(path)?, clf)
}

pub fn load(path: &Path) -> Result<BaselineClassifier, ModelFileError> {
    read_model(File::open(path)?)
}
