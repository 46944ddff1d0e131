//! Line-delimited JSON helpers shared by every on-disk record format.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Decode {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("encode error: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Reads one record per non-blank line.
pub fn read_records<T: DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|source| JsonlError::Decode { line: i + 1, source })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_file<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    read_records(File::open(path)?)
}

pub fn write_records<'a, T, W, I>(writer: W, records: I) -> Result<(), JsonlError>
where
    T: Serialize + 'a,
    W: Write,
    I: IntoIterator<Item = &'a T>,
{
    let mut w = BufWriter::new(writer);
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_file<'a, T, I>(path: impl AsRef<Path>, records: I) -> Result<(), JsonlError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    write_records(File::create(path)?, records)
}

/// Serializes records to an in-memory buffer; handy for byte-level comparisons.
pub fn to_bytes<'a, T, I>(records: I) -> Result<Vec<u8>, JsonlError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    Ok(buf)
}
