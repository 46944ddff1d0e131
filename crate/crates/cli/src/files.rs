//! On-disk layouts shared by several subcommands.

use std::collections::HashMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use overlap_core::dataset::{DatasetMeta, DEFAULT_FOLDS, DEFAULT_TEST_FOLD};
use overlap_core::jsonl;
use overlap_core::transcript::{read_audio_manifest, read_turns};
use overlap_core::{Dialogue, FoldedDataset, ModelInput};

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    jsonl::read_file(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    create_parent(path)?;
    jsonl::write_file(path, records).with_context(|| format!("writing {}", path.display()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// `turns.jsonl` → `turns.audio.jsonl`.
pub fn audio_manifest_path(turns: &Path) -> PathBuf {
    turns.with_extension("audio.jsonl")
}

/// `dataset.jsonl` → `dataset.meta.json`.
pub fn meta_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("meta.json")
}

/// Loads a turn file and attaches audio locators from `manifest`, or from the
/// default sidecar when it exists.
pub fn load_dialogues(turns: &Path, manifest: Option<&Path>) -> Result<Vec<Dialogue>> {
    let file = File::open(turns).with_context(|| format!("opening {}", turns.display()))?;
    let mut dialogues = read_turns(file).with_context(|| format!("reading {}", turns.display()))?;
    let sidecar = audio_manifest_path(turns);
    let manifest = match manifest {
        Some(p) => Some(p.to_path_buf()),
        None => sidecar.exists().then_some(sidecar),
    };
    if let Some(path) = manifest {
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let uris: HashMap<String, String> =
            read_audio_manifest(file).with_context(|| format!("reading {}", path.display()))?;
        for d in &mut dialogues {
            d.audio_uri = uris.get(&d.dialogue_id).cloned();
        }
    }
    Ok(dialogues)
}

pub fn write_dataset(path: &Path, dataset: &FoldedDataset, group_by_dialogue: bool) -> Result<()> {
    write_jsonl(path, &dataset.inputs)?;
    write_json_pretty(&meta_path(path), &dataset.meta(group_by_dialogue))
}

/// Reads a dataset and its sidecar. Without a sidecar the fold count defaults
/// to 10 with fold 9 held out.
pub fn read_dataset(path: &Path) -> Result<FoldedDataset> {
    let inputs: Vec<ModelInput> = read_jsonl(path)?;
    let meta_file = meta_path(path);
    let meta: DatasetMeta = if meta_file.exists() {
        let text = fs::read_to_string(&meta_file).with_context(|| format!("reading {}", meta_file.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", meta_file.display()))?
    } else {
        log::warn!(
            "no {} found; assuming {DEFAULT_FOLDS} folds with test fold {DEFAULT_TEST_FOLD}",
            meta_file.display()
        );
        DatasetMeta {
            n_folds: DEFAULT_FOLDS,
            test_fold: DEFAULT_TEST_FOLD,
            seed: 0,
            variant: None,
            group_by_dialogue: false,
        }
    };
    if inputs.is_empty() {
        bail!("{} contains no examples", path.display());
    }
    FoldedDataset::from_meta(inputs, &meta).with_context(|| format!("loading {}", path.display()))
}
