//! Dataset assembly: binary labels, stratified folds and model inputs.
//!
//! Undefined labels are dropped. Folds are stratified per class: the examples
//! of each class are shuffled with a seeded ChaCha generator and dealt
//! round-robin to folds `0..n_folds`, so per-class fold sizes differ by at
//! most one. By default the last fold is held out for testing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Label, LabeledEvent};
use crate::switch::SwitchEvent;
use crate::transcript::Dialogue;

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_TEST_FOLD: usize = 9;
pub const DEFAULT_EXTENSION_WIDTH: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("event `{event_id}` does not belong to dialogue `{dialogue_id}`")]
    EventDialogueMismatch { event_id: String, dialogue_id: String },
    #[error("no dialogue `{dialogue_id}` for event `{event_id}`")]
    MissingDialogue { event_id: String, dialogue_id: String },
    #[error("event `{0}` has an empty interrupter segment")]
    EmptyInterrupterText(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Competitive,
    NonCompetitive,
}

impl BinaryLabel {
    pub fn from_label(label: Label) -> Option<Self> {
        match label {
            Label::Competitive => Some(BinaryLabel::Competitive),
            Label::NonCompetitive => Some(BinaryLabel::NonCompetitive),
            Label::Undefined => None,
        }
    }

    /// Competitive is the positive class.
    pub fn is_positive(self) -> bool {
        self == BinaryLabel::Competitive
    }

    pub fn target(self) -> u8 {
        u8::from(self.is_positive())
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinaryLabel::Competitive => "competitive",
            BinaryLabel::NonCompetitive => "non_competitive",
        })
    }
}

/// How much of the dialogue goes into the two text segments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ContextVariant {
    /// Only the interrupter's phrase, `("", text(K+1))`.
    InterrupterOnly,
    /// `(text(K), text(K+1))`.
    #[default]
    BothSpeakers,
    /// `K-width..=K` joined against `K+1..=K+1+width`.
    Extended { extension_width: usize },
}

impl FromStr for ContextVariant {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interrupter" | "interrupter_only" => Ok(ContextVariant::InterrupterOnly),
            "both" | "both_speakers" => Ok(ContextVariant::BothSpeakers),
            "extended" => Ok(ContextVariant::Extended {
                extension_width: DEFAULT_EXTENSION_WIDTH,
            }),
            other => Err(DatasetError::Config(format!(
                "unknown variant `{other}` (expected interrupter, both or extended)"
            ))),
        }
    }
}

impl fmt::Display for ContextVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextVariant::InterrupterOnly => f.write_str("interrupter_only"),
            ContextVariant::BothSpeakers => f.write_str("both_speakers"),
            ContextVariant::Extended { extension_width } => write!(f, "extended({extension_width})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub event_id: String,
    pub segment_a: String,
    pub segment_b: String,
    pub label: BinaryLabel,
    pub fold: usize,
    pub client_is_interrupter: bool,
}

/// A labeled overlap with undefined removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryExample {
    pub event: SwitchEvent,
    pub label: BinaryLabel,
}

pub fn assemble_dataset(labeled: &[LabeledEvent]) -> Vec<BinaryExample> {
    labeled
        .iter()
        .filter_map(|l| {
            BinaryLabel::from_label(l.label.label).map(|label| BinaryExample {
                event: l.event.clone(),
                label,
            })
        })
        .collect()
}

fn join_texts<'a>(texts: impl Iterator<Item = &'a str>) -> String {
    texts.filter(|t| !t.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Builds `(segment_a, segment_b)` for one event.
pub fn build_model_input(
    event: &SwitchEvent,
    dialogue: &Dialogue,
    variant: ContextVariant,
) -> Result<(String, String), DatasetError> {
    let mismatch = || DatasetError::EventDialogueMismatch {
        event_id: event.event_id.clone(),
        dialogue_id: dialogue.dialogue_id.clone(),
    };
    let k = event.k_index;
    if event.dialogue_id != dialogue.dialogue_id
        || dialogue.turn(k) != Some(&event.turn_k)
        || dialogue.turn(k + 1) != Some(&event.turn_k1)
    {
        return Err(mismatch());
    }
    Ok(match variant {
        ContextVariant::InterrupterOnly => (String::new(), event.turn_k1.text.clone()),
        ContextVariant::BothSpeakers => (event.turn_k.text.clone(), event.turn_k1.text.clone()),
        ContextVariant::Extended { extension_width } => {
            let turns = &dialogue.turns;
            let a = &turns[k.saturating_sub(extension_width)..=k];
            let b_end = (k + 1 + extension_width).min(turns.len() - 1);
            let b = &turns[k + 1..=b_end];
            (
                join_texts(a.iter().map(|t| t.text.as_str())),
                join_texts(b.iter().map(|t| t.text.as_str())),
            )
        }
    })
}

/// Stratified, seeded round-robin fold assignment; returns one fold per label.
pub fn assign_folds(labels: &[BinaryLabel], n_folds: usize, seed: u64) -> Result<Vec<usize>, DatasetError> {
    check_fold_count(labels.len(), n_folds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    for class in [BinaryLabel::Competitive, BinaryLabel::NonCompetitive] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for (pos, idx) in members.into_iter().enumerate() {
            folds[idx] = pos % n_folds;
        }
    }
    Ok(folds)
}

/// Fold assignment that keeps every group (dialogue) inside one fold.
///
/// Groups are shuffled with the seed, then placed largest-first onto the
/// currently smallest fold. Per-class balance is approximate in this mode.
pub fn assign_folds_grouped(groups: &[&str], n_folds: usize, seed: u64) -> Result<Vec<usize>, DatasetError> {
    check_fold_count(groups.len(), n_folds)?;
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for g in groups {
        *sizes.entry(g).or_default() += 1;
    }
    let mut order: Vec<(&str, usize)> = sizes.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|g| std::cmp::Reverse(g.1));

    let mut load = vec![0usize; n_folds];
    let mut fold_of: HashMap<&str, usize> = HashMap::new();
    for (group, size) in order {
        let fold = (0..n_folds).min_by_key(|&f| (load[f], f)).unwrap_or(0);
        load[fold] += size;
        fold_of.insert(group, fold);
    }
    Ok(groups.iter().map(|g| fold_of[g]).collect())
}

fn check_fold_count(n_items: usize, n_folds: usize) -> Result<(), DatasetError> {
    if n_folds < 2 {
        return Err(DatasetError::Config(format!("n_folds must be at least 2, got {n_folds}")));
    }
    if n_items == 0 {
        return Err(DatasetError::Config("dataset is empty".into()));
    }
    if n_folds > n_items {
        return Err(DatasetError::Config(format!(
            "n_folds ({n_folds}) exceeds dataset size ({n_items})"
        )));
    }
    Ok(())
}

/// Sidecar metadata describing how a dataset file was built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_folds: usize,
    pub test_fold: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<ContextVariant>,
    #[serde(default)]
    pub group_by_dialogue: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldedDataset {
    pub inputs: Vec<ModelInput>,
    pub n_folds: usize,
    pub test_fold: usize,
    pub seed: u64,
    pub variant: Option<ContextVariant>,
}

impl FoldedDataset {
    pub fn new(
        inputs: Vec<ModelInput>,
        n_folds: usize,
        test_fold: usize,
        seed: u64,
        variant: Option<ContextVariant>,
    ) -> Result<Self, DatasetError> {
        if n_folds < 2 {
            return Err(DatasetError::Config(format!("n_folds must be at least 2, got {n_folds}")));
        }
        if test_fold >= n_folds {
            return Err(DatasetError::Config(format!(
                "test_fold {test_fold} out of range for {n_folds} folds"
            )));
        }
        if let Some(bad) = inputs.iter().find(|i| i.fold >= n_folds) {
            return Err(DatasetError::Config(format!(
                "event `{}` has fold {} but only {n_folds} folds exist",
                bad.event_id, bad.fold
            )));
        }
        if let Some(bad) = inputs.iter().find(|i| i.segment_b.is_empty()) {
            return Err(DatasetError::EmptyInterrupterText(bad.event_id.clone()));
        }
        Ok(Self {
            inputs,
            n_folds,
            test_fold,
            seed,
            variant,
        })
    }

    pub fn from_meta(inputs: Vec<ModelInput>, meta: &DatasetMeta) -> Result<Self, DatasetError> {
        Self::new(inputs, meta.n_folds, meta.test_fold, meta.seed, meta.variant)
    }

    pub fn fold(&self, fold: usize) -> Vec<&ModelInput> {
        self.inputs.iter().filter(|i| i.fold == fold).collect()
    }

    /// Cross-validation folds, i.e. every fold except the test fold.
    pub fn validation_folds(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_folds).filter(move |&f| f != self.test_fold)
    }

    /// `count[fold][class]` with class 0 = competitive, 1 = non-competitive.
    pub fn class_counts(&self) -> Vec<[usize; 2]> {
        let mut counts = vec![[0usize; 2]; self.n_folds];
        for i in &self.inputs {
            counts[i.fold][usize::from(!i.label.is_positive())] += 1;
        }
        counts
    }

    pub fn meta(&self, group_by_dialogue: bool) -> DatasetMeta {
        DatasetMeta {
            n_folds: self.n_folds,
            test_fold: self.test_fold,
            seed: self.seed,
            variant: self.variant,
            group_by_dialogue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetConfig {
    pub variant: ContextVariant,
    pub n_folds: usize,
    pub test_fold: usize,
    pub seed: u64,
    pub group_by_dialogue: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            variant: ContextVariant::BothSpeakers,
            n_folds: DEFAULT_FOLDS,
            test_fold: DEFAULT_TEST_FOLD,
            seed: 0,
            group_by_dialogue: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltDataset {
    pub dataset: FoldedDataset,
    /// Events dropped because the interrupter segment came out empty.
    pub skipped: Vec<String>,
}

/// Labeled events + dialogues → folded model inputs.
pub fn build_dataset(
    labeled: &[LabeledEvent],
    dialogues: &[Dialogue],
    config: &DatasetConfig,
) -> Result<BuiltDataset, DatasetError> {
    let by_id: HashMap<&str, &Dialogue> = dialogues.iter().map(|d| (d.dialogue_id.as_str(), d)).collect();
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for ex in assemble_dataset(labeled) {
        let dialogue = by_id
            .get(ex.event.dialogue_id.as_str())
            .ok_or_else(|| DatasetError::MissingDialogue {
                event_id: ex.event.event_id.clone(),
                dialogue_id: ex.event.dialogue_id.clone(),
            })?;
        let (segment_a, segment_b) = build_model_input(&ex.event, dialogue, config.variant)?;
        if segment_b.is_empty() {
            log::warn!("skipping event {}: empty interrupter text", ex.event.event_id);
            skipped.push(ex.event.event_id.clone());
            continue;
        }
        examples.push((ex, segment_a, segment_b));
    }

    let folds = if config.group_by_dialogue {
        let groups: Vec<&str> = examples.iter().map(|(e, _, _)| e.event.dialogue_id.as_str()).collect();
        assign_folds_grouped(&groups, config.n_folds, config.seed)?
    } else {
        let labels: Vec<BinaryLabel> = examples.iter().map(|(e, _, _)| e.label).collect();
        assign_folds(&labels, config.n_folds, config.seed)?
    };

    let inputs = examples
        .into_iter()
        .zip(folds)
        .map(|((ex, segment_a, segment_b), fold)| ModelInput {
            event_id: ex.event.event_id.clone(),
            segment_a,
            segment_b,
            label: ex.label,
            fold,
            client_is_interrupter: ex.event.client_is_interrupter.unwrap_or(false),
        })
        .collect();
    Ok(BuiltDataset {
        dataset: FoldedDataset::new(
            inputs,
            config.n_folds,
            config.test_fold,
            config.seed,
            Some(config.variant),
        )?,
        skipped,
    })
}
