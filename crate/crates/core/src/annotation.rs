//! Annotation queue and durable label log.
//!
//! Candidates are kept in insertion order. Labels are appended to a
//! line-delimited log (`{event_id, label, annotator_id, labeled_at}` per line)
//! and replayed at startup with last-write-wins per event id. One label per
//! event is current; the annotator id is stored but no agreement statistics
//! are computed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::switch::SwitchEvent;
use crate::transcript::{Dialogue, Turn};

/// Turns shown on each side of a candidate pair.
pub const CONTEXT_WIDTH: usize = 8;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown event `{0}`")]
    NotFound(String),
    #[error("invalid label `{0}` (expected competitive, non_competitive or undefined)")]
    InvalidLabel(String),
    #[error("label log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("label log i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Competitive,
    NonCompetitive,
    Undefined,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Competitive, Label::NonCompetitive, Label::Undefined];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Competitive => "competitive",
            Label::NonCompetitive => "non_competitive",
            Label::Undefined => "undefined",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = AnnotationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "competitive" => Ok(Label::Competitive),
            "non_competitive" => Ok(Label::NonCompetitive),
            "undefined" => Ok(Label::Undefined),
            other => Err(AnnotationError::InvalidLabel(other.to_string())),
        }
    }
}

/// One line of the label log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledOverlap {
    pub event_id: String,
    pub label: Label,
    pub annotator_id: String,
    pub labeled_at: DateTime<Utc>,
}

/// Exported record: the latest label joined with its event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledEvent {
    #[serde(flatten)]
    pub label: LabeledOverlap,
    pub event: SwitchEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryStatus {
    Unlabeled,
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationQueueEntry {
    pub event: SwitchEvent,
    /// Up to [`CONTEXT_WIDTH`] turns before K and after K+1, in dialogue order.
    pub context_turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_clip_uri: Option<String>,
    pub status: EntryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabeledOverlap>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub unlabeled: usize,
    pub competitive: usize,
    pub non_competitive: usize,
    pub undefined: usize,
}

impl Progress {
    pub fn total(&self) -> usize {
        self.unlabeled + self.competitive + self.non_competitive + self.undefined
    }
}

/// Context window around an event: turns `K-width..K` and `K+2..=K+1+width`.
pub fn context_turns(event: &SwitchEvent, dialogue: &Dialogue, width: usize) -> Vec<Turn> {
    let k = event.k_index;
    let before = k.saturating_sub(width)..k;
    let after = (k + 2)..(k + 2 + width).min(dialogue.turns.len());
    dialogue
        .turns
        .get(before)
        .into_iter()
        .flatten()
        .chain(dialogue.turns.get(after).into_iter().flatten())
        .cloned()
        .collect()
}

/// Media-fragment locator (`#t=start,end` in seconds) for the overlapped span.
pub fn audio_clip_uri(audio_uri: &str, event: &SwitchEvent) -> String {
    let start = event.turn_k1.start_ms;
    let end = event.turn_k.end_ms.max(event.turn_k1.end_ms);
    format!("{audio_uri}#t={:.3},{:.3}", start as f64 / 1000.0, end as f64 / 1000.0)
}

/// In-memory queue plus optional append-only label log.
#[derive(Debug, Default)]
pub struct LabelStore {
    entries: Vec<AnnotationQueueEntry>,
    by_id: HashMap<String, usize>,
    dialogues: HashMap<String, Dialogue>,
    log: Option<LogWriter>,
}

#[derive(Debug)]
struct LogWriter {
    path: PathBuf,
    file: File,
}

impl LabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the queue from filtered events, then replays and attaches the label log.
    ///
    /// Log records whose event is not queued are skipped; their count is returned.
    pub fn open(
        events: &[SwitchEvent],
        dialogues: Vec<Dialogue>,
        log_path: impl AsRef<Path>,
    ) -> Result<(Self, usize), AnnotationError> {
        let mut store = Self::new();
        store.register_dialogues(dialogues);
        store.enqueue_candidates(events);
        let orphaned = store.replay_log(log_path.as_ref())?;
        store.attach_log(log_path)?;
        Ok((store, orphaned))
    }

    /// Dialogues supply context turns and audio locators for later enqueues.
    pub fn register_dialogues(&mut self, dialogues: impl IntoIterator<Item = Dialogue>) {
        for d in dialogues {
            self.dialogues.insert(d.dialogue_id.clone(), d);
        }
    }

    pub fn attach_log(&mut self, path: impl AsRef<Path>) -> Result<(), AnnotationError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        self.log = Some(LogWriter { path, file });
        Ok(())
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_ref().map(|l| l.path.as_path())
    }

    /// Applies every record of an existing log, last write wins. A missing file is empty.
    pub fn replay_log(&mut self, path: &Path) -> Result<usize, AnnotationError> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(e.into()),
        };
        let mut orphaned = 0;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: LabeledOverlap = serde_json::from_str(&line).map_err(|e| {
                AnnotationError::CorruptLog {
                    line: i + 1,
                    message: e.to_string(),
                }
            })?;
            match self.by_id.get(&record.event_id) {
                Some(&idx) => self.apply(idx, record),
                None => orphaned += 1,
            }
        }
        Ok(orphaned)
    }

    /// Adds each unseen event as an unlabeled entry; returns how many were new.
    pub fn enqueue_candidates(&mut self, events: &[SwitchEvent]) -> usize {
        let mut added = 0;
        for event in events {
            if self.by_id.contains_key(&event.event_id) {
                continue;
            }
            let (context, audio) = match self.dialogues.get(&event.dialogue_id) {
                Some(d) => (
                    context_turns(event, d, CONTEXT_WIDTH),
                    d.audio_uri.as_deref().map(|uri| audio_clip_uri(uri, event)),
                ),
                None => (Vec::new(), None),
            };
            self.by_id.insert(event.event_id.clone(), self.entries.len());
            self.entries.push(AnnotationQueueEntry {
                event: event.clone(),
                context_turns: context,
                audio_clip_uri: audio,
                status: EntryStatus::Unlabeled,
                label: None,
            });
            added += 1;
        }
        added
    }

    /// Oldest unlabeled entry by insertion order.
    pub fn next_unlabeled(&self) -> Option<&AnnotationQueueEntry> {
        self.entries.iter().find(|e| e.status == EntryStatus::Unlabeled)
    }

    pub fn entry(&self, event_id: &str) -> Option<&AnnotationQueueEntry> {
        self.by_id.get(event_id).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn submit_label(
        &mut self,
        event_id: &str,
        label: Label,
        annotator_id: &str,
    ) -> Result<LabeledOverlap, AnnotationError> {
        self.submit_label_at(event_id, label, annotator_id, Utc::now())
    }

    /// Like [`submit_label`](Self::submit_label) with an explicit timestamp.
    pub fn submit_label_at(
        &mut self,
        event_id: &str,
        label: Label,
        annotator_id: &str,
        labeled_at: DateTime<Utc>,
    ) -> Result<LabeledOverlap, AnnotationError> {
        let idx = *self
            .by_id
            .get(event_id)
            .ok_or_else(|| AnnotationError::NotFound(event_id.to_string()))?;
        let record = LabeledOverlap {
            event_id: event_id.to_string(),
            label,
            annotator_id: annotator_id.to_string(),
            labeled_at,
        };
        if let Some(log) = self.log.as_mut() {
            let mut line = serde_json::to_vec(&record).map_err(io::Error::other)?;
            line.push(b'\n');
            log.file.write_all(&line)?;
            log.file.flush()?;
        }
        self.apply(idx, record.clone());
        Ok(record)
    }

    fn apply(&mut self, idx: usize, record: LabeledOverlap) {
        let entry = &mut self.entries[idx];
        entry.status = EntryStatus::Labeled;
        entry.label = Some(record);
    }

    /// Latest label per labeled entry, sorted by event id.
    pub fn export_labels(&self) -> Vec<LabeledEvent> {
        let sorted: BTreeMap<&str, &AnnotationQueueEntry> = self
            .entries
            .iter()
            .filter(|e| e.status == EntryStatus::Labeled)
            .map(|e| (e.event.event_id.as_str(), e))
            .collect();
        sorted
            .into_values()
            .filter_map(|e| {
                e.label.as_ref().map(|l| LabeledEvent {
                    label: l.clone(),
                    event: e.event.clone(),
                })
            })
            .collect()
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress::default();
        for entry in &self.entries {
            match entry.label.as_ref().map(|l| l.label) {
                None => p.unlabeled += 1,
                Some(Label::Competitive) => p.competitive += 1,
                Some(Label::NonCompetitive) => p.non_competitive += 1,
                Some(Label::Undefined) => p.undefined += 1,
            }
        }
        p
    }
}
