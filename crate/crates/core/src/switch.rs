//! Speaker-switch classification and overlap filtration.
//!
//! Every pair of consecutive turns `(K, K+1)` in a dialogue becomes one
//! [`SwitchEvent`]:
//!
//! * same channel on both sides: `continuation` (a VAD split, never an overlap);
//! * `K+1` starts strictly before `K` ends: `overlap`;
//! * otherwise: `gap` (a start exactly at the previous end is a gap).
//!
//! An overlap is successful when `K` ends strictly before `K+1` ends, i.e. the
//! interrupter holds the floor afterwards; equal ends count as unsuccessful.
//! Its duration runs from the start of `K+1` until the first of the two
//! speakers stops.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transcript::{Channel, Dialogue, Turn};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SwitchError {
    #[error("turns are not consecutive: K has index {k}, K+1 has index {k1}")]
    NonConsecutive { k: usize, k1: usize },
    #[error("turns belong to different dialogues: `{0}` and `{1}`")]
    DialogueMismatch(String, String),
    #[error("invalid filter configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchKind {
    Gap,
    Overlap,
    Continuation,
}

impl fmt::Display for SwitchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwitchKind::Gap => "gap",
            SwitchKind::Overlap => "overlap",
            SwitchKind::Continuation => "continuation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub event_id: String,
    pub dialogue_id: String,
    pub k_index: usize,
    pub turn_k: Turn,
    pub turn_k1: Turn,
    pub kind: SwitchKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub successful: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_duration_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_is_interrupter: Option<bool>,
}

impl SwitchEvent {
    pub fn is_overlap(&self) -> bool {
        self.kind == SwitchKind::Overlap
    }

    /// Channel of the speaker who starts talking in turn K+1.
    pub fn interrupter(&self) -> Channel {
        self.turn_k1.channel
    }
}

/// Stable identifier for the switch after turn `k_index` of a dialogue.
///
/// Derived from content only, so re-running the pipeline on the same
/// transcripts reproduces the ids that stored labels point at.
pub fn event_id(dialogue_id: &str, k_index: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(dialogue_id.as_bytes());
    hasher.update([0u8]);
    hasher.update((k_index as u64).to_le_bytes());
    let digest = hasher.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn classify_switch(turn_k: &Turn, turn_k1: &Turn) -> Result<SwitchEvent, SwitchError> {
    if turn_k.dialogue_id != turn_k1.dialogue_id {
        return Err(SwitchError::DialogueMismatch(
            turn_k.dialogue_id.clone(),
            turn_k1.dialogue_id.clone(),
        ));
    }
    if turn_k.turn_index.checked_add(1) != Some(turn_k1.turn_index) {
        return Err(SwitchError::NonConsecutive {
            k: turn_k.turn_index,
            k1: turn_k1.turn_index,
        });
    }

    let kind = if turn_k.channel == turn_k1.channel {
        SwitchKind::Continuation
    } else if turn_k1.start_ms < turn_k.end_ms {
        SwitchKind::Overlap
    } else {
        SwitchKind::Gap
    };

    let (successful, overlap_duration_ms, client_is_interrupter) = if kind == SwitchKind::Overlap {
        (
            Some(turn_k.end_ms < turn_k1.end_ms),
            Some(turn_k.end_ms.min(turn_k1.end_ms) - turn_k1.start_ms),
            Some(turn_k1.channel == Channel::Client),
        )
    } else {
        (None, None, None)
    };

    Ok(SwitchEvent {
        event_id: event_id(&turn_k.dialogue_id, turn_k.turn_index),
        dialogue_id: turn_k.dialogue_id.clone(),
        k_index: turn_k.turn_index,
        turn_k: turn_k.clone(),
        turn_k1: turn_k1.clone(),
        kind,
        successful,
        overlap_duration_ms,
        client_is_interrupter,
    })
}

/// One event per consecutive turn pair; fewer than two turns yield none.
pub fn build_turn_pairs(dialogue: &Dialogue) -> Result<Vec<SwitchEvent>, SwitchError> {
    dialogue
        .turns
        .windows(2)
        .map(|w| classify_switch(&w[0], &w[1]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_overlap_ms: u64,
    pub require_successful: bool,
    pub roles_kept: BTreeSet<Channel>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_overlap_ms: 1000,
            require_successful: true,
            roles_kept: [Channel::Agent, Channel::Client].into_iter().collect(),
        }
    }
}

impl FilterConfig {
    pub fn new(
        min_overlap_ms: u64,
        require_successful: bool,
        roles_kept: impl IntoIterator<Item = Channel>,
    ) -> Result<Self, SwitchError> {
        let cfg = Self {
            min_overlap_ms,
            require_successful,
            roles_kept: roles_kept.into_iter().collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SwitchError> {
        if self.min_overlap_ms < 1 {
            return Err(SwitchError::Config("min_overlap_ms must be at least 1".into()));
        }
        if self.roles_kept.is_empty() {
            return Err(SwitchError::Config("roles_kept must not be empty".into()));
        }
        Ok(())
    }

    pub fn keeps(&self, event: &SwitchEvent) -> bool {
        event.kind == SwitchKind::Overlap
            && (!self.require_successful || event.successful == Some(true))
            && event.overlap_duration_ms.is_some_and(|d| d >= self.min_overlap_ms)
            && self.roles_kept.contains(&event.interrupter())
    }
}

/// Keeps the overlap candidates worth labeling, preserving order.
pub fn filter_overlaps(events: &[SwitchEvent], config: &FilterConfig) -> Vec<SwitchEvent> {
    events.iter().filter(|e| config.keeps(e)).cloned().collect()
}
