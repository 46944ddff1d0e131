//! Synthetic dual-channel call corpus with known interruption labels.
//!
//! Dialogues alternate channels. Each speaker switch is an overlap with
//! probability `overlap_rate` (always successful and at least 1.1 s long)
//! and a gap otherwise. A competitive overlap's interrupter turn is built
//! from the competitive marker lexicon, a cooperative one from the
//! cooperative lexicon; every marker token is replaced by a token from the
//! opposite lexicon with probability `noise_rate`. All other turns use the
//! neutral lexicon only.
//!
//! Default lexicons live in `data/lexicon/*.txt` and can be replaced at run
//! time with [`SynthSpec::load_lexicon_dir`].

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use chrono::DateTime;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Label, LabeledEvent, LabeledOverlap};
use crate::baseline::tokenize;
use crate::jsonl::{self, JsonlError};
use crate::switch::{event_id, SwitchEvent};
use crate::transcript::{Channel, Dialogue, IngestError, Turn};

const COMPETITIVE_LEXICON: &str = include_str!("../data/lexicon/competitive.txt");
const COOPERATIVE_LEXICON: &str = include_str!("../data/lexicon/cooperative.txt");
const NEUTRAL_LEXICON: &str = include_str!("../data/lexicon/neutral.txt");

pub const TRANSCRIPTS_FILE: &str = "transcripts.csv";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const TRUTH_ANNOTATOR: &str = "ground-truth";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("synth i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// One token per non-empty line; `#` starts a comment line.
pub fn parse_lexicon(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

fn default_turns() -> (usize, usize) {
    (20, 40)
}
fn default_overlap_rate() -> f64 {
    0.3
}
fn default_competitive_rate() -> f64 {
    0.5
}
fn default_competitive() -> Vec<String> {
    parse_lexicon(COMPETITIVE_LEXICON)
}
fn default_cooperative() -> Vec<String> {
    parse_lexicon(COOPERATIVE_LEXICON)
}
fn default_neutral() -> Vec<String> {
    parse_lexicon(NEUTRAL_LEXICON)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_dialogues: usize,
    /// Inclusive range of turns per dialogue.
    #[serde(default = "default_turns")]
    pub turns_per_dialogue: (usize, usize),
    /// Probability that a speaker switch is an overlap.
    #[serde(default = "default_overlap_rate")]
    pub overlap_rate: f64,
    /// Probability that an overlap is competitive.
    #[serde(default = "default_competitive_rate")]
    pub competitive_rate: f64,
    #[serde(default = "default_competitive")]
    pub competitive_marker_lexicon: Vec<String>,
    #[serde(default = "default_cooperative")]
    pub cooperative_marker_lexicon: Vec<String>,
    #[serde(default = "default_neutral")]
    pub neutral_lexicon: Vec<String>,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n_dialogues: usize, seed: u64) -> Self {
        Self {
            n_dialogues,
            turns_per_dialogue: default_turns(),
            overlap_rate: default_overlap_rate(),
            competitive_rate: default_competitive_rate(),
            competitive_marker_lexicon: default_competitive(),
            cooperative_marker_lexicon: default_cooperative(),
            neutral_lexicon: default_neutral(),
            noise_rate: 0.0,
            seed,
        }
    }

    pub fn with_noise(mut self, noise_rate: f64) -> Self {
        self.noise_rate = noise_rate;
        self
    }

    /// Replaces lexicons with `competitive.txt`, `cooperative.txt` and
    /// `neutral.txt` from `dir`, for each file that exists.
    pub fn load_lexicon_dir(&mut self, dir: &Path) -> Result<(), SynthError> {
        for (file, slot) in [
            ("competitive.txt", &mut self.competitive_marker_lexicon),
            ("cooperative.txt", &mut self.cooperative_marker_lexicon),
            ("neutral.txt", &mut self.neutral_lexicon),
        ] {
            let path = dir.join(file);
            if path.exists() {
                *slot = parse_lexicon(&fs::read_to_string(path)?);
            }
        }
        Ok(())
    }

    /// Reads a spec from TOML (`.toml`) or JSON (anything else) and validates it.
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path)?;
        let spec: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| SynthError::Spec(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| SynthError::Spec(e.to_string()))?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n_dialogues == 0 {
            return bad("n_dialogues must be positive".into());
        }
        let (lo, hi) = self.turns_per_dialogue;
        if lo < 2 || lo > hi {
            return bad(format!("turns_per_dialogue ({lo}, {hi}) must satisfy 2 <= min <= max"));
        }
        for (name, rate) in [
            ("overlap_rate", self.overlap_rate),
            ("competitive_rate", self.competitive_rate),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("{name} {rate} outside [0, 1]"));
            }
        }
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (name, lex) in [
            ("competitive_marker_lexicon", &self.competitive_marker_lexicon),
            ("cooperative_marker_lexicon", &self.cooperative_marker_lexicon),
            ("neutral_lexicon", &self.neutral_lexicon),
        ] {
            if lex.is_empty() {
                return bad(format!("{name} is empty"));
            }
            for token in lex {
                if tokenize(token) != [token.as_str()] {
                    return bad(format!("{name}: `{token}` is not a single lowercase token"));
                }
                if let Some(other) = seen.insert(token, name) {
                    if other != name {
                        return bad(format!("`{token}` appears in both {other} and {name}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Hidden label of one generated overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub event_id: String,
    pub dialogue_id: String,
    pub k_index: usize,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub dialogues: Vec<Dialogue>,
    pub truth: Vec<GroundTruth>,
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn words(&mut self, lexicon: &[String], n: usize) -> Vec<String> {
        (0..n)
            .map(|_| lexicon.choose(&mut self.rng).expect("lexicon not empty").clone())
            .collect()
    }

    fn neutral_text(&mut self) -> String {
        let spec = self.spec;
        let n = self.rng.random_range(3..=8);
        self.words(&spec.neutral_lexicon, n).join(" ")
    }

    fn interrupter_text(&mut self, competitive: bool) -> String {
        let spec = self.spec;
        let (own, other) = if competitive {
            (&spec.competitive_marker_lexicon, &spec.cooperative_marker_lexicon)
        } else {
            (&spec.cooperative_marker_lexicon, &spec.competitive_marker_lexicon)
        };
        let n_markers = self.rng.random_range(2..=3);
        let mut tokens = Vec::new();
        for _ in 0..n_markers {
            let swapped = self.rng.random_bool(self.spec.noise_rate);
            let lex = if swapped { other } else { own };
            tokens.push(lex.choose(&mut self.rng).expect("lexicon not empty").clone());
        }
        let n_fill = self.rng.random_range(0..=2);
        tokens.extend(self.words(&spec.neutral_lexicon, n_fill));
        tokens.shuffle(&mut self.rng);
        tokens.join(" ")
    }

    fn dialogue(&mut self, index: usize, truth: &mut Vec<GroundTruth>) -> Result<Dialogue, SynthError> {
        let dialogue_id = format!("synth-{index:04}");
        let (lo, hi) = self.spec.turns_per_dialogue;
        let n_turns = self.rng.random_range(lo..=hi);
        let mut channel = if self.rng.random_bool(0.5) { Channel::Agent } else { Channel::Client };
        let mut start = self.rng.random_range(0..2000u64);
        let mut end = start + self.rng.random_range(1500..=5000u64);
        let mut turns = vec![Turn {
            dialogue_id: dialogue_id.clone(),
            turn_index: 0,
            channel,
            start_ms: start,
            end_ms: end,
            text: self.neutral_text(),
        }];
        for k1 in 1..n_turns {
            channel = match channel {
                Channel::Agent => Channel::Client,
                Channel::Client => Channel::Agent,
            };
            let prev_len = end - start;
            let text;
            if prev_len >= 1600 && self.rng.random_bool(self.spec.overlap_rate) {
                let overlap = self.rng.random_range(1100..=(prev_len - 500).min(2000));
                let tail = self.rng.random_range(400..=2000u64);
                let competitive = self.rng.random_bool(self.spec.competitive_rate);
                (start, end) = (end - overlap, end + tail);
                text = self.interrupter_text(competitive);
                truth.push(GroundTruth {
                    event_id: event_id(&dialogue_id, k1 - 1),
                    dialogue_id: dialogue_id.clone(),
                    k_index: k1 - 1,
                    label: if competitive { Label::Competitive } else { Label::NonCompetitive },
                });
            } else {
                start = end + self.rng.random_range(100..=1500u64);
                end = start + self.rng.random_range(1500..=5000u64);
                text = self.neutral_text();
            }
            turns.push(Turn {
                dialogue_id: dialogue_id.clone(),
                turn_index: k1,
                channel,
                start_ms: start,
                end_ms: end,
                text,
            });
        }
        Ok(Dialogue::new(dialogue_id, turns, None)?)
    }
}

pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let mut generator = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let mut truth = Vec::new();
    let dialogues = (0..spec.n_dialogues)
        .map(|i| generator.dialogue(i, &mut truth))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SynthCorpus { dialogues, truth })
}

/// Writes dialogues as a comma-separated transcript table with millisecond
/// timestamps, readable with the default ingest settings.
pub fn write_transcript_csv<W: Write>(writer: W, dialogues: &[Dialogue]) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["dialogue_id", "channel", "start_ms", "end_ms", "text"])?;
    for t in dialogues.iter().flat_map(|d| &d.turns) {
        w.write_record([
            t.dialogue_id.as_str(),
            t.channel.as_str(),
            &t.start_ms.to_string(),
            &t.end_ms.to_string(),
            t.text.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `transcripts.csv` and `labels.jsonl` into `out_dir`.
pub fn write_corpus(corpus: &SynthCorpus, out_dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(out_dir)?;
    write_transcript_csv(File::create(out_dir.join(TRANSCRIPTS_FILE))?, &corpus.dialogues)?;
    jsonl::write_file(out_dir.join(LABELS_FILE), &corpus.truth)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthJoin {
    pub labeled: Vec<LabeledEvent>,
    /// Events without a ground-truth label.
    pub unmatched: Vec<String>,
}

/// Labels events from ground truth as annotator `ground-truth` at the Unix
/// epoch, so the output is reproducible.
pub fn label_from_truth(events: &[SwitchEvent], truth: &[GroundTruth]) -> TruthJoin {
    let by_id: HashMap<&str, Label> = truth.iter().map(|t| (t.event_id.as_str(), t.label)).collect();
    let mut labeled = Vec::new();
    let mut unmatched = Vec::new();
    let mut seen = BTreeSet::new();
    for e in events {
        if !seen.insert(e.event_id.as_str()) {
            continue;
        }
        match by_id.get(e.event_id.as_str()) {
            Some(&label) => labeled.push(LabeledEvent {
                label: LabeledOverlap {
                    event_id: e.event_id.clone(),
                    label,
                    annotator_id: TRUTH_ANNOTATOR.into(),
                    labeled_at: DateTime::UNIX_EPOCH,
                },
                event: e.clone(),
            }),
            None => unmatched.push(e.event_id.clone()),
        }
    }
    TruthJoin { labeled, unmatched }
}
