//! Transcript ingestion: delimited ASR tables in, ordered dialogues out.
//!
//! Each input row is one VAD-separated turn. Rows are grouped by dialogue id
//! (first-appearance order) and the turns of every dialogue are stably sorted
//! by `(start_ms, channel)` with agent before client, then re-indexed from 0.
//!
//! Timestamps are integer milliseconds. Inputs may carry fractional values
//! (`"1500.5"` in millisecond mode, `"1.2345"` in second mode); those are
//! rounded half-up to the nearest millisecond using exact decimal arithmetic.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    Row { row: u64, message: String },
    #[error("row {row}: end_ms ({end_ms}) must be greater than start_ms ({start_ms})")]
    InvalidTurn { row: u64, start_ms: u64, end_ms: u64 },
    #[error("turns from different dialogues in one ordering call: `{expected}` and `{found}`")]
    MixedDialogues { expected: String, found: String },
    #[error("invalid format configuration: {0}")]
    Config(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// Speaker channel of a dual-channel call recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Agent,
    Client,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Agent => "agent",
            Channel::Client => "client",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "agent" => Ok(Channel::Agent),
            "client" => Ok(Channel::Client),
            other => Err(format!("unknown channel value `{other}`")),
        }
    }
}

/// One VAD-separated utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub channel: Channel,
    pub start_ms: u64,
    pub end_ms: u64,
    pub text: String,
}

impl Turn {
    pub fn duration_ms(&self) -> u64 {
        self.end_ms.saturating_sub(self.start_ms)
    }

    pub fn is_valid(&self) -> bool {
        self.end_ms > self.start_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_uri: Option<String>,
}

impl Dialogue {
    /// Builds a dialogue from unordered turns, enforcing the ordering invariant.
    pub fn new(
        dialogue_id: impl Into<String>,
        turns: Vec<Turn>,
        audio_uri: Option<String>,
    ) -> Result<Self, IngestError> {
        let dialogue_id = dialogue_id.into();
        if let Some(t) = turns.iter().find(|t| t.dialogue_id != dialogue_id) {
            return Err(IngestError::MixedDialogues {
                expected: dialogue_id,
                found: t.dialogue_id.clone(),
            });
        }
        Ok(Self {
            dialogue_id,
            turns: order_turns(turns)?,
            audio_uri,
        })
    }

    pub fn turn(&self, index: usize) -> Option<&Turn> {
        self.turns.get(index)
    }
}

/// Stable sort by `(start_ms, channel)` and re-index from 0.
pub fn order_turns(mut turns: Vec<Turn>) -> Result<Vec<Turn>, IngestError> {
    if let Some(first) = turns.first() {
        if let Some(other) = turns.iter().find(|t| t.dialogue_id != first.dialogue_id) {
            return Err(IngestError::MixedDialogues {
                expected: first.dialogue_id.clone(),
                found: other.dialogue_id.clone(),
            });
        }
    }
    turns.sort_by_key(|t| (t.start_ms, t.channel));
    for (i, t) in turns.iter_mut().enumerate() {
        t.turn_index = i;
    }
    Ok(turns)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    #[default]
    Milliseconds,
    Seconds,
}

impl FromStr for TimeUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ms" | "milliseconds" => Ok(TimeUnit::Milliseconds),
            "s" | "seconds" => Ok(TimeUnit::Seconds),
            other => Err(format!("unknown time unit `{other}` (expected ms or s)")),
        }
    }
}

/// Maps logical fields onto source header names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub dialogue_id: String,
    pub channel: String,
    pub start_ms: String,
    pub end_ms: String,
    pub text: String,
    /// Optional; used when the header contains it.
    pub audio_uri: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            dialogue_id: "dialogue_id".into(),
            channel: "channel".into(),
            start_ms: "start_ms".into(),
            end_ms: "end_ms".into(),
            text: "text".into(),
            audio_uri: "audio_uri".into(),
        }
    }
}

impl ColumnMap {
    /// Applies `field=header` overrides, e.g. `start_ms=begin,end_ms=finish`.
    pub fn apply_overrides(&mut self, spec: &str) -> Result<(), IngestError> {
        for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| IngestError::Config(format!("expected key=value, got `{pair}`")))?;
            let slot = match key.trim() {
                "dialogue_id" => &mut self.dialogue_id,
                "channel" => &mut self.channel,
                "start_ms" | "start" => &mut self.start_ms,
                "end_ms" | "end" => &mut self.end_ms,
                "text" => &mut self.text,
                "audio_uri" => &mut self.audio_uri,
                other => return Err(IngestError::Config(format!("unknown column key `{other}`"))),
            };
            *slot = value.trim().to_string();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatConfig {
    pub delimiter: u8,
    pub columns: ColumnMap,
    /// Source value → channel, consulted before the literal `agent`/`client` names.
    pub channel_values: BTreeMap<String, Channel>,
    pub time_unit: TimeUnit,
}

impl Default for FormatConfig {
    fn default() -> Self {
        Self {
            delimiter: b',',
            columns: ColumnMap::default(),
            channel_values: BTreeMap::new(),
            time_unit: TimeUnit::Milliseconds,
        }
    }
}

impl FormatConfig {
    /// Parses `source=channel` pairs, e.g. `0=agent,1=client`.
    pub fn apply_channel_map(&mut self, spec: &str) -> Result<(), IngestError> {
        for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| IngestError::Config(format!("expected value=channel, got `{pair}`")))?;
            let channel = value.parse().map_err(IngestError::Config)?;
            self.channel_values.insert(key.trim().to_string(), channel);
        }
        Ok(())
    }

    fn channel(&self, raw: &str) -> Result<Channel, String> {
        if let Some(c) = self.channel_values.get(raw.trim()) {
            return Ok(*c);
        }
        raw.parse()
    }
}

/// Converts a non-negative decimal string to integer milliseconds, rounding half-up.
pub fn parse_timestamp(raw: &str, unit: TimeUnit) -> Result<u64, String> {
    let s = raw.trim();
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    let all_digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    if (int_part.is_empty() && frac_part.is_empty()) || !all_digits(int_part) || !all_digits(frac_part) {
        return Err(format!("unparseable timestamp `{raw}`"));
    }
    let scale_digits = match unit {
        TimeUnit::Milliseconds => 0,
        TimeUnit::Seconds => 3,
    };
    let overflow = || format!("timestamp `{raw}` out of range");
    let mut value: u64 = 0;
    for b in int_part.bytes() {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add(u64::from(b - b'0')))
            .ok_or_else(overflow)?;
    }
    let frac = frac_part.as_bytes();
    for i in 0..scale_digits {
        let digit = frac.get(i).map_or(0, |b| u64::from(b - b'0'));
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add(digit))
            .ok_or_else(overflow)?;
    }
    if frac.get(scale_digits).is_some_and(|b| *b >= b'5') {
        value = value.checked_add(1).ok_or_else(overflow)?;
    }
    Ok(value)
}

struct ColumnIndices {
    dialogue_id: usize,
    channel: usize,
    start: usize,
    end: usize,
    text: usize,
    audio_uri: Option<usize>,
}

impl ColumnIndices {
    fn resolve(headers: &csv::StringRecord, columns: &ColumnMap) -> Result<Self, IngestError> {
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim().trim_start_matches('\u{feff}') == name)
                .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
        };
        Ok(Self {
            dialogue_id: find(&columns.dialogue_id)?,
            channel: find(&columns.channel)?,
            start: find(&columns.start_ms)?,
            end: find(&columns.end_ms)?,
            text: find(&columns.text)?,
            audio_uri: find(&columns.audio_uri).ok(),
        })
    }
}

#[derive(Default)]
struct Grouper {
    order: Vec<String>,
    turns: HashMap<String, Vec<Turn>>,
    audio: HashMap<String, String>,
}

impl Grouper {
    fn push(&mut self, turn: Turn, audio_uri: Option<String>) {
        let id = turn.dialogue_id.clone();
        if let Some(uri) = audio_uri.filter(|u| !u.is_empty()) {
            self.audio.entry(id.clone()).or_insert(uri);
        }
        self.turns
            .entry(id.clone())
            .or_insert_with(|| {
                self.order.push(id);
                Vec::new()
            })
            .push(turn);
    }

    fn finish(mut self) -> Result<Vec<Dialogue>, IngestError> {
        self.order
            .into_iter()
            .map(|id| {
                let turns = self.turns.remove(&id).unwrap_or_default();
                let audio = self.audio.remove(&id);
                Dialogue::new(id, turns, audio)
            })
            .collect()
    }
}

fn read_rows<R: Read>(source: R, cfg: &FormatConfig, grouper: &mut Grouper) -> Result<(), IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(cfg.delimiter)
        .has_headers(true)
        .flexible(false)
        .from_reader(source);
    let cols = ColumnIndices::resolve(reader.headers()?, &cfg.columns)?;

    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let row_err = |message: String| IngestError::Row { row, message };

        let dialogue_id = field(cols.dialogue_id).trim().to_string();
        if dialogue_id.is_empty() {
            return Err(row_err("empty dialogue id".into()));
        }
        let channel = cfg.channel(field(cols.channel)).map_err(row_err)?;
        let start_ms = parse_timestamp(field(cols.start), cfg.time_unit).map_err(row_err)?;
        let end_ms = parse_timestamp(field(cols.end), cfg.time_unit).map_err(row_err)?;
        if end_ms <= start_ms {
            return Err(IngestError::InvalidTurn { row, start_ms, end_ms });
        }
        let audio = cols.audio_uri.map(|i| field(i).trim().to_string());
        grouper.push(
            Turn {
                dialogue_id,
                turn_index: 0,
                channel,
                start_ms,
                end_ms,
                text: field(cols.text).to_string(),
            },
            audio,
        );
    }
    Ok(())
}

/// Parses one delimited transcript table into dialogues.
pub fn parse_transcript<R: Read>(source: R, cfg: &FormatConfig) -> Result<Vec<Dialogue>, IngestError> {
    parse_transcripts(std::iter::once(source), cfg)
}

/// Parses several tables as one corpus; a dialogue may span sources.
pub fn parse_transcripts<R, I>(sources: I, cfg: &FormatConfig) -> Result<Vec<Dialogue>, IngestError>
where
    R: Read,
    I: IntoIterator<Item = R>,
{
    let mut grouper = Grouper::default();
    for source in sources {
        read_rows(source, cfg, &mut grouper)?;
    }
    grouper.finish()
}

/// Writes the canonical turn file: one turn object per line.
pub fn write_turns<W: Write>(writer: W, dialogues: &[Dialogue]) -> Result<(), IngestError> {
    jsonl::write_records(writer, dialogues.iter().flat_map(|d| d.turns.iter()))?;
    Ok(())
}

/// Reads a canonical turn file back into dialogues.
///
/// Audio locators are not part of the turn file; see [`read_audio_manifest`].
pub fn read_turns<R: Read>(reader: R) -> Result<Vec<Dialogue>, IngestError> {
    let turns: Vec<Turn> = jsonl::read_records(reader)?;
    let mut grouper = Grouper::default();
    for (i, turn) in turns.into_iter().enumerate() {
        if !turn.is_valid() {
            return Err(IngestError::InvalidTurn {
                row: i as u64 + 1,
                start_ms: turn.start_ms,
                end_ms: turn.end_ms,
            });
        }
        grouper.push(turn, None);
    }
    grouper.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioLocator {
    pub dialogue_id: String,
    pub audio_uri: String,
}

pub fn audio_manifest(dialogues: &[Dialogue]) -> Vec<AudioLocator> {
    dialogues
        .iter()
        .filter_map(|d| {
            d.audio_uri.as_ref().map(|uri| AudioLocator {
                dialogue_id: d.dialogue_id.clone(),
                audio_uri: uri.clone(),
            })
        })
        .collect()
}

pub fn read_audio_manifest<R: Read>(reader: R) -> Result<HashMap<String, String>, IngestError> {
    let records: Vec<AudioLocator> = jsonl::read_records(reader)?;
    Ok(records.into_iter().map(|a| (a.dialogue_id, a.audio_uri)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(id: &str, channel: Channel, start: u64, end: u64) -> Turn {
        Turn {
            dialogue_id: id.into(),
            turn_index: 99,
            channel,
            start_ms: start,
            end_ms: end,
            text: String::new(),
        }
    }

    #[test]
    fn parses_two_row_dialogue() {
        let csv = "dialogue_id,channel,start_ms,end_ms,text\nd1,agent,0,5000,алло\nd1,client,6000,8000,да\n";
        let dialogues = parse_transcript(csv.as_bytes(), &FormatConfig::default()).unwrap();
        assert_eq!(dialogues.len(), 1);
        let d = &dialogues[0];
        assert_eq!(d.dialogue_id, "d1");
        assert_eq!(d.turns.len(), 2);
        assert_eq!(d.turns[0].turn_index, 0);
        assert_eq!(d.turns[0].text, "алло");
        assert_eq!(d.turns[1].turn_index, 1);
        assert_eq!(d.turns[1].channel, Channel::Client);
        assert_eq!((d.turns[1].start_ms, d.turns[1].end_ms), (6000, 8000));
    }

    #[test]
    fn missing_end_column_is_a_schema_error() {
        let csv = "dialogue_id,channel,start_ms,text\nd1,agent,0,x\n";
        match parse_transcript(csv.as_bytes(), &FormatConfig::default()) {
            Err(IngestError::MissingColumn(c)) => assert_eq!(c, "end_ms"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn end_before_start_cites_row() {
        let csv = "dialogue_id,channel,start_ms,end_ms,text\nd1,agent,0,100,a\nd1,agent,5000,4000,b\n";
        match parse_transcript(csv.as_bytes(), &FormatConfig::default()) {
            Err(IngestError::InvalidTurn { row, start_ms, end_ms }) => {
                assert_eq!((row, start_ms, end_ms), (3, 5000, 4000));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_length_turn_rejected() {
        let csv = "dialogue_id,channel,start_ms,end_ms,text\nd1,agent,100,100,a\n";
        assert!(matches!(
            parse_transcript(csv.as_bytes(), &FormatConfig::default()),
            Err(IngestError::InvalidTurn { row: 2, .. })
        ));
    }

    #[test]
    fn bad_timestamp_and_channel_are_row_errors() {
        let csv = "dialogue_id,channel,start_ms,end_ms,text\nd1,agent,abc,100,a\n";
        assert!(matches!(
            parse_transcript(csv.as_bytes(), &FormatConfig::default()),
            Err(IngestError::Row { row: 2, .. })
        ));
        let csv = "dialogue_id,channel,start_ms,end_ms,text\nd1,agent,0,100,a\nd1,robot,200,300,b\n";
        match parse_transcript(csv.as_bytes(), &FormatConfig::default()) {
            Err(IngestError::Row { row, message }) => {
                assert_eq!(row, 3);
                assert!(message.contains("robot"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn remapped_columns_delimiter_and_channels() {
        let tsv = "call\tspk\tbegin\tfinish\tutt\nc9\t1\t0.5\t1.2505\tда\nc9\t0\t0\t1\tалло\n";
        let mut cfg = FormatConfig {
            delimiter: b'\t',
            time_unit: TimeUnit::Seconds,
            ..FormatConfig::default()
        };
        cfg.columns
            .apply_overrides("dialogue_id=call,channel=spk,start_ms=begin,end_ms=finish,text=utt")
            .unwrap();
        cfg.apply_channel_map("0=agent,1=client").unwrap();
        let d = &parse_transcript(tsv.as_bytes(), &cfg).unwrap()[0];
        assert_eq!(d.turns[0].channel, Channel::Agent);
        assert_eq!((d.turns[0].start_ms, d.turns[0].end_ms), (0, 1000));
        assert_eq!((d.turns[1].start_ms, d.turns[1].end_ms), (500, 1251));
    }

    #[test]
    fn timestamp_rounding_is_half_up() {
        use TimeUnit::*;
        assert_eq!(parse_timestamp("1500", Milliseconds), Ok(1500));
        assert_eq!(parse_timestamp("1500.5", Milliseconds), Ok(1501));
        assert_eq!(parse_timestamp("1500.49", Milliseconds), Ok(1500));
        assert_eq!(parse_timestamp("1.2345", Seconds), Ok(1235));
        assert_eq!(parse_timestamp("1.2344", Seconds), Ok(1234));
        assert_eq!(parse_timestamp("2", Seconds), Ok(2000));
        assert_eq!(parse_timestamp(".5", Seconds), Ok(500));
        assert!(parse_timestamp("-1", Milliseconds).is_err());
        assert!(parse_timestamp("1e3", Milliseconds).is_err());
        assert!(parse_timestamp("", Milliseconds).is_err());
        assert!(parse_timestamp("99999999999999999999", Milliseconds).is_err());
    }

    #[test]
    fn ordering_sorts_by_start_then_channel() {
        let ordered = order_turns(vec![turn("d", Channel::Agent, 6000, 7000), turn("d", Channel::Agent, 0, 10)]).unwrap();
        assert_eq!(ordered[0].start_ms, 0);
        assert_eq!(ordered[1].start_ms, 6000);
        assert_eq!((ordered[0].turn_index, ordered[1].turn_index), (0, 1));

        let tie = order_turns(vec![turn("d", Channel::Client, 0, 10), turn("d", Channel::Agent, 0, 20)]).unwrap();
        assert_eq!(tie[0].channel, Channel::Agent);

        assert!(order_turns(Vec::new()).unwrap().is_empty());
    }

    #[test]
    fn ordering_rejects_mixed_dialogues() {
        let err = order_turns(vec![turn("a", Channel::Agent, 0, 1), turn("b", Channel::Agent, 0, 1)]);
        assert!(matches!(err, Err(IngestError::MixedDialogues { .. })));
    }

    #[test]
    fn dialogues_keep_first_appearance_order_and_audio() {
        let csv = "dialogue_id,channel,start_ms,end_ms,text,audio_uri\n\
                   b,agent,0,10,x,\n\
                   a,agent,0,10,y,file:///a.wav\n\
                   b,client,5,20,z,file:///b.wav\n";
        let ds = parse_transcript(csv.as_bytes(), &FormatConfig::default()).unwrap();
        assert_eq!(ds[0].dialogue_id, "b");
        assert_eq!(ds[0].audio_uri.as_deref(), Some("file:///b.wav"));
        assert_eq!(ds[1].audio_uri.as_deref(), Some("file:///a.wav"));
        let manifest = audio_manifest(&ds);
        assert_eq!(manifest.len(), 2);
    }

    #[test]
    fn empty_text_is_kept() {
        let csv = "dialogue_id,channel,start_ms,end_ms,text\nd1,agent,0,10,\n";
        let ds = parse_transcript(csv.as_bytes(), &FormatConfig::default()).unwrap();
        assert_eq!(ds[0].turns[0].text, "");
    }
}
