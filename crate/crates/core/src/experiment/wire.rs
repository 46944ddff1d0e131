//! Trainer wire protocol, schema version 1.
//!
//! The harness writes one [`TrainRequest`] as a single JSON line to a trainer
//! and reads one [`TrainResponse`] line back, either over a spawned
//! subprocess's standard streams or as the body of an HTTP POST. A trainer
//! that cannot finish answers `{"error": "<message>"}` instead.
//!
//! Responses are validated field by field before any metric sees them; the
//! first violation becomes a [`ProtocolError`] naming its JSON path.
//! Unknown fields are ignored in both directions.

use std::io::{BufRead, Read, Write};
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use wait_timeout::ChildExt;

use crate::backend::{BackendError, EpochMetrics, Hyperparameters, ProtocolError, ScoringBackend, TrainJob, TrainOutcome};
use crate::dataset::{BinaryLabel, ModelInput};

pub const SCHEMA_VERSION: u32 = 1;

/// Diagnostics kept from a failing trainer's stderr.
const STDERR_TAIL_BYTES: usize = 4096;

/// One two-segment example. `label` is 1 for competitive, 0 otherwise, and
/// is omitted for evaluation examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireExample {
    pub segment_a: String,
    pub segment_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl WireExample {
    fn labeled(input: &ModelInput) -> Self {
        Self {
            segment_a: input.segment_a.clone(),
            segment_b: input.segment_b.clone(),
            label: Some(input.label.target()),
        }
    }

    fn unlabeled(input: &ModelInput) -> Self {
        Self {
            label: None,
            ..Self::labeled(input)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub schema_version: u32,
    pub hyperparameters: Hyperparameters,
    pub train: Vec<WireExample>,
    pub validation: Vec<WireExample>,
    pub evaluation: Vec<WireExample>,
}

impl TrainRequest {
    pub fn from_job(job: &TrainJob<'_>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            hyperparameters: job.hyperparameters.clone(),
            train: job.train.iter().map(|i| WireExample::labeled(i)).collect(),
            validation: job.validation.iter().map(|i| WireExample::labeled(i)).collect(),
            evaluation: job.evaluation.iter().map(|i| WireExample::unlabeled(i)).collect(),
        }
    }

    /// Checks what a trainer relies on: supported version, labeled train and
    /// validation examples, non-empty interrupter text.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ProtocolError::new(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let hp = &self.hyperparameters;
        if !(hp.learning_rate.is_finite() && hp.learning_rate > 0.0) {
            return Err(ProtocolError::new("hyperparameters.learning_rate", "must be a positive number"));
        }
        if hp.epochs == 0 {
            return Err(ProtocolError::new("hyperparameters.epochs", "must be positive"));
        }
        for (name, set, needs_label) in [
            ("train", &self.train, true),
            ("validation", &self.validation, true),
            ("evaluation", &self.evaluation, false),
        ] {
            for (i, ex) in set.iter().enumerate() {
                if ex.segment_b.is_empty() {
                    return Err(ProtocolError::new(format!("{name}[{i}].segment_b"), "must not be empty"));
                }
                match ex.label {
                    Some(0 | 1) => {}
                    Some(other) => {
                        return Err(ProtocolError::new(format!("{name}[{i}].label"), format!("{other} is not 0 or 1")))
                    }
                    None if needs_label => {
                        return Err(ProtocolError::new(format!("{name}[{i}].label"), "missing"));
                    }
                    None => {}
                }
            }
        }
        if self.train.is_empty() {
            return Err(ProtocolError::new("train", "must not be empty"));
        }
        Ok(())
    }

    /// Converts the wire examples back into model inputs for a local backend.
    /// Evaluation examples carry a placeholder label the backend never reads.
    pub fn to_inputs(&self) -> [Vec<ModelInput>; 3] {
        let convert = |set: &[WireExample], prefix: &str| -> Vec<ModelInput> {
            set.iter()
                .enumerate()
                .map(|(i, ex)| ModelInput {
                    event_id: format!("{prefix}{i}"),
                    segment_a: ex.segment_a.clone(),
                    segment_b: ex.segment_b.clone(),
                    label: if ex.label == Some(1) {
                        BinaryLabel::Competitive
                    } else {
                        BinaryLabel::NonCompetitive
                    },
                    fold: 0,
                    client_is_interrupter: false,
                })
                .collect()
        };
        [
            convert(&self.train, "train-"),
            convert(&self.validation, "validation-"),
            convert(&self.evaluation, "evaluation-"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub schema_version: u32,
    pub per_epoch: Vec<EpochMetrics>,
    pub eval_scores: Vec<f64>,
    pub backend_info: String,
}

impl TrainResponse {
    pub fn from_outcome(outcome: TrainOutcome) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            per_epoch: outcome.per_epoch,
            eval_scores: outcome.eval_scores,
            backend_info: outcome.backend_info,
        }
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            per_epoch: self.per_epoch,
            eval_scores: self.eval_scores,
            backend_info: self.backend_info,
        }
    }
}

/// What the decoder checks a response against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expectation {
    pub epochs: u32,
    pub n_eval: usize,
}

impl Expectation {
    pub fn for_request(request: &TrainRequest) -> Self {
        Self {
            epochs: request.hyperparameters.epochs,
            n_eval: request.evaluation.len(),
        }
    }
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value, ProtocolError> {
    obj.get(name).ok_or_else(|| ProtocolError::new(name, "missing"))
}

fn array<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Vec<Value>, ProtocolError> {
    field(obj, name)?
        .as_array()
        .ok_or_else(|| ProtocolError::new(name, "expected an array"))
}

fn optional_unit(value: Option<&Value>, path: &str, upper: Option<f64>) -> Result<Option<f64>, ProtocolError> {
    match value {
        None | Some(Value::Null) => Ok(None),
        Some(v) => {
            let x = v.as_f64().ok_or_else(|| ProtocolError::new(path, "expected a number or null"))?;
            if !x.is_finite() || x < 0.0 || upper.is_some_and(|u| x > u) {
                let range = upper.map_or("[0, inf)".to_string(), |u| format!("[0, {u}]"));
                return Err(ProtocolError::new(path, format!("{x} outside {range}")));
            }
            Ok(Some(x))
        }
    }
}

/// Decodes one response line, rejecting anything that breaks an invariant.
pub fn decode_response(line: &str, expect: Expectation) -> Result<TrainResponse, BackendError> {
    let value: Value =
        serde_json::from_str(line.trim()).map_err(|e| ProtocolError::new("$", format!("not valid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ProtocolError::new("$", "expected a JSON object"))?;

    if let Some(err) = obj.get("error") {
        let message = match err {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        return Err(BackendError::Reported { message });
    }

    let version = field(obj, "schema_version")?
        .as_u64()
        .ok_or_else(|| ProtocolError::new("schema_version", "expected an integer"))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(ProtocolError::new("schema_version", format!("unsupported version {version}")).into());
    }

    let raw_epochs = array(obj, "per_epoch")?;
    if raw_epochs.len() != expect.epochs as usize {
        return Err(ProtocolError::new(
            "per_epoch",
            format!("expected {} entries, got {}", expect.epochs, raw_epochs.len()),
        )
        .into());
    }
    let mut per_epoch = Vec::with_capacity(raw_epochs.len());
    for (i, entry) in raw_epochs.iter().enumerate() {
        let path = format!("per_epoch[{i}]");
        let e = entry
            .as_object()
            .ok_or_else(|| ProtocolError::new(&path, "expected an object"))?;
        let epoch = e
            .get("epoch")
            .and_then(Value::as_u64)
            .ok_or_else(|| ProtocolError::new(format!("{path}.epoch"), "expected an integer"))?;
        if epoch != i as u64 + 1 {
            return Err(ProtocolError::new(format!("{path}.epoch"), format!("expected {}, got {epoch}", i + 1)).into());
        }
        per_epoch.push(EpochMetrics {
            epoch: epoch as u32,
            val_loss: optional_unit(e.get("val_loss"), &format!("{path}.val_loss"), None)?,
            val_roc_auc: optional_unit(e.get("val_roc_auc"), &format!("{path}.val_roc_auc"), Some(1.0))?,
        });
    }

    let raw_scores = array(obj, "eval_scores")?;
    if raw_scores.len() != expect.n_eval {
        return Err(ProtocolError::new(
            "eval_scores",
            format!("expected {} scores, got {}", expect.n_eval, raw_scores.len()),
        )
        .into());
    }
    let mut eval_scores = Vec::with_capacity(raw_scores.len());
    for (i, s) in raw_scores.iter().enumerate() {
        let path = format!("eval_scores[{i}]");
        let x = s.as_f64().ok_or_else(|| ProtocolError::new(&path, "expected a number"))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(ProtocolError::new(path, format!("{x} outside [0, 1]")).into());
        }
        eval_scores.push(x);
    }

    let backend_info = field(obj, "backend_info")?
        .as_str()
        .ok_or_else(|| ProtocolError::new("backend_info", "expected a string"))?
        .to_string();

    Ok(TrainResponse {
        schema_version: SCHEMA_VERSION,
        per_epoch,
        eval_scores,
        backend_info,
    })
}

/// Where a trainer lives: a shell command or an `http(s)://` endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum TrainerLocator {
    Command(String),
    Http(String),
}

impl From<String> for TrainerLocator {
    fn from(s: String) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            Self::Http(s)
        } else {
            Self::Command(s)
        }
    }
}

impl From<TrainerLocator> for String {
    fn from(l: TrainerLocator) -> Self {
        match l {
            TrainerLocator::Command(s) | TrainerLocator::Http(s) => s,
        }
    }
}

impl std::fmt::Display for TrainerLocator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Command(s) | Self::Http(s) => f.write_str(s),
        }
    }
}

fn tail(bytes: &[u8]) -> String {
    let start = bytes.len().saturating_sub(STDERR_TAIL_BYTES);
    String::from_utf8_lossy(&bytes[start..]).trim().to_string()
}

fn exchange_subprocess(command: &str, line: &[u8], timeout: Duration) -> Result<String, BackendError> {
    let transport = |e: std::io::Error| BackendError::Transport(format!("`{command}`: {e}"));
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(transport)?;

    let mut stdin = child.stdin.take().expect("stdin piped");
    let mut stdout = child.stdout.take().expect("stdout piped");
    let mut stderr = child.stderr.take().expect("stderr piped");
    let payload = line.to_vec();
    // A trainer that exits without reading its input closes the pipe; that
    // shows up as a nonzero exit or a missing response, not here.
    let writer = thread::spawn(move || {
        let _ = stdin.write_all(&payload);
    });
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        stdout.read_to_end(&mut buf).map(|_| buf)
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });

    let status = match child.wait_timeout(timeout).map_err(transport)? {
        Some(status) => status,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(BackendError::Timeout(timeout.as_secs()));
        }
    };
    let _ = writer.join();
    let out = out_reader
        .join()
        .map_err(|_| BackendError::Transport("stdout reader panicked".into()))?
        .map_err(transport)?;
    let diagnostics = tail(&err_reader.join().unwrap_or_default());

    if !status.success() {
        return Err(BackendError::Exited {
            status: status.to_string(),
            diagnostics,
        });
    }
    if !diagnostics.is_empty() {
        log::debug!("trainer stderr: {diagnostics}");
    }
    let first = out
        .lines()
        .map_while(Result::ok)
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| ProtocolError::new("$", "trainer produced no response line"))?;
    Ok(first)
}

fn exchange_http(url: &str, line: &[u8], timeout: Duration) -> Result<String, BackendError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let mut response = agent
        .post(url)
        .header("content-type", "application/json")
        .send(line)
        .map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout(timeout.as_secs()),
            other => BackendError::Transport(format!("{url}: {other}")),
        })?;
    let status = response.status();
    let body = response
        .body_mut()
        .read_to_string()
        .map_err(|e| BackendError::Transport(format!("{url}: {e}")))?;
    if !status.is_success() {
        // Trainers may still answer with a structured `{"error": ...}` body.
        if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&body) {
            if let Some(Value::String(message)) = obj.get("error") {
                return Err(BackendError::Reported { message: message.clone() });
            }
        }
        return Err(BackendError::Exited {
            status: format!("HTTP {status}"),
            diagnostics: tail(body.as_bytes()),
        });
    }
    Ok(body)
}

/// Sends one request and returns the validated response.
pub fn call_trainer(request: &TrainRequest, locator: &TrainerLocator, timeout: Duration) -> Result<TrainResponse, BackendError> {
    request.validate()?;
    let mut line = serde_json::to_vec(request).map_err(|e| BackendError::Transport(e.to_string()))?;
    line.push(b'\n');
    let raw = match locator {
        TrainerLocator::Command(cmd) => exchange_subprocess(cmd, &line, timeout)?,
        TrainerLocator::Http(url) => exchange_http(url, &line, timeout)?,
    };
    decode_response(&raw, Expectation::for_request(request)).inspect_err(|e| {
        if matches!(e, BackendError::Protocol(_) | BackendError::Reported { .. }) {
            log::error!("rejected trainer response from `{locator}`: {e}; raw response: {}", raw.trim_end());
        }
    })
}

/// A [`ScoringBackend`] that forwards every split to an external trainer.
#[derive(Debug, Clone)]
pub struct WireBackend {
    pub locator: TrainerLocator,
    pub timeout: Duration,
}

impl ScoringBackend for WireBackend {
    fn train_and_score(&self, job: &TrainJob<'_>) -> Result<TrainOutcome, BackendError> {
        call_trainer(&TrainRequest::from_job(job), &self.locator, self.timeout).map(TrainResponse::into_outcome)
    }
}

/// Answers one request line from `input` with `backend`, writing exactly one
/// response line to `output`. Failures are reported in-band as `{"error": ...}`.
pub fn serve_one<B, R, W>(backend: &B, input: R, mut output: W) -> std::io::Result<bool>
where
    B: ScoringBackend,
    R: BufRead,
    W: Write,
{
    let line = match input.lines().map_while(Result::ok).find(|l| !l.trim().is_empty()) {
        Some(l) => l,
        None => return Ok(false),
    };
    let reply = match answer(backend, &line) {
        Ok(response) => serde_json::to_string(&response),
        Err(message) => serde_json::to_string(&serde_json::json!({ "error": message })),
    }
    .map_err(std::io::Error::other)?;
    writeln!(output, "{reply}")?;
    output.flush()?;
    Ok(true)
}

fn answer<B: ScoringBackend>(backend: &B, line: &str) -> Result<TrainResponse, String> {
    let request: TrainRequest = serde_json::from_str(line).map_err(|e| format!("malformed request: {e}"))?;
    request.validate().map_err(|e| e.to_string())?;
    let [train, validation, evaluation] = request.to_inputs();
    let job = TrainJob {
        hyperparameters: &request.hyperparameters,
        train: train.iter().collect(),
        validation: validation.iter().collect(),
        evaluation: evaluation.iter().collect(),
    };
    let outcome = backend.train_and_score(&job).map_err(|e| e.to_string())?;
    Ok(TrainResponse::from_outcome(outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ConstantBackend;

    const EXPECT: Expectation = Expectation { epochs: 2, n_eval: 3 };

    fn valid() -> String {
        r#"{"schema_version":1,"per_epoch":[{"epoch":1,"val_loss":0.6,"val_roc_auc":0.7},{"epoch":2,"val_loss":null,"val_roc_auc":null}],"eval_scores":[0.1,0.5,1],"backend_info":"x","extra":true}"#.into()
    }

    fn field_of(line: &str) -> String {
        match decode_response(line, EXPECT) {
            Err(BackendError::Protocol(p)) => p.field,
            other => panic!("expected protocol error, got {other:?}"),
        }
    }

    #[test]
    fn valid_response_decodes_and_ignores_unknown_fields() {
        let r = decode_response(&valid(), EXPECT).unwrap();
        assert_eq!(r.eval_scores, vec![0.1, 0.5, 1.0]);
        assert_eq!(r.per_epoch[1].val_loss, None);
    }

    #[test]
    fn first_invalid_field_is_named() {
        assert_eq!(field_of(&valid().replace("1]", "1.3]")), "eval_scores[2]");
        assert_eq!(field_of(&valid().replace("[0.1,0.5,1]", "[0.1,0.5]")), "eval_scores");
        assert_eq!(field_of(&valid().replace("\"epoch\":2", "\"epoch\":3")), "per_epoch[1].epoch");
        assert_eq!(field_of(&valid().replace("0.7}", "1.7}")), "per_epoch[0].val_roc_auc");
        assert_eq!(field_of(&valid().replace("\"backend_info\":\"x\"", "\"backend_info\":3")), "backend_info");
        assert_eq!(field_of(&valid().replace("\"schema_version\":1", "\"schema_version\":2")), "schema_version");
        assert_eq!(field_of("[1]"), "$");
        assert_eq!(field_of(&valid()[..40]), "$");
    }

    #[test]
    fn error_reply_is_reported() {
        match decode_response(r#"{"error":"cuda oom"}"#, EXPECT) {
            Err(BackendError::Reported { message }) => assert_eq!(message, "cuda oom"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn locator_parses_scheme() {
        assert_eq!(TrainerLocator::from("http://h:1/train".to_string()), TrainerLocator::Http("http://h:1/train".into()));
        assert!(matches!(TrainerLocator::from("python t.py".to_string()), TrainerLocator::Command(_)));
    }

    fn input(label: BinaryLabel) -> ModelInput {
        ModelInput {
            event_id: "e".into(),
            segment_a: "a".into(),
            segment_b: "b".into(),
            label,
            fold: 0,
            client_is_interrupter: true,
        }
    }

    #[test]
    fn evaluation_labels_never_leave_the_harness() {
        let hp = Hyperparameters::default();
        let c = input(BinaryLabel::Competitive);
        let job = TrainJob {
            hyperparameters: &hp,
            train: vec![&c],
            validation: vec![&c],
            evaluation: vec![&c],
        };
        let req = TrainRequest::from_job(&job);
        assert_eq!(req.train[0].label, Some(1));
        assert_eq!(req.evaluation[0].label, None);
        assert!(!serde_json::to_string(&req.evaluation).unwrap().contains("label"));
        req.validate().unwrap();
    }

    #[test]
    fn serve_one_round_trip() {
        let hp = Hyperparameters { epochs: 2, ..Hyperparameters::default() };
        let c = input(BinaryLabel::Competitive);
        let job = TrainJob {
            hyperparameters: &hp,
            train: vec![&c],
            validation: vec![],
            evaluation: vec![&c, &c],
        };
        let req = TrainRequest::from_job(&job);
        let line = serde_json::to_string(&req).unwrap() + "\n";
        let mut out = Vec::new();
        assert!(serve_one(&ConstantBackend(0.25), line.as_bytes(), &mut out).unwrap());
        let resp = decode_response(std::str::from_utf8(&out).unwrap(), Expectation::for_request(&req)).unwrap();
        assert_eq!(resp.eval_scores, vec![0.25, 0.25]);

        let mut out = Vec::new();
        serve_one(&ConstantBackend(0.25), &b"{not json\n"[..], &mut out).unwrap();
        assert!(matches!(
            decode_response(std::str::from_utf8(&out).unwrap(), EXPECT),
            Err(BackendError::Reported { .. })
        ));
    }
}
