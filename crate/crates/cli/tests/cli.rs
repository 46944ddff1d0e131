use std::fs;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_overlapctl");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "info")
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("overlapctl runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "overlapctl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// synth → ingest → pairs → filter → label-from-truth → dataset, in `dir`.
fn prepare(dir: &Path, n_dialogues: usize) -> PathBuf {
    fs::write(dir.join("spec.toml"), format!("n_dialogues = {n_dialogues}\nseed = 11\nnoise_rate = 0.05\n")).unwrap();
    ok(dir, &["synth", "--spec", "spec.toml", "--out-dir", "corpus"]);
    ok(dir, &["ingest", "--input", "corpus/transcripts.csv", "--out", "turns.jsonl"]);
    ok(dir, &["pairs", "--turns", "turns.jsonl", "--out", "events.jsonl"]);
    ok(dir, &["filter", "--events", "events.jsonl", "--out", "filtered.jsonl"]);
    ok(
        dir,
        &["label-from-truth", "--events", "filtered.jsonl", "--truth", "corpus/labels.jsonl", "--out", "labeled.jsonl", "--strict"],
    );
    ok(
        dir,
        &["dataset", "--labeled", "labeled.jsonl", "--turns", "turns.jsonl", "--variant", "both", "--seed", "5", "--out", "dataset.jsonl"],
    );
    dir.join("dataset.jsonl")
}

#[test]
fn baseline_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, 40);

    let events = read_lines(&dir.join("events.jsonl"));
    let filtered = read_lines(&dir.join("filtered.jsonl"));
    assert!(filtered.len() < events.len());
    for e in &filtered {
        assert_eq!(e["kind"], "overlap");
        assert_eq!(e["successful"], true);
        assert!(e["overlap_duration_ms"].as_u64().unwrap() >= 1000);
    }
    let meta = read_json(&dir.join("dataset.meta.json"));
    assert_eq!(meta["n_folds"], 10);
    assert_eq!(meta["test_fold"], 9);
    assert_eq!(meta["variant"]["variant"], "both_speakers");

    ok(dir, &["train-baseline", "--dataset", "dataset.jsonl", "--out", "model.bin"]);
    ok(dir, &["score", "--model", "model.bin", "--dataset", "dataset.jsonl", "--out", "scores.jsonl"]);
    let stdout = ok(dir, &["eval", "--scores", "scores.jsonl", "--dataset", "dataset.jsonl", "--out", "report.json"]);
    assert!(stdout.contains("ROC AUC"));

    let scores = read_lines(&dir.join("scores.jsonl"));
    assert_eq!(scores.len(), read_lines(&dir.join("dataset.jsonl")).len());
    let report = read_json(&dir.join("report.json"));
    let columns: Vec<&str> = report["columns"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    assert_eq!(
        columns,
        [
            "Examined Hyper Parameter",
            "ROC AUC binary",
            "Best Threshold",
            "Recall macro",
            "Precision macro",
            "Balanced Accuracy",
            "F1 macro"
        ]
    );
    let row = &report["row"];
    assert!(row["ROC AUC binary"].as_f64().unwrap() > 0.85, "{row}");
    let dataset_bytes = fs::read(dir.join("dataset.jsonl")).unwrap();
    let hash = report["provenance"]["dataset_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert_eq!(report["provenance"]["threshold_source"], "non_test_folds");

    // Re-running produces identical bytes.
    ok(dir, &["score", "--model", "model.bin", "--dataset", "dataset.jsonl", "--out", "scores2.jsonl"]);
    assert_eq!(fs::read(dir.join("scores.jsonl")).unwrap(), fs::read(dir.join("scores2.jsonl")).unwrap());
    assert!(!dataset_bytes.is_empty());
}

const EXPERIMENT: &str = r#"
name = "lr-check"
group = "Experiment 2. Learning rate adjustment"
context_variant = "both"
learning_rates = [3e-6, 7e-6]
epochs = 2
"#;

#[test]
fn experiment_over_subprocess_matches_in_process_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, 30);
    fs::write(dir.join("exp.toml"), EXPERIMENT).unwrap();

    let trainer = format!("'{BIN}' trainer-stdio");
    let table = ok(
        dir,
        &["experiment", "--config", "exp.toml", "--dataset", "dataset.jsonl", "--trainer-cmd", &trainer, "--out", "wire.json", "--tsv", "wire.tsv"],
    );
    assert!(table.contains("Lr: 3e-6") && table.contains("Lr: 7e-6"), "{table}");
    assert_eq!(fs::read_to_string(dir.join("wire.tsv")).unwrap(), table);
    ok(
        dir,
        &["experiment", "--config", "exp.toml", "--dataset", "dataset.jsonl", "--baseline", "--max-parallel-rows", "2", "--out", "local.json"],
    );

    let wire = read_json(&dir.join("wire.json"));
    let local = read_json(&dir.join("local.json"));
    assert_eq!(wire["rows"], local["rows"]);
    assert_eq!(wire["runs"], local["runs"]);
    assert_eq!(wire["provenance"]["dataset_sha256"], local["provenance"]["dataset_sha256"]);
    assert_eq!(wire["rows"].as_array().unwrap().len(), 2);
    for run in wire["runs"].as_array().unwrap() {
        for fold in run["cv"]["validation"].as_array().unwrap() {
            assert_eq!(fold["per_epoch"].as_array().unwrap().len(), 2);
        }
    }

    ok(dir, &["tabulate", "--report", "wire.json", "--report", "local.json", "--out", "table.json"]);
    let table = read_json(&dir.join("table.json"));
    assert_eq!(table["groups"].as_array().unwrap().len(), 1);
    assert_eq!(table["groups"][0]["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn malformed_trainer_response_aborts_with_raw_text() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, 20);
    fs::write(dir.join("exp.toml"), EXPERIMENT).unwrap();
    let reply = r#"{"schema_version":1,"per_epoch":[],"eval_scores":[],"backend_info":"broken-stub"}"#;
    let trainer = format!("cat >/dev/null; echo '{reply}'");
    let out = run(
        dir,
        &["experiment", "--config", "exp.toml", "--dataset", "dataset.jsonl", "--trainer-cmd", &trainer, "--out", "r.json"],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("per_epoch"), "{stderr}");
    assert!(stderr.contains("broken-stub"), "{stderr}");
    assert!(!dir.join("r.json").exists());
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, 20);
    fs::write(dir.join("exp.toml"), format!("{EXPERIMENT}learning_rat = 1\n")).unwrap();
    let out = run(dir, &["experiment", "--config", "exp.toml", "--dataset", "dataset.jsonl", "--baseline", "--out", "r.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn ingest_reads_tsv_directories_with_column_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::create_dir(dir.join("raw")).unwrap();
    fs::write(
        dir.join("raw/b.tsv"),
        "call\tspk\tbegin\tfinish\tutt\twav\nc2\t1\t0.5\t2.0\tалло\t/a/c2.wav\nc2\t0\t0\t1.2\tдобрый день\t/a/c2.wav\n",
    )
    .unwrap();
    fs::write(dir.join("raw/a.tsv"), "call\tspk\tbegin\tfinish\tutt\twav\nc1\t0\t1.0005\t3\tда\t\n").unwrap();
    fs::write(dir.join("raw/notes.md"), "ignored").unwrap();
    ok(
        dir,
        &[
            "ingest",
            "--input",
            "raw",
            "--out",
            "turns.jsonl",
            "--delimiter",
            "tab",
            "--column-map",
            "dialogue_id=call,channel=spk,start_ms=begin,end_ms=finish,text=utt,audio_uri=wav",
            "--channel-map",
            "0=agent,1=client",
            "--time-unit",
            "s",
        ],
    );
    let turns = read_lines(&dir.join("turns.jsonl"));
    assert_eq!(turns.len(), 3);
    assert_eq!(turns[0]["dialogue_id"], "c1");
    assert_eq!(turns[0]["start_ms"], 1001);
    assert_eq!(turns[1]["dialogue_id"], "c2");
    assert_eq!(turns[1]["channel"], "agent");
    assert_eq!(turns[1]["turn_index"], 0);
    assert_eq!(turns[2]["channel"], "client");
    assert_eq!(turns[2]["start_ms"], 500);
    let audio = read_lines(&dir.join("turns.audio.jsonl"));
    assert_eq!(audio.len(), 1);
    assert_eq!(audio[0]["audio_uri"], "/a/c2.wav");

    let out = run(dir, &["ingest", "--input", "raw", "--out", "x.jsonl"]);
    assert!(!out.status.success(), "comma parsing of tab files must fail");
}

#[test]
fn export_labels_replays_last_write() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, 10);
    let filtered = read_lines(&dir.join("filtered.jsonl"));
    assert!(filtered.len() >= 2);
    let (a, b) = (filtered[0]["event_id"].as_str().unwrap(), filtered[1]["event_id"].as_str().unwrap());
    let log = format!(
        "{{\"event_id\":\"{a}\",\"label\":\"competitive\",\"annotator_id\":\"x\",\"labeled_at\":\"2024-01-01T00:00:00Z\"}}\n\
         {{\"event_id\":\"{b}\",\"label\":\"undefined\",\"annotator_id\":\"x\",\"labeled_at\":\"2024-01-01T00:00:01Z\"}}\n\
         {{\"event_id\":\"{a}\",\"label\":\"non_competitive\",\"annotator_id\":\"y\",\"labeled_at\":\"2024-01-01T00:00:02Z\"}}\n\
         {{\"event_id\":\"gone\",\"label\":\"competitive\",\"annotator_id\":\"x\",\"labeled_at\":\"2024-01-01T00:00:03Z\"}}\n"
    );
    fs::write(dir.join("labels.log"), log).unwrap();
    ok(dir, &["export-labels", "--labels", "labels.log", "--events", "filtered.jsonl", "--out", "out1.jsonl"]);
    ok(dir, &["export-labels", "--labels", "labels.log", "--events", "filtered.jsonl", "--out", "out2.jsonl"]);
    assert_eq!(fs::read(dir.join("out1.jsonl")).unwrap(), fs::read(dir.join("out2.jsonl")).unwrap());
    let out = read_lines(&dir.join("out1.jsonl"));
    assert_eq!(out.len(), 2);
    let rec_a = out.iter().find(|r| r["event_id"] == a).unwrap();
    assert_eq!(rec_a["label"], "non_competitive");
    assert_eq!(rec_a["annotator_id"], "y");
    assert_eq!(rec_a["event"]["event_id"], a);
}

fn http(port: u16, method: &str, path: &str, body: &str) -> Option<(u16, String)> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nhost: localhost\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    )
    .ok()?;
    let mut resp = String::new();
    s.read_to_string(&mut resp).ok()?;
    let status = resp.split_whitespace().nth(1)?.parse().ok()?;
    let body = resp.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    Some((status, body))
}

#[test]
fn serve_accepts_labels_that_export_sees() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, 5);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(BIN)
        .args(["serve", "--events", "filtered.jsonl", "--labels", "labels.log", "--turns", "turns.jsonl"])
        .args(["--port", &port.to_string()])
        .current_dir(dir)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();

    let deadline = Instant::now() + Duration::from_secs(20);
    let progress = loop {
        if let Some(r) = http(port, "GET", "/api/progress", "") {
            break r;
        }
        assert!(Instant::now() < deadline, "service did not start");
        thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(progress.0, 200);

    let (status, body) = http(port, "GET", "/api/queue/next", "").unwrap();
    assert_eq!(status, 200);
    let entry: Value = serde_json::from_str(&body).unwrap();
    let id = entry["event"]["event_id"].as_str().unwrap().to_string();
    assert!(!entry["context_turns"].as_array().unwrap().is_empty());

    let body = format!(r#"{{"event_id":"{id}","label":"competitive","annotator_id":"ann1"}}"#);
    assert_eq!(http(port, "POST", "/api/labels", &body).unwrap().0, 201);
    let (status, _) = http(port, "POST", "/api/labels", r#"{"event_id":"nope","label":"competitive","annotator_id":"a"}"#).unwrap();
    assert_eq!(status, 404);
    child.kill().unwrap();
    child.wait().unwrap();

    ok(dir, &["export-labels", "--labels", "labels.log", "--events", "filtered.jsonl", "--out", "labeled.jsonl"]);
    let out = read_lines(&dir.join("labeled.jsonl"));
    assert_eq!(out.len(), 1);
    assert_eq!(out[0]["event_id"], id.as_str());
    assert_eq!(out[0]["label"], "competitive");
}
