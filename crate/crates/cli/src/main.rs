mod files;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use overlap_annotate::ServeOptions;
use overlap_core::baseline::{model_file, BaselineBackend, BaselineClassifier, BaselineConfig, NgramRange, TrainConfig};
use overlap_core::dataset::{build_dataset, ContextVariant, DatasetConfig, DEFAULT_EXTENSION_WIDTH};
use overlap_core::experiment::wire::serve_one;
use overlap_core::experiment::{
    evaluate_scores, preset, presets, run_experiment, sha256_hex, tabulate, EvalOptions, ExperimentConfig,
    ExperimentReport, ScoreRecord, TrainerLocator, WireBackend,
};
use overlap_core::metrics::Criterion;
use overlap_core::switch::{build_turn_pairs, filter_overlaps};
use overlap_core::synth::{generate_synthetic_corpus, label_from_truth, write_corpus, GroundTruth, SynthSpec};
use overlap_core::transcript::{audio_manifest, parse_transcripts, write_turns, FormatConfig, TimeUnit};
use overlap_core::{Channel, FilterConfig, LabelStore, LabeledEvent, SwitchEvent, SwitchKind};

use files::{
    audio_manifest_path, load_dialogues, meta_path, read_dataset, read_jsonl, write_bytes, write_dataset,
    write_json_pretty, write_jsonl,
};

#[derive(Parser)]
#[command(name = "overlapctl", version, about = "Competitive interruption analysis for dual-channel call transcripts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse delimited ASR transcripts into a canonical turn file.
    Ingest(IngestArgs),
    /// Classify every consecutive turn pair.
    Pairs {
        #[arg(long)]
        turns: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the overlap candidates worth labeling.
    Filter(FilterArgs),
    /// Run the annotation HTTP service.
    Serve(ServeArgs),
    /// Replay a label log and write the latest label per event.
    ExportLabels {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label events from a synthetic corpus's ground truth.
    LabelFromTruth {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fail when an event has no ground-truth label.
        #[arg(long)]
        strict: bool,
    },
    /// Build folded model inputs from labeled events.
    Dataset(DatasetArgs),
    /// Fit the tf-idf + logistic regression baseline on the non-test folds.
    TrainBaseline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on every fold, including the test fold.
        #[arg(long)]
        all_folds: bool,
        #[command(flatten)]
        baseline: BaselineArgs,
    },
    /// Score every example of a dataset with a saved baseline model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a score file on its test fold.
    Eval(EvalArgs),
    /// Cross-validate one experiment configuration over a trainer backend.
    Experiment(ExperimentArgs),
    /// Combine experiment reports into one grouped table.
    Tabulate {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic labeled corpus.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Directory with competitive.txt, cooperative.txt and neutral.txt.
        #[arg(long)]
        lexicon_dir: Option<PathBuf>,
    },
    /// Answer one trainer request on stdin with the baseline classifier.
    TrainerStdio {
        /// Use the request's learning rate instead of --lr.
        #[arg(long)]
        use_request_lr: bool,
        #[command(flatten)]
        baseline: BaselineArgs,
    },
}

#[derive(Args)]
struct IngestArgs {
    /// A transcript file, or a directory of .csv/.tsv/.txt files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Field delimiter; `tab` or `\t` for tab.
    #[arg(long, default_value = ",")]
    delimiter: String,
    /// Header overrides, e.g. `start_ms=begin,end_ms=finish`.
    #[arg(long)]
    column_map: Option<String>,
    /// Source channel values, e.g. `0=agent,1=client`.
    #[arg(long)]
    channel_map: Option<String>,
    #[arg(long, default_value = "ms")]
    time_unit: TimeUnit,
    /// Where to write audio locators; defaults to `<out>.audio.jsonl`.
    #[arg(long)]
    audio_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    min_overlap_ms: u64,
    #[arg(long)]
    keep_unsuccessful: bool,
    #[arg(long, value_delimiter = ',', default_value = "agent,client")]
    roles: Vec<Channel>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Turn file for context turns and audio clips.
    #[arg(long)]
    turns: Option<PathBuf>,
    #[arg(long)]
    audio_manifest: Option<PathBuf>,
    /// Static labeling UI served at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    turns: PathBuf,
    /// interrupter, both or extended.
    #[arg(long, default_value = "both")]
    variant: ContextVariant,
    #[arg(long, default_value_t = DEFAULT_EXTENSION_WIDTH)]
    extension_width: usize,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 9)]
    test_fold: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep every dialogue inside one fold.
    #[arg(long)]
    group_by_dialogue: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct BaselineArgs {
    /// Inclusive n-gram range, `lo,hi`.
    #[arg(long, default_value = "1,2")]
    ngrams: String,
    #[arg(long, default_value_t = 2)]
    min_df: u32,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
}

impl BaselineArgs {
    fn config(&self) -> Result<BaselineConfig> {
        let (lo, hi) = self
            .ngrams
            .split_once(',')
            .ok_or_else(|| anyhow!("--ngrams expects `lo,hi`, got `{}`", self.ngrams))?;
        let ngram_range = NgramRange::new(lo.trim().parse()?, hi.trim().parse()?)?;
        Ok(BaselineConfig {
            ngram_range,
            min_df: self.min_df,
            train: TrainConfig {
                l2_lambda: self.l2,
                learning_rate: self.lr,
                max_epochs: self.epochs,
                tol: self.tol,
            },
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "f1_macro")]
    criterion: Criterion,
    #[arg(long, default_value_t = 9)]
    test_fold: usize,
    /// Dataset the scores came from; its hash is recorded.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "baseline")]
    row_label: String,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (.toml or .json).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: experiment1-interrupter, experiment1-both, experiment2 or experiment3.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    dataset: PathBuf,
    /// Shell command speaking the trainer protocol on stdin/stdout.
    #[arg(long, conflicts_with_all = ["trainer_url", "baseline"])]
    trainer_cmd: Option<String>,
    /// HTTP endpoint speaking the trainer protocol.
    #[arg(long, conflicts_with = "baseline")]
    trainer_url: Option<String>,
    /// Use the built-in baseline classifier in-process.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    max_parallel_rows: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the table as tab-separated text.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Pairs { turns, out } => pairs(&turns, &out),
        Command::Filter(a) => filter(a),
        Command::Serve(a) => serve(a),
        Command::ExportLabels { labels, events, out } => export_labels(&labels, &events, &out),
        Command::LabelFromTruth {
            events,
            truth,
            out,
            strict,
        } => label_truth(&events, &truth, &out, strict),
        Command::Dataset(a) => dataset(a),
        Command::TrainBaseline {
            dataset,
            out,
            all_folds,
            baseline,
        } => train_baseline(&dataset, &out, all_folds, &baseline),
        Command::Score { model, dataset, out } => score(&model, &dataset, &out),
        Command::Eval(a) => eval(a),
        Command::Experiment(a) => experiment(a),
        Command::Tabulate { reports, out } => tabulate_reports(&reports, &out),
        Command::Synth {
            spec,
            out_dir,
            lexicon_dir,
        } => synth(&spec, &out_dir, lexicon_dir.as_deref()),
        Command::TrainerStdio {
            use_request_lr,
            baseline,
        } => trainer_stdio(use_request_lr, &baseline),
    }
}

fn parse_delimiter(raw: &str) -> Result<u8> {
    match raw {
        "tab" | "\\t" | "\t" => Ok(b'\t'),
        s if s.len() == 1 => Ok(s.as_bytes()[0]),
        other => bail!("delimiter must be a single ASCII character, got `{other}`"),
    }
}

fn transcript_files(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e, "csv" | "tsv" | "txt"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .csv, .tsv or .txt files in {}", input.display());
    }
    Ok(files)
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut cfg = FormatConfig {
        delimiter: parse_delimiter(&a.delimiter)?,
        time_unit: a.time_unit,
        ..FormatConfig::default()
    };
    if let Some(spec) = &a.column_map {
        cfg.columns.apply_overrides(spec)?;
    }
    if let Some(spec) = &a.channel_map {
        cfg.apply_channel_map(spec)?;
    }
    let paths = transcript_files(&a.input)?;
    let readers = paths
        .iter()
        .map(|p| File::open(p).map(BufReader::new).with_context(|| format!("opening {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let dialogues = parse_transcripts(readers, &cfg)?;
    let mut buf = Vec::new();
    write_turns(&mut buf, &dialogues)?;
    write_bytes(&a.out, &buf)?;
    let audio = audio_manifest(&dialogues);
    if !audio.is_empty() {
        let path = a.audio_manifest.unwrap_or_else(|| audio_manifest_path(&a.out));
        write_jsonl(&path, &audio)?;
    }
    let n_turns: usize = dialogues.iter().map(|d| d.turns.len()).sum();
    log::info!("{} dialogues, {n_turns} turns from {} file(s)", dialogues.len(), paths.len());
    Ok(())
}

fn pairs(turns: &Path, out: &Path) -> Result<()> {
    let dialogues = load_dialogues(turns, None)?;
    let mut events = Vec::new();
    for d in &dialogues {
        events.extend(build_turn_pairs(d).with_context(|| format!("dialogue {}", d.dialogue_id))?);
    }
    write_jsonl(out, &events)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in &events {
        *counts.entry(e.kind.to_string()).or_default() += 1;
    }
    log::info!("{} pairs: {counts:?}", events.len());
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let cfg = FilterConfig::new(a.min_overlap_ms, !a.keep_unsuccessful, a.roles)?;
    let events: Vec<SwitchEvent> = read_jsonl(&a.events)?;
    let kept = filter_overlaps(&events, &cfg);
    write_jsonl(&a.out, &kept)?;
    let overlaps = events.iter().filter(|e| e.kind == SwitchKind::Overlap).count();
    log::info!("kept {} of {overlaps} overlaps ({} pairs)", kept.len(), events.len());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let events: Vec<SwitchEvent> = read_jsonl(&a.events)?;
    let dialogues = match &a.turns {
        Some(t) => load_dialogues(t, a.audio_manifest.as_deref())?,
        None => Vec::new(),
    };
    let (store, orphaned) = LabelStore::open(&events, dialogues, &a.labels)?;
    if orphaned > 0 {
        log::warn!("{orphaned} log records refer to events not in {}", a.events.display());
    }
    let p = store.progress();
    log::info!("{} candidates, {} unlabeled", store.len(), p.unlabeled);
    let options = ServeOptions {
        addr: format!("{}:{}", a.host, a.port),
        ui_dir: a.ui_dir,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(overlap_annotate::serve(store, &options))?;
    Ok(())
}

fn export_labels(labels: &Path, events: &Path, out: &Path) -> Result<()> {
    let events: Vec<SwitchEvent> = read_jsonl(events)?;
    let mut store = LabelStore::new();
    store.enqueue_candidates(&events);
    let orphaned = store.replay_log(labels)?;
    if orphaned > 0 {
        log::warn!("{orphaned} log records refer to unknown events and were skipped");
    }
    let exported = store.export_labels();
    write_jsonl(out, &exported)?;
    let p = store.progress();
    log::info!(
        "exported {} labels: {} competitive, {} non_competitive, {} undefined; {} unlabeled",
        exported.len(),
        p.competitive,
        p.non_competitive,
        p.undefined,
        p.unlabeled
    );
    Ok(())
}

fn label_truth(events: &Path, truth: &Path, out: &Path, strict: bool) -> Result<()> {
    let events: Vec<SwitchEvent> = read_jsonl(events)?;
    let truth: Vec<GroundTruth> = read_jsonl(truth)?;
    let join = label_from_truth(&events, &truth);
    if !join.unmatched.is_empty() {
        if strict {
            bail!("{} events have no ground truth, e.g. {}", join.unmatched.len(), join.unmatched[0]);
        }
        log::warn!("{} events have no ground truth", join.unmatched.len());
    }
    write_jsonl(out, &join.labeled)?;
    log::info!("labeled {} events", join.labeled.len());
    Ok(())
}

fn dataset(a: DatasetArgs) -> Result<()> {
    let labeled: Vec<LabeledEvent> = read_jsonl(&a.labeled)?;
    let dialogues = load_dialogues(&a.turns, None)?;
    let variant = match a.variant {
        ContextVariant::Extended { .. } => ContextVariant::Extended {
            extension_width: a.extension_width,
        },
        v => v,
    };
    let cfg = DatasetConfig {
        variant,
        n_folds: a.folds,
        test_fold: a.test_fold,
        seed: a.seed,
        group_by_dialogue: a.group_by_dialogue,
    };
    let built = build_dataset(&labeled, &dialogues, &cfg)?;
    write_dataset(&a.out, &built.dataset, a.group_by_dialogue)?;
    let counts = built.dataset.class_counts();
    let pos: usize = counts.iter().map(|c| c[0]).sum();
    let neg: usize = counts.iter().map(|c| c[1]).sum();
    log::info!(
        "{} examples ({pos} competitive, {neg} non_competitive), {} skipped; meta in {}",
        built.dataset.inputs.len(),
        built.skipped.len(),
        meta_path(&a.out).display()
    );
    Ok(())
}

fn train_baseline(dataset: &Path, out: &Path, all_folds: bool, args: &BaselineArgs) -> Result<()> {
    let folded = read_dataset(dataset)?;
    let train = folded
        .inputs
        .iter()
        .filter(|i| all_folds || i.fold != folded.test_fold)
        .map(|i| (i.segment_a.as_str(), i.segment_b.as_str(), i.label.is_positive()));
    let clf = BaselineClassifier::fit(train, &args.config()?)?;
    model_file::save(out, &clf).with_context(|| format!("writing {}", out.display()))?;
    let log = &clf.model.training_log;
    log::info!(
        "{} features, {} iterations, final loss {:.6}",
        clf.vocabulary.len(),
        log.len(),
        log.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn score(model: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let clf = model_file::load(model).with_context(|| format!("loading {}", model.display()))?;
    let folded = read_dataset(dataset)?;
    let records: Vec<ScoreRecord> = folded
        .inputs
        .iter()
        .map(|i| ScoreRecord {
            event_id: i.event_id.clone(),
            fold: i.fold,
            label: i.label,
            score: clf.score(&i.segment_a, &i.segment_b),
        })
        .collect();
    write_jsonl(out, &records)
}

fn eval(a: EvalArgs) -> Result<()> {
    let records: Vec<ScoreRecord> = read_jsonl(&a.scores)?;
    let dataset_sha256 = match &a.dataset {
        Some(p) => Some(sha256_hex(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)),
        None => None,
    };
    let options = EvalOptions {
        criterion: a.criterion,
        test_fold: a.test_fold,
        row_label: a.row_label.clone(),
        dataset_sha256,
        config: Some(json!({
            "scores": a.scores.display().to_string(),
            "criterion": a.criterion,
            "test_fold": a.test_fold,
        })),
    };
    let report = evaluate_scores(&records, &options)?;
    write_json_pretty(&a.out, &report)?;
    let r = &report.row;
    println!(
        "ROC AUC {:.4}  threshold {:.4}  F1 macro {:.4}  balanced accuracy {:.4}  (n_test {})",
        r.roc_auc_binary, r.best_threshold, r.f1_macro, r.balanced_accuracy, report.provenance.n_test
    );
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut config = match (&a.config, &a.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => preset(name).ok_or_else(|| {
            let names: Vec<String> = presets().into_iter().map(|c| c.name).collect();
            anyhow!("unknown preset `{name}` (available: {})", names.join(", "))
        })?,
        (None, None) => unreachable!("clap requires --config or --preset"),
    };
    if let Some(n) = a.max_parallel_rows {
        config.max_parallel_rows = n;
    }
    if let Some(cmd) = &a.trainer_cmd {
        config.trainer = Some(TrainerLocator::Command(cmd.clone()));
    }
    if let Some(url) = &a.trainer_url {
        config.trainer = Some(TrainerLocator::Http(url.clone()));
    }
    config.validate()?;
    let folded = read_dataset(&a.dataset)?;

    let report = if a.baseline {
        run_experiment(&config, &folded, &BaselineBackend::default())?
    } else {
        let locator = config
            .trainer
            .clone()
            .ok_or_else(|| anyhow!("no trainer: pass --trainer-cmd, --trainer-url or --baseline"))?;
        let backend = WireBackend {
            locator,
            timeout: Duration::from_secs(config.timeout_secs),
        };
        run_experiment(&config, &folded, &backend)?
    };
    write_bytes(&a.out, &report.to_json_bytes())?;
    let table = tabulate(std::slice::from_ref(&report)).to_tsv();
    if let Some(path) = &a.tsv {
        write_bytes(path, table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn tabulate_reports(paths: &[PathBuf], out: &Path) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<ExperimentReport>(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = tabulate(&reports);
    if out.extension().is_some_and(|e| e == "json") {
        write_json_pretty(out, &table)?;
    } else {
        write_bytes(out, table.to_tsv().as_bytes())?;
    }
    print!("{}", table.to_tsv());
    Ok(())
}

fn synth(spec: &Path, out_dir: &Path, lexicon_dir: Option<&Path>) -> Result<()> {
    let mut spec = SynthSpec::load(spec).with_context(|| format!("loading {}", spec.display()))?;
    if let Some(dir) = lexicon_dir {
        spec.load_lexicon_dir(dir)?;
    }
    let corpus = generate_synthetic_corpus(&spec)?;
    write_corpus(&corpus, out_dir)?;
    let competitive = corpus
        .truth
        .iter()
        .filter(|t| t.label == overlap_core::Label::Competitive)
        .count();
    log::info!(
        "{} dialogues, {} labeled overlaps ({competitive} competitive) in {}",
        corpus.dialogues.len(),
        corpus.truth.len(),
        out_dir.display()
    );
    Ok(())
}

fn trainer_stdio(use_request_lr: bool, args: &BaselineArgs) -> Result<()> {
    let backend = BaselineBackend {
        config: args.config()?,
        use_request_learning_rate: use_request_lr,
    };
    let stdin = io::stdin();
    let stdout = io::stdout();
    if !serve_one(&backend, stdin.lock(), stdout.lock())? {
        bail!("no request on stdin");
    }
    Ok(())
}
