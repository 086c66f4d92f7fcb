//! Subcommands of the `ovt` binary. Exit codes: 0 success, 1 validation
//! failure, 2 runtime error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ovt_core::compiler::{compile, enumerate_candidates, ArchChoice};
use ovt_core::hash::{fnv1a64, hex64};
use ovt_core::labelmodel::{fit_task_labels, LabelArtifact, LabelMode};
use ovt_core::monitor::{
    default_report_tags, evaluate, mean_curve, report_csv, report_json, scaling_csv, scaling_curve, Report,
};
use ovt_core::rowstore::{ingest, parse_record, RowStore, StoreError};
use ovt_core::schema::{parse_schema, schema_hash, ParamValue, Schema, TuningSpec};
use ovt_core::search::{run_search, search_results_csv, search_timing_csv};
use ovt_core::synth;
use ovt_core::trainer::{predict, train, validate_prediction, PredictError, TrainConfig, TrainedModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    fn invalid(e: impl Into<anyhow::Error>) -> Failure {
        Failure { code: EXIT_INVALID, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: EXIT_RUNTIME, error }
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "ovt", version, about = "Compile a schema and weak supervision into a monitored multitask model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check a schema and, optionally, a data file against it.
    Validate {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Build a row store from a JSONL data file.
    Ingest {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the label model for every task on the train rows.
    FitLabels {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Em)]
        mode: Mode,
    },
    /// Train one model: defaults, then pinned values, then `--set` overrides.
    Train {
        #[command(flatten)]
        inputs: TrainInputs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Random search over the tuning spec, selected on dev rows.
    Search {
        #[command(flatten)]
        inputs: TrainInputs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        budget: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-tag quality report of a model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Comma-separated; defaults to the splits, slices and all store tags.
        #[arg(long, value_delimiter = ',')]
        tags: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Re-export a JSON report, to stdout unless `--out` is given.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Data-scaling curve over nested train subsamples.
    Scaling {
        #[command(flatten)]
        inputs: TrainInputs,
        #[arg(long, value_delimiter = ',', default_value = "0.03125,0.0625,0.125,0.25,0.5,1")]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict every record in a JSON or JSONL file; one JSON line each.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Write a synthetic corpus: schema.json, data.jsonl, truth.json.
    GenSynthetic {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(synth::GENERATORS))]
        kind: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// ingest, fit-labels, search, evaluate in one go.
    Pipeline {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        budget: Option<u32>,
        #[arg(long, value_enum, default_value_t = Mode::Em)]
        label_mode: Mode,
    },
}

#[derive(Args, Debug)]
pub struct TrainInputs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    labels_dir: PathBuf,
    /// Hyperparameter override, e.g. `epochs=20` or `encoder.tokens=recurrent`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Em,
    MajorityVote,
}

impl From<Mode> for LabelMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Em => LabelMode::Em,
            Mode::MajorityVote => LabelMode::MajorityVote,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Cap the global thread pool with `OVERTON_THREADS`, if set.
pub fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("OVERTON_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("OVERTON_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("OVERTON_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { schema, data } => cmd_validate(&schema, data.as_deref()),
        Command::Ingest { schema, data, out } => {
            let schema = load_schema(&schema)?;
            let store = ingest_file(&schema, &data)?;
            write_store(&store, &out)?;
            println!("{} rows", store.len());
            Ok(())
        }
        Command::FitLabels { schema, store, out_dir, mode } => {
            let schema = load_schema(&schema)?;
            let store = open_store(&schema, &store)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            for art in fit_all(&schema, &store, mode.into())? {
                write_atomic(&out_dir.join(label_file(&art.task)), art.to_json().as_bytes())?;
            }
            Ok(())
        }
        Command::Train { inputs, out, seed } => {
            let (schema, store, labels) = load_train_inputs(&inputs)?;
            let choice = choice_with_overrides(&schema, &inputs.overrides, seed)?;
            let ir = compile(&schema, &choice).map_err(Failure::invalid)?;
            let model = train(&ir, &schema, &store, &labels, &TrainConfig::from_choice(&choice, seed)).map_err(anyhow::Error::from)?;
            write_atomic(&out, &model.to_bytes())
        }
        Command::Search { inputs, out_dir, budget, seed } => {
            let (schema, store, labels) = load_train_inputs(&inputs)?;
            let tuning = tuning_with(&schema, &inputs.overrides, budget, seed)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            search_into(&schema, &store, &labels, &tuning, &out_dir)?;
            Ok(())
        }
        Command::Evaluate { model, store, tags, out, format } => {
            let model = open_model(&model)?;
            let schema = model.parsed_schema().map_err(anyhow::Error::from)?;
            let store = open_store(&schema, &store)?;
            let tags = tags.unwrap_or_else(|| default_report_tags(&schema, &store));
            let report = evaluate(&model, &schema, &store, &tags).map_err(anyhow::Error::from)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            write_atomic(&out, render(&report, format).as_bytes())
        }
        Command::Report { input, format, out } => {
            let text = read_text(&input)?;
            let report: Report = serde_json::from_str(&text).map_err(|e| Failure::invalid(anyhow!("{}: {e}", input.display())))?;
            let text = render(&report, format);
            match out {
                Some(p) => write_atomic(&p, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Scaling { inputs, fractions, seeds, out } => {
            let (schema, store, labels) = load_train_inputs(&inputs)?;
            let choice = choice_with_overrides(&schema, &inputs.overrides, 0)?;
            let rows = scaling_curve(&schema, &store, &labels, &choice, &fractions, &seeds).map_err(anyhow::Error::from)?;
            write_atomic(&out, scaling_csv(&rows).as_bytes())?;
            for (task, pts) in mean_curve(&rows) {
                let pts: Vec<String> = pts.iter().map(|(f, q)| format!("{f}:{q:.3}")).collect();
                println!("{task}: {}", pts.join(" "));
            }
            Ok(())
        }
        Command::Predict { model, input } => cmd_predict(&model, &input),
        Command::GenSynthetic { kind, out_dir, n, seed } => {
            let corpus = synth::generate(&kind, n, seed).ok_or_else(|| Failure::invalid(anyhow!("unknown generator `{kind}`")))?;
            corpus.write(&out_dir).with_context(|| format!("writing {}", out_dir.display()))?;
            if kind == "running-example" {
                let q = synth::running_example_query().to_string() + "\n";
                fs::write(out_dir.join("query.json"), q).context("writing query.json")?;
            }
            println!("{} records", corpus.records.len());
            Ok(())
        }
        Command::Pipeline { schema, data, out_dir, seed, budget, label_mode } => {
            cmd_pipeline(&schema, &data, &out_dir, seed, budget, label_mode.into())
        }
    }
}

// ---- helpers -------------------------------------------------------------

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

fn load_schema(path: &Path) -> Result<Schema> {
    let text = read_text(path)?;
    parse_schema(&text).map_err(|e| Failure::invalid(anyhow!("{}: {e}", path.display())))
}

fn ingest_file(schema: &Schema, path: &Path) -> Result<RowStore> {
    let file = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    match ingest(schema, std::io::BufReader::new(file)) {
        Ok(out) => {
            for e in &out.errors {
                eprintln!("{}: skipped {e}", path.display());
            }
            Ok(out.store)
        }
        Err(StoreError::FatalFormat { rejected, total, errors }) => {
            for e in errors.iter().take(10) {
                eprintln!("{}: {e}", path.display());
            }
            Err(Failure::invalid(anyhow!("{}: {rejected} of {total} lines rejected", path.display())))
        }
        Err(e) => Err(anyhow::Error::from(e).into()),
    }
}

fn write_store(store: &RowStore, path: &Path) -> Result<()> {
    Ok(store.write(path).with_context(|| format!("writing {}", path.display()))?)
}

fn open_store(schema: &Schema, path: &Path) -> Result<RowStore> {
    let store = RowStore::open(path).with_context(|| format!("opening {}", path.display()))?;
    store.check_schema(schema).map_err(Failure::invalid)?;
    Ok(store)
}

fn open_model(path: &Path) -> Result<TrainedModel> {
    Ok(TrainedModel::open(path).with_context(|| format!("opening {}", path.display()))?)
}

fn label_file(task: &str) -> String {
    format!("labels.{task}.json")
}

fn fit_all(schema: &Schema, store: &RowStore, mode: LabelMode) -> Result<Vec<LabelArtifact>> {
    let train = store.rows_with_tag("train");
    schema
        .tasks
        .iter()
        .map(|t| {
            fit_task_labels(store, schema, &t.name, &train, mode)
                .with_context(|| format!("fitting labels for `{}`", t.name))
                .map_err(Failure::from)
        })
        .collect()
}

fn load_labels(schema: &Schema, dir: &Path) -> Result<Vec<LabelArtifact>> {
    let mut out = Vec::new();
    for t in &schema.tasks {
        let path = dir.join(label_file(&t.name));
        if !path.exists() {
            eprintln!("warning: no label artifact for `{}`; the task will not be trained", t.name);
            continue;
        }
        let art: LabelArtifact =
            serde_json::from_str(&read_text(&path)?).map_err(|e| Failure::invalid(anyhow!("{}: {e}", path.display())))?;
        out.push(art);
    }
    Ok(out)
}

fn load_train_inputs(inputs: &TrainInputs) -> Result<(Schema, RowStore, Vec<LabelArtifact>)> {
    let schema = load_schema(&inputs.schema)?;
    let store = open_store(&schema, &inputs.store)?;
    let labels = load_labels(&schema, &inputs.labels_dir)?;
    Ok((schema, store, labels))
}

fn parse_param(text: &str) -> ParamValue {
    if let Ok(v) = text.parse::<i64>() {
        ParamValue::Int(v)
    } else if let Ok(v) = text.parse::<f64>() {
        ParamValue::Float(v)
    } else {
        ParamValue::Text(text.to_string())
    }
}

/// Schema tuning with `--set` pins and flag overrides, re-validated.
fn tuning_with(schema: &Schema, overrides: &[String], budget: Option<u32>, seed: Option<u64>) -> Result<TuningSpec> {
    let mut tuning = schema.tuning.clone();
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Failure::invalid(anyhow!("`--set {o}` is not KEY=VALUE")))?;
        tuning.pinned.insert(k.trim().to_string(), parse_param(v.trim()));
    }
    if let Some(b) = budget {
        tuning.budget = b;
    }
    if let Some(s) = seed {
        tuning.seed = s;
    }
    let mut check = schema.clone();
    check.tuning = tuning.clone();
    ovt_core::schema::validate(&check).map_err(Failure::invalid)?;
    Ok(tuning)
}

fn choice_with_overrides(schema: &Schema, overrides: &[String], seed: u64) -> Result<ArchChoice> {
    let mut tuning = tuning_with(schema, overrides, Some(1), Some(seed))?;
    tuning.search_space.clear();
    let mut c = enumerate_candidates(schema, &tuning).map_err(Failure::invalid)?;
    Ok(c.remove(0))
}

fn render(report: &Report, format: Format) -> String {
    match format {
        Format::Csv => report_csv(report),
        Format::Json => report_json(report),
    }
}

/// Write through a temporary sibling so a failed run never leaves a torn file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn search_into(schema: &Schema, store: &RowStore, labels: &[LabelArtifact], tuning: &TuningSpec, dir: &Path) -> Result<TrainedModel> {
    let out = run_search(schema, store, labels, tuning).map_err(anyhow::Error::from)?;
    for t in out.trials.iter().filter(|t| t.error.is_some()) {
        eprintln!("warning: trial {} failed: {}", t.trial, t.error.as_deref().unwrap_or_default());
    }
    write_atomic(&dir.join("search.results.csv"), search_results_csv(&out.trials).as_bytes())?;
    write_atomic(&dir.join("search.timing.csv"), search_timing_csv(&out.trials).as_bytes())?;
    write_atomic(&dir.join("model.ovm"), &out.best.to_bytes())?;
    println!("best trial {} of {} (dev metric {:.4})", out.best_trial, out.trials.len(), out.trials[out.best_trial].dev_metric);
    Ok(out.best)
}

// ---- validate ------------------------------------------------------------

pub fn cmd_validate(schema_path: &Path, data: Option<&Path>) -> Result<()> {
    let schema = match parse_schema(&read_text(schema_path)?) {
        Ok(s) => s,
        Err(e) => {
            println!("{}: {e}", schema_path.display());
            return Err(Failure::invalid(anyhow!("schema is invalid")));
        }
    };
    if let Some(path) = data {
        let text = read_text(path)?;
        let mut bad = 0usize;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Err((kind, message)) = parse_record(&schema, line) {
                println!("{}:{}: {kind}: {message}", path.display(), i + 1);
                bad += 1;
            }
        }
        if bad > 0 {
            return Err(Failure::invalid(anyhow!("{bad} invalid records")));
        }
    }
    println!("OK");
    Ok(())
}

// ---- predict -------------------------------------------------------------

pub fn cmd_predict(model_path: &Path, input: &Path) -> Result<()> {
    let model = open_model(model_path)?;
    let schema = model.parsed_schema().map_err(anyhow::Error::from)?;
    let text = read_text(input)?;
    let docs: Vec<&str> = if text.trim_start().starts_with('{') && serde_json::from_str::<serde_json::Value>(&text).is_ok() {
        vec![text.as_str()]
    } else {
        text.lines().filter(|l| !l.trim().is_empty()).collect()
    };
    for (i, doc) in docs.iter().enumerate() {
        let rec = parse_record(&schema, doc)
            .map_err(|(kind, m)| Failure::invalid(anyhow!("{}: record {}: {kind}: {m}", input.display(), i + 1)))?;
        let pred = match predict(&model, &rec) {
            Ok(p) => p,
            Err(PredictError::MissingPayload(k)) => {
                return Err(Failure::invalid(anyhow!("record {}: missing payload field `{k}`", i + 1)))
            }
            Err(e) => return Err(Failure::invalid(anyhow!("record {}: {e}", i + 1))),
        };
        validate_prediction(&model.signature, &pred).map_err(|e| anyhow!("prediction violates the signature: {e}"))?;
        println!("{}", pred.to_json());
    }
    Ok(())
}

// ---- pipeline ------------------------------------------------------------

pub const PIPELINE_ARTIFACTS: [&str; 8] = [
    "store.ovrs",
    "model.ovm",
    "model.sig.json",
    "search.results.csv",
    "search.timing.csv",
    "report.csv",
    "report.json",
    "manifest.json",
];

pub fn cmd_pipeline(
    schema_path: &Path,
    data: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    budget: Option<u32>,
    mode: LabelMode,
) -> Result<()> {
    let schema = load_schema(schema_path)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let staging = out_dir.join(format!(".staging.{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).context("clearing stale staging directory")?;
    }
    fs::create_dir_all(&staging).context("creating staging directory")?;
    let result = pipeline_into(&schema, schema_path, data, &staging, seed, budget, mode).and_then(|files| {
        for f in &files {
            let to = out_dir.join(f);
            if let Some(dir) = to.parent() {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::rename(staging.join(f), &to).with_context(|| format!("moving {f} into place"))?;
        }
        Ok(())
    });
    // Nothing from a failed run survives; a finished run leaves only moved files.
    let _ = fs::remove_dir_all(&staging);
    result
}

fn pipeline_into(
    schema: &Schema,
    schema_path: &Path,
    data: &Path,
    dir: &Path,
    seed: Option<u64>,
    budget: Option<u32>,
    mode: LabelMode,
) -> Result<Vec<String>> {
    let store = ingest_file(schema, data)?;
    write_store(&store, &dir.join("store.ovrs"))?;
    let sidecar = RowStore::sidecar_path(&dir.join("store.ovrs"));
    let labels = fit_all(schema, &store, mode)?;
    let mut files: Vec<String> = PIPELINE_ARTIFACTS.iter().map(|s| s.to_string()).collect();
    if let Some(name) = sidecar.file_name().and_then(|n| n.to_str()) {
        if sidecar.exists() {
            files.push(name.to_string());
        }
    }
    for art in &labels {
        let name = format!("labels/{}", label_file(&art.task));
        write_atomic(&dir.join(&name), art.to_json().as_bytes())?;
        files.push(name);
    }
    let tuning = tuning_with(schema, &[], budget, seed)?;
    let model = search_into(schema, &store, &labels, &tuning, dir)?;
    write_atomic(&dir.join("model.sig.json"), model.signature.to_json().as_bytes())?;
    let tags = default_report_tags(schema, &store);
    let report = evaluate(&model, schema, &store, &tags).map_err(anyhow::Error::from)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_atomic(&dir.join("report.csv"), report_csv(&report).as_bytes())?;
    write_atomic(&dir.join("report.json"), report_json(&report).as_bytes())?;

    // Digests of every input and every artifact.
    let data_bytes = fs::read(data).with_context(|| format!("reading {}", data.display()))?;
    let schema_bytes = fs::read(schema_path).with_context(|| format!("reading {}", schema_path.display()))?;
    let mut artifacts = BTreeMap::new();
    for f in files.iter().filter(|f| f.as_str() != "manifest.json" && f.as_str() != "search.timing.csv") {
        let bytes = fs::read(dir.join(f)).with_context(|| format!("reading back {f}"))?;
        artifacts.insert(f.clone(), hex64(fnv1a64(&bytes)));
    }
    let manifest = json!({
        "inputs": {
            "schema": {"file_digest": hex64(fnv1a64(&schema_bytes)), "schema_hash": hex64(schema_hash(schema))},
            "data": {"file_digest": hex64(fnv1a64(&data_bytes)), "store_digest": hex64(store.digest())},
            "seed": tuning.seed,
            "budget": tuning.budget,
            "label_mode": match mode { LabelMode::Em => "em", LabelMode::MajorityVote => "majority_vote" },
        },
        "artifacts": artifacts,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)? + "\n";
    write_atomic(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(files)
}
