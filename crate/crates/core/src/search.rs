//! Random search over architecture choices, selected by dev-set metric.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::compiler::{compile, enumerate_candidates, ArchChoice, CompileError};
use crate::hash::Fnv64;
use crate::hparams::HyperKey;
use crate::labelmodel::LabelArtifact;
use crate::monitor::{evaluate_units, task_metric, MonitorError};
use crate::rowstore::RowStore;
use crate::schema::{Schema, TuningSpec};
use crate::trainer::{train, TrainConfig, TrainedModel};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error("all {0} trials failed; first error: {1}")]
    AllTrialsFailed(usize, String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub choice: ArchChoice,
    /// Unweighted mean of `per_task`.
    pub dev_metric: f64,
    pub per_task: BTreeMap<String, f64>,
    /// Keyed by (task, slice tag).
    pub per_slice: BTreeMap<(String, String), f64>,
    pub wall_time: f64,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub best: TrainedModel,
    pub best_trial: usize,
    pub trials: Vec<TrialResult>,
}

/// Training seed of trial `i`.
pub fn trial_seed(search_seed: u64, trial: usize) -> u64 {
    Fnv64::default().write(b"trial").write_u64(search_seed).write_u64(trial as u64).finish()
}

fn run_trial(
    schema: &Schema,
    store: &RowStore,
    labels: &[LabelArtifact],
    dev: &[usize],
    trial: usize,
    seed: u64,
    choice: ArchChoice,
) -> (TrialResult, Option<TrainedModel>) {
    let start = Instant::now();
    let attempt = || -> Result<(TrainedModel, BTreeMap<String, f64>, BTreeMap<(String, String), f64>), String> {
        let ir = compile(schema, &choice).map_err(|e| e.to_string())?;
        let model = train(&ir, schema, store, labels, &TrainConfig::from_choice(&choice, seed)).map_err(|e| e.to_string())?;
        let evals = evaluate_units(&model, schema, store, dev).map_err(|e: MonitorError| e.to_string())?;
        let mut per_task = BTreeMap::new();
        let mut per_slice = BTreeMap::new();
        for ev in &evals {
            per_task.insert(ev.task.clone(), task_metric(schema, ev, &|_| true));
        }
        for slice in &schema.slices {
            let members: BTreeSet<usize> = store.rows_with_tag(&slice.tag).into_iter().collect();
            for t in schema.slice_tasks(slice) {
                if let Some(ev) = evals.iter().find(|e| e.task == t.name) {
                    per_slice.insert((t.name.clone(), slice.tag.clone()), task_metric(schema, ev, &|r| members.contains(&r)));
                }
            }
        }
        Ok((model, per_task, per_slice))
    };
    let outcome = attempt();
    let wall_time = start.elapsed().as_secs_f64();
    match outcome {
        Ok((model, per_task, per_slice)) => {
            let dev_metric = per_task.values().sum::<f64>() / per_task.len().max(1) as f64;
            (TrialResult { trial, seed, choice, dev_metric, per_task, per_slice, wall_time, error: None }, Some(model))
        }
        Err(e) => {
            let per_task = schema.tasks.iter().map(|t| (t.name.clone(), 0.0)).collect();
            let r = TrialResult {
                trial,
                seed,
                choice,
                dev_metric: 0.0,
                per_task,
                per_slice: BTreeMap::new(),
                wall_time,
                error: Some(e),
            };
            (r, None)
        }
    }
}

/// Train every candidate, score it on dev rows and keep the best. Trials run
/// in parallel, a thread-pool's worth at a time; results are ordered by trial
/// index and ties go to the earliest trial, so scheduling never changes the
/// outcome. Only train and dev rows are read.
pub fn run_search(
    schema: &Schema,
    store: &RowStore,
    labels: &[LabelArtifact],
    tuning: &TuningSpec,
) -> Result<SearchOutcome, SearchError> {
    let candidates = enumerate_candidates(schema, tuning)?;
    let dev = store.rows_with_tag("dev");
    let width = rayon::current_num_threads().max(1);
    let mut trials = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64, TrainedModel)> = None;
    let indexed: Vec<(usize, ArchChoice)> = candidates.into_iter().enumerate().collect();
    for wave in indexed.chunks(width) {
        let results: Vec<_> = wave
            .par_iter()
            .map(|(i, c)| run_trial(schema, store, labels, &dev, *i, trial_seed(tuning.seed, *i), c.clone()))
            .collect();
        for (r, model) in results {
            if let Some(model) = model {
                if best.as_ref().is_none_or(|b| r.dev_metric > b.1) {
                    best = Some((r.trial, r.dev_metric, model));
                }
            }
            trials.push(r);
        }
    }
    match best {
        Some((best_trial, _, best)) => Ok(SearchOutcome { best, best_trial, trials }),
        None => {
            let first = trials.first().and_then(|t| t.error.clone()).unwrap_or_default();
            Err(SearchError::AllTrialsFailed(trials.len(), first))
        }
    }
}

/// Index of the trial with the highest dev metric, earliest on ties; failed
/// trials are never selected.
pub fn argmax_trial(trials: &[TrialResult]) -> Option<usize> {
    let mut best: Option<&TrialResult> = None;
    for t in trials.iter().filter(|t| t.error.is_none()) {
        if best.is_none_or(|b| t.dev_metric > b.dev_metric) {
            best = Some(t);
        }
    }
    best.map(|t| t.trial)
}

fn choice_columns(trials: &[TrialResult]) -> Vec<HyperKey> {
    let mut keys = Vec::new();
    if let Some(t) = trials.first() {
        keys.extend(t.choice.encoders.keys().map(|p| HyperKey::PayloadEncoder(p.clone())));
    }
    keys.extend([HyperKey::EmbedDim, HyperKey::HiddenDim, HyperKey::LearningRate, HyperKey::Epochs, HyperKey::BatchSize]);
    keys
}

fn key_name(k: &HyperKey) -> String {
    match k {
        HyperKey::Encoder => "encoder".into(),
        HyperKey::PayloadEncoder(p) => format!("encoder.{p}"),
        HyperKey::EmbedDim => "embed_dim".into(),
        HyperKey::HiddenDim => "hidden_dim".into(),
        HyperKey::LearningRate => "learning_rate".into(),
        HyperKey::Epochs => "epochs".into(),
        HyperKey::BatchSize => "batch_size".into(),
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

/// One row per trial. Wall time is kept out of this file so it stays
/// byte-reproducible; see [`search_timing_csv`].
pub fn search_results_csv(trials: &[TrialResult]) -> String {
    let keys = choice_columns(trials);
    let tasks: BTreeSet<&String> = trials.iter().flat_map(|t| t.per_task.keys()).collect();
    let slices: BTreeSet<&(String, String)> = trials.iter().flat_map(|t| t.per_slice.keys()).collect();
    let mut w = csv_writer();
    let mut header = vec!["trial_id".to_string(), "seed".to_string()];
    header.extend(keys.iter().map(key_name));
    header.push("dev_metric".into());
    header.extend(tasks.iter().map(|t| format!("dev.{t}")));
    header.extend(slices.iter().map(|(t, s)| format!("slice.{s}.{t}")));
    header.push("error".into());
    w.write_record(&header).expect("in-memory write");
    for t in trials {
        let mut row = vec![t.trial.to_string(), t.seed.to_string()];
        row.extend(keys.iter().map(|k| t.choice.value_of(k)));
        row.push(format!("{:.6}", t.dev_metric));
        row.extend(tasks.iter().map(|k| t.per_task.get(*k).map(|v| format!("{v:.6}")).unwrap_or_default()));
        row.extend(slices.iter().map(|k| t.per_slice.get(*k).map(|v| format!("{v:.6}")).unwrap_or_default()));
        row.push(t.error.clone().unwrap_or_default());
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn search_timing_csv(trials: &[TrialResult]) -> String {
    let mut w = csv_writer();
    w.write_record(["trial_id", "wall_time"]).expect("in-memory write");
    for t in trials {
        w.write_record([t.trial.to_string(), format!("{:.6}", t.wall_time)]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelmodel::{fit_task_labels, LabelMode};
    use crate::rowstore::ingest;
    use crate::schema::{parse_schema, ParamValue};

    fn corpus(n: usize, tuning: &str) -> (Schema, RowStore, Vec<LabelArtifact>) {
        let schema = parse_schema(&format!(
            r#"{{"payloads": [{{"name": "x", "kind": "singleton", "inputs": [{{"field": "x"}}]}}],
                "tasks": [{{"name": "Y", "payload": "x", "kind": {{"multiclass": ["neg", "pos"]}}}}],
                "tuning": {tuning}}}"#
        ))
        .unwrap();
        let mut data = String::new();
        for i in 0..n {
            let pos = i % 2 == 0;
            let split = ["train", "train", "train", "dev", "test"][i % 5];
            data.push_str(&format!(
                "{{\"x\": \"{}{}\", \"supervision\": {{\"Y\": [{{\"source\": \"gold\", \"value\": \"{}\"}}]}}, \"tags\": [\"{split}\"]}}\n",
                if pos { "p" } else { "n" },
                i % 13,
                if pos { "pos" } else { "neg" }
            ));
        }
        let store = ingest(&schema, data.as_bytes()).unwrap().store;
        let train = store.rows_with_tag("train");
        let labels = vec![fit_task_labels(&store, &schema, "Y", &train, LabelMode::MajorityVote).unwrap()];
        (schema, store, labels)
    }

    #[test]
    fn single_trial_is_the_best() {
        let (schema, store, labels) = corpus(100, r#"{"budget": 1, "seed": 3}"#);
        let out = run_search(&schema, &store, &labels, &schema.tuning).unwrap();
        assert_eq!(out.trials.len(), 1);
        assert_eq!(out.best_trial, 0);
        assert!(out.trials[0].error.is_none());
    }

    #[test]
    fn more_epochs_win_and_argmax_agrees() {
        let (schema, store, labels) =
            corpus(200, r#"{"search_space": {"epochs": [1, 10]}, "pinned": {"learning_rate": 0.02, "batch_size": 32}, "budget": 2, "seed": 5}"#);
        let out = run_search(&schema, &store, &labels, &schema.tuning).unwrap();
        assert_eq!(out.trials.len(), 2);
        let winner = &out.trials[out.best_trial];
        assert_eq!(winner.choice.epochs, 10, "{:?}", out.trials);
        assert_eq!(argmax_trial(&out.trials), Some(out.best_trial));
        for t in &out.trials {
            assert_eq!(t.choice.learning_rate, 0.02);
            assert_eq!(t.choice.batch_size, 32);
        }
    }

    #[test]
    fn search_never_reads_test_rows() {
        let (schema, store, labels) =
            corpus(150, r#"{"search_space": {"hidden_dim": [4, 8], "epochs": [2, 3]}, "pinned": {"embed_dim": 4}, "budget": 3, "seed": 9}"#);
        store.reset_access_log();
        let out = run_search(&schema, &store, &labels, &schema.tuning).unwrap();
        let test: std::collections::BTreeSet<usize> = store.rows_with_tag("test").into_iter().collect();
        assert!(!test.is_empty());
        assert!(store.accessed_rows().iter().all(|r| !test.contains(r)));
        assert!(out.trials.iter().all(|t| t.choice.embed_dim == 4));
        assert_eq!(schema.tuning.pinned["embed_dim"], ParamValue::Int(4));
    }

    #[test]
    fn reproducible_and_csv_shape() {
        let tuning = r#"{"search_space": {"hidden_dim": [4, 8]}, "pinned": {"epochs": 2}, "budget": 2, "seed": 11}"#;
        let (schema, store, labels) = corpus(80, tuning);
        let a = run_search(&schema, &store, &labels, &schema.tuning).unwrap();
        let b = run_search(&schema, &store, &labels, &schema.tuning).unwrap();
        assert_eq!(a.best.to_bytes(), b.best.to_bytes());
        let csv = search_results_csv(&a.trials);
        assert_eq!(csv, search_results_csv(&b.trials));
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "trial_id,seed,embed_dim,hidden_dim,learning_rate,epochs,batch_size,dev_metric,dev.Y,error"
        );
        assert_eq!(lines.count(), 2);
        assert_eq!(search_timing_csv(&a.trials).lines().count(), 3);
    }

    #[test]
    fn failed_trial_scores_zero() {
        let (schema, store, _) = corpus(40, r#"{"budget": 1, "seed": 1}"#);
        let err = run_search(&schema, &store, &[], &schema.tuning).unwrap_err();
        assert!(matches!(err, SearchError::AllTrialsFailed(1, _)));
    }
}
