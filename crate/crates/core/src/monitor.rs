//! Per-tag and per-slice quality reports, and the data-scaling harness.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{compile, ArchChoice, CompileError, TaskFamily};
use crate::labelmodel::{argmax, build_label_matrix, majority_vote, LabelArtifact, LabelError, UnitRef};
use crate::numerics::Tensor;
use crate::rowstore::{RowStore, StoreError};
use crate::schema::{Schema, SPLIT_TAGS};
use crate::trainer::{task_outputs, train_rows, PredictError, TrainConfig, TrainError, TrainedModel};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad report file: {0}")]
    Format(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error("scaling fractions must lie in (0, 1]: {0}")]
    BadFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    /// No labeled units for this (tag, task).
    NoGoldLabels,
}

impl RowStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::NoGoldLabels => "no_gold_labels",
        }
    }

    fn parse(s: &str) -> Option<RowStatus> {
        match s {
            "ok" => Some(RowStatus::Ok),
            "no_gold_labels" => Some(RowStatus::NoGoldLabels),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitMetrics {
    pub bit: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub tag: String,
    pub task: String,
    pub n: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub is_slice: bool,
    pub status: RowStatus,
    /// `confusion[gold][pred]` for multiclass tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<u64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_bit: Option<Vec<BitMetrics>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Report {
    pub fn row(&self, tag: &str, task: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.tag == tag && r.task == task)
    }
}

// ---- metrics -------------------------------------------------------------

/// Precision, recall, F1 from binary counts. Undefined ratios are 0.
pub fn binary_prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Vec<Vec<u64>>,
}

/// Accuracy plus macro P/R/F1 over the classes that occur in gold or
/// predictions.
pub fn multiclass_metrics(gold: &[usize], pred: &[usize], k: usize) -> ClassMetrics {
    let mut confusion = vec![vec![0u64; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        confusion[g][p] += 1;
    }
    metrics_from_confusion(confusion)
}

pub fn metrics_from_confusion(confusion: Vec<Vec<u64>>) -> ClassMetrics {
    let k = confusion.len();
    let n: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let (mut ps, mut rs, mut fs, mut m) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..k {
        let tp = confusion[c][c];
        let gold_c: u64 = confusion[c].iter().sum();
        let pred_c: u64 = (0..k).map(|g| confusion[g][c]).sum();
        if gold_c == 0 && pred_c == 0 {
            continue;
        }
        let (p, r, f) = binary_prf(tp, pred_c - tp, gold_c - tp);
        ps += p;
        rs += r;
        fs += f;
        m += 1;
    }
    let avg = |x: f64| if m == 0 { 0.0 } else { x / m as f64 };
    ClassMetrics {
        accuracy: if n == 0 { 0.0 } else { trace as f64 / n as f64 },
        precision: avg(ps),
        recall: avg(rs),
        f1: avg(fs),
        confusion,
    }
}

// ---- unit-level evaluation -----------------------------------------------

/// Gold and predicted classes for every gold-labeled unit of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEval {
    pub task: String,
    pub family: TaskFamily,
    pub classes: usize,
    pub units: Vec<UnitRef>,
    pub gold: Vec<usize>,
    pub pred: Vec<usize>,
}

/// Evaluate every task over `rows`, with gold labels from the majority vote of
/// those rows' supervision.
pub fn evaluate_units(
    model: &TrainedModel,
    schema: &Schema,
    store: &RowStore,
    rows: &[usize],
) -> Result<Vec<TaskEval>, MonitorError> {
    let mut outputs: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
    for &r in rows {
        let rec = store.get(r)?;
        outputs.insert(r, task_outputs(model, &rec, false)?);
    }
    let mut out = Vec::new();
    for (ti, t) in model.ir.tasks.iter().enumerate() {
        let m = build_label_matrix(store, schema, &t.task, rows)?;
        let gold = majority_vote(&m);
        let classes = match t.family {
            TaskFamily::Bitvector => 2,
            _ => m.fixed_cardinality.unwrap_or(0),
        };
        let mut ev = TaskEval { task: t.task.clone(), family: t.family, classes, units: vec![], gold: vec![], pred: vec![] };
        for (u, g) in m.units.iter().zip(&gold.0) {
            let Some(g) = g else { continue };
            let o = &outputs[&u.row][ti];
            let row = o.row(u.token.unwrap_or(0));
            let p = match u.bit {
                Some(b) => (row[b] > 0.5) as usize,
                None => argmax(row),
            };
            ev.units.push(*u);
            ev.gold.push(argmax(g));
            ev.pred.push(p);
        }
        out.push(ev);
    }
    Ok(out)
}

fn bits_of(schema: &Schema, task: &str) -> Vec<String> {
    match schema.task(task).map(|t| &t.kind) {
        Some(crate::schema::TaskKind::Bitvector(b)) => b.clone(),
        _ => vec![],
    }
}

/// Report row of one task over a subset of evaluated units.
fn task_row(schema: &Schema, ev: &TaskEval, keep: &dyn Fn(usize) -> bool, tag: &str, is_slice: bool) -> ReportRow {
    let idx: Vec<usize> = (0..ev.units.len()).filter(|&i| keep(ev.units[i].row)).collect();
    let mut row = ReportRow {
        tag: tag.to_string(),
        task: ev.task.clone(),
        n: idx.len() as u64,
        accuracy: 0.0,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        is_slice,
        status: if idx.is_empty() { RowStatus::NoGoldLabels } else { RowStatus::Ok },
        confusion: None,
        per_bit: None,
    };
    if idx.is_empty() {
        return row;
    }
    let correct = idx.iter().filter(|&&i| ev.gold[i] == ev.pred[i]).count();
    row.accuracy = correct as f64 / idx.len() as f64;
    match ev.family {
        TaskFamily::Multiclass => {
            let g: Vec<usize> = idx.iter().map(|&i| ev.gold[i]).collect();
            let p: Vec<usize> = idx.iter().map(|&i| ev.pred[i]).collect();
            let m = multiclass_metrics(&g, &p, ev.classes);
            row.precision = m.precision;
            row.recall = m.recall;
            row.f1 = m.f1;
            row.confusion = Some(m.confusion);
        }
        TaskFamily::Bitvector => {
            let names = bits_of(schema, &ev.task);
            let mut per_bit = Vec::new();
            let (mut ps, mut rs, mut fs, mut m) = (0.0, 0.0, 0.0, 0usize);
            for (b, name) in names.iter().enumerate() {
                let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
                for &i in idx.iter().filter(|&&i| ev.units[i].bit == Some(b)) {
                    match (ev.gold[i], ev.pred[i]) {
                        (1, 1) => tp += 1,
                        (0, 1) => fp += 1,
                        (1, 0) => fn_ += 1,
                        _ => {}
                    }
                }
                let (p, r, f) = binary_prf(tp, fp, fn_);
                if tp + fp + fn_ > 0 {
                    ps += p;
                    rs += r;
                    fs += f;
                    m += 1;
                }
                per_bit.push(BitMetrics { bit: name.clone(), precision: p, recall: r, f1: f, support: tp + fn_ });
            }
            // no positives anywhere: every bit was correctly predicted off
            let (p, r, f) = if m == 0 { (1.0, 1.0, 1.0) } else { (ps / m as f64, rs / m as f64, fs / m as f64) };
            row.precision = p;
            row.recall = r;
            row.f1 = f;
            row.per_bit = Some(per_bit);
        }
        TaskFamily::Select => {
            // single-label choice: micro P/R/F1 coincide with accuracy
            row.precision = row.accuracy;
            row.recall = row.accuracy;
            row.f1 = row.accuracy;
        }
    }
    row
}

/// Headline metric of a task: accuracy, or macro-F1 for bitvectors.
pub fn task_metric(schema: &Schema, ev: &TaskEval, keep: &dyn Fn(usize) -> bool) -> f64 {
    let row = task_row(schema, ev, keep, "", false);
    match ev.family {
        TaskFamily::Bitvector => row.f1,
        _ => row.accuracy,
    }
}

/// Per-tag report. Split tags are evaluated over their own rows; every other
/// tag over its rows within the test split. Gold labels are the majority vote
/// of the evaluated rows' supervision.
pub fn evaluate(model: &TrainedModel, schema: &Schema, store: &RowStore, tags: &[String]) -> Result<Report, MonitorError> {
    let mut report = Report::default();
    let mut by_split: BTreeMap<&str, Vec<TaskEval>> = BTreeMap::new();
    for tag in tags {
        if !store.tag_index().contains_key(tag) && !SPLIT_TAGS.contains(&tag.as_str()) && !schema.is_slice(tag) {
            report.warnings.push(format!("unknown tag `{tag}`"));
            continue;
        }
        let split = SPLIT_TAGS.iter().copied().find(|s| s == tag).unwrap_or("test");
        if !by_split.contains_key(split) {
            let rows = store.rows_with_tag(split);
            by_split.insert(split, evaluate_units(model, schema, store, &rows)?);
        }
        let members: std::collections::BTreeSet<usize> = store.rows_with_tag(tag).into_iter().collect();
        for ev in &by_split[split] {
            report.rows.push(task_row(schema, ev, &|r| members.contains(&r), tag, schema.is_slice(tag)));
        }
    }
    Ok(report)
}

/// Split tags, then slices, then any other tag present in the store.
pub fn default_report_tags(schema: &Schema, store: &RowStore) -> Vec<String> {
    let mut tags: Vec<String> = SPLIT_TAGS.iter().map(|s| s.to_string()).collect();
    tags.extend(schema.slices.iter().map(|s| s.tag.clone()));
    for t in store.tags() {
        if !tags.iter().any(|x| x == t) {
            tags.push(t.to_string());
        }
    }
    tags
}

// ---- export --------------------------------------------------------------

pub const REPORT_HEADER: [&str; 9] = ["tag", "task", "n", "accuracy", "precision", "recall", "f1", "is_slice", "status"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn report_csv(report: &Report) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(REPORT_HEADER).expect("in-memory write");
    for r in &report.rows {
        w.write_record([
            r.tag.clone(),
            r.task.clone(),
            r.n.to_string(),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.precision),
            format!("{:.6}", r.recall),
            format!("{:.6}", r.f1),
            r.is_slice.to_string(),
            r.status.as_str().to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn report_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Re-parse an exported CSV report (confusion matrices are JSON-only).
pub fn parse_report_csv(text: &str) -> Result<Report, MonitorError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let bad = |m: String| MonitorError::Format(m);
    let header = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| -> Result<f64, MonitorError> { rec[i].parse().map_err(|_| bad(format!("bad number `{}`", &rec[i]))) };
        rows.push(ReportRow {
            tag: rec[0].to_string(),
            task: rec[1].to_string(),
            n: rec[2].parse().map_err(|_| bad("bad count".into()))?,
            accuracy: f(3)?,
            precision: f(4)?,
            recall: f(5)?,
            f1: f(6)?,
            is_slice: rec[7].parse().map_err(|_| bad("bad flag".into()))?,
            status: RowStatus::parse(&rec[8]).ok_or_else(|| bad("bad status".into()))?,
            confusion: None,
            per_bit: None,
        });
    }
    Ok(Report { rows, warnings: vec![] })
}

pub fn export_report(report: &Report, format: ReportFormat, path: &Path) -> Result<(), MonitorError> {
    let text = match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Json => report_json(report),
    };
    Ok(std::fs::write(path, text)?)
}

// ---- data scaling --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub fraction: f64,
    pub seed: u64,
    pub task: String,
    pub metric: f64,
    pub relative_quality: f64,
}

/// Size of the subsample for fraction `f` of `n` rows (at least one).
pub fn subsample_size(f: f64, n: usize) -> usize {
    ((f * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Seeded subsample: a prefix of one seeded permutation, so larger fractions
/// contain smaller ones.
pub fn subsample(rows: &[usize], f: f64, seed: u64) -> Vec<usize> {
    let mut perm = rows.to_vec();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut take = perm[..subsample_size(f, rows.len()).min(rows.len())].to_vec();
    take.sort_unstable();
    take
}

/// Train on growing subsamples of the train rows and score each model on
/// the full test split, relative to the smallest fraction.
#[allow(clippy::too_many_arguments)]
pub fn scaling_curve(
    schema: &Schema,
    store: &RowStore,
    labels: &[LabelArtifact],
    choice: &ArchChoice,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<ScalingRow>, MonitorError> {
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(MonitorError::BadFraction(f));
        }
    }
    let mut fr = fractions.to_vec();
    fr.sort_by(f64::total_cmp);
    fr.dedup();
    let ir = compile(schema, choice)?;
    let train = store.rows_with_tag("train");
    let test = store.rows_with_tag("test");
    let mut out = Vec::new();
    for &seed in seeds {
        let mut baseline: BTreeMap<String, f64> = BTreeMap::new();
        for &f in &fr {
            let rows = subsample(&train, f, seed);
            let cfg = TrainConfig::from_choice(choice, seed);
            let model = train_rows(&ir, schema, store, labels, &cfg, &rows)?;
            for ev in evaluate_units(&model, schema, store, &test)? {
                let metric = task_metric(schema, &ev, &|_| true);
                let base = *baseline.entry(ev.task.clone()).or_insert(metric);
                let relative_quality = if base > 0.0 {
                    metric / base
                } else if metric == 0.0 {
                    1.0
                } else {
                    f64::INFINITY
                };
                out.push(ScalingRow { fraction: f, seed, task: ev.task, metric, relative_quality });
            }
        }
    }
    Ok(out)
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["fraction", "seed", "task", "metric", "relative_quality"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            format!("{:.6}", r.fraction),
            r.seed.to_string(),
            r.task.clone(),
            format!("{:.6}", r.metric),
            format!("{:.6}", r.relative_quality),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Mean metric per (fraction, task) across seeds, relative to the smallest
/// fraction's mean.
pub fn mean_curve(rows: &[ScalingRow]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<String, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.task.clone()).or_default().entry(r.fraction.to_bits()).or_insert((r.fraction, 0.0, 0));
        e.1 += r.metric;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(task, m)| {
            let mut pts: Vec<(f64, f64)> = m.into_values().map(|(f, s, n)| (f, s / n as f64)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let base = pts.first().map(|p| p.1).unwrap_or(0.0);
            let pts = pts.into_iter().map(|(f, v)| (f, if base > 0.0 { v / base } else { 1.0 })).collect();
            (task, pts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let g: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let m = multiclass_metrics(&g, &g, 3);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.confusion[i][j] > 0, i == j);
            }
        }
    }

    #[test]
    fn binary_counts() {
        let (p, r, f) = binary_prf(2, 1, 1);
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        // the same counts through a single-bit bitvector report row
        let ev = TaskEval {
            task: "B".into(),
            family: TaskFamily::Bitvector,
            classes: 2,
            units: (0..10).map(|r| UnitRef { row: r, token: None, bit: Some(0) }).collect(),
            gold: vec![1, 1, 0, 1, 0, 0, 0, 0, 0, 0],
            pred: vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0],
        };
        let schema = crate::schema::parse_schema(
            r#"{"payloads": [{"name": "x", "kind": "singleton", "inputs": [{"field": "x"}]}],
                "tasks": [{"name": "B", "payload": "x", "kind": {"bitvector": ["on"]}}]}"#,
        )
        .unwrap();
        let row = task_row(&schema, &ev, &|_| true, "test", false);
        assert!((row.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((row.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((row.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((row.accuracy - 0.8).abs() < 1e-12);
        let empty = task_row(&schema, &ev, &|_| false, "rare", true);
        assert_eq!(empty.status, RowStatus::NoGoldLabels);
        assert_eq!(empty.n, 0);
    }

    #[test]
    fn confusion_identities() {
        let gold = [0, 0, 1, 2, 2, 2, 1, 0];
        let pred = [0, 1, 1, 2, 0, 2, 1, 0];
        let m = multiclass_metrics(&gold, &pred, 4);
        let trace: u64 = (0..4).map(|i| m.confusion[i][i]).sum();
        assert!((m.accuracy - trace as f64 / 8.0).abs() < 1e-12);
        for c in 0..4 {
            let row_sum: u64 = m.confusion[c].iter().sum();
            assert_eq!(row_sum as usize, gold.iter().filter(|&&g| g == c).count());
        }
        let again = metrics_from_confusion(m.confusion.clone());
        assert!((again.f1 - m.f1).abs() < 1e-9);
    }

    #[test]
    fn csv_export() {
        let empty = report_csv(&Report::default());
        assert_eq!(empty, "tag,task,n,accuracy,precision,recall,f1,is_slice,status\n");
        let report = Report {
            rows: vec![ReportRow {
                tag: "a,\"b\"".into(),
                task: "T".into(),
                n: 3,
                accuracy: 2.0 / 3.0,
                precision: 0.5,
                recall: 1.0,
                f1: 0.6666666,
                is_slice: true,
                status: RowStatus::Ok,
                confusion: None,
                per_bit: None,
            }],
            warnings: vec![],
        };
        let text = report_csv(&report);
        assert_eq!(text, report_csv(&report));
        assert!(text.contains("0.666667"));
        let back = parse_report_csv(&text).unwrap();
        assert_eq!(back.rows[0].tag, report.rows[0].tag);
        assert!((back.rows[0].accuracy - report.rows[0].accuracy).abs() <= 5e-7);
    }

    #[test]
    fn subsample_sizes() {
        let rows: Vec<usize> = (0..100).collect();
        assert_eq!(subsample(&rows, 1.0 / 32.0, 1).len(), 3);
        assert_eq!(subsample(&rows, 0.25, 1).len(), 25);
        assert_eq!(subsample(&rows, 0.25, 1), subsample(&rows, 0.25, 1));
        let small = subsample(&rows, 0.1, 5);
        let big = subsample(&rows, 0.5, 5);
        assert!(small.iter().all(|r| big.contains(r)));
    }
}
