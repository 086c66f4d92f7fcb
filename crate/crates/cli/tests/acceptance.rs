//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovt_core::compiler::{compile, enumerate_candidates, schema_signature, ArchChoice};
use ovt_core::hparams::{EncoderKind, HyperKey};
use ovt_core::labelmodel::{
    build_label_matrix, fit_em, fit_task_labels, posterior_labels, LabelMatrix, LabelMode, SourceModel, UnitRef,
    DEFAULT_MAX_ITERS, DEFAULT_TOLERANCE,
};
use ovt_core::monitor::{evaluate, evaluate_units, mean_curve, parse_report_csv, report_csv, scaling_curve, task_metric};
use ovt_core::numerics::{encode_example, grad_check, init_params, ParamStore};
use ovt_core::rowstore::{ingest, parse_record, FieldValue, RowStore};
use ovt_core::schema::{parse_schema, serialize_schema, ParamValue, Schema};
use ovt_core::search::run_search;
use ovt_core::synth;
use ovt_core::trainer::{train, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn c1_label_recovery() -> Outcome {
    let corpus = synth::label_recovery(20_000, 1);
    let (schema, store) = corpus.load();
    let rows = store.rows_with_tag("train");
    let m = build_label_matrix(&store, &schema, "Y", &rows).unwrap();
    let start = Instant::now();
    let model = fit_em(&m, DEFAULT_MAX_ITERS, DEFAULT_TOLERANCE, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let acc_err = synth::RECOVERY_ACCURACIES
        .iter()
        .enumerate()
        .map(|(s, a)| (model.accuracies[&format!("s{s}")] - a).abs())
        .fold(0.0, f64::max);
    let prior_err = synth::RECOVERY_PRIOR.iter().zip(&model.prior).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(
        acc_err <= 0.03 && prior_err <= 0.02 && secs < 10.0,
        format!("max |Δaccuracy| {acc_err:.4} (≤ 0.03), max |Δprior| {prior_err:.4} (≤ 0.02), fit {secs:.2}s (< 10s)"),
    )
}

/// P(y | votes) by summing the full joint over (y, votes), abstention
/// included as an outcome of each source.
fn exhaustive_posterior(prior: &[f64], acc: &[f64], abstain: f64, votes: &[Option<usize>]) -> Vec<f64> {
    let k = prior.len();
    let mut joint = vec![0.0; k];
    for (y, j) in joint.iter_mut().enumerate() {
        let mut p = prior[y];
        for (s, v) in votes.iter().enumerate() {
            p *= match v {
                None => abstain,
                Some(c) if *c == y => (1.0 - abstain) * acc[s],
                Some(_) => (1.0 - abstain) * (1.0 - acc[s]) / (k - 1) as f64,
            };
        }
        *j = p;
    }
    let z: f64 = joint.iter().sum();
    joint.iter().map(|p| p / z).collect()
}

fn c2_exact_posterior() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut patterns = 0usize;
    for k in 2..=4usize {
        for m in 1..=4usize {
            for _ in 0..3 {
                let acc: Vec<f64> = (0..m).map(|_| rng.gen_range(0.3..0.97)).collect();
                let mut prior: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
                let z: f64 = prior.iter().sum();
                prior.iter_mut().for_each(|p| *p /= z);
                // every assignment of {abstain, 0..k} to each source
                let total = (k + 1).pow(m as u32);
                let mut named = Vec::new();
                let mut patterns_here = Vec::new();
                for code in 0..total {
                    let mut c = code;
                    let mut votes = Vec::new();
                    let mut row = Vec::new();
                    for s in 0..m {
                        let v = c % (k + 1);
                        c /= k + 1;
                        if v == k {
                            votes.push(None);
                        } else {
                            votes.push(Some(v));
                            row.push((format!("s{s}"), v));
                        }
                    }
                    named.push(row);
                    patterns_here.push(votes);
                }
                let n = named.len();
                let matrix = LabelMatrix::from_named_votes("T", (0..n).map(UnitRef::row).collect(), vec![k; n], named, Some(k));
                let model = SourceModel {
                    accuracies: (0..m).map(|s| (format!("s{s}"), acc[s])).collect(),
                    prior: prior.clone(),
                    log_likelihood: 0.0,
                    iterations: 0,
                };
                let post = posterior_labels(&model, &matrix).unwrap();
                for (votes, p) in patterns_here.iter().zip(&post.0) {
                    // all-abstain units carry no evidence and stay unlabeled
                    let Some(got) = p else {
                        if votes.iter().any(Option::is_some) {
                            worst = f64::INFINITY;
                        }
                        continue;
                    };
                    let want = exhaustive_posterior(&prior, &acc, 0.37, votes);
                    for (a, b) in want.iter().zip(got) {
                        worst = worst.max((a - b).abs());
                    }
                    patterns += 1;
                }
            }
        }
    }
    outcome(worst <= 1e-9, format!("{patterns} vote patterns, max |Δposterior| {worst:.2e} (≤ 1e-9)"))
}

fn c3_noise_aware() -> Outcome {
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let (schema, store) = synth::noise_aware(1_000, seed).load();
        let rows = store.rows_with_tag("train");
        let test = store.rows_with_tag("test");
        let mut choice = ArchChoice::defaults(&schema);
        choice.epochs = 20;
        choice.batch_size = 1;
        let ir = compile(&schema, &choice).unwrap();
        let mut acc = Vec::new();
        for mode in [LabelMode::Em, LabelMode::MajorityVote] {
            let labels = fit_task_labels(&store, &schema, "Y", &rows, mode).unwrap();
            let model = train(&ir, &schema, &store, &[labels], &TrainConfig::from_choice(&choice, seed)).unwrap();
            let ev = evaluate_units(&model, &schema, &store, &test).unwrap();
            acc.push(task_metric(&schema, &ev[0], &|_| true));
        }
        gaps.push(acc[0] - acc[1]);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    outcome(mean >= 0.02, format!("mean test-accuracy gain of EM over majority vote {:.2} points (≥ 2)", 100.0 * mean))
}

fn c4_slicing() -> Outcome {
    let (mut slice_gain, mut overall) = (0.0, 0.0);
    for seed in SEEDS {
        let (schema, store) = synth::slicing(4_000, seed).load();
        let mut plain = schema.clone();
        plain.slices.clear();
        let rows = store.rows_with_tag("train");
        let labels = fit_task_labels(&store, &schema, "Y", &rows, LabelMode::MajorityVote).unwrap();
        let mut res = Vec::new();
        for s in [&schema, &plain] {
            let mut choice = ArchChoice::defaults(s);
            choice.epochs = 20;
            let ir = compile(s, &choice).unwrap();
            let model = train(&ir, s, &store, std::slice::from_ref(&labels), &TrainConfig::from_choice(&choice, seed)).unwrap();
            let report = evaluate(&model, &schema, &store, &["test".into(), synth::SLICE_TAG.into()]).unwrap();
            res.push((report.row("test", "Y").unwrap().accuracy, report.row(synth::SLICE_TAG, "Y").unwrap().f1));
        }
        slice_gain += (res[0].1 - res[1].1) / SEEDS.len() as f64;
        overall += (res[0].0 - res[1].0) / SEEDS.len() as f64;
    }
    outcome(
        slice_gain >= 0.10 && overall >= -0.01,
        format!(
            "slice F1 gain {:.1} points (≥ 10), overall accuracy change {:+.2} points (≥ -1)",
            100.0 * slice_gain,
            100.0 * overall
        ),
    )
}

fn c5_scaling() -> Outcome {
    let fractions: Vec<f64> = (0..6).map(|i| 1.0 / (1u32 << (5 - i)) as f64).collect();
    let mut rows = Vec::new();
    for seed in [1u64, 2, 3] {
        let (schema, store) = synth::scaling(3_200, seed).load();
        let train_rows = store.rows_with_tag("train");
        let labels: Vec<_> = schema
            .tasks
            .iter()
            .map(|t| fit_task_labels(&store, &schema, &t.name, &train_rows, LabelMode::MajorityVote).unwrap())
            .collect();
        let mut choice = ArchChoice::defaults(&schema);
        choice.learning_rate = 0.2;
        choice.epochs = 10;
        rows.extend(scaling_curve(&schema, &store, &labels, &choice, &fractions, &[seed]).unwrap());
    }
    let curve = mean_curve(&rows);
    let mut ok = curve.len() == 3;
    let mut parts = Vec::new();
    for (task, pts) in &curve {
        let last = pts.last().map(|p| p.1).unwrap_or(0.0);
        let worst_drop = pts.windows(2).map(|w| w[0].1 - w[1].1).fold(0.0, f64::max);
        ok &= last >= 1.0 && worst_drop <= 0.01;
        parts.push(format!("{task} 32x {last:.3} (max drop {worst_drop:.3})"));
    }
    outcome(ok, format!("{}; need 32x ≥ 1.0, drops ≤ 0.01", parts.join(", ")))
}

fn jittered(params: &mut ParamStore, seed: u64) {
    // Random offsets keep every ReLU input and max-pool comparison away from
    // its kink, where finite differences are meaningless.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut params.tensors {
        for v in &mut t.data {
            *v += 0.2 * (2.0 * rng.gen::<f64>() - 1.0);
        }
    }
}

fn c6_gradients() -> Outcome {
    let mut schema = parse_schema(synth::RUNNING_SCHEMA).unwrap();
    schema.slices = vec![ovt_core::schema::SliceDecl { tag: "nutrition".into(), tasks: None }];
    let (_, store) = synth::running_example(12, 6).load();
    let mut kinds = BTreeSet::new();
    let mut worst = 0.0f64;
    let mut ok = true;
    for enc in [EncoderKind::MeanPool, EncoderKind::MaxPool, EncoderKind::Conv1D(3), EncoderKind::Recurrent] {
        let mut choice = ArchChoice::defaults(&schema).with_encoder(enc);
        choice.embed_dim = 4;
        choice.hidden_dim = 5;
        let ir = compile(&schema, &choice).unwrap();
        kinds.extend(ir.nodes.iter().map(|n| n.op.kind_name()));
        let mut params = init_params(&ir, 11);
        jittered(&mut params, 12);
        let batch: Vec<_> = (0..3).map(|i| encode_example(&ir, &store.get(i).unwrap(), false).unwrap()).collect();
        let report = grad_check(&ir, &params, &batch, 1e-4).unwrap();
        ok &= report.pass();
        worst = worst.max(report.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max));
    }
    let all = [
        "EmbedLookup", "MeanPool", "MaxPool", "Conv1D", "Recurrent", "SpanPool", "Concat", "Linear", "Relu", "Softmax",
        "Sigmoid", "CandidateScore", "SliceCombine",
    ];
    let missing: Vec<&str> = all.iter().copied().filter(|k| !kinds.contains(k)).collect();
    outcome(
        ok && missing.is_empty(),
        format!("{} op kinds covered (missing {missing:?}), max relative error {worst:.2e} (≤ 1e-4)", kinds.len()),
    )
}

fn c7_model_independence() -> Outcome {
    let schema = parse_schema(synth::RUNNING_SCHEMA).unwrap();
    let reference = schema_signature(&schema).to_json();
    let mut checked = 0;
    let mut same = true;
    let mut wide = schema.tuning.clone();
    wide.search_space.insert("embed_dim".into(), vec![ParamValue::Int(4), ParamValue::Int(8)]);
    wide.search_space.insert("batch_size".into(), vec![ParamValue::Int(1), ParamValue::Int(32)]);
    wide.pinned.clear();
    wide.budget = 10_000;
    for choice in enumerate_candidates(&schema, &wide).unwrap() {
        same &= compile(&schema, &choice).unwrap().signature.to_json() == reference;
        checked += 1;
    }
    // other tuning specs on the same declarations
    let mut retuned = 0;
    for budget in [1u32, 3, 9] {
        let mut s = schema.clone();
        s.tuning.budget = budget;
        s.tuning.seed = budget as u64 * 7919;
        s.tuning.pinned.clear();
        same &= schema_signature(&s).to_json() == reference;
        for choice in enumerate_candidates(&s, &s.tuning).unwrap() {
            same &= compile(&s, &choice).unwrap().signature.to_json() == reference;
            retuned += 1;
        }
    }
    outcome(same, format!("{checked} architecture choices and {retuned} re-tuned candidates share one signature"))
}

fn ovt(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ovt")).args(args).output().expect("spawn ovt")
}

fn c8_determinism(tmp: &Path) -> Outcome {
    let fx = tmp.join("fx");
    synth::running_example(200, 8).write(&fx).unwrap();
    let (schema, data) = (fx.join("schema.json"), fx.join("data.jsonl"));
    let files = ["model.ovm", "report.csv", "search.results.csv"];
    let mut runs = Vec::new();
    for run in 0..2 {
        let out = tmp.join(format!("run{run}"));
        let o = ovt(&[
            "pipeline",
            "--schema",
            schema.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--seed",
            "5",
            "--budget",
            "3",
        ]);
        if !o.status.success() {
            return outcome(false, format!("pipeline failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        runs.push(files.map(|f| fs::read(out.join(f)).unwrap()));
    }
    let differing: Vec<&str> = files.iter().zip(runs[0].iter().zip(&runs[1])).filter(|(_, (a, b))| a != b).map(|(f, _)| *f).collect();
    outcome(differing.is_empty(), format!("two pipeline runs; differing artifacts {differing:?}"))
}

fn c9_search_hygiene() -> Outcome {
    let (schema, store) = synth::running_example(200, 9).load();
    let train_rows = store.rows_with_tag("train");
    let labels: Vec<_> = schema
        .tasks
        .iter()
        .map(|t| fit_task_labels(&store, &schema, &t.name, &train_rows, LabelMode::Em).unwrap())
        .collect();
    let mut tuning = schema.tuning.clone();
    tuning.budget = 4;
    store.reset_access_log();
    let out = run_search(&schema, &store, &labels, &tuning).unwrap();
    let test: BTreeSet<usize> = store.rows_with_tag("test").into_iter().collect();
    let touched = store.accessed_rows().into_iter().filter(|r| test.contains(r)).count();
    let mut pinned_ok = 0;
    for t in &out.trials {
        let ok = tuning.pinned.iter().all(|(k, v)| t.choice.value_of(&HyperKey::parse(k).unwrap()) == v.to_string());
        pinned_ok += ok as usize;
    }
    outcome(
        pinned_ok == out.trials.len() && touched == 0 && !test.is_empty(),
        format!(
            "pinned values held in {pinned_ok}/{} trials; {touched} of {} test rows read during search",
            out.trials.len(),
            test.len()
        ),
    )
}

fn tags_of(v: &serde_json::Value) -> BTreeSet<String> {
    v.get("tags").and_then(|t| t.as_array()).map(|a| a.iter().map(|t| t.as_str().unwrap().to_string()).collect()).unwrap_or_default()
}

fn store_matches_jsonl(schema: &Schema, store: &RowStore, lines: &[serde_json::Value]) -> bool {
    if store.len() != lines.len() {
        return false;
    }
    for (i, raw) in lines.iter().enumerate() {
        let rec = store.get(i).unwrap();
        if rec != parse_record(schema, &raw.to_string()).unwrap() {
            return false;
        }
        // independent of the parser: field contents and tags straight from JSON
        for (k, v) in raw.as_object().unwrap() {
            if k == "supervision" || k == "tags" {
                continue;
            }
            let same = match rec.fields.get(k) {
                Some(FieldValue::Null) => v.is_null(),
                Some(FieldValue::Text(s)) => v.as_str() == Some(s),
                Some(FieldValue::Tokens(t)) => v.as_array().is_some_and(|a| a.iter().map(|x| x.as_str().unwrap()).eq(t.iter().map(String::as_str))),
                Some(FieldValue::Elements(e)) => v.as_array().is_some_and(|a| {
                    a.len() == e.len() && a.iter().zip(e).all(|(x, el)| x["id"].as_str() == Some(el.id.as_str()))
                }),
                None => false,
            };
            if !same {
                return false;
            }
        }
        let have: BTreeSet<String> = rec.tags.iter().cloned().collect();
        if !tags_of(raw).is_subset(&have) || rec.split().is_none() {
            return false;
        }
        let want_votes = raw.get("supervision").and_then(|s| s.as_object()).map(|s| s.values().map(|v| v.as_array().unwrap().len()).sum()).unwrap_or(0);
        if rec.supervision.values().map(Vec::len).sum::<usize>() != want_votes {
            return false;
        }
    }
    true
}

fn c10_round_trips(tmp: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    const N: usize = 120;
    let mut schema_ok = 0;
    let mut store_ok = 0;
    let mut report_ok = 0;
    for i in 0..N {
        let text = synth::random_schema_json(&mut rng);
        let schema = parse_schema(&text).unwrap();
        let canon = serialize_schema(&schema);
        let back = parse_schema(&canon).unwrap();
        schema_ok += (back == schema && serialize_schema(&back) == canon) as usize;

        let records = synth::random_records(&schema, 25, &mut rng);
        let jsonl: String = records.iter().map(|r| r.to_string() + "\n").collect();
        let ingested = ingest(&schema, jsonl.as_bytes()).unwrap();
        let path = tmp.join(format!("store{i}.ovrs"));
        ingested.store.write(&path).unwrap();
        let reopened = RowStore::open(&path).unwrap();
        store_ok += (ingested.errors.is_empty()
            && store_matches_jsonl(&schema, &ingested.store, &records)
            && store_matches_jsonl(&schema, &reopened, &records)) as usize;

        let report = synth::random_report(&mut rng);
        let csv = report_csv(&report);
        let parsed = parse_report_csv(&csv).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 5e-7;
        let same = parsed.rows.len() == report.rows.len()
            && parsed.rows.iter().zip(&report.rows).all(|(a, b)| {
                a.tag == b.tag
                    && a.task == b.task
                    && a.n == b.n
                    && a.is_slice == b.is_slice
                    && a.status == b.status
                    && close(a.accuracy, b.accuracy)
                    && close(a.precision, b.precision)
                    && close(a.recall, b.recall)
                    && close(a.f1, b.f1)
            })
            && report_csv(&parsed) == csv;
        report_ok += same as usize;
    }
    outcome(
        schema_ok == N && store_ok == N && report_ok == N,
        format!("schema {schema_ok}/{N}, row store {store_ok}/{N}, report CSV {report_ok}/{N}"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("label-model recovery", Box::new(c1_label_recovery)),
        ("exact posterior", Box::new(c2_exact_posterior)),
        ("noise-aware advantage", Box::new(c3_noise_aware)),
        ("slicing advantage", Box::new(c4_slicing)),
        ("scaling curve", Box::new(c5_scaling)),
        ("gradient correctness", Box::new(c6_gradients)),
        ("model independence", Box::new(c7_model_independence)),
        ("determinism", Box::new(|| c8_determinism(tmp.path()))),
        ("search hygiene", Box::new(c9_search_hygiene)),
        ("format round-trips", Box::new(|| c10_round_trips(tmp.path()))),
    ];
    let start = Instant::now();
    let mut results = BTreeMap::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        println!(
            "{} {:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
        results.insert(i + 1, o.pass);
    }
    let failed: Vec<usize> = results.iter().filter(|(_, p)| !**p).map(|(i, _)| *i).collect();
    println!("acceptance: {}/10 passed in {:.1}s", 10 - failed.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
