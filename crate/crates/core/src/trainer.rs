//! Noise-aware multitask training with slice heads, the deployable model
//! container, and prediction against the serving signature.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::compiler::{ArchChoice, Extent, ModelIr, ServingSignature, TaskFamily};
use crate::hash::{fnv1a64, hex64};
use crate::labelmodel::{rebalance_weights, LabelArtifact, ProbLabels};
use crate::numerics::{
    backward_into, encode_example, forward, init_params, softmax, Example, Grads, NumericError, ParamStore, Tensor,
};
use crate::rowstore::{FieldValue, Record, RowStore, StoreError};
use crate::schema::{parse_schema, schema_hash, serialize_schema, Schema, SchemaError};

pub const MODEL_MAGIC: &[u8; 4] = b"OVMC";
pub const MODEL_VERSION: u32 = 1;

/// Examples per gradient chunk. Chunks are reduced in index order, so the
/// summation order does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no train rows")]
    EmptyTrainSet,
    #[error("no task has labels")]
    NoLabels,
    #[error("non-finite loss or gradient in epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("labels for `{task}` do not fit row {row}: {message}")]
    LabelMismatch { task: String, row: usize, message: String },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("missing payload field `{0}`")]
    MissingPayload(String),
    #[error("task `{0}` has an empty candidate set")]
    EmptyCandidateSet(String),
    #[error(transparent)]
    Numeric(NumericError),
}

impl From<NumericError> for PredictError {
    fn from(e: NumericError) -> Self {
        match e {
            NumericError::MissingPayload(k) => PredictError::MissingPayload(k),
            e => PredictError::Numeric(e),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

impl From<DecodeError> for ModelFileError {
    fn from(e: DecodeError) -> Self {
        ModelFileError::Corrupt(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_ind: f64,
    pub lambda_exp: f64,
    pub rebalance: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn from_choice(choice: &ArchChoice, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: choice.learning_rate,
            epochs: choice.epochs.max(1),
            batch_size: choice.batch_size.max(1),
            lambda_ind: 1.0,
            lambda_exp: 1.0,
            rebalance: true,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total_loss: f64,
    /// Per task, in IR order.
    pub task_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_hash: String,
    pub store_digest: String,
    pub choice: ArchChoice,
    pub config: TrainConfig,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub train_rows: usize,
    /// FNV-1a digest of each task's label artifact JSON.
    pub label_digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    /// Canonical schema text, so serving can parse raw records.
    pub schema: String,
    pub ir: ModelIr,
    pub params: ParamStore,
    pub signature: ServingSignature,
    pub provenance: Provenance,
    pub log: Vec<EpochLog>,
}

// ---- losses --------------------------------------------------------------

fn log_sum_exp(l: &[f64]) -> f64 {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `weight · (−Σ q_c log softmax(l)_c)`.
pub fn noise_aware_loss(logits: &[f64], soft_label: &[f64], weight: f64) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    let lse = log_sum_exp(logits);
    weight * soft_label.iter().zip(logits).map(|(q, l)| q * (lse - l)).sum::<f64>()
}

/// Gradient of [`noise_aware_loss`] with respect to the logits.
pub fn noise_aware_grad(logits: &[f64], soft_label: &[f64], weight: f64) -> Vec<f64> {
    let mass: f64 = soft_label.iter().sum();
    softmax(logits).iter().zip(soft_label).map(|(p, q)| weight * (mass * p - q)).collect()
}

/// `weight · BCE(sigmoid(l), q)` for one soft bit.
pub fn bit_loss(logit: f64, q: f64, weight: f64) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    weight * (softplus(logit) - q * logit)
}

/// Combined logits of a single position: attention over the base expert and
/// slice experts, representation mixing, then the final linear map
/// `final_weight` (`[h, K]`, row-major) plus `final_bias`.
pub fn slice_combine(
    base_logits: &[f64],
    base_repr: &[f64],
    experts: &[(f64, &[f64], &[f64])],
    final_weight: &[f64],
    final_bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let view: Vec<(f64, &[f64])> = experts.iter().map(|(p, l, _)| (*p, *l)).collect();
    let attn = crate::numerics::slice_attention(base_logits, &view, crate::compiler::Gate::Softmax);
    let mut r: Vec<f64> = base_repr.iter().map(|x| attn[0] * x).collect();
    for (i, (_, _, repr)) in experts.iter().enumerate() {
        for (rv, x) in r.iter_mut().zip(*repr) {
            *rv += attn[i + 1] * x;
        }
    }
    let k = final_bias.len();
    let mut out = final_bias.to_vec();
    for (j, rv) in r.iter().enumerate() {
        for c in 0..k {
            out[c] += rv * final_weight[j * k + c];
        }
    }
    (out, attn)
}

// ---- training ------------------------------------------------------------

#[derive(Debug, Clone)]
struct UnitTarget {
    /// Row of the logits tensor (token index, or 0).
    pos: usize,
    bit: Option<usize>,
    q: Vec<f64>,
    weight: f64,
}

#[derive(Debug, Clone)]
struct Prepared {
    row: usize,
    ex: Example,
    /// Per IR task: unit targets.
    targets: Vec<Vec<UnitTarget>>,
    /// Per IR task, per slice block: membership.
    members: Vec<Vec<bool>>,
}

struct TaskPlan {
    loss_weight: f64,
    family: TaskFamily,
}

fn rebalanced(art: &LabelArtifact, family: TaskFamily, keep: &dyn Fn(usize) -> bool, on: bool) -> Vec<f64> {
    let n = art.units.len();
    if !on || family == TaskFamily::Select {
        return vec![1.0; n];
    }
    let mut w = vec![0.0; n];
    // bits are balanced independently
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, u) in art.units.iter().enumerate() {
        if keep(u.row) {
            groups.entry(u.bit).or_default().push(i);
        }
    }
    for idx in groups.values() {
        let labels = ProbLabels(idx.iter().map(|&i| art.labels[i].clone()).collect());
        for (&i, wi) in idx.iter().zip(rebalance_weights(&labels)) {
            w[i] = wi;
        }
    }
    w
}

fn prepare(
    ir: &ModelIr,
    schema: &Schema,
    store: &RowStore,
    labels: &[LabelArtifact],
    rows: &[usize],
    rebalance: bool,
) -> Result<(Vec<Prepared>, Vec<TaskPlan>), TrainError> {
    let row_pos: BTreeMap<usize, usize> = rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let mut prepared = Vec::with_capacity(rows.len());
    for &row in rows {
        let rec = store.get(row)?;
        let ex = encode_example(ir, &rec, false)?;
        let members = ir
            .tasks
            .iter()
            .map(|t| t.slices.iter().map(|b| rec.has_tag(&b.slice)).collect())
            .collect();
        prepared.push(Prepared { row, ex, targets: vec![Vec::new(); ir.tasks.len()], members });
    }
    let mut plans = Vec::new();
    for (ti, t) in ir.tasks.iter().enumerate() {
        let loss_weight = schema.task(&t.task).map(|d| d.loss_weight).unwrap_or(1.0);
        plans.push(TaskPlan { loss_weight, family: t.family });
        let Some(art) = labels.iter().find(|a| a.task == t.task) else { continue };
        let weights = rebalanced(art, t.family, &|r| row_pos.contains_key(&r), rebalance);
        for (i, unit) in art.units.iter().enumerate() {
            let (Some(&p), Some(q)) = (row_pos.get(&unit.row), &art.labels[i]) else { continue };
            let q = q.clone();
            let mismatch = |m: String| TrainError::LabelMismatch { task: t.task.clone(), row: unit.row, message: m };
            let target = UnitTarget { pos: unit.token.unwrap_or(0), bit: unit.bit, q, weight: weights[i] };
            if (t.family == TaskFamily::Bitvector) != target.bit.is_some() {
                return Err(mismatch("bit index does not match the task kind".into()));
            }
            prepared[p].targets[ti].push(target);
        }
    }
    Ok((prepared, plans))
}

/// Loss of one example and its gradient accumulated into `grads`.
fn example_step(
    ir: &ModelIr,
    params: &ParamStore,
    plans: &[TaskPlan],
    prep: &Prepared,
    cfg: &TrainConfig,
    grads: &mut Grads,
) -> Result<Vec<f64>, TrainError> {
    let fw = forward(ir, params, &prep.ex)?;
    let mut seeds: Vec<(usize, Tensor)> = Vec::new();
    let mut task_loss = vec![0.0; ir.tasks.len()];
    let mismatch = |task: &str, m: String| TrainError::LabelMismatch { task: task.to_string(), row: prep.row, message: m };

    // Loss of `units` against the logits at `node`, optionally masked.
    let unit_loss = |node: usize, units: &[UnitTarget], scale: f64, family: TaskFamily, task: &str|
     -> Result<(f64, Tensor), TrainError> {
        let l = fw.value(node);
        let mut g = Tensor::zeros(l.shape.clone());
        let mut loss = 0.0;
        for u in units {
            if u.pos >= l.rows() {
                return Err(mismatch(task, format!("unit position {} beyond {} rows", u.pos, l.rows())));
            }
            let w = u.weight * scale;
            let row = l.row(u.pos);
            match (family, u.bit) {
                (TaskFamily::Bitvector, Some(b)) => {
                    let y = u.q.get(1).copied().unwrap_or(0.0);
                    loss += bit_loss(row[b], y, w);
                    g.data[u.pos * l.cols() + b] += w * (sigmoid(row[b]) - y);
                }
                _ => {
                    if u.q.len() != row.len() {
                        return Err(mismatch(task, format!("label has {} classes, logits {}", u.q.len(), row.len())));
                    }
                    loss += noise_aware_loss(row, &u.q, w);
                    let gr = noise_aware_grad(row, &u.q, w);
                    for (d, v) in g.data[u.pos * l.cols()..(u.pos + 1) * l.cols()].iter_mut().zip(gr) {
                        *d += v;
                    }
                }
            }
        }
        Ok((loss, g))
    };

    for (ti, t) in ir.tasks.iter().enumerate() {
        let lw = plans[ti].loss_weight;
        if lw == 0.0 {
            continue;
        }
        let units = &prep.targets[ti];
        if !units.is_empty() {
            let (loss, g) = unit_loss(t.logits, units, lw, plans[ti].family, &t.task)?;
            task_loss[ti] += loss;
            seeds.push((t.logits, g));
        }
        for (si, b) in t.slices.iter().enumerate() {
            let member = prep.members[ti][si];
            if cfg.lambda_ind != 0.0 {
                let l = fw.value(b.indicator_logit);
                let y = if member { 1.0 } else { 0.0 };
                let w = lw * cfg.lambda_ind;
                let mut g = Tensor::zeros(l.shape.clone());
                for (d, &z) in g.data.iter_mut().zip(&l.data) {
                    task_loss[ti] += bit_loss(z, y, w);
                    *d = w * (sigmoid(z) - y);
                }
                seeds.push((b.indicator_logit, g));
            }
            if member && cfg.lambda_exp != 0.0 && !units.is_empty() {
                let (loss, g) = unit_loss(b.expert_logits, units, lw * cfg.lambda_exp, plans[ti].family, &t.task)?;
                task_loss[ti] += loss;
                seeds.push((b.expert_logits, g));
            }
        }
    }
    if !seeds.is_empty() {
        backward_into(ir, params, &prep.ex, &fw, seeds, grads)?;
    }
    Ok(task_loss)
}

/// Train on the store's `train` rows.
pub fn train(
    ir: &ModelIr,
    schema: &Schema,
    store: &RowStore,
    labels: &[LabelArtifact],
    cfg: &TrainConfig,
) -> Result<TrainedModel, TrainError> {
    let rows = store.rows_with_tag("train");
    train_rows(ir, schema, store, labels, cfg, &rows)
}

/// Train on an explicit row subset.
pub fn train_rows(
    ir: &ModelIr,
    schema: &Schema,
    store: &RowStore,
    labels: &[LabelArtifact],
    cfg: &TrainConfig,
    rows: &[usize],
) -> Result<TrainedModel, TrainError> {
    if rows.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if !labels.iter().any(|a| ir.task(&a.task).is_some()) {
        return Err(TrainError::NoLabels);
    }
    let (prepared, plans) = prepare(ir, schema, store, labels, rows, cfg.rebalance)?;
    let init_seed = cfg.seed;
    let shuffle_seed = cfg.seed ^ 0x5348_5546_464c_4521;
    let mut params = init_params(ir, init_seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let bs = cfg.batch_size.max(1);
    let mut log = Vec::new();

    for epoch in 0..cfg.epochs.max(1) {
        order.shuffle(&mut rng);
        let mut task_sum = vec![0.0; ir.tasks.len()];
        for (bi, batch) in order.chunks(bs).enumerate() {
            let parts: Vec<Result<(Grads, Vec<f64>), TrainError>> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = Grads::zeros(ir);
                    let mut losses = vec![0.0; ir.tasks.len()];
                    for &i in chunk {
                        let l = example_step(ir, &params, &plans, &prepared[i], cfg, &mut g)?;
                        losses.iter_mut().zip(l).for_each(|(a, b)| *a += b);
                    }
                    Ok((g, losses))
                })
                .collect();
            let mut total: Option<Grads> = None;
            for part in parts {
                let (g, losses) = part.map_err(|e| match e {
                    TrainError::Numeric(NumericError::NonFinite(n)) => {
                        TrainError::NonFinite { epoch, batch: bi, detail: n }
                    }
                    e => e,
                })?;
                task_sum.iter_mut().zip(losses).for_each(|(a, b)| *a += b);
                match &mut total {
                    Some(t) => t.add(&g),
                    None => total = Some(g),
                }
            }
            let mut g = total.expect("batches are nonempty");
            g.scale(1.0 / batch.len() as f64);
            if !g.is_finite() || !task_sum.iter().all(|v| v.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch: bi, detail: "gradient".into() });
            }
            g.apply_sgd(&mut params, cfg.learning_rate);
        }
        let n = prepared.len() as f64;
        let task_loss: Vec<f64> = task_sum.iter().map(|v| v / n).collect();
        log.push(EpochLog { epoch: epoch + 1, total_loss: task_loss.iter().sum(), task_loss });
    }

    let label_digests = labels
        .iter()
        .filter(|a| ir.task(&a.task).is_some())
        .map(|a| (a.task.clone(), hex64(fnv1a64(a.to_json().as_bytes()))))
        .collect();
    let provenance = Provenance {
        schema_hash: hex64(schema_hash(schema)),
        store_digest: hex64(store.digest()),
        choice: ir.choice.clone(),
        config: cfg.clone(),
        init_seed,
        shuffle_seed,
        train_rows: prepared.len(),
        label_digests,
    };
    Ok(TrainedModel { schema: serialize_schema(schema), signature: ir.signature.clone(), ir: ir.clone(), params, provenance, log })
}

/// `epoch,total_loss,loss.<task>...`
pub fn train_log_csv(model: &TrainedModel) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["epoch".to_string(), "total_loss".to_string()];
    header.extend(model.ir.tasks.iter().map(|t| format!("loss.{}", t.task)));
    w.write_record(&header).expect("in-memory write");
    for e in &model.log {
        let mut row = vec![e.epoch.to_string(), format!("{:.9}", e.total_loss)];
        row.extend(e.task_loss.iter().map(|v| format!("{v:.9}")));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

// ---- model container -----------------------------------------------------

impl TrainedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut prov = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        prov.push('\n');
        let entries: [(&str, Vec<u8>); 6] = [
            ("model.ir.json", self.ir.to_json().into_bytes()),
            ("model.schema.json", self.schema.clone().into_bytes()),
            ("model.sig.json", self.signature.to_json().into_bytes()),
            ("params.ovpm", self.params.to_bytes()),
            ("provenance.json", prov.into_bytes()),
            ("train.log.csv", train_log_csv(self).into_bytes()),
        ];
        let mut w = Writer::new();
        w.raw(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.u32(entries.len() as u32);
        for (name, bytes) in &entries {
            w.str(name);
            w.u64(bytes.len() as u64);
            w.raw(bytes);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel, ModelFileError> {
        let entries = read_container(bytes)?;
        let get = |n: &str| entries.get(n).ok_or_else(|| ModelFileError::Corrupt(format!("missing entry `{n}`")));
        let parse_err = |e: serde_json::Error| ModelFileError::Corrupt(e.to_string());
        let ir: ModelIr = serde_json::from_slice(get("model.ir.json")?).map_err(parse_err)?;
        let schema = String::from_utf8(get("model.schema.json")?.clone())
            .map_err(|_| ModelFileError::Corrupt("schema entry is not UTF-8".into()))?;
        let signature: ServingSignature = serde_json::from_slice(get("model.sig.json")?).map_err(parse_err)?;
        let params = ParamStore::from_bytes(get("params.ovpm")?)?;
        let provenance: Provenance = serde_json::from_slice(get("provenance.json")?).map_err(parse_err)?;
        let log = parse_train_log(get("train.log.csv")?)?;
        if !params.matches(&ir) {
            return Err(ModelFileError::Corrupt("parameters do not match the IR".into()));
        }
        Ok(TrainedModel { schema, ir, params, signature, provenance, log })
    }

    /// The schema the model was compiled from.
    pub fn parsed_schema(&self) -> Result<Schema, SchemaError> {
        parse_schema(&self.schema)
    }

    pub fn write(&self, path: &Path) -> Result<(), ModelFileError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn open(path: &Path) -> Result<TrainedModel, ModelFileError> {
        TrainedModel::from_bytes(&std::fs::read(path)?)
    }
}

/// Named entries of a model container.
pub fn read_container(bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>, ModelFileError> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(ModelFileError::Corrupt("not a model file".into()));
    }
    if r.u32("version")? != MODEL_VERSION {
        return Err(ModelFileError::Corrupt("unsupported model version".into()));
    }
    let n = r.u32("entry count")?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let name = r.str("entry name")?;
        let len = r.u64("entry length")? as usize;
        out.insert(name, r.take(len, "entry body")?.to_vec());
    }
    Ok(out)
}

fn parse_train_log(bytes: &[u8]) -> Result<Vec<EpochLog>, ModelFileError> {
    let mut rd = csv::Reader::from_reader(bytes);
    let bad = |m: &str| ModelFileError::Corrupt(format!("train log: {m}"));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(&e.to_string()))?;
        let num = |i: usize| -> Result<f64, ModelFileError> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad number"))
        };
        let epoch = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad epoch"))?;
        let task_loss = (2..rec.len()).map(num).collect::<Result<_, _>>()?;
        out.push(EpochLog { epoch, total_loss: num(1)?, task_loss });
    }
    Ok(out)
}

// ---- prediction ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPrediction {
    pub kind: TaskFamily,
    /// Label, bit, or candidate names, aligned with each probability row.
    pub names: Vec<String>,
    /// One row per prediction position: a single row for singleton tasks,
    /// one per token for sequence tasks.
    pub probabilities: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Keyed by task name.
    pub tasks: BTreeMap<String, TaskPrediction>,
}

impl Prediction {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("prediction serializes")
    }
}

/// Output tensor of every IR task. Without `strict`, absent payload fields
/// are treated as null.
pub fn task_outputs(model: &TrainedModel, record: &Record, strict: bool) -> Result<Vec<Tensor>, PredictError> {
    let ex = encode_example(&model.ir, record, strict)?;
    let mut fw = forward(&model.ir, &model.params, &ex)?;
    Ok(model.ir.tasks.iter().map(|t| std::mem::replace(&mut fw.values[t.output], Tensor::zeros(vec![0, 0]))).collect())
}

pub fn predict(model: &TrainedModel, record: &Record) -> Result<Prediction, PredictError> {
    let outputs = task_outputs(model, record, true)?;
    let mut tasks = BTreeMap::new();
    for sig in &model.signature.tasks {
        let ti = model.ir.tasks.iter().position(|t| t.task == sig.name).expect("signature tasks are compiled");
        let graph = &model.ir.tasks[ti];
        let out = &outputs[ti];
        let names = match graph.family {
            TaskFamily::Multiclass => sig.labels.clone().unwrap_or_default(),
            TaskFamily::Bitvector => sig.bits.clone().unwrap_or_default(),
            TaskFamily::Select => {
                let set = sig.candidates.as_deref().unwrap_or_default();
                let key = match &model.ir.nodes[graph.base_logits].shape.cols {
                    Extent::Elements(k) => Some(k),
                    _ => None,
                };
                let ids: Vec<String> = match key.and_then(|k| record.fields.get(k)) {
                    Some(FieldValue::Elements(e)) => e.iter().map(|e| e.id.clone()).collect(),
                    _ => vec![],
                };
                if ids.is_empty() {
                    return Err(PredictError::EmptyCandidateSet(format!("{} ({set})", sig.name)));
                }
                ids
            }
        };
        let probabilities = (0..out.rows()).map(|r| out.row(r).to_vec()).collect();
        tasks.insert(sig.name.clone(), TaskPrediction { kind: graph.family, names, probabilities });
    }
    Ok(Prediction { tasks })
}

/// Check a prediction against a serving signature.
pub fn validate_prediction(sig: &ServingSignature, pred: &Prediction) -> Result<(), String> {
    if pred.tasks.len() != sig.tasks.len() {
        return Err(format!("expected {} tasks, got {}", sig.tasks.len(), pred.tasks.len()));
    }
    for t in &sig.tasks {
        let p = pred.tasks.get(&t.name).ok_or_else(|| format!("missing task `{}`", t.name))?;
        if p.kind != t.kind {
            return Err(format!("task `{}` has kind {:?}, expected {:?}", t.name, p.kind, t.kind));
        }
        let expected = match t.kind {
            TaskFamily::Multiclass => t.labels.as_ref(),
            TaskFamily::Bitvector => t.bits.as_ref(),
            TaskFamily::Select => None,
        };
        if let Some(names) = expected {
            if &p.names != names {
                return Err(format!("task `{}` names differ from the signature", t.name));
            }
        }
        if t.granularity == "singleton" && p.probabilities.len() != 1 {
            return Err(format!("task `{}` must have exactly one output row", t.name));
        }
        for row in &p.probabilities {
            if row.len() != p.names.len() {
                return Err(format!("task `{}` row width differs from its names", t.name));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("task `{}` has a probability outside [0, 1]", t.name));
            }
            if t.kind != TaskFamily::Bitvector && (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(format!("task `{}` distribution does not sum to 1", t.name));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, Op};
    use crate::labelmodel::{build_label_matrix, majority_vote};
    use crate::rowstore::ingest;
    use crate::schema::parse_schema;

    #[test]
    fn loss_examples() {
        let p: f64 = 1.0 - 1e-12;
        let logits = [p.ln(), (1e-12f64 / 2.0).ln(), (1e-12f64 / 2.0).ln()];
        assert!(noise_aware_loss(&logits, &[1.0, 0.0, 0.0], 1.0) < 1e-10);
        let uniform = [1.0 / 3.0; 3];
        assert!((noise_aware_loss(&[0.0; 3], &uniform, 1.0) - 3f64.ln()).abs() < 1e-12);
        for l in [[1.0, 0.0, -1.0], [5.0, 5.0, 0.0], [0.3, -2.0, 0.1]] {
            assert!(noise_aware_loss(&l, &uniform, 1.0) > 3f64.ln());
        }
        assert_eq!(noise_aware_loss(&[1.0, 2.0], &[0.5, 0.5], 0.0), 0.0);
        assert_eq!(bit_loss(3.0, 1.0, 0.0), 0.0);
        // one-hot optimum is stationary
        let g = noise_aware_grad(&[800.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 1.0);
        assert!(g.iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn combine_examples() {
        let w = [1.0, 0.0, 0.0, 1.0];
        let b = [0.0, 0.0];
        // no slices: final logits come from the base representation alone
        let (out, a) = slice_combine(&[2.0, 0.0], &[1.0, -1.0], &[], &w, &b);
        assert_eq!(a.len(), 1);
        assert!((a[0] - 1.0).abs() < 1e-12);
        assert_eq!(out, vec![1.0, -1.0]);
        // a non-member slice contributes nothing
        let (_, a) = slice_combine(&[4.0, 0.0], &[1.0, 0.0], &[(0.0, &[9.0, 0.0], &[0.0, 5.0])], &w, &b);
        assert!((a[0] - 1.0).abs() < 1e-6 && a[1] < 1e-6);
        // hand case: experts with membership (1, 0.5) and entropies (0, ln K)
        let base = [0.0, 0.0]; // uniform base: confidence 0
        let (_, a) = slice_combine(
            &base,
            &[0.0, 0.0],
            &[(1.0, &[1000.0, 0.0], &[1.0, 0.0]), (0.5, &[0.0, 0.0], &[0.0, 1.0])],
            &w,
            &b,
        );
        assert!(a[0] < 1e-6 && (a[1] - 1.0).abs() < 1e-6 && a[2] < 1e-6, "{a:?}");
    }

    fn separable(n: usize) -> (Schema, RowStore) {
        let schema = parse_schema(
            r#"{"payloads": [{"name": "x", "kind": "singleton", "inputs": [{"field": "x"}]}],
                "tasks": [{"name": "Y", "payload": "x", "kind": {"multiclass": ["neg", "pos"]}}]}"#,
        )
        .unwrap();
        let mut data = String::new();
        for i in 0..n {
            let pos = i % 2 == 0;
            let label = if pos { "pos" } else { "neg" };
            data.push_str(&format!(
                "{{\"x\": \"{}{}\", \"supervision\": {{\"Y\": [{{\"source\": \"gold\", \"value\": \"{label}\"}}]}}, \"tags\": [\"train\"]}}\n",
                if pos { "p" } else { "n" },
                i % 7
            ));
        }
        let store = ingest(&schema, data.as_bytes()).unwrap().store;
        (schema, store)
    }

    fn mv_labels(schema: &Schema, store: &RowStore) -> Vec<LabelArtifact> {
        let rows = store.rows_with_tag("train");
        schema
            .tasks
            .iter()
            .map(|t| {
                let m = build_label_matrix(store, schema, &t.name, &rows).unwrap();
                let l = majority_vote(&m);
                let model = crate::labelmodel::SourceModel {
                    accuracies: BTreeMap::new(),
                    prior: vec![],
                    log_likelihood: 0.0,
                    iterations: 0,
                };
                LabelArtifact::new(&m, &model, &l)
            })
            .collect()
    }

    fn train_accuracy(model: &TrainedModel, store: &RowStore, task: &str, labels: &[LabelArtifact]) -> f64 {
        let art = labels.iter().find(|a| a.task == task).unwrap();
        let mut ok = 0;
        for (u, q) in art.units.iter().zip(&art.labels) {
            let rec = store.get(u.row).unwrap();
            let p = predict(model, &rec).unwrap();
            let probs = &p.tasks[task].probabilities[0];
            if crate::labelmodel::argmax(probs) == crate::labelmodel::argmax(q.as_ref().unwrap()) {
                ok += 1;
            }
        }
        ok as f64 / art.units.len() as f64
    }

    #[test]
    fn separable_task_is_learned_and_predictions_validate() {
        let (schema, store) = separable(200);
        let labels = mv_labels(&schema, &store);
        let mut c = ArchChoice::defaults(&schema);
        c.epochs = 30;
        let ir = compile(&schema, &c).unwrap();
        let model = train(&ir, &schema, &store, &labels, &TrainConfig::from_choice(&c, 1)).unwrap();
        assert!(train_accuracy(&model, &store, "Y", &labels) >= 0.99);
        let rec = store.get(0).unwrap();
        let p = predict(&model, &rec).unwrap();
        assert!((p.tasks["Y"].probabilities[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        validate_prediction(&model.signature, &p).unwrap();

        let bytes = model.to_bytes();
        let back = TrainedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let again = train(&ir, &schema, &store, &labels, &TrainConfig::from_choice(&c, 1)).unwrap();
        assert_eq!(again.to_bytes(), bytes);

        let null = crate::rowstore::parse_record(&schema, r#"{"x": null}"#).unwrap();
        assert!(predict(&model, &null).is_ok());
        let missing = crate::rowstore::parse_record(&schema, r#"{}"#).unwrap();
        assert!(matches!(predict(&model, &missing), Err(PredictError::MissingPayload(k)) if k == "x"));
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let (schema, store) = separable(60);
        let labels = mv_labels(&schema, &store);
        let mut c = ArchChoice::defaults(&schema);
        c.epochs = 25;
        c.batch_size = 1000;
        c.learning_rate = 0.05;
        let ir = compile(&schema, &c).unwrap();
        let model = train(&ir, &schema, &store, &labels, &TrainConfig::from_choice(&c, 3)).unwrap();
        for w in model.log.windows(2) {
            assert!(w[1].total_loss <= w[0].total_loss, "{:?}", model.log);
        }
        let csv = train_log_csv(&model);
        assert!(csv.starts_with("epoch,total_loss,loss.Y\n"));
        assert_eq!(csv.lines().count(), 26);
    }

    #[test]
    fn zero_loss_weight_freezes_head() {
        let schema = parse_schema(
            r#"{"payloads": [{"name": "x", "kind": "singleton", "inputs": [{"field": "x"}]}],
                "tasks": [{"name": "Y", "payload": "x", "kind": {"multiclass": ["neg", "pos"]}},
                          {"name": "Z", "payload": "x", "kind": {"bitvector": ["a", "b"]}, "loss_weight": 0}]}"#,
        )
        .unwrap();
        let data: String = (0..40)
            .map(|i| {
                format!(
                    "{{\"x\": \"t{}\", \"supervision\": {{\"Y\": [{{\"source\": \"s\", \"value\": \"{}\"}}], \"Z\": [{{\"source\": \"s\", \"value\": [\"a\"]}}]}}, \"tags\": [\"train\"]}}\n",
                    i % 5,
                    if i % 2 == 0 { "pos" } else { "neg" }
                )
            })
            .collect();
        let store = ingest(&schema, data.as_bytes()).unwrap().store;
        let labels = mv_labels(&schema, &store);
        let c = ArchChoice::defaults(&schema);
        let ir = compile(&schema, &c).unwrap();
        let cfg = TrainConfig::from_choice(&c, 2);
        let model = train(&ir, &schema, &store, &labels, &cfg).unwrap();
        let init = init_params(&ir, cfg.seed);
        let mut head_params = 0;
        for (i, spec) in ir.params.iter().enumerate() {
            if spec.name.starts_with("task.Z.") {
                head_params += 1;
                assert_eq!(model.params.tensors[i], init.tensors[i], "{} moved", spec.name);
            }
            if spec.name.starts_with("task.Y.") {
                assert_ne!(model.params.tensors[i], init.tensors[i]);
            }
        }
        assert!(head_params > 0);
    }

    #[test]
    fn slice_heads_train_and_reduce_to_plain_model() {
        let base = r#"{"payloads": [{"name": "x", "kind": "singleton", "inputs": [{"field": "x"}]}],
                "tasks": [{"name": "Y", "payload": "x", "kind": {"multiclass": ["neg", "pos"]}}]"#;
        let plain = parse_schema(&format!("{base}}}")).unwrap();
        let sliced = parse_schema(&format!("{base}, \"slices\": [{{\"tag\": \"odd\"}}]}}")).unwrap();
        let data: String = (0..60)
            .map(|i| {
                let tags = if i % 10 == 0 { "\"train\", \"odd\"" } else { "\"train\"" };
                format!(
                    "{{\"x\": \"t{}\", \"supervision\": {{\"Y\": [{{\"source\": \"s\", \"value\": \"{}\"}}]}}, \"tags\": [{tags}]}}\n",
                    i % 9,
                    if i % 3 == 0 { "pos" } else { "neg" }
                )
            })
            .collect();
        let store_p = ingest(&plain, data.as_bytes()).unwrap().store;
        let store_s = ingest(&sliced, data.as_bytes()).unwrap().store;
        let c = ArchChoice::defaults(&plain);
        let ir_s = compile(&sliced, &c).unwrap();
        assert!(ir_s.nodes.iter().any(|n| matches!(n.op, Op::SliceCombine { .. })));
        let m = train(&ir_s, &sliced, &store_s, &mv_labels(&sliced, &store_s), &TrainConfig::from_choice(&c, 4)).unwrap();
        assert!(m.log.iter().all(|e| e.total_loss.is_finite()));

        // no slices: identical to the plain multitask model
        let ir_p = compile(&plain, &c).unwrap();
        let mut cfg = TrainConfig::from_choice(&c, 4);
        let a = train(&ir_p, &plain, &store_p, &mv_labels(&plain, &store_p), &cfg).unwrap();
        cfg.lambda_ind = 0.0;
        cfg.lambda_exp = 0.0;
        let b = train(&ir_p, &plain, &store_p, &mv_labels(&plain, &store_p), &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn rebalanced_class_mass_is_equal() {
        let art = LabelArtifact {
            task: "T".into(),
            accuracies: BTreeMap::new(),
            prior: vec![],
            log_likelihood: 0.0,
            units: (0..6).map(crate::labelmodel::UnitRef::row).collect(),
            labels: [0, 0, 0, 0, 1, 2]
                .iter()
                .map(|&c| {
                    let mut v = vec![0.0; 3];
                    v[c] = 1.0;
                    Some(v)
                })
                .collect(),
        };
        let w = rebalanced(&art, TaskFamily::Multiclass, &|_| true, true);
        let mut mass = [0.0; 3];
        for (l, wi) in art.labels.iter().zip(&w) {
            mass[crate::labelmodel::argmax(l.as_ref().unwrap())] += wi;
        }
        assert!((mass[0] - mass[1]).abs() < 1e-12 && (mass[1] - mass[2]).abs() < 1e-12);
    }

    #[test]
    fn empty_train_set_is_an_error() {
        let (schema, store) = separable(4);
        let labels = mv_labels(&schema, &store);
        let c = ArchChoice::defaults(&schema);
        let ir = compile(&schema, &c).unwrap();
        let cfg = TrainConfig::from_choice(&c, 0);
        assert!(matches!(train_rows(&ir, &schema, &store, &labels, &cfg, &[]), Err(TrainError::EmptyTrainSet)));
        assert!(matches!(train(&ir, &schema, &store, &[], &cfg), Err(TrainError::NoLabels)));
    }
}
