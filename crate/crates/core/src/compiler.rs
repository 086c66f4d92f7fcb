//! Schema + architecture choice → model IR and serving signature.
//!
//! The IR is a per-example dataflow graph. Every node produces a 2-D tensor
//! `[rows, cols]`; rows are symbolic in the number of tokens of a sequence or
//! the number of elements of a set, and a batch is evaluated example by
//! example. Parameters are declared once in `params` and referenced by index.
//!
//! The serving signature is derived from the schema alone, so it is the same
//! for every architecture choice.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hparams::*;
use crate::schema::{
    aggregating_payloads, reference_order, EmbedDim, PayloadInput, PayloadKind, Schema, TaskKind, TuningSpec,
};

/// Hashed vocabulary size for every embedding table.
pub const VOCAB_BUCKETS: usize = 1 << 15;
pub const SIGNATURE_VERSION: u32 = 1;

/// Largest product space enumerated exactly for sampling without replacement.
const MAX_ENUMERATED_SPACE: u64 = 1 << 20;

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum CompileError {
    #[error("shape error at node `{node}`: {message}")]
    Shape { node: String, message: String },
    #[error("unsupported combination: {0}")]
    UnsupportedCombination(String),
    #[error("empty search space: `{0}` has no candidates")]
    EmptySearchSpace(String),
}

/// One coarse architecture plus trainer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchChoice {
    /// Encoder for each sequence-aggregating payload.
    pub encoders: BTreeMap<String, EncoderKind>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl ArchChoice {
    /// Defaults for every key, mean pooling everywhere.
    pub fn defaults(schema: &Schema) -> ArchChoice {
        ArchChoice {
            encoders: aggregating_payloads(schema).into_iter().map(|p| (p.to_string(), EncoderKind::MeanPool)).collect(),
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn with_encoder(mut self, kind: EncoderKind) -> Self {
        for e in self.encoders.values_mut() {
            *e = kind;
        }
        self
    }

    /// Value of one hyperparameter key, rendered for reports.
    pub fn value_of(&self, key: &HyperKey) -> String {
        match key {
            HyperKey::Encoder => {
                let set: BTreeSet<String> = self.encoders.values().map(|e| e.to_string()).collect();
                set.into_iter().collect::<Vec<_>>().join("|")
            }
            HyperKey::PayloadEncoder(p) => self.encoders.get(p).map(|e| e.to_string()).unwrap_or_default(),
            HyperKey::EmbedDim => self.embed_dim.to_string(),
            HyperKey::HiddenDim => self.hidden_dim.to_string(),
            HyperKey::LearningRate => self.learning_rate.to_string(),
            HyperKey::Epochs => self.epochs.to_string(),
            HyperKey::BatchSize => self.batch_size.to_string(),
        }
    }

    fn apply(&mut self, key: &str, value: &crate::schema::ParamValue) {
        // Values were checked by schema validation.
        match HyperKey::parse(key) {
            Some(HyperKey::Encoder) => {
                if let Some(e) = value.as_encoder() {
                    for v in self.encoders.values_mut() {
                        *v = e;
                    }
                }
            }
            Some(HyperKey::PayloadEncoder(p)) => {
                if let (Some(e), Some(slot)) = (value.as_encoder(), self.encoders.get_mut(&p)) {
                    *slot = e;
                }
            }
            Some(HyperKey::EmbedDim) => self.embed_dim = value.as_positive_int().unwrap_or(self.embed_dim),
            Some(HyperKey::HiddenDim) => self.hidden_dim = value.as_positive_int().unwrap_or(self.hidden_dim),
            Some(HyperKey::LearningRate) => {
                self.learning_rate = value.as_positive_float().unwrap_or(self.learning_rate)
            }
            Some(HyperKey::Epochs) => self.epochs = value.as_positive_int().unwrap_or(self.epochs),
            Some(HyperKey::BatchSize) => self.batch_size = value.as_positive_int().unwrap_or(self.batch_size),
            None => {}
        }
    }
}

/// Symbolic row/column extent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extent {
    Fixed(usize),
    /// Number of tokens under a record key.
    Tokens(String),
    /// Number of set elements under a record key.
    Elements(String),
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extent::Fixed(n) => write!(f, "{n}"),
            Extent::Tokens(k) => write!(f, "len({k})"),
            Extent::Elements(k) => write!(f, "count({k})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: Extent,
    pub cols: Extent,
}

impl Shape {
    pub fn vector(d: usize) -> Shape {
        Shape { rows: Extent::Fixed(1), cols: Extent::Fixed(d) }
    }

    pub fn with_cols(&self, d: usize) -> Shape {
        Shape { rows: self.rows.clone(), cols: Extent::Fixed(d) }
    }

    pub fn fixed_cols(&self) -> Option<usize> {
        match self.cols {
            Extent::Fixed(d) => Some(d),
            _ => None,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.rows, self.cols)
    }
}

/// Where an embedding lookup reads its strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "feed", content = "key")]
pub enum Feed {
    Text(String),
    Tokens(String),
    ElementIds(String),
}

impl Feed {
    pub fn key(&self) -> &str {
        match self {
            Feed::Text(k) | Feed::Tokens(k) | Feed::ElementIds(k) => k,
        }
    }
}

/// Which activation a slice-combined task head uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceExpertRef {
    /// Sigmoid membership probability, `[rows, 1]`.
    pub indicator: NodeId,
    pub repr: NodeId,
    pub logits: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum Op {
    EmbedLookup { feed: Feed, table: ParamId },
    MeanPool { input: NodeId },
    MaxPool { input: NodeId },
    Conv1D { input: NodeId, kernel: ParamId, bias: ParamId, width: usize },
    Recurrent { input: NodeId, w_in: ParamId, w_rec: ParamId, bias: ParamId },
    /// Mean of sequence rows over each element's span of `elements`.
    SpanPool { input: NodeId, elements: String },
    Concat { inputs: Vec<NodeId> },
    Linear { input: NodeId, weight: ParamId, bias: ParamId },
    Relu { input: NodeId },
    Softmax { input: NodeId },
    Sigmoid { input: NodeId },
    /// Bilinear score `q^T W e_c` of a query vector against each candidate.
    CandidateScore { query: NodeId, candidates: NodeId, weight: ParamId },
    /// Membership-and-confidence attention over the base expert and slice experts.
    SliceCombine { base_repr: NodeId, base_logits: NodeId, experts: Vec<SliceExpertRef>, gate: Gate },
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::EmbedLookup { .. } => "EmbedLookup",
            Op::MeanPool { .. } => "MeanPool",
            Op::MaxPool { .. } => "MaxPool",
            Op::Conv1D { .. } => "Conv1D",
            Op::Recurrent { .. } => "Recurrent",
            Op::SpanPool { .. } => "SpanPool",
            Op::Concat { .. } => "Concat",
            Op::Linear { .. } => "Linear",
            Op::Relu { .. } => "Relu",
            Op::Softmax { .. } => "Softmax",
            Op::Sigmoid { .. } => "Sigmoid",
            Op::CandidateScore { .. } => "CandidateScore",
            Op::SliceCombine { .. } => "SliceCombine",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::EmbedLookup { .. } => vec![],
            Op::MeanPool { input }
            | Op::MaxPool { input }
            | Op::Conv1D { input, .. }
            | Op::Recurrent { input, .. }
            | Op::SpanPool { input, .. }
            | Op::Linear { input, .. }
            | Op::Relu { input }
            | Op::Softmax { input }
            | Op::Sigmoid { input } => vec![*input],
            Op::Concat { inputs } => inputs.clone(),
            Op::CandidateScore { query, candidates, .. } => vec![*query, *candidates],
            Op::SliceCombine { base_repr, base_logits, experts, .. } => {
                let mut v = vec![*base_repr, *base_logits];
                for e in experts {
                    v.extend([e.indicator, e.repr, e.logits]);
                }
                v
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Op::EmbedLookup { table, .. } => vec![*table],
            Op::Conv1D { kernel, bias, .. } => vec![*kernel, *bias],
            Op::Recurrent { w_in, w_rec, bias, .. } => vec![*w_in, *w_rec, *bias],
            Op::Linear { weight, bias, .. } => vec![*weight, *bias],
            Op::CandidateScore { weight, .. } => vec![*weight],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrNode {
    pub id: NodeId,
    pub name: String,
    #[serde(flatten)]
    pub op: Op,
    pub shape: Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    Uniform { bound: f64 },
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceBlock {
    pub slice: String,
    /// Pre-sigmoid membership logit.
    pub indicator_logit: NodeId,
    pub indicator: NodeId,
    pub expert_repr: NodeId,
    pub expert_logits: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Multiclass,
    Bitvector,
    Select,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub task: String,
    pub family: TaskFamily,
    pub hidden: NodeId,
    pub base_logits: NodeId,
    /// Logits the task loss and predictions use (slice-combined when sliced).
    pub logits: NodeId,
    pub output: NodeId,
    pub slices: Vec<SliceBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIr {
    pub nodes: Vec<IrNode>,
    pub params: Vec<ParamSpec>,
    pub payload_outputs: BTreeMap<String, NodeId>,
    pub tasks: Vec<TaskGraph>,
    pub buckets: usize,
    pub choice: ArchChoice,
    pub signature: ServingSignature,
}

impl ModelIr {
    pub fn task(&self, name: &str) -> Option<&TaskGraph> {
        self.tasks.iter().find(|t| t.task == name)
    }

    pub fn node_by_name(&self, name: &str) -> Option<&IrNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn param_index(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("IR serializes");
        s.push('\n');
        s
    }
}

// ---- serving signature --------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSignature {
    pub key: String,
    pub kind: PayloadKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSignature {
    pub name: String,
    pub kind: TaskFamily,
    pub payload: String,
    /// `singleton` (one prediction per example) or `per_token`.
    pub granularity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<Vec<String>>,
    /// Candidate set payload for select tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<String>,
    /// Record keys that must be present for this task.
    pub inputs: Vec<String>,
    /// `distribution`, `per_bit_probabilities` or `candidate_distribution`.
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServingSignature {
    pub sig_version: u32,
    pub inputs: Vec<InputSignature>,
    pub tasks: Vec<TaskSignature>,
}

impl ServingSignature {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("signature serializes");
        s.push('\n');
        s
    }

    pub fn task(&self, name: &str) -> Option<&TaskSignature> {
        self.tasks.iter().find(|t| t.name == name)
    }
}

fn required_keys(schema: &Schema, payload: &str, out: &mut BTreeSet<String>) {
    let Some(p) = schema.payload(payload) else { return };
    if p.kind == PayloadKind::Set {
        out.insert(schema.elements_key(p).to_string());
    }
    for i in &p.inputs {
        match i {
            PayloadInput::Field(f) => {
                out.insert(f.clone());
            }
            PayloadInput::Payload { name, .. } => required_keys(schema, name, out),
        }
    }
}

/// Serving signature of a schema. Independent of any architecture choice.
pub fn schema_signature(schema: &Schema) -> ServingSignature {
    let mut all_inputs = BTreeSet::new();
    let tasks = schema
        .tasks
        .iter()
        .map(|t| {
            let mut inputs = BTreeSet::new();
            required_keys(schema, &t.payload, &mut inputs);
            let per_token = schema.payload(&t.payload).map(|p| p.kind) == Some(PayloadKind::Sequence);
            let granularity = if per_token { "per_token" } else { "singleton" }.to_string();
            let (kind, labels, bits, candidates, output) = match &t.kind {
                TaskKind::Multiclass(l) => (TaskFamily::Multiclass, Some(l.clone()), None, None, "distribution"),
                TaskKind::Bitvector(b) => (TaskFamily::Bitvector, None, Some(b.clone()), None, "per_bit_probabilities"),
                TaskKind::Select(s) => {
                    required_keys(schema, s, &mut inputs);
                    (TaskFamily::Select, None, None, Some(s.clone()), "candidate_distribution")
                }
            };
            all_inputs.extend(inputs.iter().cloned());
            TaskSignature {
                name: t.name.clone(),
                kind,
                payload: t.payload.clone(),
                granularity,
                labels,
                bits,
                candidates,
                inputs: inputs.into_iter().collect(),
                output: output.to_string(),
            }
        })
        .collect();
    let keys = schema.record_keys();
    let inputs = all_inputs.into_iter().map(|k| InputSignature { kind: keys[k.as_str()], key: k }).collect();
    ServingSignature { sig_version: SIGNATURE_VERSION, inputs, tasks }
}

/// The serving signature carried by a compiled IR.
pub fn signature(ir: &ModelIr) -> &ServingSignature {
    &ir.signature
}

// ---- compilation --------------------------------------------------------

struct Builder {
    nodes: Vec<IrNode>,
    params: Vec<ParamSpec>,
}

fn glorot(fan_in: usize, fan_out: usize) -> Init {
    Init::Uniform { bound: (6.0 / (fan_in + fan_out) as f64).sqrt() }
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.params.push(ParamSpec { name, shape, init });
        self.params.len() - 1
    }

    fn node(&mut self, name: String, op: Op, shape: Shape) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(IrNode { id, name, op, shape });
        id
    }

    fn shape(&self, id: NodeId) -> &Shape {
        &self.nodes[id].shape
    }

    fn cols(&self, id: NodeId) -> usize {
        self.shape(id).fixed_cols().expect("feature nodes have fixed width")
    }

    fn linear(&mut self, name: &str, input: NodeId, out: usize) -> NodeId {
        let inp = self.cols(input);
        let w = self.param(format!("{name}.weight"), vec![inp, out], glorot(inp, out));
        let b = self.param(format!("{name}.bias"), vec![out], Init::Zeros);
        let shape = self.shape(input).with_cols(out);
        self.node(name.to_string(), Op::Linear { input, weight: w, bias: b }, shape)
    }

    fn unary(&mut self, name: String, input: NodeId, make: fn(NodeId) -> Op) -> NodeId {
        let shape = self.shape(input).clone();
        self.node(name, make(input), shape)
    }
}

/// Compile a validated schema with one architecture choice.
pub fn compile(schema: &Schema, choice: &ArchChoice) -> Result<ModelIr, CompileError> {
    if choice.embed_dim == 0 || choice.hidden_dim == 0 {
        return Err(CompileError::UnsupportedCombination("dimensions must be at least 1".into()));
    }
    let mut b = Builder { nodes: Vec::new(), params: Vec::new() };
    let mut payload_out: BTreeMap<String, NodeId> = BTreeMap::new();

    for pname in reference_order(schema) {
        let p = schema.payload(&pname).expect("ordered names exist");
        let dim = match p.embed_dim {
            EmbedDim::Fixed(d) => d,
            EmbedDim::Auto => choice.embed_dim,
        };
        let rows = match p.kind {
            PayloadKind::Singleton => Extent::Fixed(1),
            PayloadKind::Sequence => Extent::Tokens(schema.length_key(p).expect("sequence has a length").to_string()),
            PayloadKind::Set => Extent::Elements(schema.elements_key(p).to_string()),
        };
        let mut parts = Vec::new();
        for input in &p.inputs {
            match input {
                PayloadInput::Field(f) => {
                    let feed = match p.kind {
                        PayloadKind::Singleton => Feed::Text(f.clone()),
                        PayloadKind::Sequence => Feed::Tokens(f.clone()),
                        PayloadKind::Set => Feed::ElementIds(f.clone()),
                    };
                    let table = b.param(
                        format!("payload.{pname}.embed.{f}"),
                        vec![VOCAB_BUCKETS, dim],
                        // a lookup has one active input row
                        glorot(1, dim),
                    );
                    let shape = Shape { rows: rows.clone(), cols: Extent::Fixed(dim) };
                    parts.push(b.node(format!("payload.{pname}.embed.{f}"), Op::EmbedLookup { feed, table }, shape));
                }
                PayloadInput::Payload { name: q, span_field } => {
                    let qid = payload_out[q];
                    let qkind = schema.payload(q).expect("validated").kind;
                    let node = match (p.kind, qkind, span_field) {
                        (PayloadKind::Singleton, PayloadKind::Sequence, _) => {
                            let enc = choice.encoders.get(&pname).copied().unwrap_or(EncoderKind::MeanPool);
                            encoder(&mut b, &format!("payload.{pname}.encode.{q}"), qid, enc, dim)
                        }
                        (PayloadKind::Singleton, PayloadKind::Set, _) => {
                            let shape = Shape::vector(b.cols(qid));
                            b.node(format!("payload.{pname}.pool.{q}"), Op::MeanPool { input: qid }, shape)
                        }
                        (PayloadKind::Singleton, PayloadKind::Singleton, _) => qid,
                        (PayloadKind::Sequence, PayloadKind::Sequence, None) => qid,
                        (PayloadKind::Set, PayloadKind::Sequence, Some(_)) => {
                            let shape = Shape { rows: rows.clone(), cols: Extent::Fixed(b.cols(qid)) };
                            let elements = schema.elements_key(p).to_string();
                            b.node(format!("payload.{pname}.span.{q}"), Op::SpanPool { input: qid, elements }, shape)
                        }
                        _ => {
                            return Err(CompileError::UnsupportedCombination(format!(
                                "{} payload `{pname}` cannot read {qkind} payload `{q}`",
                                p.kind
                            )))
                        }
                    };
                    parts.push(node);
                }
            }
        }
        let combined = if parts.len() > 1 {
            let width: usize = parts.iter().map(|&n| b.cols(n)).sum();
            let shape = Shape { rows: rows.clone(), cols: Extent::Fixed(width) };
            b.node(format!("payload.{pname}.concat"), Op::Concat { inputs: parts.clone() }, shape)
        } else {
            parts[0]
        };
        let out = if parts.len() > 1 || b.cols(combined) != dim {
            b.linear(&format!("payload.{pname}.project"), combined, dim)
        } else {
            combined
        };
        payload_out.insert(pname.clone(), out);
    }

    let h = choice.hidden_dim;
    let mut tasks = Vec::new();
    for t in &schema.tasks {
        let x = payload_out[&t.payload];
        let pre = b.linear(&format!("task.{}.hidden_linear", t.name), x, h);
        let hidden = b.unary(format!("task.{}.hidden", t.name), pre, |input| Op::Relu { input });
        let slices: Vec<&str> = schema
            .slices
            .iter()
            .filter(|s| schema.slice_tasks(s).iter().any(|st| st.name == t.name))
            .map(|s| s.tag.as_str())
            .collect();
        let (family, base_logits, k) = match &t.kind {
            TaskKind::Multiclass(l) => {
                (TaskFamily::Multiclass, b.linear(&format!("task.{}.head", t.name), hidden, l.len()), l.len())
            }
            TaskKind::Bitvector(bits) => {
                (TaskFamily::Bitvector, b.linear(&format!("task.{}.head", t.name), hidden, bits.len()), bits.len())
            }
            TaskKind::Select(set) => {
                if !slices.is_empty() {
                    return Err(CompileError::UnsupportedCombination(format!(
                        "slices are not supported on select task `{}`",
                        t.name
                    )));
                }
                let cands = payload_out[set];
                let d_set = b.cols(cands);
                let w = b.param(format!("task.{}.score.weight", t.name), vec![h, d_set], glorot(h, d_set));
                let set_decl = schema.payload(set).expect("validated");
                let shape = Shape {
                    rows: Extent::Fixed(1),
                    cols: Extent::Elements(schema.elements_key(set_decl).to_string()),
                };
                let id = b.node(
                    format!("task.{}.score", t.name),
                    Op::CandidateScore { query: hidden, candidates: cands, weight: w },
                    shape,
                );
                (TaskFamily::Select, id, 0)
            }
        };
        let gate = if family == TaskFamily::Bitvector { Gate::Sigmoid } else { Gate::Softmax };
        let mut blocks = Vec::new();
        let logits = if slices.is_empty() {
            base_logits
        } else {
            let mut experts = Vec::new();
            for s in &slices {
                let prefix = format!("task.{}.slice.{s}", t.name);
                let ind_logit = b.linear(&format!("{prefix}.indicator_logit"), hidden, 1);
                let ind = b.unary(format!("{prefix}.indicator"), ind_logit, |input| Op::Sigmoid { input });
                let er_pre = b.linear(&format!("{prefix}.expert_linear"), hidden, h);
                let er = b.unary(format!("{prefix}.expert_repr"), er_pre, |input| Op::Relu { input });
                let el = b.linear(&format!("{prefix}.expert_head"), er, k);
                experts.push(SliceExpertRef { indicator: ind, repr: er, logits: el });
                blocks.push(SliceBlock {
                    slice: s.to_string(),
                    indicator_logit: ind_logit,
                    indicator: ind,
                    expert_repr: er,
                    expert_logits: el,
                });
            }
            let shape = b.shape(hidden).clone();
            let comb = b.node(
                format!("task.{}.combine", t.name),
                Op::SliceCombine { base_repr: hidden, base_logits, experts, gate },
                shape,
            );
            b.linear(&format!("task.{}.combined_head", t.name), comb, k)
        };
        let output = match gate {
            Gate::Softmax => b.unary(format!("task.{}.output", t.name), logits, |input| Op::Softmax { input }),
            Gate::Sigmoid => b.unary(format!("task.{}.output", t.name), logits, |input| Op::Sigmoid { input }),
        };
        tasks.push(TaskGraph { task: t.name.clone(), family, hidden, base_logits, logits, output, slices: blocks });
    }

    let ir = ModelIr {
        nodes: b.nodes,
        params: b.params,
        payload_outputs: payload_out,
        tasks,
        buckets: VOCAB_BUCKETS,
        choice: choice.clone(),
        signature: schema_signature(schema),
    };
    check_shapes(&ir)?;
    Ok(ir)
}

fn encoder(b: &mut Builder, name: &str, input: NodeId, kind: EncoderKind, dim: usize) -> NodeId {
    let din = b.cols(input);
    match kind {
        EncoderKind::MeanPool => b.node(name.to_string(), Op::MeanPool { input }, Shape::vector(din)),
        EncoderKind::MaxPool => b.node(name.to_string(), Op::MaxPool { input }, Shape::vector(din)),
        EncoderKind::Conv1D(width) => {
            let kernel = b.param(format!("{name}.conv.kernel"), vec![width, din, dim], glorot(width * din, dim));
            let bias = b.param(format!("{name}.conv.bias"), vec![dim], Init::Zeros);
            let shape = b.shape(input).with_cols(dim);
            let conv = b.node(format!("{name}.conv"), Op::Conv1D { input, kernel, bias, width }, shape);
            b.node(name.to_string(), Op::MaxPool { input: conv }, Shape::vector(dim))
        }
        EncoderKind::Recurrent => {
            let w_in = b.param(format!("{name}.rnn.w_in"), vec![din, dim], glorot(din, dim));
            let w_rec = b.param(format!("{name}.rnn.w_rec"), vec![dim, dim], glorot(dim, dim));
            let bias = b.param(format!("{name}.rnn.bias"), vec![dim], Init::Zeros);
            b.node(name.to_string(), Op::Recurrent { input, w_in, w_rec, bias }, Shape::vector(dim))
        }
    }
}

/// Static shape pass: inputs precede nodes, parameters are used, and every
/// edge agrees on shape.
pub fn check_shapes(ir: &ModelIr) -> Result<(), CompileError> {
    let mut used = vec![false; ir.params.len()];
    for (i, n) in ir.nodes.iter().enumerate() {
        let fail = |m: String| Err(CompileError::Shape { node: n.name.clone(), message: m });
        if n.id != i {
            return fail(format!("node id {} at position {i}", n.id));
        }
        for inp in n.op.inputs() {
            if inp >= i {
                return fail(format!("input {inp} does not precede node {i}"));
            }
        }
        for p in n.op.params() {
            match used.get_mut(p) {
                Some(u) => *u = true,
                None => return fail(format!("unknown parameter {p}")),
            }
        }
        let s = |id: NodeId| &ir.nodes[id].shape;
        let pshape = |id: ParamId| ir.params[id].shape.as_slice();
        let cols = |id: NodeId| s(id).fixed_cols();
        let expected: Shape = match &n.op {
            Op::EmbedLookup { table, .. } => {
                let ps = pshape(*table);
                if ps.len() != 2 || ps[0] != ir.buckets {
                    return fail(format!("embedding table shape {ps:?}"));
                }
                Shape { rows: n.shape.rows.clone(), cols: Extent::Fixed(ps[1]) }
            }
            Op::MeanPool { input } | Op::MaxPool { input } => Shape { rows: Extent::Fixed(1), cols: s(*input).cols.clone() },
            Op::Conv1D { input, kernel, bias, width } => {
                let ps = pshape(*kernel);
                if ps.len() != 3 || ps[0] != *width || Some(ps[1]) != cols(*input) || pshape(*bias) != [ps[2]] {
                    return fail(format!("conv kernel {ps:?} does not fit input {}", s(*input)));
                }
                if width % 2 == 0 {
                    return fail("conv width must be odd".into());
                }
                s(*input).with_cols(ps[2])
            }
            Op::Recurrent { input, w_in, w_rec, bias } => {
                let (wi, wr, bb) = (pshape(*w_in), pshape(*w_rec), pshape(*bias));
                let h = wr.first().copied().unwrap_or(0);
                if wi.len() != 2 || Some(wi[0]) != cols(*input) || wi[1] != h || wr != [h, h] || bb != [h] {
                    return fail("recurrent parameter shapes disagree".into());
                }
                Shape::vector(h)
            }
            Op::SpanPool { input, elements } => {
                if !matches!(s(*input).rows, Extent::Tokens(_)) {
                    return fail("span pooling needs a sequence input".into());
                }
                Shape { rows: Extent::Elements(elements.clone()), cols: s(*input).cols.clone() }
            }
            Op::Concat { inputs } => {
                let rows = &s(inputs[0]).rows;
                let mut width = 0;
                for &i in inputs {
                    if &s(i).rows != rows {
                        return fail("concatenated inputs disagree on rows".into());
                    }
                    width += cols(i).unwrap_or(0);
                }
                s(inputs[0]).with_cols(width)
            }
            Op::Linear { input, weight, bias } => {
                let ws = pshape(*weight);
                if ws.len() != 2 || Some(ws[0]) != cols(*input) || pshape(*bias) != [ws[1]] {
                    return fail(format!("weight {ws:?} does not fit input {}", s(*input)));
                }
                s(*input).with_cols(ws[1])
            }
            Op::Relu { input } | Op::Softmax { input } | Op::Sigmoid { input } => s(*input).clone(),
            Op::CandidateScore { query, candidates, weight } => {
                let ws = pshape(*weight);
                if s(*query).rows != Extent::Fixed(1)
                    || ws.len() != 2
                    || Some(ws[0]) != cols(*query)
                    || Some(ws[1]) != cols(*candidates)
                {
                    return fail("candidate score shapes disagree".into());
                }
                let Extent::Elements(k) = &s(*candidates).rows else {
                    return fail("candidates must be set-shaped".into());
                };
                Shape { rows: Extent::Fixed(1), cols: Extent::Elements(k.clone()) }
            }
            Op::SliceCombine { base_repr, base_logits, experts, .. } => {
                let rs = s(*base_repr);
                let ls = s(*base_logits);
                for e in experts {
                    if s(e.repr) != rs || s(e.logits) != ls || s(e.indicator) != &rs.with_cols(1) {
                        return fail("slice expert shapes disagree with the base expert".into());
                    }
                }
                if ls.rows != rs.rows {
                    return fail("base logits and representation disagree on rows".into());
                }
                rs.clone()
            }
        };
        if expected != n.shape {
            return fail(format!("declared {} but inputs imply {expected}", n.shape));
        }
    }
    if let Some(p) = used.iter().position(|u| !u) {
        return Err(CompileError::Shape { node: ir.params[p].name.clone(), message: "parameter never used".into() });
    }
    Ok(())
}

// ---- candidate enumeration ----------------------------------------------

/// Deterministic list of up to `budget` architecture choices.
///
/// Pinned keys are fixed in every candidate. When the product space is small
/// enough to enumerate, candidates are distinct (so the list may be shorter
/// than the budget); otherwise points are drawn with replacement.
pub fn enumerate_candidates(schema: &Schema, tuning: &TuningSpec) -> Result<Vec<ArchChoice>, CompileError> {
    let space = tuning.effective_space();
    for (k, v) in &space {
        if v.is_empty() {
            return Err(CompileError::EmptySearchSpace(k.to_string()));
        }
    }
    let keys: Vec<&str> = space.keys().copied().collect();
    let sizes: Vec<u64> = keys.iter().map(|k| space[k].len() as u64).collect();
    let total = sizes.iter().try_fold(1u64, |acc, &s| acc.checked_mul(s));
    let mut rng = ChaCha8Rng::seed_from_u64(tuning.seed);
    let budget = tuning.budget.max(1) as u64;

    let picks: Vec<Vec<usize>> = match total {
        Some(total) if total <= MAX_ENUMERATED_SPACE => {
            let mut idx: Vec<u64> = (0..total).collect();
            let n = budget.min(total) as usize;
            let (chosen, _) = idx.partial_shuffle(&mut rng, n);
            chosen
                .iter()
                .map(|&flat| {
                    let mut rem = flat;
                    sizes
                        .iter()
                        .rev()
                        .map(|&s| {
                            let i = (rem % s) as usize;
                            rem /= s;
                            i
                        })
                        .collect::<Vec<_>>()
                        .into_iter()
                        .rev()
                        .collect()
                })
                .collect()
        }
        _ => (0..budget).map(|_| sizes.iter().map(|&s| rng.gen_range(0..s as usize)).collect()).collect(),
    };

    let base = ArchChoice::defaults(schema);
    Ok(picks
        .into_iter()
        .map(|pick| {
            let mut values: BTreeMap<&str, &crate::schema::ParamValue> = BTreeMap::new();
            for (k, i) in keys.iter().zip(pick) {
                values.insert(k, &space[k][i]);
            }
            for (k, v) in &tuning.pinned {
                values.insert(k, v);
            }
            let mut c = base.clone();
            // generic encoder first so per-payload overrides win
            if let Some(v) = values.get("encoder") {
                c.apply("encoder", v);
            }
            for (k, v) in &values {
                if *k != "encoder" {
                    c.apply(k, v);
                }
            }
            c
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::parse_schema;

    pub(crate) const RUNNING: &str = r#"{
        "payloads": [
            {"name": "tokens", "kind": "sequence", "inputs": [{"field": "tokens"}]},
            {"name": "entities", "kind": "set", "inputs": [{"field": "entities"}, {"payload": "tokens", "span_field": "span"}]},
            {"name": "query", "kind": "singleton", "inputs": [{"payload": "tokens"}, {"payload": "entities"}]}
        ],
        "tasks": [
            {"name": "Intent", "payload": "query", "kind": {"multiclass": ["height", "age", "none"]}},
            {"name": "EntityType", "payload": "tokens", "kind": {"bitvector": ["loc", "country", "person"]}},
            {"name": "IntentArg", "payload": "query", "kind": {"select": "entities"}}
        ],
        "tuning": {"search_space": {"encoder": ["mean_pool", "max_pool", "conv1d:3", "recurrent"], "hidden_dim": [8, 16]},
                   "pinned": {"embed_dim": 8}, "budget": 4, "seed": 7}
    }"#;

    fn running() -> Schema {
        parse_schema(RUNNING).unwrap()
    }

    fn with_slices(slices: &str) -> Schema {
        parse_schema(&RUNNING.replace("\"tuning\"", &format!("\"slices\": {slices},\n \"tuning\""))).unwrap()
    }

    #[test]
    fn running_example_structure() {
        let s = running();
        let ir = compile(&s, &ArchChoice::defaults(&s)).unwrap();
        assert_eq!(ir.payload_outputs.len(), 3);
        assert_eq!(ir.tasks.len(), 3);
        assert!(ir.nodes.iter().all(|n| !matches!(n.op, Op::SliceCombine { .. })));
        for t in &ir.tasks {
            assert_eq!(t.logits, t.base_logits);
            assert!(t.slices.is_empty());
        }
        let kinds: BTreeSet<&str> = ir.nodes.iter().map(|n| n.op.kind_name()).collect();
        for k in ["EmbedLookup", "MeanPool", "SpanPool", "Concat", "Linear", "Relu", "Softmax", "Sigmoid", "CandidateScore"] {
            assert!(kinds.contains(k), "missing {k}");
        }
        check_shapes(&ir).unwrap();
    }

    #[test]
    fn encoder_choice_only_changes_encoder_nodes() {
        let s = running();
        let mean = compile(&s, &ArchChoice::defaults(&s)).unwrap();
        let conv = compile(&s, &ArchChoice::defaults(&s).with_encoder(EncoderKind::Conv1D(3))).unwrap();
        let names = |ir: &ModelIr| -> BTreeSet<(String, &'static str)> {
            ir.nodes.iter().map(|n| (n.name.clone(), n.op.kind_name())).collect()
        };
        let (a, b) = (names(&mean), names(&conv));
        for (name, _) in a.symmetric_difference(&b) {
            assert!(name.starts_with("payload.query.encode.tokens"), "unexpected difference at {name}");
        }
        assert_ne!(a, b);
        assert_eq!(mean.signature.to_json(), conv.signature.to_json());
    }

    #[test]
    fn signature_contents() {
        let s = running();
        let sig = schema_signature(&s);
        let intent = sig.task("Intent").unwrap();
        assert_eq!(intent.output, "distribution");
        assert_eq!(intent.labels.as_ref().unwrap(), &vec!["height".to_string(), "age".into(), "none".into()]);
        let et = sig.task("EntityType").unwrap();
        assert_eq!(et.granularity, "per_token");
        assert_eq!(et.output, "per_bit_probabilities");
        assert_eq!(et.bits.as_ref().unwrap().len(), 3);
        let arg = sig.task("IntentArg").unwrap();
        assert_eq!(arg.candidates.as_deref(), Some("entities"));
        assert_eq!(arg.inputs, vec!["entities".to_string(), "tokens".into()]);
        assert_eq!(sig.tasks.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), ["Intent", "EntityType", "IntentArg"]);
        assert!(sig.to_json().contains("\"sig_version\": 1"));
    }

    #[test]
    fn adding_a_slice_adds_only_its_heads() {
        let one = with_slices(r#"[{"tag": "nutrition", "tasks": ["Intent"]}]"#);
        let two = with_slices(r#"[{"tag": "nutrition", "tasks": ["Intent"]}, {"tag": "complex", "tasks": ["Intent"]}]"#);
        let a = compile(&one, &ArchChoice::defaults(&one)).unwrap();
        let b = compile(&two, &ArchChoice::defaults(&two)).unwrap();
        let named = |ir: &ModelIr| -> BTreeMap<String, (String, Vec<String>)> {
            ir.nodes
                .iter()
                .map(|n| {
                    let ins = n.op.inputs().iter().map(|&i| ir.nodes[i].name.clone()).collect();
                    (n.name.clone(), (n.op.kind_name().to_string(), ins))
                })
                .collect()
        };
        let (na, nb) = (named(&a), named(&b));
        let added: Vec<&String> = nb.keys().filter(|k| !na.contains_key(*k)).collect();
        assert!(na.keys().all(|k| nb.contains_key(k)));
        assert_eq!(added.len(), 5, "{added:?}");
        assert!(added.iter().all(|k| k.starts_with("task.Intent.slice.complex.")));
        for (k, v) in &na {
            if k != "task.Intent.combine" {
                assert_eq!(&nb[k], v, "node {k} changed");
            }
        }
        assert_eq!(b.task("Intent").unwrap().slices.len(), 2);
        assert_eq!(a.signature, b.signature);
    }

    #[test]
    fn slice_on_select_is_unsupported() {
        let s = with_slices(r#"[{"tag": "nutrition", "tasks": ["IntentArg"]}]"#);
        assert!(matches!(compile(&s, &ArchChoice::defaults(&s)), Err(CompileError::UnsupportedCombination(_))));
        // default slice scope skips select tasks
        let s = with_slices(r#"[{"tag": "nutrition"}]"#);
        let ir = compile(&s, &ArchChoice::defaults(&s)).unwrap();
        assert_eq!(ir.task("Intent").unwrap().slices.len(), 1);
        assert_eq!(ir.task("EntityType").unwrap().slices.len(), 1);
        assert!(ir.task("IntentArg").unwrap().slices.is_empty());
    }

    #[test]
    fn broken_ir_fails_shape_check() {
        let s = running();
        let mut ir = compile(&s, &ArchChoice::defaults(&s)).unwrap();
        let lin = ir.nodes.iter().position(|n| matches!(n.op, Op::Linear { .. })).unwrap();
        if let Op::Linear { weight, .. } = ir.nodes[lin].op {
            ir.params[weight].shape[0] += 1;
        }
        assert!(matches!(check_shapes(&ir), Err(CompileError::Shape { .. })));
    }

    #[test]
    fn candidates_respect_budget_pins_and_seed() {
        let s = running();
        let a = enumerate_candidates(&s, &s.tuning).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|c| c.embed_dim == 8));
        assert_eq!(a, enumerate_candidates(&s, &s.tuning).unwrap());
        let distinct: BTreeSet<String> = a.iter().map(|c| serde_json::to_string(c).unwrap()).collect();
        assert_eq!(distinct.len(), 4);

        let mut t = s.tuning.clone();
        t.search_space = BTreeMap::from([
            ("encoder".to_string(), vec![crate::schema::ParamValue::Text("mean_pool".into())]),
            ("learning_rate".to_string(), vec![crate::schema::ParamValue::Float(0.1)]),
        ]);
        t.budget = 3;
        assert_eq!(enumerate_candidates(&s, &t).unwrap().len(), 1);

        t.search_space.insert("epochs".into(), vec![]);
        assert!(matches!(enumerate_candidates(&s, &t), Err(CompileError::EmptySearchSpace(_))));
    }

    #[test]
    fn per_payload_encoder_overrides_generic() {
        let s = running();
        let mut t = s.tuning.clone();
        t.search_space.clear();
        t.pinned.insert("encoder".into(), crate::schema::ParamValue::Text("max_pool".into()));
        t.pinned.insert("encoder.query".into(), crate::schema::ParamValue::Text("recurrent".into()));
        let c = enumerate_candidates(&s, &t).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].encoders["query"], EncoderKind::Recurrent);
    }

    #[test]
    fn ir_json_round_trips() {
        let s = running();
        let ir = compile(&s, &ArchChoice::defaults(&s).with_encoder(EncoderKind::Recurrent)).unwrap();
        let back: ModelIr = serde_json::from_str(&ir.to_json()).unwrap();
        assert_eq!(back, ir);
    }
}
