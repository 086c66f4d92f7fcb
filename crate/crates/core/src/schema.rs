//! Declarative schema: payloads, tasks, slices and the tuning specification.
//!
//! The schema says what the model computes. It never says how: encoder
//! choices, dimensions and optimizer settings live in the tuning spec and are
//! resolved by search.
//!
//! The on-disk form is a JSON document with top-level keys `payloads`,
//! `tasks`, `slices` and `tuning`. [`serialize_schema`] writes a canonical
//! form (sorted object keys, declaration-ordered arrays, defaults elided) and
//! [`schema_hash`] digests that canonical form.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::hash::fnv1a64;
use crate::hparams::{EncoderKind, HyperKey};

/// Tags every record carries exactly one of.
pub const SPLIT_TAGS: [&str; 3] = ["train", "dev", "test"];

/// Record keys with fixed meaning; payloads and fields may not use them.
pub const RESERVED_KEYS: [&str; 2] = ["supervision", "tags"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Singleton,
    Sequence,
    Set,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::Singleton => "singleton",
            PayloadKind::Sequence => "sequence",
            PayloadKind::Set => "set",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PayloadInput {
    /// Raw data read from a record key.
    Field(String),
    /// The representation of another payload, optionally pooled over the
    /// span stored under `span_field` in each set element.
    Payload { name: String, span_field: Option<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedDim {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PayloadDecl {
    pub name: String,
    pub kind: PayloadKind,
    pub inputs: Vec<PayloadInput>,
    pub embed_dim: EmbedDim,
}

impl PayloadDecl {
    pub fn field_inputs(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().filter_map(|i| match i {
            PayloadInput::Field(f) => Some(f.as_str()),
            PayloadInput::Payload { .. } => None,
        })
    }

    pub fn payload_refs(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().filter_map(|i| match i {
            PayloadInput::Payload { name, .. } => Some(name.as_str()),
            PayloadInput::Field(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Multiclass(Vec<String>),
    Bitvector(Vec<String>),
    /// Choose one element of the named set payload.
    Select(String),
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Multiclass(_) => "multiclass",
            TaskKind::Bitvector(_) => "bitvector",
            TaskKind::Select(_) => "select",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDecl {
    pub name: String,
    pub payload: String,
    pub kind: TaskKind,
    pub loss_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceDecl {
    pub tag: String,
    /// `None` applies the slice to every task that supports slicing.
    pub tasks: Option<Vec<String>>,
}

/// One candidate value in the tuning spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl ParamValue {
    pub fn as_positive_int(&self) -> Option<usize> {
        match self {
            ParamValue::Int(v) if *v >= 1 => Some(*v as usize),
            _ => None,
        }
    }

    pub fn as_positive_float(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) if *v > 0 => Some(*v as f64),
            ParamValue::Float(v) if v.is_finite() && *v > 0.0 => Some(*v),
            _ => None,
        }
    }

    pub fn as_encoder(&self) -> Option<EncoderKind> {
        match self {
            ParamValue::Text(s) => s.parse().ok(),
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v}"),
            ParamValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningSpec {
    pub search_space: BTreeMap<String, Vec<ParamValue>>,
    pub pinned: BTreeMap<String, ParamValue>,
    pub budget: u32,
    pub seed: u64,
}

impl Default for TuningSpec {
    fn default() -> Self {
        TuningSpec { search_space: BTreeMap::new(), pinned: BTreeMap::new(), budget: 1, seed: 0 }
    }
}

impl TuningSpec {
    /// Search space with pinned keys removed.
    pub fn effective_space(&self) -> BTreeMap<&str, &[ParamValue]> {
        self.search_space
            .iter()
            .filter(|(k, _)| !self.pinned.contains_key(*k))
            .map(|(k, v)| (k.as_str(), v.as_slice()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub payloads: Vec<PayloadDecl>,
    pub tasks: Vec<TaskDecl>,
    pub slices: Vec<SliceDecl>,
    pub tuning: TuningSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationKind {
    UnknownRef,
    CycleDetected,
    DuplicateName,
    EmptyLabelSet,
    BadSliceTag,
    /// A payload or task is wired to a payload of an incompatible kind.
    KindMismatch,
    /// A numeric or name field is out of its allowed range.
    BadValue,
    NoTasks,
    BadTuning,
}

impl fmt::Display for ValidationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemaError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{kind} at {path}: {message}")]
    Validation { kind: ValidationKind, path: String, message: String },
}

impl SchemaError {
    pub fn validation_kind(&self) -> Option<ValidationKind> {
        match self {
            SchemaError::Validation { kind, .. } => Some(*kind),
            SchemaError::Syntax { .. } => None,
        }
    }
}

fn invalid(kind: ValidationKind, path: impl Into<String>, message: impl Into<String>) -> SchemaError {
    SchemaError::Validation { kind, path: path.into(), message: message.into() }
}

// ---- raw document shape -------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    payloads: Vec<RawPayload>,
    tasks: Vec<RawTask>,
    #[serde(default)]
    slices: Vec<RawSlice>,
    #[serde(default)]
    tuning: Option<RawTuning>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPayload {
    name: String,
    kind: PayloadKind,
    inputs: Vec<RawInput>,
    #[serde(default)]
    embed_dim: Option<RawEmbedDim>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawEmbedDim {
    Fixed(u64),
    Named(String),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawInput {
    Field {
        field: String,
    },
    Payload {
        payload: String,
        #[serde(default)]
        span_field: Option<String>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    name: String,
    payload: String,
    kind: RawTaskKind,
    #[serde(default)]
    loss_weight: Option<f64>,
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum RawTaskKind {
    Multiclass(Vec<String>),
    Bitvector(Vec<String>),
    Select(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSlice {
    tag: String,
    #[serde(default)]
    tasks: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTuning {
    #[serde(default)]
    search_space: BTreeMap<String, Vec<ParamValue>>,
    #[serde(default)]
    pinned: BTreeMap<String, ParamValue>,
    #[serde(default = "default_budget")]
    budget: i64,
    #[serde(default)]
    seed: u64,
}

fn default_budget() -> i64 {
    1
}

/// Parse a schema from raw bytes. Invalid UTF-8 is a syntax error.
pub fn parse_schema_bytes(bytes: &[u8]) -> Result<Schema, SchemaError> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_schema(text),
        Err(e) => {
            let line = 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count();
            Err(SchemaError::Syntax { line, message: "invalid UTF-8".into() })
        }
    }
}

/// Parse and validate a schema document.
pub fn parse_schema(text: &str) -> Result<Schema, SchemaError> {
    let raw: RawSchema = serde_json::from_str(text)
        .map_err(|e| SchemaError::Syntax { line: e.line().max(1), message: e.to_string() })?;
    let schema = from_raw(raw)?;
    validate(&schema)?;
    Ok(schema)
}

fn from_raw(raw: RawSchema) -> Result<Schema, SchemaError> {
    let mut payloads = Vec::with_capacity(raw.payloads.len());
    for (i, p) in raw.payloads.into_iter().enumerate() {
        let embed_dim = match p.embed_dim {
            None => EmbedDim::Auto,
            Some(RawEmbedDim::Named(s)) if s == "auto" => EmbedDim::Auto,
            Some(RawEmbedDim::Fixed(d)) if d >= 1 && d <= 1 << 16 => EmbedDim::Fixed(d as usize),
            Some(_) => {
                return Err(invalid(
                    ValidationKind::BadValue,
                    format!("payloads[{i}].embed_dim"),
                    "embed_dim must be a positive integer or \"auto\"",
                ))
            }
        };
        let inputs = p
            .inputs
            .into_iter()
            .map(|inp| match inp {
                RawInput::Field { field } => PayloadInput::Field(field),
                RawInput::Payload { payload, span_field } => PayloadInput::Payload { name: payload, span_field },
            })
            .collect();
        payloads.push(PayloadDecl { name: p.name, kind: p.kind, inputs, embed_dim });
    }
    let tasks = raw
        .tasks
        .into_iter()
        .map(|t| TaskDecl {
            name: t.name,
            payload: t.payload,
            kind: match t.kind {
                RawTaskKind::Multiclass(l) => TaskKind::Multiclass(l),
                RawTaskKind::Bitvector(b) => TaskKind::Bitvector(b),
                RawTaskKind::Select(s) => TaskKind::Select(s),
            },
            loss_weight: t.loss_weight.unwrap_or(1.0),
        })
        .collect();
    let slices = raw.slices.into_iter().map(|s| SliceDecl { tag: s.tag, tasks: s.tasks }).collect();
    let tuning = match raw.tuning {
        None => TuningSpec::default(),
        Some(t) => {
            if t.budget < 1 || t.budget > u32::MAX as i64 {
                return Err(invalid(ValidationKind::BadTuning, "tuning.budget", "budget must be at least 1"));
            }
            TuningSpec { search_space: t.search_space, pinned: t.pinned, budget: t.budget as u32, seed: t.seed }
        }
    };
    Ok(Schema { payloads, tasks, slices, tuning })
}

/// Check every cross-reference and kind constraint.
pub fn validate(schema: &Schema) -> Result<(), SchemaError> {
    use ValidationKind::*;

    let mut by_name: HashMap<&str, &PayloadDecl> = HashMap::new();
    for (i, p) in schema.payloads.iter().enumerate() {
        let path = format!("payloads[{i}]");
        if p.name.is_empty() || RESERVED_KEYS.contains(&p.name.as_str()) {
            return Err(invalid(BadValue, format!("{path}.name"), format!("`{}` is not a usable payload name", p.name)));
        }
        if by_name.insert(&p.name, p).is_some() {
            return Err(invalid(DuplicateName, format!("{path}.name"), format!("payload `{}` declared twice", p.name)));
        }
        if p.inputs.is_empty() {
            return Err(invalid(BadValue, format!("{path}.inputs"), "a payload needs at least one input"));
        }
    }

    // Every record key gets exactly one kind.
    let mut key_kinds: HashMap<&str, PayloadKind> = HashMap::new();
    for p in &schema.payloads {
        key_kinds.insert(&p.name, p.kind);
    }
    for (i, p) in schema.payloads.iter().enumerate() {
        for (j, input) in p.inputs.iter().enumerate() {
            let path = format!("payloads[{i}].inputs[{j}]");
            match input {
                PayloadInput::Field(f) => {
                    if f.is_empty() || RESERVED_KEYS.contains(&f.as_str()) {
                        return Err(invalid(BadValue, path, format!("`{f}` is not a usable field name")));
                    }
                    if let Some(prev) = key_kinds.insert(f, p.kind) {
                        if prev != p.kind {
                            return Err(invalid(
                                KindMismatch,
                                path,
                                format!("field `{f}` is read as both {prev} and {}", p.kind),
                            ));
                        }
                    }
                }
                PayloadInput::Payload { name, span_field } => {
                    let Some(target) = by_name.get(name.as_str()) else {
                        return Err(invalid(UnknownRef, path, format!("unknown payload `{name}`")));
                    };
                    let ok = match (p.kind, target.kind, span_field.is_some()) {
                        (PayloadKind::Singleton, _, false) => true,
                        (PayloadKind::Sequence, PayloadKind::Sequence, false) => true,
                        (PayloadKind::Set, PayloadKind::Sequence, true) => true,
                        _ => false,
                    };
                    if !ok {
                        let how = if span_field.is_some() { " with a span" } else { "" };
                        return Err(invalid(
                            KindMismatch,
                            path,
                            format!("a {} payload cannot reference {} payload `{name}`{how}", p.kind, target.kind),
                        ));
                    }
                    if span_field.as_deref() == Some("") || span_field.as_deref() == Some("id") {
                        return Err(invalid(BadValue, path, "span_field must name an element key other than `id`"));
                    }
                }
            }
        }
        let spans = p.inputs.iter().filter(|i| matches!(i, PayloadInput::Payload { span_field: Some(_), .. })).count();
        if spans > 1 {
            return Err(invalid(KindMismatch, format!("payloads[{i}].inputs"), "at most one span reference per set"));
        }
    }

    detect_cycle(schema)?;

    if schema.tasks.is_empty() {
        return Err(invalid(NoTasks, "tasks", "a schema needs at least one task"));
    }
    let mut task_names = BTreeSet::new();
    for (i, t) in schema.tasks.iter().enumerate() {
        let path = format!("tasks[{i}]");
        if t.name.is_empty() {
            return Err(invalid(BadValue, format!("{path}.name"), "empty task name"));
        }
        if !task_names.insert(t.name.as_str()) {
            return Err(invalid(DuplicateName, format!("{path}.name"), format!("task `{}` declared twice", t.name)));
        }
        if !(t.loss_weight.is_finite() && t.loss_weight >= 0.0) {
            return Err(invalid(BadValue, format!("{path}.loss_weight"), "loss_weight must be a nonnegative real"));
        }
        let Some(payload) = by_name.get(t.payload.as_str()) else {
            return Err(invalid(UnknownRef, format!("{path}.payload"), format!("unknown payload `{}`", t.payload)));
        };
        match &t.kind {
            TaskKind::Multiclass(labels) | TaskKind::Bitvector(labels) => {
                if payload.kind == PayloadKind::Set {
                    return Err(invalid(
                        KindMismatch,
                        format!("{path}.payload"),
                        format!("{} tasks need a singleton or sequence payload", t.kind.name()),
                    ));
                }
                if labels.is_empty() {
                    return Err(invalid(EmptyLabelSet, format!("{path}.kind"), "label set is empty"));
                }
                let mut seen = BTreeSet::new();
                for l in labels {
                    if !seen.insert(l.as_str()) {
                        return Err(invalid(DuplicateName, format!("{path}.kind"), format!("label `{l}` repeated")));
                    }
                }
            }
            TaskKind::Select(set) => {
                let Some(target) = by_name.get(set.as_str()) else {
                    return Err(invalid(UnknownRef, format!("{path}.kind"), format!("unknown payload `{set}`")));
                };
                if target.kind != PayloadKind::Set {
                    return Err(invalid(KindMismatch, format!("{path}.kind"), format!("`{set}` is not a set payload")));
                }
                if payload.kind != PayloadKind::Singleton {
                    return Err(invalid(
                        KindMismatch,
                        format!("{path}.payload"),
                        "select tasks score a singleton payload against the candidates",
                    ));
                }
            }
        }
    }

    let mut slice_tags = BTreeSet::new();
    for (i, s) in schema.slices.iter().enumerate() {
        let path = format!("slices[{i}]");
        if s.tag.is_empty() || SPLIT_TAGS.contains(&s.tag.as_str()) {
            return Err(invalid(BadSliceTag, format!("{path}.tag"), format!("`{}` cannot be a slice", s.tag)));
        }
        if !slice_tags.insert(s.tag.as_str()) {
            return Err(invalid(DuplicateName, format!("{path}.tag"), format!("slice `{}` declared twice", s.tag)));
        }
        if let Some(tasks) = &s.tasks {
            for t in tasks {
                if !task_names.contains(t.as_str()) {
                    return Err(invalid(UnknownRef, format!("{path}.tasks"), format!("unknown task `{t}`")));
                }
            }
        }
    }

    validate_tuning(schema)
}

fn detect_cycle(schema: &Schema) -> Result<(), SchemaError> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let index: HashMap<&str, usize> = schema.payloads.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
    let mut state = vec![0u8; schema.payloads.len()];
    fn visit(schema: &Schema, index: &HashMap<&str, usize>, state: &mut [u8], i: usize) -> Result<(), SchemaError> {
        if state[i] == 2 {
            return Ok(());
        }
        if state[i] == 1 {
            return Err(invalid(
                ValidationKind::CycleDetected,
                format!("payloads[{i}]"),
                format!("payload `{}` is part of a reference cycle", schema.payloads[i].name),
            ));
        }
        state[i] = 1;
        for r in schema.payloads[i].payload_refs() {
            visit(schema, index, state, index[r])?;
        }
        state[i] = 2;
        Ok(())
    }
    for i in 0..schema.payloads.len() {
        visit(schema, &index, &mut state, i)?;
    }
    Ok(())
}

fn validate_tuning(schema: &Schema) -> Result<(), SchemaError> {
    let tuning = &schema.tuning;
    if tuning.budget < 1 {
        return Err(invalid(ValidationKind::BadTuning, "tuning.budget", "budget must be at least 1"));
    }
    let aggregating = aggregating_payloads(schema);
    let check = |path: String, key: &str, value: &ParamValue| -> Result<(), SchemaError> {
        let Some(hk) = HyperKey::parse(key) else {
            return Err(invalid(ValidationKind::BadTuning, path, format!("unknown hyperparameter `{key}`")));
        };
        let ok = match &hk {
            HyperKey::Encoder => value.as_encoder().is_some(),
            HyperKey::PayloadEncoder(p) => {
                if !aggregating.contains(p.as_str()) {
                    return Err(invalid(
                        ValidationKind::BadTuning,
                        path,
                        format!("`{p}` does not aggregate a sequence, so it has no encoder"),
                    ));
                }
                value.as_encoder().is_some()
            }
            HyperKey::EmbedDim | HyperKey::HiddenDim | HyperKey::Epochs | HyperKey::BatchSize => {
                value.as_positive_int().is_some()
            }
            HyperKey::LearningRate => value.as_positive_float().is_some(),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(ValidationKind::BadTuning, path, format!("bad value `{value}` for `{key}`")))
        }
    };
    for (key, values) in &tuning.search_space {
        if values.is_empty() {
            return Err(invalid(
                ValidationKind::BadTuning,
                format!("tuning.search_space.{key}"),
                "candidate list is empty",
            ));
        }
        for (i, v) in values.iter().enumerate() {
            check(format!("tuning.search_space.{key}[{i}]"), key, v)?;
        }
    }
    for (key, v) in &tuning.pinned {
        check(format!("tuning.pinned.{key}"), key, v)?;
    }
    Ok(())
}

/// Payloads that summarize a sequence through an encoder.
pub fn aggregating_payloads(schema: &Schema) -> BTreeSet<&str> {
    schema
        .payloads
        .iter()
        .filter(|p| {
            p.kind == PayloadKind::Singleton
                && p.payload_refs().any(|r| schema.payload(r).map(|t| t.kind) == Some(PayloadKind::Sequence))
        })
        .map(|p| p.name.as_str())
        .collect()
}

impl Schema {
    pub fn payload(&self, name: &str) -> Option<&PayloadDecl> {
        self.payloads.iter().find(|p| p.name == name)
    }

    pub fn task(&self, name: &str) -> Option<&TaskDecl> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn is_slice(&self, tag: &str) -> bool {
        self.slices.iter().any(|s| s.tag == tag)
    }

    /// Kind of every record key the schema knows about: payload names plus
    /// the data fields payloads read.
    pub fn record_keys(&self) -> BTreeMap<&str, PayloadKind> {
        let mut keys = BTreeMap::new();
        for p in &self.payloads {
            keys.insert(p.name.as_str(), p.kind);
            for f in p.field_inputs() {
                keys.insert(f, p.kind);
            }
        }
        keys
    }

    /// Record key holding a set payload's elements: its first field input,
    /// else the payload's own name.
    pub fn elements_key<'a>(&'a self, set: &'a PayloadDecl) -> &'a str {
        set.field_inputs().next().unwrap_or(&set.name)
    }

    /// Element key holding the span for a set payload, with the referenced
    /// sequence payload.
    pub fn span_ref<'a>(&'a self, set: &'a PayloadDecl) -> Option<(&'a str, &'a str)> {
        set.inputs.iter().find_map(|i| match i {
            PayloadInput::Payload { name, span_field: Some(sf) } => Some((name.as_str(), sf.as_str())),
            _ => None,
        })
    }

    /// Record key whose token list defines a sequence payload's length.
    pub fn length_key<'a>(&'a self, seq: &'a PayloadDecl) -> Option<&'a str> {
        if let Some(f) = seq.field_inputs().next() {
            return Some(f);
        }
        let r = seq.payload_refs().next()?;
        self.length_key(self.payload(r)?)
    }

    /// Tasks a slice applies to. Select tasks are only included when listed
    /// explicitly (the compiler then rejects them).
    pub fn slice_tasks<'a>(&'a self, slice: &'a SliceDecl) -> Vec<&'a TaskDecl> {
        match &slice.tasks {
            Some(names) => self.tasks.iter().filter(|t| names.contains(&t.name)).collect(),
            None => self.tasks.iter().filter(|t| !matches!(t.kind, TaskKind::Select(_))).collect(),
        }
    }
}

/// Topological order of payloads: referenced payloads first, ties broken by
/// declaration order.
pub fn reference_order(schema: &Schema) -> Vec<String> {
    let n = schema.payloads.len();
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let next = (0..n).find(|&i| {
            !placed[i]
                && schema.payloads[i].payload_refs().all(|r| {
                    schema.payloads.iter().position(|p| p.name == r).is_some_and(|j| placed[j])
                })
        });
        match next {
            Some(i) => {
                placed[i] = true;
                order.push(schema.payloads[i].name.clone());
            }
            // Only reachable for unvalidated, cyclic schemas.
            None => break,
        }
    }
    order
}

/// Canonical JSON form: sorted keys, declaration-ordered arrays, defaults
/// omitted, two-space indentation and a trailing newline.
pub fn serialize_schema(schema: &Schema) -> String {
    let payloads: Vec<Value> = schema
        .payloads
        .iter()
        .map(|p| {
            let mut m = Map::new();
            m.insert("name".into(), json!(p.name));
            m.insert("kind".into(), json!(p.kind));
            let inputs: Vec<Value> = p
                .inputs
                .iter()
                .map(|i| match i {
                    PayloadInput::Field(f) => json!({ "field": f }),
                    PayloadInput::Payload { name, span_field: None } => json!({ "payload": name }),
                    PayloadInput::Payload { name, span_field: Some(s) } => json!({ "payload": name, "span_field": s }),
                })
                .collect();
            m.insert("inputs".into(), Value::Array(inputs));
            if let EmbedDim::Fixed(d) = p.embed_dim {
                m.insert("embed_dim".into(), json!(d));
            }
            Value::Object(m)
        })
        .collect();
    let tasks: Vec<Value> = schema
        .tasks
        .iter()
        .map(|t| {
            let mut m = Map::new();
            m.insert("name".into(), json!(t.name));
            m.insert("payload".into(), json!(t.payload));
            let kind = match &t.kind {
                TaskKind::Multiclass(l) => json!({ "multiclass": l }),
                TaskKind::Bitvector(b) => json!({ "bitvector": b }),
                TaskKind::Select(s) => json!({ "select": s }),
            };
            m.insert("kind".into(), kind);
            if t.loss_weight != 1.0 {
                m.insert("loss_weight".into(), json!(t.loss_weight));
            }
            Value::Object(m)
        })
        .collect();
    let slices: Vec<Value> = schema
        .slices
        .iter()
        .map(|s| {
            let mut m = Map::new();
            m.insert("tag".into(), json!(s.tag));
            if let Some(t) = &s.tasks {
                m.insert("tasks".into(), json!(t));
            }
            Value::Object(m)
        })
        .collect();
    let tuning = json!({
        "search_space": schema.tuning.search_space,
        "pinned": schema.tuning.pinned,
        "budget": schema.tuning.budget,
        "seed": schema.tuning.seed,
    });
    let doc = json!({ "payloads": payloads, "tasks": tasks, "slices": slices, "tuning": tuning });
    let mut out = serde_json::to_string_pretty(&doc).expect("schema values are always serializable");
    out.push('\n');
    out
}

/// 64-bit digest of the canonical serialization.
pub fn schema_hash(schema: &Schema) -> u64 {
    fnv1a64(serialize_schema(schema).as_bytes())
}
