//! JSONL data file ingest into an immutable, offset-indexed row store.
//!
//! Each line of the data file is one JSON record. Top-level keys are payload
//! names and the data fields payloads read, plus `supervision` (per task, a
//! list of `{"source", "value"}` votes) and `tags`. Records that carry none
//! of `train`/`dev`/`test` get one assigned from a hash of their canonical
//! bytes (80/10/10 train/dev/test).
//!
//! Store file layout (little-endian):
//!
//! ```text
//! "OVRS" | version u32 = 1 | schema_hash u64 | count u64
//! offsets: (count + 1) x u64 absolute file offsets
//! rows: u32 length + canonical row bytes, one per row
//! ```
//!
//! The tag index lives next to it in `<store>.tags.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Read};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::hash::{fnv1a64, hex64};
use crate::schema::{schema_hash, PayloadKind, Schema, TaskKind, SPLIT_TAGS};

pub const STORE_MAGIC: &[u8; 4] = b"OVRS";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub id: String,
    /// Half-open token range `[start, end)` into the referenced sequence.
    pub span: Option<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldValue {
    Null,
    Text(String),
    Tokens(Vec<String>),
    Elements(Vec<Element>),
}

/// A vote with labels resolved to indices in the task's label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VoteValue {
    Class(u32),
    /// Per-token classes; `None` abstains on that token.
    TokenClasses(Vec<Option<u32>>),
    /// Sorted set of bit indices that are on.
    Bits(Vec<u32>),
    TokenBits(Vec<Option<Vec<u32>>>),
    Candidate(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledVote {
    pub source: String,
    pub value: VoteValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Record {
    /// Present keys only; an explicit JSON null is kept as [`FieldValue::Null`].
    pub fields: BTreeMap<String, FieldValue>,
    pub supervision: BTreeMap<String, Vec<LabeledVote>>,
    pub tags: Vec<String>,
}

impl Record {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    pub fn tokens(&self, key: &str) -> &[String] {
        match self.fields.get(key) {
            Some(FieldValue::Tokens(t)) => t,
            _ => &[],
        }
    }

    pub fn elements(&self, key: &str) -> &[Element] {
        match self.fields.get(key) {
            Some(FieldValue::Elements(e)) => e,
            _ => &[],
        }
    }

    /// Number of tokens in a sequence payload.
    pub fn sequence_len(&self, schema: &Schema, payload: &str) -> usize {
        schema
            .payload(payload)
            .and_then(|p| schema.length_key(p))
            .map(|k| self.tokens(k).len())
            .unwrap_or(0)
    }

    /// Candidates of a set payload.
    pub fn candidates<'a>(&'a self, schema: &Schema, set: &str) -> &'a [Element] {
        match schema.payload(set) {
            Some(p) => self.elements(schema.elements_key(p)),
            None => &[],
        }
    }

    pub fn split(&self) -> Option<&str> {
        self.tags.iter().map(String::as_str).find(|t| SPLIT_TAGS.contains(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordErrorKind {
    Json,
    NotObject,
    UnknownKey,
    BadValue,
    BadSpan,
    UnknownTask,
    BadLabel,
    LengthMismatch,
    GranularityMismatch,
    DuplicateSource,
    MultipleSplits,
}

impl fmt::Display for RecordErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}: {message}")]
pub struct RecordError {
    pub line: usize,
    pub kind: RecordErrorKind,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{rejected} of {total} lines rejected; this does not look like a data file for this schema")]
    FatalFormat { rejected: usize, total: usize, errors: Vec<RecordError> },
    #[error("row {id} out of range (store has {count} rows)")]
    OutOfRange { id: usize, count: usize },
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("store was built for schema {found}, expected {expected}")]
    SchemaMismatch { expected: String, found: String },
}

impl From<DecodeError> for StoreError {
    fn from(e: DecodeError) -> Self {
        StoreError::Corrupt(e.to_string())
    }
}

/// Immutable row store. Reads are safe from any number of threads.
pub struct RowStore {
    bytes: Vec<u8>,
    count: usize,
    schema_hash: u64,
    tag_index: BTreeMap<String, Vec<u32>>,
    accessed: Vec<AtomicBool>,
}

impl fmt::Debug for RowStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RowStore")
            .field("count", &self.count)
            .field("schema_hash", &hex64(self.schema_hash))
            .field("tags", &self.tag_index.keys().collect::<Vec<_>>())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct TagSidecar {
    schema_hash: String,
    count: usize,
    tags: BTreeMap<String, Vec<u32>>,
}

impl RowStore {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn schema_hash(&self) -> u64 {
        self.schema_hash
    }

    /// Digest of the store file bytes.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.tag_index.keys().map(String::as_str)
    }

    pub fn tag_index(&self) -> &BTreeMap<String, Vec<u32>> {
        &self.tag_index
    }

    fn row_bytes(&self, id: usize) -> &[u8] {
        let off = |i: usize| {
            let at = HEADER_LEN + 8 * i;
            u64::from_le_bytes(self.bytes[at..at + 8].try_into().unwrap()) as usize
        };
        let start = off(id) + 4;
        let end = off(id + 1);
        &self.bytes[start..end]
    }

    /// Decode row `id`, recording the access.
    pub fn get(&self, id: usize) -> Result<Record, StoreError> {
        if id >= self.count {
            return Err(StoreError::OutOfRange { id, count: self.count });
        }
        self.accessed[id].store(true, Ordering::Relaxed);
        Ok(decode_record(self.row_bytes(id))?)
    }

    /// Sorted row ids carrying `tag`; unknown tags yield an empty list.
    pub fn rows_with_tag(&self, tag: &str) -> Vec<usize> {
        self.tag_index.get(tag).map(|v| v.iter().map(|&i| i as usize).collect()).unwrap_or_default()
    }

    /// Row ids read through [`RowStore::get`] since the last reset.
    pub fn accessed_rows(&self) -> Vec<usize> {
        self.accessed.iter().enumerate().filter(|(_, a)| a.load(Ordering::Relaxed)).map(|(i, _)| i).collect()
    }

    pub fn reset_access_log(&self) {
        for a in &self.accessed {
            a.store(false, Ordering::Relaxed);
        }
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".tags.json");
        PathBuf::from(s)
    }

    pub fn tags_json(&self) -> String {
        let sidecar = TagSidecar { schema_hash: hex64(self.schema_hash), count: self.count, tags: self.tag_index.clone() };
        let mut s = serde_json::to_string_pretty(&sidecar).expect("tag index serializes");
        s.push('\n');
        s
    }

    /// Write the store file and its tag sidecar.
    pub fn write(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, &self.bytes)?;
        std::fs::write(Self::sidecar_path(path), self.tags_json())?;
        Ok(())
    }

    /// Load a store file and its sidecar, checking structure.
    pub fn open(path: &Path) -> Result<RowStore, StoreError> {
        let bytes = std::fs::read(path)?;
        let store = Self::from_bytes(bytes)?;
        let sidecar: TagSidecar = serde_json::from_slice(&std::fs::read(Self::sidecar_path(path))?)
            .map_err(|e| StoreError::Corrupt(format!("tag sidecar: {e}")))?;
        if sidecar.tags != store.tag_index || sidecar.count != store.count {
            return Err(StoreError::Corrupt("tag sidecar does not match store rows".into()));
        }
        Ok(store)
    }

    /// Rebuild a store from raw file bytes; the tag index is recomputed.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<RowStore, StoreError> {
        let mut r = Reader::new(&bytes);
        if r.take(4, "magic")? != STORE_MAGIC {
            return Err(StoreError::Corrupt("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != STORE_VERSION {
            return Err(StoreError::Corrupt(format!("unsupported version {version}")));
        }
        let schema_hash = r.u64("schema hash")?;
        let count = r.u64("row count")? as usize;
        let mut offsets = Vec::with_capacity(count.min(1 << 24) + 1);
        for _ in 0..=count {
            offsets.push(r.u64("offset table")? as usize);
        }
        if offsets[0] != r.pos || *offsets.last().unwrap() != bytes.len() {
            return Err(StoreError::Corrupt("offset table does not cover the file".into()));
        }
        let mut tag_index: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for i in 0..count {
            let mut rr = Reader::at(&bytes, offsets[i]);
            let body = rr.bytes("row")?;
            if rr.pos != offsets[i + 1] {
                return Err(StoreError::Corrupt(format!("row {i} length disagrees with offsets")));
            }
            let rec = decode_record(body)?;
            for t in rec.tags {
                tag_index.entry(t).or_default().push(i as u32);
            }
        }
        let accessed = (0..count).map(|_| AtomicBool::new(false)).collect();
        Ok(RowStore { bytes, count, schema_hash, tag_index, accessed })
    }

    /// Fail unless the store was ingested with `schema`.
    pub fn check_schema(&self, schema: &Schema) -> Result<(), StoreError> {
        let expected = schema_hash(schema);
        if expected != self.schema_hash {
            return Err(StoreError::SchemaMismatch { expected: hex64(expected), found: hex64(self.schema_hash) });
        }
        Ok(())
    }
}

/// Outcome of [`ingest`]: the store plus the lines that were skipped.
#[derive(Debug)]
pub struct Ingested {
    pub store: RowStore,
    pub errors: Vec<RecordError>,
}

/// Validate and ingest a JSONL byte stream.
pub fn ingest<R: Read>(schema: &Schema, input: R) -> Result<Ingested, StoreError> {
    let reader = std::io::BufReader::new(input);
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut total = 0usize;
    for (i, line) in reader.split(b'\n').enumerate() {
        let line = line?;
        let line_no = i + 1;
        let text = match std::str::from_utf8(&line) {
            Ok(t) => t.trim_end_matches('\r'),
            Err(_) => {
                total += 1;
                errors.push(RecordError { line: line_no, kind: RecordErrorKind::Json, message: "invalid UTF-8".into() });
                continue;
            }
        };
        if text.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_record(schema, text) {
            Ok(r) => records.push(r),
            Err((kind, message)) => errors.push(RecordError { line: line_no, kind, message }),
        }
    }
    if total > 0 && errors.len() * 2 > total {
        return Err(StoreError::FatalFormat { rejected: errors.len(), total, errors });
    }
    let store = build_store(schema_hash(schema), &records);
    Ok(Ingested { store, errors })
}

/// Assemble store bytes from already-validated records.
pub fn build_store(schema_hash: u64, records: &[Record]) -> RowStore {
    let bodies: Vec<Vec<u8>> = records.iter().map(encode_record).collect();
    let mut w = Writer::new();
    w.raw(STORE_MAGIC);
    w.u32(STORE_VERSION);
    w.u64(schema_hash);
    w.u64(records.len() as u64);
    let mut off = (HEADER_LEN + 8 * (records.len() + 1)) as u64;
    w.u64(off);
    for b in &bodies {
        off += 4 + b.len() as u64;
        w.u64(off);
    }
    for b in &bodies {
        w.bytes(b);
    }
    let mut tag_index: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        for t in &r.tags {
            tag_index.entry(t.clone()).or_default().push(i as u32);
        }
    }
    let accessed = (0..records.len()).map(|_| AtomicBool::new(false)).collect();
    RowStore { bytes: w.buf, count: records.len(), schema_hash, tag_index, accessed }
}

pub type ParseErr = (RecordErrorKind, String);

fn err<T>(kind: RecordErrorKind, message: impl Into<String>) -> Result<T, ParseErr> {
    Err((kind, message.into()))
}

/// Parse one JSONL line against the schema, assigning a default split.
pub fn parse_record(schema: &Schema, text: &str) -> Result<Record, ParseErr> {
    use RecordErrorKind::*;
    let value: Value = serde_json::from_str(text).map_err(|e| (Json, e.to_string()))?;
    let Value::Object(obj) = value else {
        return err(NotObject, "a record must be a JSON object");
    };
    let keys = schema.record_keys();
    let mut rec = Record::default();

    for (key, v) in &obj {
        if key == "supervision" || key == "tags" {
            continue;
        }
        let Some(&kind) = keys.get(key.as_str()) else {
            return err(UnknownKey, format!("unknown key `{key}`"));
        };
        let span_key = schema
            .payloads
            .iter()
            .filter(|p| p.kind == PayloadKind::Set && schema.elements_key(p) == key)
            .find_map(|p| schema.span_ref(p).map(|(_, sf)| sf))
            .unwrap_or("span");
        rec.fields.insert(key.clone(), parse_field(key, kind, span_key, v)?);
    }

    // Spans must fall inside the referenced sequence.
    for p in schema.payloads.iter().filter(|p| p.kind == PayloadKind::Set) {
        let Some((seq, _)) = schema.span_ref(p) else { continue };
        let len = rec.sequence_len(schema, seq);
        for (j, e) in rec.elements(schema.elements_key(p)).iter().enumerate() {
            if let Some((s, t)) = e.span {
                if !(s < t && (t as usize) <= len) {
                    return err(BadSpan, format!("`{}`[{j}] span [{s},{t}) outside sequence of length {len}", p.name));
                }
            }
        }
    }
    // Multiple inputs of one sequence payload have to agree on length.
    for p in schema.payloads.iter().filter(|p| p.kind == PayloadKind::Sequence) {
        let lens: BTreeSet<usize> = p.field_inputs().map(|f| rec.tokens(f).len()).collect();
        let from_refs = p.payload_refs().map(|r| rec.sequence_len(schema, r));
        let lens: BTreeSet<usize> = lens.into_iter().chain(from_refs).collect();
        if lens.len() > 1 {
            return err(LengthMismatch, format!("inputs of sequence `{}` have lengths {lens:?}", p.name));
        }
    }

    if let Some(sup) = obj.get("supervision") {
        let Value::Object(sup) = sup else {
            return err(BadValue, "`supervision` must be an object");
        };
        for (task_name, votes) in sup {
            let Some(task) = schema.task(task_name) else {
                return err(UnknownTask, format!("unknown task `{task_name}`"));
            };
            let Value::Array(votes) = votes else {
                return err(BadValue, format!("supervision for `{task_name}` must be a list"));
            };
            let mut parsed = Vec::with_capacity(votes.len());
            let mut sources = BTreeSet::new();
            for vote in votes {
                let Some(vobj) = vote.as_object() else {
                    return err(BadValue, format!("vote for `{task_name}` must be an object"));
                };
                let Some(source) = vobj.get("source").and_then(Value::as_str) else {
                    return err(BadValue, format!("vote for `{task_name}` lacks a string `source`"));
                };
                if vobj.keys().any(|k| k != "source" && k != "value") {
                    return err(BadValue, format!("vote for `{task_name}` has keys besides source/value"));
                }
                if !sources.insert(source.to_string()) {
                    return err(DuplicateSource, format!("source `{source}` votes twice on `{task_name}`"));
                }
                let raw = vobj.get("value").unwrap_or(&Value::Null);
                let value = parse_vote(schema, &rec, task, raw)?;
                parsed.push(LabeledVote { source: source.to_string(), value });
            }
            rec.supervision.insert(task_name.clone(), parsed);
        }
    }

    if let Some(tags) = obj.get("tags") {
        let Value::Array(tags) = tags else {
            return err(BadValue, "`tags` must be a list of strings");
        };
        for t in tags {
            let Some(t) = t.as_str() else {
                return err(BadValue, "`tags` must be a list of strings");
            };
            if !rec.has_tag(t) {
                rec.tags.push(t.to_string());
            }
        }
    }
    let splits = rec.tags.iter().filter(|t| SPLIT_TAGS.contains(&t.as_str())).count();
    if splits > 1 {
        return err(MultipleSplits, "a record may carry only one of train/dev/test");
    }
    if splits == 0 {
        let tag = default_split(&encode_record(&rec));
        rec.tags.push(tag.to_string());
    }
    Ok(rec)
}

/// Deterministic 80/10/10 train/dev/test assignment.
pub fn default_split(canonical: &[u8]) -> &'static str {
    match fnv1a64(canonical) % 10 {
        0..=7 => "train",
        8 => "dev",
        _ => "test",
    }
}

fn parse_field(key: &str, kind: PayloadKind, span_key: &str, v: &Value) -> Result<FieldValue, ParseErr> {
    use RecordErrorKind::BadValue;
    if v.is_null() {
        return Ok(FieldValue::Null);
    }
    match kind {
        PayloadKind::Singleton => match v.as_str() {
            Some(s) => Ok(FieldValue::Text(s.to_string())),
            None => err(BadValue, format!("`{key}` must be a string or null")),
        },
        PayloadKind::Sequence => {
            let Some(items) = v.as_array() else {
                return err(BadValue, format!("`{key}` must be a list of strings"));
            };
            let mut toks = Vec::with_capacity(items.len());
            for it in items {
                match it.as_str() {
                    Some(s) => toks.push(s.to_string()),
                    None => return err(BadValue, format!("`{key}` must be a list of strings")),
                }
            }
            Ok(FieldValue::Tokens(toks))
        }
        PayloadKind::Set => {
            let Some(items) = v.as_array() else {
                return err(BadValue, format!("`{key}` must be a list of elements"));
            };
            let mut out = Vec::with_capacity(items.len());
            for (j, it) in items.iter().enumerate() {
                let Some(o) = it.as_object() else {
                    return err(BadValue, format!("`{key}`[{j}] must be an object"));
                };
                let Some(id) = o.get("id").and_then(Value::as_str) else {
                    return err(BadValue, format!("`{key}`[{j}] lacks a string `id`"));
                };
                if o.keys().any(|k| k != "id" && k != span_key) {
                    return err(BadValue, format!("`{key}`[{j}] has keys besides id/{span_key}"));
                }
                let span = match o.get(span_key) {
                    None | Some(Value::Null) => None,
                    Some(Value::Array(a)) if a.len() == 2 => {
                        let s = a[0].as_u64();
                        let t = a[1].as_u64();
                        match (s, t) {
                            (Some(s), Some(t)) if s < u32::MAX as u64 && t <= u32::MAX as u64 => Some((s as u32, t as u32)),
                            _ => return err(RecordErrorKind::BadSpan, format!("`{key}`[{j}] span must be two token indices")),
                        }
                    }
                    Some(_) => return err(RecordErrorKind::BadSpan, format!("`{key}`[{j}] span must be [start, end]")),
                };
                out.push(Element { id: id.to_string(), span });
            }
            Ok(FieldValue::Elements(out))
        }
    }
}

fn label_index(labels: &[String], v: &Value, task: &str) -> Result<u32, ParseErr> {
    match v.as_str().and_then(|s| labels.iter().position(|l| l == s)) {
        Some(i) => Ok(i as u32),
        None => err(RecordErrorKind::BadLabel, format!("`{v}` is not a label of `{task}`")),
    }
}

fn bit_set(bits: &[String], v: &Value, task: &str) -> Result<Vec<u32>, ParseErr> {
    let Some(items) = v.as_array() else {
        return err(RecordErrorKind::GranularityMismatch, format!("`{task}` expects a list of bit names"));
    };
    let mut out = BTreeSet::new();
    for it in items {
        out.insert(label_index(bits, it, task)?);
    }
    Ok(out.into_iter().collect())
}

fn parse_vote(schema: &Schema, rec: &Record, task: &crate::schema::TaskDecl, v: &Value) -> Result<VoteValue, ParseErr> {
    use RecordErrorKind::*;
    let payload = schema.payload(&task.payload).expect("validated schema");
    let per_token = payload.kind == PayloadKind::Sequence;
    let token_list = |v: &Value| -> Result<Vec<Value>, ParseErr> {
        let Some(items) = v.as_array() else {
            return err(GranularityMismatch, format!("`{}` expects one vote per token", task.name));
        };
        let len = rec.sequence_len(schema, &task.payload);
        if items.len() != len {
            return err(LengthMismatch, format!("`{}` votes cover {} tokens, sequence has {len}", task.name, items.len()));
        }
        Ok(items.clone())
    };
    match (&task.kind, per_token) {
        (TaskKind::Multiclass(labels), false) => {
            if v.is_array() {
                return err(GranularityMismatch, format!("`{}` expects a single label", task.name));
            }
            Ok(VoteValue::Class(label_index(labels, v, &task.name)?))
        }
        (TaskKind::Multiclass(labels), true) => {
            let items = token_list(v)?;
            let mut out = Vec::with_capacity(items.len());
            for it in &items {
                out.push(if it.is_null() { None } else { Some(label_index(labels, it, &task.name)?) });
            }
            Ok(VoteValue::TokenClasses(out))
        }
        (TaskKind::Bitvector(bits), false) => Ok(VoteValue::Bits(bit_set(bits, v, &task.name)?)),
        (TaskKind::Bitvector(bits), true) => {
            let items = token_list(v)?;
            let mut out = Vec::with_capacity(items.len());
            for it in &items {
                out.push(if it.is_null() { None } else { Some(bit_set(bits, it, &task.name)?) });
            }
            Ok(VoteValue::TokenBits(out))
        }
        (TaskKind::Select(set), _) => {
            let cands = rec.candidates(schema, set);
            let idx = match v {
                Value::Number(n) => n.as_u64().filter(|&i| (i as usize) < cands.len()),
                Value::String(s) => cands.iter().position(|c| &c.id == s).map(|i| i as u64),
                _ => return err(GranularityMismatch, format!("`{}` expects a candidate index or id", task.name)),
            };
            match idx {
                Some(i) => Ok(VoteValue::Candidate(i as u32)),
                None => err(BadValue, format!("`{v}` is not a candidate of `{set}`")),
            }
        }
    }
}

// ---- canonical row encoding ---------------------------------------------

fn encode_opt_list(w: &mut Writer, v: &[u32]) {
    w.u32(v.len() as u32);
    for &x in v {
        w.u32(x);
    }
}

/// Canonical bytes of a record: fields in key order, supervision in task-name
/// order, votes and tags in input order.
pub fn encode_record(rec: &Record) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(rec.fields.len() as u32);
    for (k, v) in &rec.fields {
        w.str(k);
        match v {
            FieldValue::Null => w.u8(0),
            FieldValue::Text(s) => {
                w.u8(1);
                w.str(s);
            }
            FieldValue::Tokens(t) => {
                w.u8(2);
                w.u32(t.len() as u32);
                for s in t {
                    w.str(s);
                }
            }
            FieldValue::Elements(es) => {
                w.u8(3);
                w.u32(es.len() as u32);
                for e in es {
                    w.str(&e.id);
                    match e.span {
                        None => w.u8(0),
                        Some((s, t)) => {
                            w.u8(1);
                            w.u32(s);
                            w.u32(t);
                        }
                    }
                }
            }
        }
    }
    w.u32(rec.supervision.len() as u32);
    for (task, votes) in &rec.supervision {
        w.str(task);
        w.u32(votes.len() as u32);
        for v in votes {
            w.str(&v.source);
            match &v.value {
                VoteValue::Class(c) => {
                    w.u8(0);
                    w.u32(*c);
                }
                VoteValue::TokenClasses(cs) => {
                    w.u8(1);
                    w.u32(cs.len() as u32);
                    for c in cs {
                        match c {
                            None => w.u8(0),
                            Some(c) => {
                                w.u8(1);
                                w.u32(*c);
                            }
                        }
                    }
                }
                VoteValue::Bits(b) => {
                    w.u8(2);
                    encode_opt_list(&mut w, b);
                }
                VoteValue::TokenBits(bs) => {
                    w.u8(3);
                    w.u32(bs.len() as u32);
                    for b in bs {
                        match b {
                            None => w.u8(0),
                            Some(b) => {
                                w.u8(1);
                                encode_opt_list(&mut w, b);
                            }
                        }
                    }
                }
                VoteValue::Candidate(c) => {
                    w.u8(4);
                    w.u32(*c);
                }
            }
        }
    }
    w.u32(rec.tags.len() as u32);
    for t in &rec.tags {
        w.str(t);
    }
    w.buf
}

fn decode_list(r: &mut Reader<'_>) -> Result<Vec<u32>, DecodeError> {
    let n = r.u32("list length")? as usize;
    (0..n).map(|_| r.u32("list item")).collect()
}

pub fn decode_record(bytes: &[u8]) -> Result<Record, DecodeError> {
    let mut r = Reader::new(bytes);
    let mut rec = Record::default();
    let nf = r.u32("field count")?;
    for _ in 0..nf {
        let k = r.str("field key")?;
        let v = match r.u8("field tag")? {
            0 => FieldValue::Null,
            1 => FieldValue::Text(r.str("text")?),
            2 => {
                let n = r.u32("token count")?;
                FieldValue::Tokens((0..n).map(|_| r.str("token")).collect::<Result<_, _>>()?)
            }
            3 => {
                let n = r.u32("element count")?;
                let mut es = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let id = r.str("element id")?;
                    let span = match r.u8("span tag")? {
                        0 => None,
                        _ => Some((r.u32("span start")?, r.u32("span end")?)),
                    };
                    es.push(Element { id, span });
                }
                FieldValue::Elements(es)
            }
            _ => return Err(DecodeError { at: r.pos, what: "field tag" }),
        };
        rec.fields.insert(k, v);
    }
    let ns = r.u32("task count")?;
    for _ in 0..ns {
        let task = r.str("task")?;
        let nv = r.u32("vote count")?;
        let mut votes = Vec::with_capacity(nv as usize);
        for _ in 0..nv {
            let source = r.str("source")?;
            let value = match r.u8("vote tag")? {
                0 => VoteValue::Class(r.u32("class")?),
                1 => {
                    let n = r.u32("token votes")?;
                    let mut cs = Vec::with_capacity(n as usize);
                    for _ in 0..n {
                        cs.push(match r.u8("token vote tag")? {
                            0 => None,
                            _ => Some(r.u32("class")?),
                        });
                    }
                    VoteValue::TokenClasses(cs)
                }
                2 => VoteValue::Bits(decode_list(&mut r)?),
                3 => {
                    let n = r.u32("token votes")?;
                    let mut bs = Vec::with_capacity(n as usize);
                    for _ in 0..n {
                        bs.push(match r.u8("token vote tag")? {
                            0 => None,
                            _ => Some(decode_list(&mut r)?),
                        });
                    }
                    VoteValue::TokenBits(bs)
                }
                4 => VoteValue::Candidate(r.u32("candidate")?),
                _ => return Err(DecodeError { at: r.pos, what: "vote tag" }),
            };
            votes.push(LabeledVote { source, value });
        }
        rec.supervision.insert(task, votes);
    }
    let nt = r.u32("tag count")?;
    for _ in 0..nt {
        rec.tags.push(r.str("tag")?);
    }
    if !r.is_empty() {
        return Err(DecodeError { at: r.pos, what: "trailing bytes" });
    }
    Ok(rec)
}
