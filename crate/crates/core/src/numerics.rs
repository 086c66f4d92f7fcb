//! Dense f64 evaluation of the model IR, reverse-mode gradients, finite
//! difference checking, and the parameter store.
//!
//! Activations are `[rows, cols]` row-major matrices. All reductions run in a
//! fixed left-to-right order so results are bit-reproducible.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::compiler::{Extent, Feed, Gate, Init, ModelIr, NodeId, Op};
use crate::hash::fnv1a64;
use crate::rowstore::{FieldValue, Record};

pub const PARAMS_MAGIC: &[u8; 4] = b"OVPM";
pub const PARAMS_VERSION: u32 = 1;

/// Smoothing added to every slice-attention score before normalizing.
pub const ATTENTION_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape error at node `{node}`: {message}")]
    Shape { node: String, message: String },
    #[error("non-finite value produced at `{0}`")]
    NonFinite(String),
    #[error("missing payload field `{0}`")]
    MissingPayload(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(rows * cols, data.len());
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn row_vector(data: Vec<f64>) -> Tensor {
        Tensor { shape: vec![1, data.len()], data }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// ---- parameters ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub seed: u64,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn matches(&self, ir: &ModelIr) -> bool {
        self.len() == ir.params.len()
            && ir.params.iter().zip(&self.names).zip(&self.tensors).all(|((s, n), t)| &s.name == n && s.shape == t.shape)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(PARAMS_MAGIC);
        w.u32(PARAMS_VERSION);
        w.u64(self.seed);
        w.u32(self.tensors.len() as u32);
        let mut offset = 0u64;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.str(name);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.u64(offset);
            offset += 8 * t.data.len() as u64;
        }
        for t in &self.tensors {
            for &v in &t.data {
                w.f64(v);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != PARAMS_MAGIC {
            return Err(DecodeError { at: 0, what: "magic" });
        }
        if r.u32("version")? != PARAMS_VERSION {
            return Err(DecodeError { at: 4, what: "version" });
        }
        let seed = r.u64("seed")?;
        let n = r.u32("param count")? as usize;
        let mut table = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str("param name")?;
            let nd = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(nd.min(8));
            for _ in 0..nd {
                shape.push(r.u64("dim")? as usize);
            }
            let off = r.u64("offset")? as usize;
            table.push((name, shape, off));
        }
        let base = r.pos;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, off) in table {
            let numel: usize = shape.iter().product();
            let mut rd = Reader::at(bytes, base + off);
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(rd.f64("param data")?);
            }
            names.push(name);
            tensors.push(Tensor { shape, data });
        }
        Ok(ParamStore { names, tensors, seed })
    }
}

/// Deterministic initialization: one ChaCha stream per parameter name.
pub fn init_params(ir: &ModelIr, seed: u64) -> ParamStore {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for spec in &ir.params {
        let mut t = Tensor::zeros(spec.shape.clone());
        if let Init::Uniform { bound } = spec.init {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(fnv1a64(spec.name.as_bytes()));
            for v in &mut t.data {
                *v = (2.0 * rng.gen::<f64>() - 1.0) * bound;
            }
        }
        names.push(spec.name.clone());
        tensors.push(t);
    }
    ParamStore { names, tensors, seed }
}

// ---- encoded inputs ------------------------------------------------------

pub type Buckets = [u32; 2];

/// Two hash probes per string: the low and high halves of its FNV-1a hash.
pub fn hash_buckets(s: &str, buckets: usize) -> Buckets {
    let h = fnv1a64(s.as_bytes());
    let b = buckets as u64;
    [((h & 0xffff_ffff) % b) as u32, ((h >> 32) % b) as u32]
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputValue {
    /// `None` for a null singleton.
    Text(Option<Buckets>),
    Tokens(Vec<Buckets>),
    Elements(Vec<(Buckets, Option<(usize, usize)>)>),
}

impl InputValue {
    fn len(&self) -> usize {
        match self {
            InputValue::Text(_) => 1,
            InputValue::Tokens(t) => t.len(),
            InputValue::Elements(e) => e.len(),
        }
    }
}

/// One record's inputs, hashed and ready for evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Example {
    pub inputs: BTreeMap<String, InputValue>,
}

#[derive(Clone, Copy, PartialEq)]
enum KeyUse {
    Text,
    Tokens,
    Elements,
}

fn key_uses(ir: &ModelIr) -> BTreeMap<&str, KeyUse> {
    let mut m = BTreeMap::new();
    for n in &ir.nodes {
        match &n.op {
            Op::EmbedLookup { feed, .. } => {
                let u = match feed {
                    Feed::Text(_) => KeyUse::Text,
                    Feed::Tokens(_) => KeyUse::Tokens,
                    Feed::ElementIds(_) => KeyUse::Elements,
                };
                m.insert(feed.key(), u);
            }
            Op::SpanPool { elements, .. } => {
                m.insert(elements.as_str(), KeyUse::Elements);
            }
            _ => {}
        }
    }
    m
}

/// Hash a record's payload fields. With `strict`, absent keys are an error
/// (null is accepted); otherwise absent keys are treated as null.
pub fn encode_example(ir: &ModelIr, record: &Record, strict: bool) -> Result<Example, NumericError> {
    let mut ex = Example::default();
    let b = ir.buckets;
    for (key, u) in key_uses(ir) {
        let v = match record.fields.get(key) {
            None if strict => return Err(NumericError::MissingPayload(key.to_string())),
            v => v.unwrap_or(&FieldValue::Null),
        };
        let iv = match (u, v) {
            (KeyUse::Text, FieldValue::Text(s)) => InputValue::Text(Some(hash_buckets(s, b))),
            (KeyUse::Text, _) => InputValue::Text(None),
            (KeyUse::Tokens, FieldValue::Tokens(t)) => InputValue::Tokens(t.iter().map(|s| hash_buckets(s, b)).collect()),
            (KeyUse::Tokens, _) => InputValue::Tokens(vec![]),
            (KeyUse::Elements, FieldValue::Elements(e)) => InputValue::Elements(
                e.iter().map(|el| (hash_buckets(&el.id, b), el.span.map(|(s, e)| (s as usize, e as usize)))).collect(),
            ),
            (KeyUse::Elements, _) => InputValue::Elements(vec![]),
        };
        ex.inputs.insert(key.to_string(), iv);
    }
    Ok(ex)
}

// ---- forward -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Forward {
    pub values: Vec<Tensor>,
    /// Hidden-state history of recurrent nodes.
    aux: Vec<Option<Tensor>>,
}

impl Forward {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }
}

fn extent_size(e: &Extent, ex: &Example) -> Option<usize> {
    match e {
        Extent::Fixed(n) => Some(*n),
        Extent::Tokens(k) | Extent::Elements(k) => ex.inputs.get(k).map(InputValue::len),
    }
}

fn matmul(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (r, k) = (x.rows(), x.cols());
    let n = w.data.len() / k.max(1);
    let mut out = Tensor::zeros(vec![r, n]);
    for i in 0..r {
        let o = out.row_mut(i);
        if let Some(b) = bias {
            o.copy_from_slice(&b.data);
        }
        for (j, &xv) in x.row(i).iter().enumerate() {
            if xv != 0.0 {
                let wr = &w.data[j * n..(j + 1) * n];
                for (ov, wv) in o.iter_mut().zip(wr) {
                    *ov += xv * wv;
                }
            }
        }
    }
    out
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_row(l: &[f64], out: &mut [f64]) {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(l) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn softmax(l: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; l.len()];
    if !l.is_empty() {
        softmax_row(l, &mut out);
    }
    out
}

fn log_sum_exp(l: &[f64]) -> f64 {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Confidence `1 - H/H_max` of one row of expert logits, and its gradient
/// with respect to those logits.
fn confidence(logits: &[f64], gate: Gate) -> (f64, Vec<f64>) {
    let k = logits.len();
    match gate {
        Gate::Softmax => {
            if k < 2 {
                return (1.0, vec![0.0; k]);
            }
            let lse = log_sum_exp(logits);
            let logp: Vec<f64> = logits.iter().map(|v| v - lse).collect();
            let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
            let h: f64 = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
            let hmax = (k as f64).ln();
            // dH/dl_j = -p_j (log p_j + H)
            let grad = p.iter().zip(&logp).map(|(pj, lj)| pj * (lj + h) / hmax).collect();
            (1.0 - h / hmax, grad)
        }
        Gate::Sigmoid => {
            if k == 0 {
                return (1.0, vec![]);
            }
            let hmax = std::f64::consts::LN_2;
            let mut h = 0.0;
            let mut grad = Vec::with_capacity(k);
            for &l in logits {
                let p = stable_sigmoid(l);
                // -p log p - (1-p) log(1-p), with log p = -softplus(-l)
                h += p * softplus(-l) + (1.0 - p) * softplus(l);
                // dh/dl = -l p (1-p)
                grad.push(l * p * (1.0 - p) / (k as f64 * hmax));
            }
            h /= k as f64;
            (1.0 - h / hmax, grad)
        }
    }
}

struct Combine {
    /// Attention weights per expert (base first), per row.
    attn: Vec<Vec<f64>>,
    scores: Vec<Vec<f64>>,
    conf: Vec<Vec<f64>>,
    conf_grad: Vec<Vec<Vec<f64>>>,
}

fn combine_rows(
    base_logits: &Tensor,
    indicators: &[&Tensor],
    expert_logits: &[&Tensor],
    gate: Gate,
) -> Combine {
    let rows = base_logits.rows();
    let mut c = Combine { attn: vec![], scores: vec![], conf: vec![], conf_grad: vec![] };
    for r in 0..rows {
        let mut scores = Vec::with_capacity(indicators.len() + 1);
        let mut confs = Vec::new();
        let mut grads = Vec::new();
        let (cb, gb) = confidence(base_logits.row(r), gate);
        scores.push(cb);
        confs.push(cb);
        grads.push(gb);
        for (ind, el) in indicators.iter().zip(expert_logits) {
            let (ce, ge) = confidence(el.row(r), gate);
            scores.push(ind.row(r)[0] * ce);
            confs.push(ce);
            grads.push(ge);
        }
        let z: f64 = scores.iter().map(|s| s + ATTENTION_EPSILON).sum();
        c.attn.push(scores.iter().map(|s| (s + ATTENTION_EPSILON) / z).collect());
        c.scores.push(scores);
        c.conf.push(confs);
        c.conf_grad.push(grads);
    }
    c
}

/// Attention weights over the base expert and each slice expert for one
/// position: indicator probability times normalized-entropy confidence,
/// normalized to sum to one. The base expert's indicator is 1.
pub fn slice_attention(base_logits: &[f64], experts: &[(f64, &[f64])], gate: Gate) -> Vec<f64> {
    let b = Tensor::row_vector(base_logits.to_vec());
    let inds: Vec<Tensor> = experts.iter().map(|(p, _)| Tensor::row_vector(vec![*p])).collect();
    let logits: Vec<Tensor> = experts.iter().map(|(_, l)| Tensor::row_vector(l.to_vec())).collect();
    let c = combine_rows(&b, &inds.iter().collect::<Vec<_>>(), &logits.iter().collect::<Vec<_>>(), gate);
    c.attn.into_iter().next().unwrap_or_default()
}

fn span_rows(span: Option<(usize, usize)>, m: usize) -> std::ops::Range<usize> {
    match span {
        Some((s, e)) => s.min(m)..e.min(m).max(s.min(m)),
        None => 0..0,
    }
}

pub fn forward(ir: &ModelIr, params: &ParamStore, ex: &Example) -> Result<Forward, NumericError> {
    let mut values: Vec<Tensor> = Vec::with_capacity(ir.nodes.len());
    let mut aux: Vec<Option<Tensor>> = Vec::with_capacity(ir.nodes.len());
    let p = |i: usize| &params.tensors[i];
    for node in &ir.nodes {
        let v = |i: NodeId| &values[i];
        let mut a = None;
        let out = match &node.op {
            Op::EmbedLookup { feed, table } => {
                let t = p(*table);
                let d = t.shape[1];
                let lookup = |out: &mut [f64], b: &Buckets| {
                    for &bk in b {
                        for (o, w) in out.iter_mut().zip(&t.data[bk as usize * d..(bk as usize + 1) * d]) {
                            *o += 0.5 * w;
                        }
                    }
                };
                let input = ex
                    .inputs
                    .get(feed.key())
                    .ok_or_else(|| NumericError::MissingPayload(feed.key().to_string()))?;
                match input {
                    InputValue::Text(b) => {
                        let mut o = Tensor::zeros(vec![1, d]);
                        if let Some(b) = b {
                            lookup(&mut o.data, b);
                        }
                        o
                    }
                    InputValue::Tokens(bs) => {
                        let mut o = Tensor::zeros(vec![bs.len(), d]);
                        for (i, b) in bs.iter().enumerate() {
                            lookup(o.row_mut(i), b);
                        }
                        o
                    }
                    InputValue::Elements(es) => {
                        let mut o = Tensor::zeros(vec![es.len(), d]);
                        for (i, (b, _)) in es.iter().enumerate() {
                            lookup(o.row_mut(i), b);
                        }
                        o
                    }
                }
            }
            Op::MeanPool { input } => {
                let x = v(*input);
                let mut o = Tensor::zeros(vec![1, x.cols()]);
                for r in 0..x.rows() {
                    for (ov, xv) in o.data.iter_mut().zip(x.row(r)) {
                        *ov += xv;
                    }
                }
                if x.rows() > 0 {
                    let m = x.rows() as f64;
                    o.data.iter_mut().for_each(|ov| *ov /= m);
                }
                o
            }
            Op::MaxPool { input } => {
                let x = v(*input);
                let mut o = Tensor::zeros(vec![1, x.cols()]);
                if x.rows() > 0 {
                    o.data.copy_from_slice(x.row(0));
                    for r in 1..x.rows() {
                        for (ov, &xv) in o.data.iter_mut().zip(x.row(r)) {
                            if xv > *ov {
                                *ov = xv;
                            }
                        }
                    }
                }
                o
            }
            Op::Conv1D { input, kernel, bias, width } => {
                let (x, k, b) = (v(*input), p(*kernel), p(*bias));
                let (m, din, dout) = (x.rows(), k.shape[1], k.shape[2]);
                let half = (width - 1) / 2;
                let mut o = Tensor::zeros(vec![m, dout]);
                for t in 0..m {
                    let orow = &mut o.data[t * dout..(t + 1) * dout];
                    orow.copy_from_slice(&b.data);
                    for kk in 0..*width {
                        let src = t + kk;
                        if src < half || src - half >= m {
                            continue;
                        }
                        let xr = x.row(src - half);
                        for (i, &xv) in xr.iter().enumerate() {
                            let kr = &k.data[(kk * din + i) * dout..(kk * din + i + 1) * dout];
                            for (ov, kv) in orow.iter_mut().zip(kr) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
                o
            }
            Op::Recurrent { input, w_in, w_rec, bias } => {
                let (x, w, u, b) = (v(*input), p(*w_in), p(*w_rec), p(*bias));
                let h = b.data.len();
                let m = x.rows();
                let xw = matmul(x, w, Some(b));
                let mut hs = Tensor::zeros(vec![m, h]);
                let mut prev = vec![0.0; h];
                for t in 0..m {
                    let mut z = xw.row(t).to_vec();
                    for (j, &pv) in prev.iter().enumerate() {
                        for (zv, uv) in z.iter_mut().zip(&u.data[j * h..(j + 1) * h]) {
                            *zv += pv * uv;
                        }
                    }
                    for zv in z.iter_mut() {
                        *zv = zv.tanh();
                    }
                    hs.row_mut(t).copy_from_slice(&z);
                    prev = z;
                }
                a = Some(hs);
                Tensor::row_vector(prev)
            }
            Op::SpanPool { input, elements } => {
                let x = v(*input);
                let els = match ex.inputs.get(elements) {
                    Some(InputValue::Elements(e)) => e.as_slice(),
                    _ => return Err(NumericError::MissingPayload(elements.clone())),
                };
                let mut o = Tensor::zeros(vec![els.len(), x.cols()]);
                for (i, (_, span)) in els.iter().enumerate() {
                    let rows = span_rows(*span, x.rows());
                    let n = rows.len();
                    let orow = o.row_mut(i);
                    for r in rows {
                        for (ov, xv) in orow.iter_mut().zip(x.row(r)) {
                            *ov += xv;
                        }
                    }
                    if n > 0 {
                        orow.iter_mut().for_each(|ov| *ov /= n as f64);
                    }
                }
                o
            }
            Op::Concat { inputs } => {
                let rows = v(inputs[0]).rows();
                for &i in inputs {
                    if v(i).rows() != rows {
                        return Err(NumericError::Shape {
                            node: node.name.clone(),
                            message: "concatenated inputs disagree on rows".into(),
                        });
                    }
                }
                let width: usize = inputs.iter().map(|&i| v(i).cols()).sum();
                let mut o = Tensor::zeros(vec![rows, width]);
                for r in 0..rows {
                    let mut c = 0;
                    for &i in inputs {
                        let src = v(i).row(r);
                        o.row_mut(r)[c..c + src.len()].copy_from_slice(src);
                        c += src.len();
                    }
                }
                o
            }
            Op::Linear { input, weight, bias } => matmul(v(*input), p(*weight), Some(p(*bias))),
            Op::Relu { input } => {
                let x = v(*input);
                Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&z| z.max(0.0)).collect() }
            }
            Op::Softmax { input } => {
                let x = v(*input);
                let mut o = Tensor::zeros(x.shape.clone());
                if x.cols() > 0 {
                    for r in 0..x.rows() {
                        softmax_row(x.row(r), o.row_mut(r));
                    }
                }
                o
            }
            Op::Sigmoid { input } => {
                let x = v(*input);
                Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&z| stable_sigmoid(z)).collect() }
            }
            Op::CandidateScore { query, candidates, weight } => {
                let qw = matmul(v(*query), p(*weight), None);
                let c = v(*candidates);
                let scores = (0..c.rows()).map(|i| c.row(i).iter().zip(&qw.data).map(|(a, b)| a * b).sum()).collect();
                Tensor::row_vector(scores)
            }
            Op::SliceCombine { base_repr, base_logits, experts, gate } => {
                let inds: Vec<&Tensor> = experts.iter().map(|e| v(e.indicator)).collect();
                let els: Vec<&Tensor> = experts.iter().map(|e| v(e.logits)).collect();
                let c = combine_rows(v(*base_logits), &inds, &els, *gate);
                let br = v(*base_repr);
                let mut o = Tensor::zeros(br.shape.clone());
                for r in 0..br.rows() {
                    let w = &c.attn[r];
                    let orow = o.row_mut(r);
                    for (ov, x) in orow.iter_mut().zip(br.row(r)) {
                        *ov += w[0] * x;
                    }
                    for (e, ex) in experts.iter().enumerate() {
                        for (ov, x) in orow.iter_mut().zip(v(ex.repr).row(r)) {
                            *ov += w[e + 1] * x;
                        }
                    }
                }
                o
            }
        };
        let (Some(rows), Some(cols)) = (extent_size(&node.shape.rows, ex), extent_size(&node.shape.cols, ex)) else {
            return Err(NumericError::Shape { node: node.name.clone(), message: "unresolvable extent".into() });
        };
        if out.shape != [rows, cols] {
            return Err(NumericError::Shape {
                node: node.name.clone(),
                message: format!("runtime shape {:?}, declared {}", out.shape, node.shape),
            });
        }
        if !out.is_finite() {
            return Err(NumericError::NonFinite(node.name.clone()));
        }
        values.push(out);
        aux.push(a);
    }
    Ok(Forward { values, aux })
}

// ---- gradients -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    /// Embedding tables: only touched rows are stored.
    Rows { width: usize, rows: BTreeMap<u32, Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<ParamGrad>);

impl Grads {
    pub fn zeros(ir: &ModelIr) -> Grads {
        let mut sparse = vec![false; ir.params.len()];
        for n in &ir.nodes {
            if let Op::EmbedLookup { table, .. } = n.op {
                sparse[table] = true;
            }
        }
        Grads(
            ir.params
                .iter()
                .zip(sparse)
                .map(|(s, sp)| {
                    if sp {
                        ParamGrad::Rows { width: s.shape[1], rows: BTreeMap::new() }
                    } else {
                        ParamGrad::Dense(vec![0.0; s.numel()])
                    }
                })
                .collect(),
        )
    }

    fn dense(&mut self, i: usize) -> &mut Vec<f64> {
        match &mut self.0[i] {
            ParamGrad::Dense(v) => v,
            ParamGrad::Rows { .. } => unreachable!("dense access to a sparse gradient"),
        }
    }

    fn row(&mut self, i: usize, r: u32) -> &mut Vec<f64> {
        match &mut self.0[i] {
            ParamGrad::Rows { width, rows } => rows.entry(r).or_insert_with(|| vec![0.0; *width]),
            ParamGrad::Dense(_) => unreachable!("row access to a dense gradient"),
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a, b) {
                (ParamGrad::Dense(x), ParamGrad::Dense(y)) => x.iter_mut().zip(y).for_each(|(p, q)| *p += q),
                (ParamGrad::Rows { rows: x, .. }, ParamGrad::Rows { rows: y, .. }) => {
                    for (k, v) in y {
                        match x.get_mut(k) {
                            Some(row) => row.iter_mut().zip(v).for_each(|(p, q)| *p += q),
                            None => {
                                x.insert(*k, v.clone());
                            }
                        }
                    }
                }
                _ => unreachable!("gradient layouts differ"),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            match g {
                ParamGrad::Dense(v) => v.iter_mut().for_each(|x| *x *= s),
                ParamGrad::Rows { rows, .. } => rows.values_mut().flatten().for_each(|x| *x *= s),
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| match g {
            ParamGrad::Dense(v) => v.iter().all(|x| x.is_finite()),
            ParamGrad::Rows { rows, .. } => rows.values().flatten().all(|x| x.is_finite()),
        })
    }

    /// Gradient entry at a flat parameter index.
    pub fn at(&self, param: usize, flat: usize) -> f64 {
        match &self.0[param] {
            ParamGrad::Dense(v) => v[flat],
            ParamGrad::Rows { width, rows } => {
                rows.get(&((flat / width) as u32)).map(|r| r[flat % width]).unwrap_or(0.0)
            }
        }
    }

    pub fn max_abs(&self, param: usize) -> f64 {
        match &self.0[param] {
            ParamGrad::Dense(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            ParamGrad::Rows { rows, .. } => rows.values().flatten().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// `params -= lr * grads`.
    pub fn apply_sgd(&self, params: &mut ParamStore, lr: f64) {
        for (g, t) in self.0.iter().zip(params.tensors.iter_mut()) {
            match g {
                ParamGrad::Dense(v) => t.data.iter_mut().zip(v).for_each(|(p, d)| *p -= lr * d),
                ParamGrad::Rows { width, rows } => {
                    for (r, v) in rows {
                        let base = *r as usize * width;
                        t.data[base..base + width].iter_mut().zip(v).for_each(|(p, d)| *p -= lr * d);
                    }
                }
            }
        }
    }
}

fn add_grad(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// `dX = dY · Wᵀ`, `dW += Xᵀ · dY`.
fn matmul_backward(x: &Tensor, w: &Tensor, dy: &Tensor, dw: &mut [f64], want_dx: bool) -> Option<Tensor> {
    let (r, k, n) = (x.rows(), x.cols(), dy.cols());
    for i in 0..r {
        let gy = dy.row(i);
        for (j, &xv) in x.row(i).iter().enumerate() {
            if xv != 0.0 {
                for (d, g) in dw[j * n..(j + 1) * n].iter_mut().zip(gy) {
                    *d += xv * g;
                }
            }
        }
    }
    want_dx.then(|| {
        let mut dx = Tensor::zeros(vec![r, k]);
        for i in 0..r {
            let gy = dy.row(i);
            for j in 0..k {
                dx.data[i * k + j] = w.data[j * n..(j + 1) * n].iter().zip(gy).map(|(a, b)| a * b).sum();
            }
        }
        dx
    })
}

/// Accumulate into `grads` the gradient of `Σ_seeds <seed, node value>`.
pub fn backward_into(
    ir: &ModelIr,
    params: &ParamStore,
    ex: &Example,
    fw: &Forward,
    seeds: Vec<(NodeId, Tensor)>,
    grads: &mut Grads,
) -> Result<(), NumericError> {
    let mut ng: Vec<Option<Tensor>> = vec![None; ir.nodes.len()];
    for (id, t) in seeds {
        if t.shape != fw.values[id].shape {
            return Err(NumericError::Shape {
                node: ir.nodes[id].name.clone(),
                message: format!("seed shape {:?} for value {:?}", t.shape, fw.values[id].shape),
            });
        }
        add_grad(&mut ng[id], t);
    }
    let p = |i: usize| &params.tensors[i];
    let v = |i: NodeId| &fw.values[i];
    for node in ir.nodes.iter().rev() {
        let Some(g) = ng[node.id].take() else { continue };
        if !g.is_finite() {
            return Err(NumericError::NonFinite(node.name.clone()));
        }
        match &node.op {
            Op::EmbedLookup { feed, table } => {
                let input = &ex.inputs[feed.key()];
                let mut put = |r: usize, b: &Buckets| {
                    for &bk in b {
                        let row = grads.row(*table, bk);
                        for (d, gv) in row.iter_mut().zip(g.row(r)) {
                            *d += 0.5 * gv;
                        }
                    }
                };
                match input {
                    InputValue::Text(Some(b)) => put(0, b),
                    InputValue::Text(None) => {}
                    InputValue::Tokens(bs) => bs.iter().enumerate().for_each(|(i, b)| put(i, b)),
                    InputValue::Elements(es) => es.iter().enumerate().for_each(|(i, (b, _))| put(i, b)),
                }
            }
            Op::MeanPool { input } => {
                let x = v(*input);
                let m = x.rows();
                let mut dx = Tensor::zeros(x.shape.clone());
                for r in 0..m {
                    for (d, gv) in dx.row_mut(r).iter_mut().zip(&g.data) {
                        *d = gv / m as f64;
                    }
                }
                add_grad(&mut ng[*input], dx);
            }
            Op::MaxPool { input } => {
                let x = v(*input);
                let mut dx = Tensor::zeros(x.shape.clone());
                if x.rows() > 0 {
                    for c in 0..x.cols() {
                        let mut best = 0;
                        for r in 1..x.rows() {
                            if x.data[r * x.cols() + c] > x.data[best * x.cols() + c] {
                                best = r;
                            }
                        }
                        dx.data[best * x.cols() + c] = g.data[c];
                    }
                }
                add_grad(&mut ng[*input], dx);
            }
            Op::Conv1D { input, kernel, bias, width } => {
                let (x, k) = (v(*input), p(*kernel));
                let (m, din, dout) = (x.rows(), k.shape[1], k.shape[2]);
                let half = (width - 1) / 2;
                let mut dx = Tensor::zeros(x.shape.clone());
                {
                    let db = grads.dense(*bias);
                    for t in 0..m {
                        for (d, gv) in db.iter_mut().zip(g.row(t)) {
                            *d += gv;
                        }
                    }
                }
                let dk = grads.dense(*kernel);
                for t in 0..m {
                    let gr = g.row(t);
                    for kk in 0..*width {
                        let src = t + kk;
                        if src < half || src - half >= m {
                            continue;
                        }
                        let s = src - half;
                        for i in 0..din {
                            let off = (kk * din + i) * dout;
                            let xv = x.data[s * din + i];
                            let mut acc = 0.0;
                            for o in 0..dout {
                                dk[off + o] += xv * gr[o];
                                acc += k.data[off + o] * gr[o];
                            }
                            dx.data[s * din + i] += acc;
                        }
                    }
                }
                add_grad(&mut ng[*input], dx);
            }
            Op::Recurrent { input, w_in, w_rec, bias } => {
                let (x, w, u) = (v(*input), p(*w_in), p(*w_rec));
                let hs = fw.aux[node.id].as_ref().expect("recurrent history");
                let (m, din, h) = (x.rows(), x.cols(), hs.cols());
                let mut dx = Tensor::zeros(x.shape.clone());
                let mut dh = g.data.clone();
                for t in (0..m).rev() {
                    let ht = hs.row(t);
                    let dz: Vec<f64> = dh.iter().zip(ht).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
                    {
                        let db = grads.dense(*bias);
                        db.iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
                    }
                    {
                        let dw = grads.dense(*w_in);
                        for (i, &xv) in x.row(t).iter().enumerate() {
                            for (a, b) in dw[i * h..(i + 1) * h].iter_mut().zip(&dz) {
                                *a += xv * b;
                            }
                        }
                    }
                    for i in 0..din {
                        dx.data[t * din + i] = w.data[i * h..(i + 1) * h].iter().zip(&dz).map(|(a, b)| a * b).sum();
                    }
                    let mut next = vec![0.0; h];
                    if t > 0 {
                        let prev = hs.row(t - 1);
                        let du = grads.dense(*w_rec);
                        for j in 0..h {
                            for (a, b) in du[j * h..(j + 1) * h].iter_mut().zip(&dz) {
                                *a += prev[j] * b;
                            }
                            next[j] = u.data[j * h..(j + 1) * h].iter().zip(&dz).map(|(a, b)| a * b).sum();
                        }
                    }
                    dh = next;
                }
                add_grad(&mut ng[*input], dx);
            }
            Op::SpanPool { input, elements } => {
                let x = v(*input);
                let Some(InputValue::Elements(els)) = ex.inputs.get(elements) else {
                    return Err(NumericError::MissingPayload(elements.clone()));
                };
                let mut dx = Tensor::zeros(x.shape.clone());
                for (i, (_, span)) in els.iter().enumerate() {
                    let rows = span_rows(*span, x.rows());
                    let n = rows.len() as f64;
                    for r in rows {
                        for (d, gv) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += gv / n;
                        }
                    }
                }
                add_grad(&mut ng[*input], dx);
            }
            Op::Concat { inputs } => {
                let mut c = 0;
                for &i in inputs {
                    let w = v(i).cols();
                    let rows = v(i).rows();
                    let mut dx = Tensor::zeros(vec![rows, w]);
                    for r in 0..rows {
                        dx.row_mut(r).copy_from_slice(&g.row(r)[c..c + w]);
                    }
                    c += w;
                    add_grad(&mut ng[i], dx);
                }
            }
            Op::Linear { input, weight, bias } => {
                {
                    let db = grads.dense(*bias);
                    for r in 0..g.rows() {
                        db.iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                    }
                }
                let dx = matmul_backward(v(*input), p(*weight), &g, grads.dense(*weight), true);
                add_grad(&mut ng[*input], dx.expect("requested"));
            }
            Op::Relu { input } => {
                let x = v(*input);
                let dx = x.data.iter().zip(&g.data).map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                add_grad(&mut ng[*input], Tensor { shape: x.shape.clone(), data: dx });
            }
            Op::Softmax { input } => {
                let y = v(node.id);
                let mut dx = Tensor::zeros(y.shape.clone());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *d = yv * (gv - dot);
                    }
                }
                add_grad(&mut ng[*input], dx);
            }
            Op::Sigmoid { input } => {
                let y = v(node.id);
                let dx = y.data.iter().zip(&g.data).map(|(yv, gv)| gv * yv * (1.0 - yv)).collect();
                add_grad(&mut ng[*input], Tensor { shape: y.shape.clone(), data: dx });
            }
            Op::CandidateScore { query, candidates, weight } => {
                let (q, c, w) = (v(*query), v(*candidates), p(*weight));
                let qw = matmul(q, w, None);
                let d = c.cols();
                let mut dv = vec![0.0; d];
                let mut dc = Tensor::zeros(c.shape.clone());
                for i in 0..c.rows() {
                    let gi = g.data[i];
                    for j in 0..d {
                        dv[j] += gi * c.data[i * d + j];
                        dc.data[i * d + j] = gi * qw.data[j];
                    }
                }
                let dq = matmul_backward(q, w, &Tensor::row_vector(dv), grads.dense(*weight), true);
                add_grad(&mut ng[*query], dq.expect("requested"));
                add_grad(&mut ng[*candidates], dc);
            }
            Op::SliceCombine { base_repr, base_logits, experts, gate } => {
                let inds: Vec<&Tensor> = experts.iter().map(|e| v(e.indicator)).collect();
                let els: Vec<&Tensor> = experts.iter().map(|e| v(e.logits)).collect();
                let bl = v(*base_logits);
                let c = combine_rows(bl, &inds, &els, *gate);
                let br = v(*base_repr);
                let reprs: Vec<&Tensor> = std::iter::once(br).chain(experts.iter().map(|e| v(e.repr))).collect();
                let rows = br.rows();
                let n_e = reprs.len();
                let mut d_repr: Vec<Tensor> = reprs.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
                let mut d_logits: Vec<Tensor> =
                    std::iter::once(bl).chain(els.iter().copied()).map(|t| Tensor::zeros(t.shape.clone())).collect();
                let mut d_ind: Vec<Tensor> = inds.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
                for r in 0..rows {
                    let a = &c.attn[r];
                    let gr = g.row(r);
                    let da: Vec<f64> =
                        reprs.iter().map(|t| t.row(r).iter().zip(gr).map(|(x, y)| x * y).sum()).collect();
                    for e in 0..n_e {
                        for (d, gv) in d_repr[e].row_mut(r).iter_mut().zip(gr) {
                            *d += a[e] * gv;
                        }
                    }
                    let z: f64 = c.scores[r].iter().map(|s| s + ATTENTION_EPSILON).sum();
                    let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                    for e in 0..n_e {
                        let ds = (da[e] - mean) / z;
                        let ind = if e == 0 { 1.0 } else { inds[e - 1].row(r)[0] };
                        if e > 0 {
                            d_ind[e - 1].row_mut(r)[0] += ds * c.conf[r][e];
                        }
                        let dconf = ds * ind;
                        for (d, cg) in d_logits[e].row_mut(r).iter_mut().zip(&c.conf_grad[r][e]) {
                            *d += dconf * cg;
                        }
                    }
                }
                let mut d_repr = d_repr.into_iter();
                let mut d_logits = d_logits.into_iter();
                add_grad(&mut ng[*base_repr], d_repr.next().unwrap());
                add_grad(&mut ng[*base_logits], d_logits.next().unwrap());
                for ((e, dr), (dl, di)) in experts.iter().zip(d_repr).zip(d_logits.zip(d_ind)) {
                    add_grad(&mut ng[e.repr], dr);
                    add_grad(&mut ng[e.logits], dl);
                    add_grad(&mut ng[e.indicator], di);
                }
            }
        }
    }
    Ok(())
}

pub fn backward(
    ir: &ModelIr,
    params: &ParamStore,
    ex: &Example,
    fw: &Forward,
    seeds: Vec<(NodeId, Tensor)>,
) -> Result<Grads, NumericError> {
    let mut g = Grads::zeros(ir);
    backward_into(ir, params, ex, fw, seeds, &mut g)?;
    Ok(g)
}

// ---- finite-difference check ---------------------------------------------

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so near-zero gradients are compared
/// on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;
/// Coordinates checked per parameter.
const MAX_COORDS_PER_PARAM: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub param: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

/// Nodes nobody consumes: the probe loss is a random linear form over them.
fn terminal_nodes(ir: &ModelIr) -> Vec<NodeId> {
    let mut used = vec![false; ir.nodes.len()];
    for n in &ir.nodes {
        for i in n.op.inputs() {
            used[i] = true;
        }
    }
    (0..ir.nodes.len()).filter(|&i| !used[i]).collect()
}

fn probe_seeds(ir: &ModelIr, fw: &Forward, example: usize, seed: u64) -> Vec<(NodeId, Tensor)> {
    terminal_nodes(ir)
        .into_iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (example as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            rng.set_stream(id as u64);
            let shape = fw.values[id].shape.clone();
            let n = fw.values[id].data.len();
            (id, Tensor { shape, data: (0..n).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect() })
        })
        .collect()
}

fn probe_loss(ir: &ModelIr, params: &ParamStore, batch: &[Example], seed: u64) -> Result<f64, NumericError> {
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let fw = forward(ir, params, ex)?;
        for (id, w) in probe_seeds(ir, &fw, i, seed) {
            total += fw.values[id].data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total)
}

/// Analytic gradient of the probe loss.
pub fn probe_gradient(ir: &ModelIr, params: &ParamStore, batch: &[Example], seed: u64) -> Result<Grads, NumericError> {
    let mut g = Grads::zeros(ir);
    for (i, ex) in batch.iter().enumerate() {
        let fw = forward(ir, params, ex)?;
        let seeds = probe_seeds(ir, &fw, i, seed);
        backward_into(ir, params, ex, &fw, seeds, &mut g)?;
    }
    Ok(g)
}

/// Compare a supplied gradient of the probe loss against central differences.
pub fn compare_against_fd(
    ir: &ModelIr,
    params: &ParamStore,
    batch: &[Example],
    seed: u64,
    analytic: &Grads,
    tolerance: f64,
) -> Result<GradReport, NumericError> {
    let mut work = params.clone();
    let mut out = Vec::new();
    for (pi, spec) in ir.params.iter().enumerate() {
        let coords: Vec<usize> = match &analytic.0[pi] {
            ParamGrad::Rows { width, rows } => {
                // touched rows, plus one untouched row that must stay zero
                let mut c: Vec<usize> = rows.keys().flat_map(|&r| (0..*width).map(move |j| r as usize * width + j)).collect();
                let untouched = (0..spec.shape[0]).find(|r| !rows.contains_key(&(*r as u32)));
                if let Some(r) = untouched {
                    c.push(r * width);
                }
                c
            }
            ParamGrad::Dense(_) => (0..spec.numel()).collect(),
        };
        let stride = coords.len().div_ceil(MAX_COORDS_PER_PARAM).max(1);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for &flat in coords.iter().step_by(stride) {
            let orig = work.tensors[pi].data[flat];
            work.tensors[pi].data[flat] = orig + FD_STEP;
            let up = probe_loss(ir, &work, batch, seed)?;
            work.tensors[pi].data[flat] = orig - FD_STEP;
            let down = probe_loss(ir, &work, batch, seed)?;
            work.tensors[pi].data[flat] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.at(pi, flat);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
        out.push(ParamCheck { param: spec.name.clone(), checked, max_rel_error: worst, pass: worst <= tolerance });
    }
    Ok(GradReport { params: out, tolerance })
}

/// Analytic vs central-difference gradients of a random linear probe over
/// the IR's terminal nodes, for every parameter.
pub fn grad_check(ir: &ModelIr, params: &ParamStore, batch: &[Example], tolerance: f64) -> Result<GradReport, NumericError> {
    const PROBE_SEED: u64 = 0x6772_6164;
    let g = probe_gradient(ir, params, batch, PROBE_SEED)?;
    compare_against_fd(ir, params, batch, PROBE_SEED, &g, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, ArchChoice, IrNode, ParamSpec, Shape, TaskFamily};
    use crate::hparams::EncoderKind;
    use crate::rowstore::parse_record;
    use crate::schema::parse_schema;

    fn bare_ir(nodes: Vec<IrNode>, params: Vec<ParamSpec>) -> ModelIr {
        ModelIr {
            nodes,
            params,
            payload_outputs: BTreeMap::new(),
            tasks: vec![],
            buckets: 4,
            choice: ArchChoice {
                encoders: BTreeMap::new(),
                embed_dim: 1,
                hidden_dim: 1,
                learning_rate: 0.1,
                epochs: 1,
                batch_size: 1,
            },
            signature: crate::compiler::ServingSignature { sig_version: 1, inputs: vec![], tasks: vec![] },
        }
    }

    /// Embedding table whose bucket b holds `rows[b]`, fed one token per row.
    fn fixed_sequence(rows: &[Vec<f64>]) -> (ModelIr, ParamStore, Example) {
        let d = rows[0].len();
        let n = rows.len();
        let spec = ParamSpec { name: "table".into(), shape: vec![n, d], init: Init::Zeros };
        let node = IrNode {
            id: 0,
            name: "x".into(),
            op: Op::EmbedLookup { feed: Feed::Tokens("t".into()), table: 0 },
            shape: Shape { rows: Extent::Tokens("t".into()), cols: Extent::Fixed(d) },
        };
        let mut ir = bare_ir(vec![node], vec![spec]);
        ir.buckets = n;
        let params = ParamStore {
            names: vec!["table".into()],
            tensors: vec![Tensor { shape: vec![n, d], data: rows.concat() }],
            seed: 0,
        };
        let ex = Example {
            inputs: BTreeMap::from([(
                "t".to_string(),
                InputValue::Tokens((0..n as u32).map(|b| [b, b]).collect()),
            )]),
        };
        (ir, params, ex)
    }

    fn push(ir: &mut ModelIr, name: &str, op: Op, shape: Shape) -> NodeId {
        let id = ir.nodes.len();
        ir.nodes.push(IrNode { id, name: name.into(), op, shape });
        id
    }

    #[test]
    fn mean_pool_averages_rows() {
        let (mut ir, params, ex) = fixed_sequence(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let id = push(&mut ir, "pool", Op::MeanPool { input: 0 }, Shape::vector(2));
        let fw = forward(&ir, &params, &ex).unwrap();
        assert_eq!(fw.value(id).data, vec![2.0, 3.0]);
    }

    #[test]
    fn empty_sequence_pools_to_zero() {
        let (mut ir, params, mut ex) = fixed_sequence(&[vec![1.0, -2.0]]);
        let m = push(&mut ir, "mean", Op::MeanPool { input: 0 }, Shape::vector(2));
        let x = push(&mut ir, "max", Op::MaxPool { input: 0 }, Shape::vector(2));
        ex.inputs.insert("t".into(), InputValue::Tokens(vec![]));
        let fw = forward(&ir, &params, &ex).unwrap();
        assert_eq!(fw.value(m).data, vec![0.0, 0.0]);
        assert_eq!(fw.value(x).data, vec![0.0, 0.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(stable_sigmoid(-700.0) > 0.0 && stable_sigmoid(30.0) < 1.0);
    }

    #[test]
    fn conv_with_ones_kernel_is_same_padded() {
        let (mut ir, mut params, ex) = fixed_sequence(&[vec![1.0], vec![2.0], vec![3.0]]);
        ir.params.push(ParamSpec { name: "k".into(), shape: vec![3, 1, 1], init: Init::Zeros });
        ir.params.push(ParamSpec { name: "b".into(), shape: vec![1], init: Init::Zeros });
        params.names.extend(["k".to_string(), "b".to_string()]);
        params.tensors.push(Tensor { shape: vec![3, 1, 1], data: vec![1.0; 3] });
        params.tensors.push(Tensor { shape: vec![1], data: vec![0.0] });
        let shape = Shape { rows: Extent::Tokens("t".into()), cols: Extent::Fixed(1) };
        let id = push(&mut ir, "conv", Op::Conv1D { input: 0, kernel: 1, bias: 2, width: 3 }, shape);
        let fw = forward(&ir, &params, &ex).unwrap();
        assert_eq!(fw.value(id).data, vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn linear_sum_gradient_is_ones() {
        // identity input rows, loss = sum of outputs → dW all ones
        let (mut ir, mut params, ex) = fixed_sequence(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        ir.params.push(ParamSpec { name: "w".into(), shape: vec![2, 3], init: Init::Zeros });
        ir.params.push(ParamSpec { name: "b".into(), shape: vec![3], init: Init::Zeros });
        params.names.extend(["w".to_string(), "b".to_string()]);
        params.tensors.push(Tensor::zeros(vec![2, 3]));
        params.tensors.push(Tensor::zeros(vec![3]));
        let shape = Shape { rows: Extent::Tokens("t".into()), cols: Extent::Fixed(3) };
        let id = push(&mut ir, "lin", Op::Linear { input: 0, weight: 1, bias: 2 }, shape);
        let fw = forward(&ir, &params, &ex).unwrap();
        let g = backward(&ir, &params, &ex, &fw, vec![(id, Tensor::matrix(2, 3, vec![1.0; 6]))]).unwrap();
        assert_eq!(g.0[1], ParamGrad::Dense(vec![1.0; 6]));
        assert_eq!(g.0[2], ParamGrad::Dense(vec![2.0; 3]));
    }

    #[test]
    fn linear_init_bound() {
        let s = parse_schema(
            r#"{"payloads": [{"name": "q", "kind": "singleton", "inputs": [{"field": "q"}], "embed_dim": 4}],
                "tasks": [{"name": "T", "payload": "q", "kind": {"multiclass": ["a", "b"]}}]}"#,
        )
        .unwrap();
        let mut c = ArchChoice::defaults(&s);
        c.hidden_dim = 4;
        let ir = compile(&s, &c).unwrap();
        let spec = &ir.params[ir.param_index("task.T.hidden_linear.weight").unwrap()];
        assert_eq!(spec.shape, vec![4, 4]);
        let Init::Uniform { bound } = spec.init else { panic!() };
        assert!((bound - 0.75f64.sqrt()).abs() < 1e-12);
        assert!((bound - 0.8660).abs() < 1e-4);
        let p = init_params(&ir, 3);
        let w = p.get("task.T.hidden_linear.weight").unwrap();
        assert!(w.data.iter().all(|v| v.abs() <= bound));
        assert!(p.get("task.T.hidden_linear.bias").unwrap().data.iter().all(|&v| v == 0.0));
        assert_eq!(p.to_bytes(), init_params(&ir, 3).to_bytes());
        assert_ne!(p.to_bytes(), init_params(&ir, 4).to_bytes());
        assert_eq!(ParamStore::from_bytes(&p.to_bytes()).unwrap(), p);
        assert!(p.matches(&ir));
    }

    const SCHEMA: &str = r#"{
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
        "slices": [{"tag": "nutrition"}, {"tag": "complex", "tasks": ["Intent"]}]
    }"#;

    /// Initialized params with every entry (biases included) jittered, so no
    /// ReLU pre-activation sits exactly on its kink.
    fn jittered(ir: &ModelIr, seed: u64) -> ParamStore {
        let mut p = init_params(ir, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut p.tensors {
            for v in &mut t.data {
                *v += 0.2 * (2.0 * rng.gen::<f64>() - 1.0);
            }
        }
        p
    }

    fn examples(ir: &ModelIr) -> Vec<Example> {
        let s = parse_schema(SCHEMA).unwrap();
        [
            r#"{"tokens": ["how", "tall", "is", "the", "president", "of", "france"],
                "entities": [{"id": "president_fr", "span": [4, 7]}, {"id": "france", "span": [6, 7]}], "tags": ["train"]}"#,
            r#"{"tokens": ["age", "of", "obama"], "entities": [{"id": "obama", "span": [2, 3]}], "tags": ["train"]}"#,
        ]
        .iter()
        .map(|l| encode_example(ir, &parse_record(&s, l).unwrap(), true).unwrap())
        .collect()
    }

    #[test]
    fn runtime_shapes_match_on_batch_of_two() {
        let s = parse_schema(SCHEMA).unwrap();
        for enc in [EncoderKind::MeanPool, EncoderKind::MaxPool, EncoderKind::Conv1D(3), EncoderKind::Recurrent] {
            let ir = compile(&s, &ArchChoice::defaults(&s).with_encoder(enc)).unwrap();
            let params = init_params(&ir, 1);
            for ex in examples(&ir) {
                let fw = forward(&ir, &params, &ex).unwrap();
                for t in &ir.tasks {
                    let out = fw.value(t.output);
                    if t.family == TaskFamily::Bitvector {
                        assert!(out.data.iter().all(|&p| p > 0.0 && p < 1.0));
                    } else {
                        for r in 0..out.rows() {
                            assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn every_op_passes_finite_difference_check() {
        let s = parse_schema(SCHEMA).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for enc in [EncoderKind::MeanPool, EncoderKind::MaxPool, EncoderKind::Conv1D(3), EncoderKind::Recurrent] {
            let mut c = ArchChoice::defaults(&s).with_encoder(enc);
            c.embed_dim = 4;
            c.hidden_dim = 3;
            let ir = compile(&s, &c).unwrap();
            seen.extend(ir.nodes.iter().map(|n| n.op.kind_name()));
            let params = jittered(&ir, 11);
            let report = grad_check(&ir, &params, &examples(&ir), 1e-4).unwrap();
            assert!(report.pass(), "{enc}: {:#?}", report.params.iter().filter(|p| !p.pass).collect::<Vec<_>>());
            assert!(report.worst() <= 1e-4);
        }
        assert_eq!(seen.len(), 13, "{seen:?}");
    }

    #[test]
    fn perturbed_gradient_fails_check() {
        let s = parse_schema(SCHEMA).unwrap();
        let mut c = ArchChoice::defaults(&s);
        c.embed_dim = 3;
        c.hidden_dim = 3;
        let ir = compile(&s, &c).unwrap();
        let params = jittered(&ir, 5);
        let batch = examples(&ir);
        let mut g = probe_gradient(&ir, &params, &batch, 9).unwrap();
        let target = ir.param_index("task.Intent.head.bias").unwrap();
        if let ParamGrad::Dense(v) = &mut g.0[target] {
            v[0] += 1e-2;
        }
        let report = compare_against_fd(&ir, &params, &batch, 9, &g, 1e-4).unwrap();
        let failed: Vec<&str> = report.params.iter().filter(|p| !p.pass).map(|p| p.param.as_str()).collect();
        assert_eq!(failed, vec!["task.Intent.head.bias"]);
    }

    #[test]
    fn zero_parameter_ir_has_empty_report() {
        let ir = bare_ir(vec![], vec![]);
        let params = init_params(&ir, 0);
        let r = grad_check(&ir, &params, &[Example::default()], 1e-4).unwrap();
        assert!(r.params.is_empty());
        assert!(r.pass());
    }

    #[test]
    fn forward_is_bit_reproducible_and_null_payloads_encode_as_zero() {
        let s = parse_schema(SCHEMA).unwrap();
        let ir = compile(&s, &ArchChoice::defaults(&s).with_encoder(EncoderKind::Recurrent)).unwrap();
        let params = init_params(&ir, 2);
        let ex = &examples(&ir)[0];
        let a = forward(&ir, &params, ex).unwrap();
        let b = forward(&ir, &params, ex).unwrap();
        assert_eq!(a.values, b.values);

        let rec = parse_record(&s, r#"{"tokens": null, "entities": null}"#).unwrap();
        let ex = encode_example(&ir, &rec, true).unwrap();
        assert!(forward(&ir, &params, &ex).is_ok());
        let missing = parse_record(&s, r#"{"entities": []}"#).unwrap();
        assert_eq!(encode_example(&ir, &missing, true), Err(NumericError::MissingPayload("tokens".into())));
        assert!(encode_example(&ir, &missing, false).is_ok());
    }

    #[test]
    fn attention_hand_case() {
        // one confident expert with full membership, one uniform expert at half membership
        let a = slice_attention(&[0.0, 0.0, 0.0], &[(1.0, &[800.0, 0.0, 0.0]), (0.5, &[0.0, 0.0, 0.0])], Gate::Softmax);
        assert!(a[0] < 1e-6, "{a:?}"); // uniform base has zero confidence
        assert!((a[1] - 1.0).abs() < 1e-6);
        assert!(a[2] < 1e-6);
        // zero membership leaves all weight on the base expert
        let a = slice_attention(&[5.0, 0.0], &[(0.0, &[9.0, 0.0])], Gate::Softmax);
        assert!((a[0] - 1.0).abs() < 1e-6);
    }
}
