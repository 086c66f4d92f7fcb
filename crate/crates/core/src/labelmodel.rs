//! Source-accuracy label model.
//!
//! Generative model per unit: the true class `y` is drawn from a class prior;
//! each non-abstaining source `s` votes `y` with probability `α_s` and
//! otherwise votes uniformly among the other `K − 1` classes. Abstention is
//! independent of `y`. [`fit_em`] estimates the accuracies (and the prior)
//! by expectation maximization; [`posterior_labels`] turns them into
//! probabilistic training labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rowstore::{RowStore, StoreError, VoteValue};
use crate::schema::{PayloadKind, Schema, TaskKind};

/// Accuracy clamp margin.
pub const EPSILON: f64 = 1e-4;
pub const INITIAL_ACCURACY: f64 = 0.7;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("row {row}: vote from `{source_name}` on `{task}` does not match the task's granularity")]
    GranularityMismatch { task: String, row: usize, source_name: String },
    #[error("every unit abstains; nothing to fit")]
    DegenerateMatrix,
    #[error("source `{0}` is not covered by the label model")]
    UnknownSource(String),
    #[error("label model prior has {model} classes, unit has {unit}")]
    CardinalityMismatch { model: usize, unit: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// One prediction target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitRef {
    pub row: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bit: Option<usize>,
}

impl UnitRef {
    pub fn row(row: usize) -> Self {
        UnitRef { row, token: None, bit: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub task: String,
    /// Sorted source names; votes refer to positions in this list.
    pub sources: Vec<String>,
    pub units: Vec<UnitRef>,
    pub cardinality: Vec<usize>,
    /// Per unit, `(source index, class)` sorted by source index.
    pub votes: Vec<Vec<(usize, usize)>>,
    /// Class count shared by all units, when the prior is learned.
    pub fixed_cardinality: Option<usize>,
}

impl LabelMatrix {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Build from per-unit votes keyed by source name.
    pub fn from_named_votes(
        task: &str,
        units: Vec<UnitRef>,
        cardinality: Vec<usize>,
        named: Vec<Vec<(String, usize)>>,
        fixed_cardinality: Option<usize>,
    ) -> LabelMatrix {
        let mut sources: Vec<String> = named.iter().flatten().map(|(s, _)| s.clone()).collect();
        sources.sort();
        sources.dedup();
        let votes = named
            .into_iter()
            .map(|vs| {
                let mut v: Vec<(usize, usize)> =
                    vs.into_iter().map(|(s, c)| (sources.binary_search(&s).unwrap(), c)).collect();
                v.sort_unstable();
                v
            })
            .collect();
        LabelMatrix { task: task.to_string(), sources, units, cardinality, votes, fixed_cardinality }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub accuracies: BTreeMap<String, f64>,
    /// Learned class prior; empty means uniform over each unit's candidates.
    pub prior: Vec<f64>,
    pub log_likelihood: f64,
    #[serde(default)]
    pub iterations: usize,
}

/// Probabilistic labels; `None` marks a unit no source voted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbLabels(pub Vec<Option<Vec<f64>>>);

impl ProbLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Hard label per unit, lowest index on ties.
    pub fn argmax(&self) -> Vec<Option<usize>> {
        self.0.iter().map(|p| p.as_deref().map(argmax)).collect()
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Expand a task's supervision over `rows` into one unit per prediction target.
pub fn build_label_matrix(store: &RowStore, schema: &Schema, task: &str, rows: &[usize]) -> Result<LabelMatrix, LabelError> {
    let decl = schema.task(task).ok_or_else(|| LabelError::UnknownTask(task.to_string()))?;
    let payload = schema.payload(&decl.payload).expect("validated schema");
    let per_token = payload.kind == PayloadKind::Sequence;
    let mut units = Vec::new();
    let mut card = Vec::new();
    let mut named: Vec<Vec<(String, usize)>> = Vec::new();
    let mismatch = |row: usize, source: &str| LabelError::GranularityMismatch {
        task: task.to_string(),
        row,
        source_name: source.to_string(),
    };

    for &row in rows {
        let rec = store.get(row)?;
        let votes = rec.supervision.get(task).map(Vec::as_slice).unwrap_or(&[]);
        match &decl.kind {
            TaskKind::Multiclass(labels) => {
                let k = labels.len();
                let n_units = if per_token { rec.sequence_len(schema, &decl.payload) } else { 1 };
                let base = units.len();
                for t in 0..n_units {
                    units.push(UnitRef { row, token: per_token.then_some(t), bit: None });
                    card.push(k);
                    named.push(Vec::new());
                }
                for v in votes {
                    match (&v.value, per_token) {
                        (VoteValue::Class(c), false) if (*c as usize) < k => {
                            named[base].push((v.source.clone(), *c as usize));
                        }
                        (VoteValue::TokenClasses(cs), true) if cs.len() == n_units => {
                            for (t, c) in cs.iter().enumerate() {
                                match c {
                                    Some(c) if (*c as usize) < k => named[base + t].push((v.source.clone(), *c as usize)),
                                    Some(_) => return Err(mismatch(row, &v.source)),
                                    None => {}
                                }
                            }
                        }
                        _ => return Err(mismatch(row, &v.source)),
                    }
                }
            }
            TaskKind::Bitvector(bits) => {
                let b = bits.len();
                let n_targets = if per_token { rec.sequence_len(schema, &decl.payload) } else { 1 };
                let base = units.len();
                for t in 0..n_targets {
                    for bit in 0..b {
                        units.push(UnitRef { row, token: per_token.then_some(t), bit: Some(bit) });
                        card.push(2);
                        named.push(Vec::new());
                    }
                }
                let mut push_set = |t: usize, set: &[u32], source: &str| -> Result<(), LabelError> {
                    if set.iter().any(|&x| x as usize >= b) {
                        return Err(mismatch(row, source));
                    }
                    for bit in 0..b {
                        let on = set.contains(&(bit as u32)) as usize;
                        named[base + t * b + bit].push((source.to_string(), on));
                    }
                    Ok(())
                };
                for v in votes {
                    match (&v.value, per_token) {
                        (VoteValue::Bits(set), false) => push_set(0, set, &v.source)?,
                        (VoteValue::TokenBits(sets), true) if sets.len() == n_targets => {
                            for (t, set) in sets.iter().enumerate() {
                                if let Some(set) = set {
                                    push_set(t, set, &v.source)?;
                                }
                            }
                        }
                        _ => return Err(mismatch(row, &v.source)),
                    }
                }
            }
            TaskKind::Select(set) => {
                let n = rec.candidates(schema, set).len();
                if n == 0 {
                    continue;
                }
                units.push(UnitRef::row(row));
                card.push(n);
                let mut vs = Vec::new();
                for v in votes {
                    match v.value {
                        VoteValue::Candidate(c) if (c as usize) < n => vs.push((v.source.clone(), c as usize)),
                        _ => return Err(mismatch(row, &v.source)),
                    }
                }
                named.push(vs);
            }
        }
    }
    let fixed = match &decl.kind {
        TaskKind::Multiclass(l) => Some(l.len()),
        TaskKind::Bitvector(_) => Some(2),
        TaskKind::Select(_) => None,
    };
    Ok(LabelMatrix::from_named_votes(task, units, card, named, fixed))
}

struct Fit<'a> {
    m: &'a LabelMatrix,
    /// Units that carry evidence: at least one vote and two or more classes.
    active: Vec<usize>,
    lo: f64,
    hi: f64,
}

impl<'a> Fit<'a> {
    fn new(m: &'a LabelMatrix) -> Result<Self, LabelError> {
        let active: Vec<usize> = (0..m.len()).filter(|&u| !m.votes[u].is_empty() && m.cardinality[u] >= 2).collect();
        if active.is_empty() {
            return Err(LabelError::DegenerateMatrix);
        }
        let k_min = active.iter().map(|&u| m.cardinality[u]).min().unwrap();
        let lo = 1.0 / k_min as f64 + EPSILON;
        let hi = 1.0 - EPSILON;
        Ok(Fit { m, active, lo, hi })
    }

    /// Log joint `log P(y, votes)` for every class of unit `u`.
    fn log_joint(&self, u: usize, acc: &[f64], prior: &[f64], out: &mut Vec<f64>) {
        let k = self.m.cardinality[u];
        out.clear();
        let log_prior_uniform = -(k as f64).ln();
        for y in 0..k {
            out.push(if prior.is_empty() { log_prior_uniform } else { prior[y].ln() });
        }
        let wrong_norm = ((k - 1) as f64).ln();
        for &(s, c) in &self.m.votes[u] {
            let a = acc[s];
            let right = a.ln();
            let wrong = (1.0 - a).ln() - wrong_norm;
            for (y, v) in out.iter_mut().enumerate() {
                *v += if y == c { right } else { wrong };
            }
        }
    }
}

fn log_normalize(v: &mut [f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    max + sum.ln()
}

/// Fit source accuracies by EM. `seed` is accepted for interface stability;
/// initialization is deterministic (all accuracies 0.7, uniform prior).
pub fn fit_em(matrix: &LabelMatrix, max_iters: usize, tol: f64, _seed: u64) -> Result<SourceModel, LabelError> {
    let trace = fit_em_traced(matrix, max_iters, tol)?;
    Ok(trace.model)
}

/// EM fit plus the log-likelihood observed at every iteration.
pub struct EmTrace {
    pub model: SourceModel,
    pub log_likelihoods: Vec<f64>,
}

pub fn fit_em_traced(matrix: &LabelMatrix, max_iters: usize, tol: f64) -> Result<EmTrace, LabelError> {
    let fit = Fit::new(matrix)?;
    let n_src = matrix.sources.len();
    let mut acc = vec![INITIAL_ACCURACY.clamp(fit.lo, fit.hi); n_src];
    let mut prior: Vec<f64> = match matrix.fixed_cardinality {
        Some(k) => vec![1.0 / k as f64; k],
        None => Vec::new(),
    };
    let mut lls = Vec::new();
    let mut post = Vec::new();
    let max_iters = max_iters.max(1);
    for _ in 0..max_iters {
        let mut ll = 0.0;
        let mut correct = vec![0.0; n_src];
        let mut count = vec![0.0; n_src];
        let mut prior_acc = vec![0.0; prior.len()];
        for &u in &fit.active {
            fit.log_joint(u, &acc, &prior, &mut post);
            ll += log_normalize(&mut post);
            for &(s, c) in &matrix.votes[u] {
                correct[s] += post[c];
                count[s] += 1.0;
            }
            for (pa, p) in prior_acc.iter_mut().zip(&post) {
                *pa += p;
            }
        }
        let converged = lls.last().is_some_and(|&prev: &f64| ll - prev < tol);
        lls.push(ll);
        if converged {
            break;
        }
        if lls.len() == max_iters {
            break;
        }
        for s in 0..n_src {
            if count[s] > 0.0 {
                acc[s] = (correct[s] / count[s]).clamp(fit.lo, fit.hi);
            }
        }
        if !prior.is_empty() {
            let n = fit.active.len() as f64;
            prior = prior_acc.iter().map(|p| p / n).collect();
        }
    }
    let model = SourceModel {
        accuracies: matrix.sources.iter().cloned().zip(acc).collect(),
        prior,
        log_likelihood: *lls.last().unwrap(),
        iterations: lls.len(),
    };
    Ok(EmTrace { model, log_likelihoods: lls })
}

/// Exact posterior per unit under the generative model.
pub fn posterior_labels(model: &SourceModel, matrix: &LabelMatrix) -> Result<ProbLabels, LabelError> {
    let mut acc = Vec::with_capacity(matrix.sources.len());
    for s in &matrix.sources {
        acc.push(*model.accuracies.get(s).ok_or_else(|| LabelError::UnknownSource(s.clone()))?);
    }
    let fit = Fit { m: matrix, active: Vec::new(), lo: 0.0, hi: 1.0 };
    let mut out = Vec::with_capacity(matrix.len());
    let mut buf = Vec::new();
    for u in 0..matrix.len() {
        let k = matrix.cardinality[u];
        if matrix.votes[u].is_empty() {
            out.push(None);
            continue;
        }
        if k == 1 {
            out.push(Some(vec![1.0]));
            continue;
        }
        if !model.prior.is_empty() && model.prior.len() != k {
            return Err(LabelError::CardinalityMismatch { model: model.prior.len(), unit: k });
        }
        fit.log_joint(u, &acc, &model.prior, &mut buf);
        log_normalize(&mut buf);
        out.push(Some(buf.clone()));
    }
    Ok(ProbLabels(out))
}

/// One-hot plurality vote; ties go to the lowest class index.
pub fn majority_vote(matrix: &LabelMatrix) -> ProbLabels {
    let labels = (0..matrix.len())
        .map(|u| {
            if matrix.votes[u].is_empty() {
                return None;
            }
            let k = matrix.cardinality[u];
            let mut counts = vec![0usize; k];
            for &(_, c) in &matrix.votes[u] {
                counts[c] += 1;
            }
            let mut best = 0;
            for c in 1..k {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            let mut p = vec![0.0; k];
            p[best] = 1.0;
            Some(p)
        })
        .collect();
    ProbLabels(labels)
}

/// Class-rebalancing weight per unit: `(N / K) / mass(argmax class)`, with
/// `mass(c) = Σ P(c)` over non-abstained units. Abstained units get 0.
pub fn rebalance_weights(labels: &ProbLabels) -> Vec<f64> {
    let k = labels.0.iter().flatten().map(Vec::len).max().unwrap_or(0);
    let mut mass = vec![0.0; k];
    let mut n_eff = 0usize;
    for p in labels.0.iter().flatten() {
        n_eff += 1;
        for (m, v) in mass.iter_mut().zip(p) {
            *m += v;
        }
    }
    labels
        .0
        .iter()
        .map(|p| match p {
            None => 0.0,
            Some(p) => (n_eff as f64 / k as f64) / mass[argmax(p)],
        })
        .collect()
}

/// Persisted label-model output for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelArtifact {
    pub task: String,
    pub accuracies: BTreeMap<String, f64>,
    pub prior: Vec<f64>,
    pub log_likelihood: f64,
    pub units: Vec<UnitRef>,
    pub labels: Vec<Option<Vec<f64>>>,
}

impl LabelArtifact {
    pub fn new(matrix: &LabelMatrix, model: &SourceModel, labels: &ProbLabels) -> Self {
        LabelArtifact {
            task: matrix.task.clone(),
            accuracies: model.accuracies.clone(),
            prior: model.prior.clone(),
            log_likelihood: model.log_likelihood,
            units: matrix.units.clone(),
            labels: labels.0.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("label artifact serializes");
        s.push('\n');
        s
    }
}

pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// How multi-source votes are collapsed into training labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Source-accuracy EM posteriors.
    Em,
    /// One-hot plurality vote.
    MajorityVote,
}

/// Fit labels for one task over `rows`.
pub fn fit_task_labels(
    store: &RowStore,
    schema: &Schema,
    task: &str,
    rows: &[usize],
    mode: LabelMode,
) -> Result<LabelArtifact, LabelError> {
    let m = build_label_matrix(store, schema, task, rows)?;
    let (model, labels) = match mode {
        LabelMode::Em => {
            let model = fit_em(&m, DEFAULT_MAX_ITERS, DEFAULT_TOLERANCE, 0)?;
            let labels = posterior_labels(&model, &m)?;
            (model, labels)
        }
        LabelMode::MajorityVote => {
            let model = SourceModel { accuracies: BTreeMap::new(), prior: vec![], log_likelihood: 0.0, iterations: 0 };
            (model, majority_vote(&m))
        }
    };
    Ok(LabelArtifact::new(&m, &model, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(k: usize, votes: Vec<Vec<(&str, usize)>>) -> LabelMatrix {
        let n = votes.len();
        let named = votes.into_iter().map(|v| v.into_iter().map(|(s, c)| (s.to_string(), c)).collect()).collect();
        LabelMatrix::from_named_votes("T", (0..n).map(UnitRef::row).collect(), vec![k; n], named, Some(k))
    }

    fn model(acc: &[(&str, f64)], prior: Vec<f64>) -> SourceModel {
        SourceModel {
            accuracies: acc.iter().map(|(s, a)| (s.to_string(), *a)).collect(),
            prior,
            log_likelihood: 0.0,
            iterations: 0,
        }
    }

    #[test]
    fn two_agreeing_sources_posterior() {
        let m = matrix(2, vec![vec![("A", 0), ("B", 0)]]);
        let p = posterior_labels(&model(&[("A", 0.9), ("B", 0.8)], vec![0.5, 0.5]), &m).unwrap();
        let expect = 0.9 * 0.8 / (0.9 * 0.8 + 0.1 * 0.2);
        assert!((p.0[0].as_ref().unwrap()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.97297).abs() < 1e-5);
    }

    #[test]
    fn single_source_posterior_and_abstain() {
        let m = matrix(2, vec![vec![("A", 0)], vec![]]);
        let p = posterior_labels(&model(&[("A", 0.9), ("B", 0.8)], vec![0.5, 0.5]), &m).unwrap();
        assert!((p.0[0].as_ref().unwrap()[0] - 0.9).abs() < 1e-12);
        assert_eq!(p.0[1], None);
    }

    #[test]
    fn unknown_source_is_an_error() {
        let m = matrix(2, vec![vec![("Z", 0)]]);
        assert!(matches!(
            posterior_labels(&model(&[("A", 0.9)], vec![0.5, 0.5]), &m),
            Err(LabelError::UnknownSource(s)) if s == "Z"
        ));
    }

    #[test]
    fn majority_vote_plurality_and_ties() {
        let m = matrix(2, vec![vec![("A", 0), ("B", 0), ("C", 1)], vec![("A", 0), ("B", 1)], vec![("A", 1)], vec![]]);
        let mv = majority_vote(&m);
        assert_eq!(mv.0[0], Some(vec![1.0, 0.0]));
        assert_eq!(mv.0[1], Some(vec![1.0, 0.0]));
        assert_eq!(mv.0[2], Some(vec![0.0, 1.0]));
        assert_eq!(mv.0[3], None);
    }

    #[test]
    fn single_source_runs_to_the_clamp() {
        let m = matrix(2, vec![vec![("A", 0)]; 100]);
        let fit = fit_em(&m, 500, 1e-12, 0).unwrap();
        assert!((fit.accuracies["A"] - (1.0 - EPSILON)).abs() < 1e-9, "{:?}", fit.accuracies);
        assert!(fit.prior[0] > 0.99);
    }

    #[test]
    fn all_abstain_is_degenerate() {
        let m = matrix(3, vec![vec![], vec![]]);
        assert!(matches!(fit_em(&m, 10, 1e-6, 0), Err(LabelError::DegenerateMatrix)));
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let votes: Vec<Vec<(&str, usize)>> = (0..300)
            .map(|i| {
                let y = i % 3;
                let mut v = vec![("A", y)];
                if i % 4 != 0 {
                    v.push(("B", if i % 5 == 0 { (y + 1) % 3 } else { y }));
                }
                if i % 3 != 1 {
                    v.push(("C", if i % 2 == 0 { (y + 2) % 3 } else { y }));
                }
                v
            })
            .collect();
        let m = matrix(3, votes);
        let tr = fit_em_traced(&m, 200, 0.0).unwrap();
        for w in tr.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn rebalance_examples() {
        let balanced = ProbLabels(vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])]);
        assert_eq!(rebalance_weights(&balanced), vec![1.0, 1.0]);

        let mut skew = vec![Some(vec![1.0, 0.0]); 90];
        skew.extend(vec![Some(vec![0.0, 1.0]); 10]);
        let w = rebalance_weights(&ProbLabels(skew));
        assert!((w[0] - 5.0 / 9.0).abs() < 1e-12);
        assert!((w[99] - 5.0).abs() < 1e-12);

        assert_eq!(rebalance_weights(&ProbLabels(vec![None, None])), vec![0.0, 0.0]);
    }

    #[test]
    fn select_units_use_own_cardinality() {
        let named = vec![vec![("A".to_string(), 1)], vec![("A".to_string(), 0)]];
        let m = LabelMatrix::from_named_votes("S", vec![UnitRef::row(0), UnitRef::row(1)], vec![2, 4], named, None);
        let p = posterior_labels(&model(&[("A", 0.7)], vec![]), &m).unwrap();
        let p1 = p.0[1].as_ref().unwrap();
        assert!((p1[0] - 0.7).abs() < 1e-12);
        assert!((p1[1] - 0.1).abs() < 1e-12);
    }
}
