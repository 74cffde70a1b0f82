//! Demonstration selection: prototype-nearest sampling and the retrieval
//! baselines (KNN, clustering, BM25, perplexity).
//!
//! Every selector is deterministic; ties always go to the lowest id.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("pool is empty")]
    EmptyPool,
    #[error("shots must be at least 1")]
    ZeroShots,
    #[error("requested {shots} shots from a pool of {pool}")]
    TooManyShots { shots: usize, pool: usize },
    #[error("class {class} has {available} candidates, {needed} needed")]
    ClassTooSmall { class: usize, available: usize, needed: usize },
    #[error("vector for id {id} has zero norm")]
    ZeroNorm { id: usize },
    #[error("record {id} has no perplexity score")]
    MissingScore { id: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mbicl,
    Knn,
    Cluster,
    Bm25,
    Perplexity,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Mbicl, Method::Knn, Method::Cluster, Method::Bm25, Method::Perplexity];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mbicl => "mbicl",
            Method::Knn => "knn",
            Method::Cluster => "cluster",
            Method::Bm25 => "bm25",
            Method::Perplexity => "perplexity",
        }
    }

    /// KNN and BM25 pick a fresh demo set for every query.
    pub fn is_query_dependent(self) -> bool {
        matches!(self, Method::Knn | Method::Bm25)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedDemo {
    pub id: usize,
    pub class: Option<usize>,
    /// Distance for prototype and cluster methods, similarity or score for
    /// the retrieval ones, perplexity for the perplexity baseline.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<usize>,
    pub demo_ids: Vec<usize>,
    pub per_id: Vec<SelectedDemo>,
}

impl SelectionResult {
    fn new(method: Method, query_id: Option<usize>, per_id: Vec<SelectedDemo>) -> Self {
        SelectionResult { method, query_id, demo_ids: per_id.iter().map(|d| d.id).collect(), per_id }
    }

    /// Fill in the class of every demo from an id → class lookup.
    pub fn annotate_classes(&mut self, class_of: impl Fn(usize) -> Option<usize>) {
        for demo in &mut self.per_id {
            if demo.class.is_none() {
                demo.class = class_of(demo.id);
            }
        }
    }
}

/// Split `shots` across `classes` as evenly as possible; lower class indices
/// take the remainder.
pub fn shots_per_class(shots: usize, classes: usize) -> Vec<usize> {
    if classes == 0 {
        return Vec::new();
    }
    let base = shots / classes;
    let extra = shots % classes;
    (0..classes).map(|c| base + usize::from(c < extra)).collect()
}

fn by_value_then_id(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn check_pool(ids: &[usize], rows: usize, shots: usize) -> Result<(), SamplerError> {
    if ids.is_empty() {
        return Err(SamplerError::EmptyPool);
    }
    if ids.len() != rows {
        return Err(SamplerError::Shape(format!("{} ids for {} rows", ids.len(), rows)));
    }
    if shots == 0 {
        return Err(SamplerError::ZeroShots);
    }
    if shots > ids.len() {
        return Err(SamplerError::TooManyShots { shots, pool: ids.len() });
    }
    Ok(())
}

fn squared_distance(pool: &DMatrix<f64>, row: usize, target: &DVector<f64>) -> f64 {
    pool.row(row).iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// For each target take the `quota` nearest rows among `candidates`,
/// skipping rows already chosen for an earlier target.
fn nearest_per_target(
    pool_ids: &[usize],
    pool: &DMatrix<f64>,
    targets: &[(DVector<f64>, Vec<usize>)],
    quotas: &[usize],
) -> Result<Vec<SelectedDemo>, SamplerError> {
    let mut taken = BTreeSet::new();
    let mut picked = Vec::new();
    for (class, ((target, candidates), &quota)) in targets.iter().zip(quotas).enumerate() {
        let mut scored: Vec<(f64, usize)> = candidates
            .iter()
            .filter(|&&row| !taken.contains(&pool_ids[row]))
            .map(|&row| (squared_distance(pool, row, target), row))
            .collect();
        if scored.len() < quota {
            return Err(SamplerError::ClassTooSmall { class, available: scored.len(), needed: quota });
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(pool_ids[a.1].cmp(&pool_ids[b.1])));
        for &(d2, row) in scored.iter().take(quota) {
            taken.insert(pool_ids[row]);
            picked.push(SelectedDemo { id: pool_ids[row], class: Some(class), value: d2.sqrt() });
        }
    }
    Ok(picked)
}

/// Pick the pool items nearest (Euclidean, projected space) to each momentum
/// proxy. Demos come out in ascending class order.
pub fn mbicl_select(
    pool_ids: &[usize],
    pool: &DMatrix<f64>,
    theta_m: &DMatrix<f64>,
    shots: usize,
) -> Result<SelectionResult, SamplerError> {
    check_pool(pool_ids, pool.nrows(), shots)?;
    if theta_m.ncols() != pool.ncols() {
        return Err(SamplerError::Shape(format!("proxies have dimension {}, pool {}", theta_m.ncols(), pool.ncols())));
    }
    let all: Vec<usize> = (0..pool.nrows()).collect();
    let targets: Vec<_> = theta_m.row_iter().map(|r| (r.transpose(), all.clone())).collect();
    let quotas = shots_per_class(shots, theta_m.nrows());
    Ok(SelectionResult::new(Method::Mbicl, None, nearest_per_target(pool_ids, pool, &targets, &quotas)?))
}

/// Pick, per gold class, the members nearest their class centroid.
pub fn cluster_select(
    pool_ids: &[usize],
    pool: &DMatrix<f64>,
    labels: &[usize],
    classes: usize,
    shots: usize,
) -> Result<SelectionResult, SamplerError> {
    check_pool(pool_ids, pool.nrows(), shots)?;
    if labels.len() != pool.nrows() {
        return Err(SamplerError::Shape(format!("{} labels for {} rows", labels.len(), pool.nrows())));
    }
    let mut targets = Vec::with_capacity(classes);
    for class in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == class).collect();
        if members.is_empty() {
            return Err(SamplerError::ClassTooSmall { class, available: 0, needed: 1 });
        }
        let mut centroid = DVector::zeros(pool.ncols());
        for &r in &members {
            centroid += pool.row(r).transpose();
        }
        centroid /= members.len() as f64;
        targets.push((centroid, members));
    }
    let quotas = shots_per_class(shots, classes);
    Ok(SelectionResult::new(Method::Cluster, None, nearest_per_target(pool_ids, pool, &targets, &quotas)?))
}

/// Top-`shots` pool items by cosine similarity to the query.
pub fn knn_select(
    query_id: Option<usize>,
    query: &DVector<f64>,
    pool_ids: &[usize],
    pool: &DMatrix<f64>,
    shots: usize,
) -> Result<SelectionResult, SamplerError> {
    check_pool(pool_ids, pool.nrows(), shots)?;
    if query.len() != pool.ncols() {
        return Err(SamplerError::Shape(format!("query has dimension {}, pool {}", query.len(), pool.ncols())));
    }
    let qn = query.norm();
    if qn == 0.0 {
        return Err(SamplerError::ZeroNorm { id: query_id.unwrap_or(usize::MAX) });
    }
    let mut scored = Vec::with_capacity(pool_ids.len());
    for (row, &id) in pool_ids.iter().enumerate() {
        let r = pool.row(row);
        let n = r.norm();
        if n == 0.0 {
            return Err(SamplerError::ZeroNorm { id });
        }
        let cos = r.iter().zip(query.iter()).map(|(a, b)| a * b).sum::<f64>() / (n * qn);
        scored.push((-cos, id));
    }
    scored.sort_by(by_value_then_id);
    let per_id = scored.iter().take(shots).map(|&(neg, id)| SelectedDemo { id, class: None, value: -neg }).collect();
    Ok(SelectionResult::new(Method::Knn, query_id, per_id))
}

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Okapi BM25 index over a fixed pool of documents.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    term_freqs: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn new<S: AsRef<str>>(docs: &[S]) -> Self {
        let mut term_freqs = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let tokens = tokenize(doc.as_ref());
            doc_lens.push(tokens.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            term_freqs.push(tf);
        }
        let total: usize = doc_lens.iter().sum();
        let avg_len = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        Bm25Index { term_freqs, doc_lens, doc_freq, avg_len }
    }

    pub fn len(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lens.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Scores for every document. Repeated query tokens count once each.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let q = tokenize(query);
        let idfs: Vec<f64> = q.iter().map(|t| self.idf(t)).collect();
        (0..self.len())
            .map(|d| {
                let norm =
                    BM25_K1 * (1.0 - BM25_B + BM25_B * self.doc_lens[d] as f64 / self.avg_len.max(f64::MIN_POSITIVE));
                q.iter()
                    .zip(&idfs)
                    .map(|(t, idf)| {
                        let f = self.term_freqs[d].get(t).copied().unwrap_or(0) as f64;
                        if f == 0.0 {
                            0.0
                        } else {
                            idf * f * (BM25_K1 + 1.0) / (f + norm)
                        }
                    })
                    .sum()
            })
            .collect()
    }
}

/// Top-`shots` pool texts by BM25 score against the query.
pub fn bm25_select(
    query_id: Option<usize>,
    query_text: &str,
    pool_ids: &[usize],
    index: &Bm25Index,
    shots: usize,
) -> Result<SelectionResult, SamplerError> {
    check_pool(pool_ids, index.len(), shots)?;
    let mut scored: Vec<(f64, usize)> =
        index.scores(query_text).into_iter().zip(pool_ids).map(|(s, &id)| (-s, id)).collect();
    scored.sort_by(by_value_then_id);
    let per_id = scored.iter().take(shots).map(|&(neg, id)| SelectedDemo { id, class: None, value: -neg }).collect();
    Ok(SelectionResult::new(Method::Bm25, query_id, per_id))
}

/// The `shots` pool items with the lowest perplexity.
pub fn perplexity_select(
    pool_ids: &[usize],
    scores: &[Option<f64>],
    shots: usize,
) -> Result<SelectionResult, SamplerError> {
    check_pool(pool_ids, scores.len(), shots)?;
    let mut scored = Vec::with_capacity(pool_ids.len());
    for (&id, score) in pool_ids.iter().zip(scores) {
        scored.push((score.ok_or(SamplerError::MissingScore { id })?, id));
    }
    scored.sort_by(by_value_then_id);
    let per_id = scored.iter().take(shots).map(|&(s, id)| SelectedDemo { id, class: None, value: s }).collect();
    Ok(SelectionResult::new(Method::Perplexity, None, per_id))
}
