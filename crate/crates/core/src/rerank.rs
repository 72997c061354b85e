//! Confidence-gated re-ranking of the coarse classifier's top-n classes.
//!
//! A query whose top-1 softmax probability reaches `t_sf` keeps the softmax
//! ranking. Otherwise the query's neighbours are retrieved and each candidate
//! class `c` is scored
//!
//! ```text
//! S(c)  = α · softmax(c) + β · Sc(c)
//! Sc(c) = Σ sim(q, x) over retrieved x with label c and sim > t_sc
//!         ─────────────────────────────────────────────────────────
//!         the same sum over all candidate classes
//! ```
//!
//! Neighbours whose label is not a candidate are ignored. If no neighbour of a
//! candidate class passes `t_sc`, the softmax ranking is kept.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::losses::softmax;
use crate::retrieval::{filter_by_threshold, Database, EmbeddingRecord, SearchResult, DEFAULT_TOPM};
use crate::vector::check_finite;
use crate::{Error, Result};

pub const DEFAULT_TOPN: usize = 5;
/// Gate threshold used for CUB-like data.
pub const T_SF_FINE: f64 = 0.5;
/// Gate threshold used for Cars/Aircraft-like data.
pub const T_SF_COARSE: f64 = 0.7;
const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Coarse classifier output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PredictionWire")]
pub struct PredictionRecord {
    pub id: String,
    pub probs: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionWire {
    id: String,
    #[serde(default)]
    logits: Option<Vec<f64>>,
    #[serde(default)]
    probs: Option<Vec<f64>>,
}

impl TryFrom<PredictionWire> for PredictionRecord {
    type Error = Error;

    fn try_from(w: PredictionWire) -> Result<Self> {
        match (w.logits, w.probs) {
            (Some(logits), None) => Self::from_logits(w.id, &logits),
            (None, Some(probs)) => Self::from_probs(w.id, probs),
            _ => Err(Error::config(
                "prediction",
                "exactly one of `logits` or `probs` is required",
            )),
        }
    }
}

impl PredictionRecord {
    pub fn from_probs(id: impl Into<String>, probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("prediction probabilities"));
        }
        check_finite("prediction probabilities", &probs)?;
        if probs.iter().any(|p| *p < 0.0) {
            return Err(Error::config("probs", "probabilities must be non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::config("probs", format!("probabilities sum to {sum}")));
        }
        Ok(Self {
            id: id.into(),
            probs,
        })
    }

    pub fn from_logits(id: impl Into<String>, logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::EmptyInput("prediction logits"));
        }
        check_finite("prediction logits", logits)?;
        Ok(Self {
            id: id.into(),
            probs: softmax(logits),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn top1_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Softmax argmax, lowest class index on ties.
    pub fn argmax(&self) -> usize {
        candidates(&self.probs, 1)[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopmMode {
    /// Retrieve exactly `topm` neighbours, then apply `t_sc`.
    #[default]
    FixedTopm,
    /// Consider the whole database; `t_sc` alone selects neighbours.
    ThresholdOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub topn: usize,
    pub topm: usize,
    pub t_sf: f64,
    pub t_sc: f64,
    pub alpha: f64,
    pub beta: f64,
    pub topm_mode: TopmMode,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            topn: DEFAULT_TOPN,
            topm: DEFAULT_TOPM,
            t_sf: T_SF_FINE,
            t_sc: 0.7,
            alpha: 0.0,
            beta: 1.0,
            topm_mode: TopmMode::FixedTopm,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topn == 0 {
            return Err(Error::config("topn", "must be at least 1"));
        }
        if self.topm == 0 {
            return Err(Error::config("topm", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.t_sf) {
            return Err(Error::config("t_sf", format!("{} not in [0, 1]", self.t_sf)));
        }
        if !(-1.0..=1.0).contains(&self.t_sc) {
            return Err(Error::config("t_sc", format!("{} not in [-1, 1]", self.t_sc)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("{} must be >= 0", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", format!("{} must be >= 0", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    SoftmaxKept,
    Reranked,
    FallbackSoftmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub id: String,
    pub predicted_class: usize,
    /// Top-n softmax classes, most probable first.
    pub candidates: Vec<usize>,
    /// Score of each candidate under the taken gate, aligned with `candidates`.
    pub scores: Vec<f64>,
    pub gate: Gate,
}

impl Serialize for RerankOutcome {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        struct Scores<'a>(&'a RerankOutcome);
        impl Serialize for Scores<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                let mut map = s.serialize_map(Some(self.0.candidates.len()))?;
                for (c, v) in self.0.candidates.iter().zip(&self.0.scores) {
                    map.serialize_entry(&c.to_string(), v)?;
                }
                map.end()
            }
        }
        let mut map = serializer.serialize_map(Some(4))?;
        map.serialize_entry("id", &self.id)?;
        map.serialize_entry("predicted_class", &self.predicted_class)?;
        map.serialize_entry("gate", &self.gate)?;
        map.serialize_entry("scores", &Scores(self))?;
        map.end()
    }
}

/// The `topn` most probable classes, ties broken by lower class index.
pub fn candidates(probs: &[f64], topn: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(topn);
    order
}

/// Normalized per-class similarity mass over `candidates`. Returns an empty
/// map when no retrieved neighbour of a candidate class passes `t_sc`.
pub fn class_similarity_scores(
    retrievals: &SearchResult,
    candidates: &[usize],
    t_sc: f64,
) -> BTreeMap<usize, f64> {
    let mut numerators: BTreeMap<usize, f64> = candidates.iter().map(|&c| (c, 0.0)).collect();
    let mut passed = false;
    for hit in &retrievals.hits {
        if hit.similarity <= t_sc {
            continue;
        }
        if let Some(n) = numerators.get_mut(&hit.label) {
            *n += hit.similarity;
            passed = true;
        }
    }
    let denominator: f64 = numerators.values().sum();
    if !passed || denominator == 0.0 {
        return BTreeMap::new();
    }
    numerators
        .into_iter()
        .map(|(c, n)| (c, n / denominator))
        .collect()
}

/// Neighbour list the second branch scores against.
pub fn retrieve(db: &Database, q: &[f64], cfg: &RerankConfig) -> Result<SearchResult> {
    match cfg.topm_mode {
        TopmMode::FixedTopm => db.query_topm(q, cfg.topm),
        TopmMode::ThresholdOnly => Ok(filter_by_threshold(&db.query_topm(q, db.len())?, cfg.t_sc)),
    }
}

fn softmax_outcome(pred: &PredictionRecord, cands: Vec<usize>, gate: Gate) -> RerankOutcome {
    let scores = cands.iter().map(|&c| pred.probs[c]).collect();
    RerankOutcome {
        id: pred.id.clone(),
        predicted_class: cands[0],
        candidates: cands,
        scores,
        gate,
    }
}

/// Whether the query falls below the confidence gate.
pub fn is_gated(pred: &PredictionRecord, cfg: &RerankConfig) -> bool {
    pred.top1_prob() < cfg.t_sf
}

/// Re-ranks with a precomputed neighbour list (already limited per
/// `cfg.topm_mode`). `neighbours` is only consulted for gated queries.
pub fn rerank_with_neighbours(
    pred: &PredictionRecord,
    neighbours: &SearchResult,
    cfg: &RerankConfig,
) -> RerankOutcome {
    let cands = candidates(&pred.probs, cfg.topn);
    if !is_gated(pred, cfg) {
        return softmax_outcome(pred, cands, Gate::SoftmaxKept);
    }
    let sc = class_similarity_scores(neighbours, &cands, cfg.t_sc);
    if sc.is_empty() {
        return softmax_outcome(pred, cands, Gate::FallbackSoftmax);
    }
    let scores: Vec<f64> = cands
        .iter()
        .map(|c| cfg.alpha * pred.probs[*c] + cfg.beta * sc[c])
        .collect();
    let mut best = 0;
    for i in 1..cands.len() {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best] && cands[i] < cands[best]);
        if better {
            best = i;
        }
    }
    RerankOutcome {
        id: pred.id.clone(),
        predicted_class: cands[best],
        candidates: cands,
        scores,
        gate: Gate::Reranked,
    }
}

/// Re-ranks one query given its embedding. Retrieval runs only when the
/// confidence gate fires.
pub fn rerank_embedding(
    pred: &PredictionRecord,
    query: &[f64],
    db: &Database,
    cfg: &RerankConfig,
) -> Result<RerankOutcome> {
    cfg.validate()?;
    let neighbours = if is_gated(pred, cfg) {
        retrieve(db, query, cfg)?
    } else {
        SearchResult::default()
    };
    Ok(rerank_with_neighbours(pred, &neighbours, cfg))
}

/// Query embeddings keyed by id.
#[derive(Debug, Clone, Default)]
pub struct QueryIndex {
    by_id: HashMap<String, usize>,
    records: Vec<EmbeddingRecord>,
}

impl QueryIndex {
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self { by_id, records })
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn embedding(&self, id: &str) -> Result<&[f64]> {
        self.get(id)
            .map(|r| r.embedding.as_slice())
            .ok_or_else(|| Error::MissingQuery(id.to_owned()))
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    /// Ground-truth labels by id.
    pub fn truth(&self) -> HashMap<String, usize> {
        self.records.iter().map(|r| (r.id.clone(), r.label)).collect()
    }
}

pub fn rerank_query(
    pred: &PredictionRecord,
    queries: &QueryIndex,
    db: &Database,
    cfg: &RerankConfig,
) -> Result<RerankOutcome> {
    rerank_embedding(pred, queries.embedding(&pred.id)?, db, cfg)
}

fn resolve_all(preds: &[PredictionRecord], queries: &QueryIndex) -> Result<()> {
    match preds.iter().find(|p| queries.get(&p.id).is_none()) {
        Some(p) => Err(Error::MissingQuery(p.id.clone())),
        None => Ok(()),
    }
}

/// Re-ranks every prediction on the current rayon pool. Output order matches
/// input order; an unresolvable id fails before any work starts.
pub fn rerank_batch(
    preds: &[PredictionRecord],
    queries: &QueryIndex,
    db: &Database,
    cfg: &RerankConfig,
) -> Result<Vec<RerankOutcome>> {
    cfg.validate()?;
    resolve_all(preds, queries)?;
    preds
        .par_iter()
        .map(|p| rerank_query(p, queries, db, cfg))
        .collect()
}

pub fn rerank_batch_serial(
    preds: &[PredictionRecord],
    queries: &QueryIndex,
    db: &Database,
    cfg: &RerankConfig,
) -> Result<Vec<RerankOutcome>> {
    cfg.validate()?;
    resolve_all(preds, queries)?;
    preds
        .iter()
        .map(|p| rerank_query(p, queries, db, cfg))
        .collect()
}
