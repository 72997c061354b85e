//! Accuracy reports, retrieval/classification/re-ranking comparison and
//! threshold sweeps.

mod fixture;

pub use fixture::{generate_fixture, Fixture, FixtureConfig};

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rerank::{
    candidates, rerank_with_neighbours, retrieve, Gate, PredictionRecord, QueryIndex,
    RerankConfig, RerankOutcome, TopmMode,
};
use crate::retrieval::{filter_by_threshold, Database, SearchResult};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCounts {
    pub softmax_kept: usize,
    pub reranked: usize,
    pub fallback_softmax: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub truth: usize,
    pub predicted: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub top1_accuracy: f64,
    /// Fraction of queries whose true class is among the candidates.
    pub topn_accuracy: f64,
    pub gate_counts: GateCounts,
    /// Misclassified (truth, predicted) pairs, most frequent first.
    pub confusions: Vec<Confusion>,
}

/// Tallies outcomes against ground truth.
pub fn accuracy(outcomes: &[RerankOutcome], truth: &HashMap<String, usize>) -> Result<EvalReport> {
    let mut top1 = 0usize;
    let mut topn = 0usize;
    let mut gates = GateCounts::default();
    let mut pairs: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for o in outcomes {
        let t = *truth
            .get(&o.id)
            .ok_or_else(|| Error::MissingTruth(o.id.clone()))?;
        if o.predicted_class == t {
            top1 += 1;
        } else {
            *pairs.entry((t, o.predicted_class)).or_default() += 1;
        }
        if o.candidates.contains(&t) {
            topn += 1;
        }
        match o.gate {
            Gate::SoftmaxKept => gates.softmax_kept += 1,
            Gate::Reranked => gates.reranked += 1,
            Gate::FallbackSoftmax => gates.fallback_softmax += 1,
        }
    }
    let n = outcomes.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let mut confusions: Vec<Confusion> = pairs
        .into_iter()
        .map(|((truth, predicted), count)| Confusion {
            truth,
            predicted,
            count,
        })
        .collect();
    confusions.sort_by_key(|c| std::cmp::Reverse(c.count));
    Ok(EvalReport {
        queries: n,
        top1_accuracy: frac(top1),
        topn_accuracy: frac(topn),
        gate_counts: gates,
        confusions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    /// Label of the nearest database neighbour.
    pub retrieval: EvalReport,
    /// Softmax argmax.
    pub classification: EvalReport,
    /// Gated re-ranking.
    pub ccfr: EvalReport,
}

/// Retrieval-only prediction: candidates are the first `topn` distinct
/// neighbour labels, scored by their best similarity.
fn retrieval_outcome(id: &str, neighbours: &SearchResult, topn: usize) -> RerankOutcome {
    let mut cands = Vec::new();
    let mut scores = Vec::new();
    for h in &neighbours.hits {
        if cands.len() == topn {
            break;
        }
        if !cands.contains(&h.label) {
            cands.push(h.label);
            scores.push(h.similarity);
        }
    }
    RerankOutcome {
        id: id.to_owned(),
        predicted_class: cands[0],
        candidates: cands,
        scores,
        gate: Gate::Reranked,
    }
}

/// Scores every prediction three ways in one pass.
pub fn compare_modes(
    preds: &[PredictionRecord],
    queries: &QueryIndex,
    db: &Database,
    cfg: &RerankConfig,
    truth: &HashMap<String, usize>,
) -> Result<ModeComparison> {
    cfg.validate()?;
    let rows: Vec<(RerankOutcome, RerankOutcome, RerankOutcome)> = preds
        .par_iter()
        .map(|p| {
            let q = queries.embedding(&p.id)?;
            let nearest = db.query_topm(q, cfg.topm)?;
            let classification = rerank_with_neighbours(
                p,
                &SearchResult::default(),
                &RerankConfig {
                    t_sf: 0.0,
                    ..cfg.clone()
                },
            );
            let neighbours = match cfg.topm_mode {
                TopmMode::FixedTopm => nearest.clone(),
                TopmMode::ThresholdOnly => retrieve(db, q, cfg)?,
            };
            let ccfr = rerank_with_neighbours(p, &neighbours, cfg);
            Ok((retrieval_outcome(&p.id, &nearest, cfg.topn), classification, ccfr))
        })
        .collect::<Result<_>>()?;
    let (mut r, mut c, mut f) = (Vec::new(), Vec::new(), Vec::new());
    for (a, b, d) in rows {
        r.push(a);
        c.push(b);
        f.push(d);
    }
    Ok(ModeComparison {
        retrieval: accuracy(&r, truth)?,
        classification: accuracy(&c, truth)?,
        ccfr: accuracy(&f, truth)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub topn: usize,
    pub t_sf: f64,
    pub t_sc: f64,
    pub top1_accuracy: f64,
    pub gated: usize,
}

/// Accuracy over the Cartesian product of the three axes, in axis order
/// (topn outermost, t_sc innermost).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub topn_values: Vec<usize>,
    pub t_sf_values: Vec<f64>,
    pub t_sc_values: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, topn: usize, t_sf: f64, t_sc: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.topn == topn && c.t_sf == t_sf && c.t_sc == t_sc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("topn,t_sf,t_sc,top1_acc\n");
        for c in &self.cells {
            writeln!(out, "{},{},{},{}", c.topn, c.t_sf, c.t_sc, c.top1_accuracy)
                .expect("write to string");
        }
        out
    }
}

/// Evaluates re-ranking for every (topn, t_sf, t_sc) combination. Other
/// settings come from `base`. Neighbours are retrieved once per query.
pub fn sweep(
    preds: &[PredictionRecord],
    queries: &QueryIndex,
    db: &Database,
    truth: &HashMap<String, usize>,
    base: &RerankConfig,
    topn_values: &[usize],
    t_sf_values: &[f64],
    t_sc_values: &[f64],
) -> Result<SweepGrid> {
    if topn_values.is_empty() || t_sf_values.is_empty() || t_sc_values.is_empty() {
        return Err(Error::EmptyInput("sweep axis"));
    }
    let mut configs = Vec::new();
    for &topn in topn_values {
        for &t_sf in t_sf_values {
            for &t_sc in t_sc_values {
                let cfg = RerankConfig {
                    topn,
                    t_sf,
                    t_sc,
                    ..base.clone()
                };
                cfg.validate()?;
                configs.push(cfg);
            }
        }
    }

    let max_t_sf = t_sf_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_t_sc = t_sc_values.iter().copied().fold(f64::INFINITY, f64::min);
    let neighbours: Vec<SearchResult> = preds
        .par_iter()
        .map(|p| {
            let q = queries.embedding(&p.id)?;
            if p.top1_prob() >= max_t_sf {
                return Ok(SearchResult::default());
            }
            match base.topm_mode {
                TopmMode::FixedTopm => db.query_topm(q, base.topm),
                TopmMode::ThresholdOnly => {
                    Ok(filter_by_threshold(&db.query_topm(q, db.len())?, min_t_sc))
                }
            }
        })
        .collect::<Result<_>>()?;
    for p in preds {
        if !truth.contains_key(&p.id) {
            return Err(Error::MissingTruth(p.id.clone()));
        }
    }

    let cells = configs
        .par_iter()
        .map(|cfg| {
            let outcomes: Vec<RerankOutcome> = preds
                .iter()
                .zip(&neighbours)
                .map(|(p, n)| rerank_with_neighbours(p, n, cfg))
                .collect();
            let report = accuracy(&outcomes, truth)?;
            Ok(SweepCell {
                topn: cfg.topn,
                t_sf: cfg.t_sf,
                t_sc: cfg.t_sc,
                top1_accuracy: report.top1_accuracy,
                gated: report.gate_counts.reranked + report.gate_counts.fallback_softmax,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepGrid {
        topn_values: topn_values.to_vec(),
        t_sf_values: t_sf_values.to_vec(),
        t_sc_values: t_sc_values.to_vec(),
        cells,
    })
}

/// Top-1 accuracy of the softmax argmax alone.
pub fn classification_accuracy(preds: &[PredictionRecord], truth: &HashMap<String, usize>) -> Result<f64> {
    let outcomes: Vec<RerankOutcome> = preds
        .iter()
        .map(|p| RerankOutcome {
            id: p.id.clone(),
            predicted_class: p.argmax(),
            candidates: candidates(&p.probs, 1),
            scores: vec![p.top1_prob()],
            gate: Gate::SoftmaxKept,
        })
        .collect();
    Ok(accuracy(&outcomes, truth)?.top1_accuracy)
}

/// Parses an axis given as `a,b,c` or an inclusive `start:stop:step` range.
/// Values are rounded to 1e-9 so decimal steps print cleanly.
pub fn parse_axis(spec: &str) -> Result<Vec<f64>> {
    let bad = |why: String| Error::config("axis", format!("`{spec}`: {why}"));
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| bad(format!("`{s}` is not a number ({e})")))
    };
    let round = |x: f64| (x * 1e9).round() / 1e9;
    let parts: Vec<&str> = spec.split(':').collect();
    let values = match parts.as_slice() {
        [single] => single.split(',').map(num).collect::<Result<Vec<_>>>()?,
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if !(step > 0.0) || stop < start {
                return Err(bad("need step > 0 and stop >= start".into()));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| round(start + i as f64 * step)).collect()
        }
        _ => return Err(bad("expected a comma list or start:stop:step".into())),
    };
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(bad("no finite values".into()));
    }
    Ok(values)
}

/// [`parse_axis`] for integer axes such as `topn`.
pub fn parse_int_axis(spec: &str) -> Result<Vec<usize>> {
    parse_axis(spec)?
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config("axis", format!("`{spec}`: {v} is not a non-negative integer")))
            }
        })
        .collect()
}
