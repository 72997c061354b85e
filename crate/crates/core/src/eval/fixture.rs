//! Synthetic Gaussian-cluster dataset with a noisy softmax head.
//!
//! Each class has a random unit center; embeddings are noisy copies of it.
//! A fraction of classes is grouped into confusable pairs whose centers are
//! moderately similar. The softmax head gives the true class (and, for
//! confusable classes, also its partner) a large logit margin, so confusable
//! queries come out low-confidence and are often misclassified, while their
//! embedding neighbourhoods stay clean.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rerank::PredictionRecord;
use crate::retrieval::EmbeddingRecord;
use crate::vector::dot;
use crate::{normalize, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    /// Fraction of classes that belong to a confusable pair.
    pub confusable_fraction: f64,
    /// Per-coordinate standard deviation added to the class center.
    pub embedding_noise: f64,
    /// Cosine similarity between the centers of a confusable pair.
    pub partner_similarity: f64,
    pub logit_margin: f64,
    pub logit_noise: f64,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            num_classes: 200,
            train_per_class: 30,
            test_per_class: 20,
            dim: 64,
            confusable_fraction: 0.2,
            embedding_noise: 0.04,
            partner_similarity: 0.5,
            logit_margin: 8.0,
            logit_noise: 1.0,
            seed: 0,
        }
    }
}

impl FixtureConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("train_per_class", "need samples on both splits"));
        }
        if self.dim < 2 {
            return Err(Error::config("dim", "need at least 2 dimensions"));
        }
        if !(0.0..=1.0).contains(&self.confusable_fraction) {
            return Err(Error::config("confusable_fraction", "not in [0, 1]"));
        }
        if !(-1.0..1.0).contains(&self.partner_similarity) {
            return Err(Error::config("partner_similarity", "not in [-1, 1)"));
        }
        if !(self.embedding_noise >= 0.0 && self.logit_noise >= 0.0) {
            return Err(Error::config("embedding_noise", "noise must be >= 0"));
        }
        Ok(())
    }

    pub fn num_pairs(&self) -> usize {
        ((self.confusable_fraction * self.num_classes as f64 / 2.0).round() as usize)
            .min(self.num_classes / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub train: Vec<EmbeddingRecord>,
    /// Query embeddings; `label` is the ground truth.
    pub test: Vec<EmbeddingRecord>,
    /// Coarse classifier logits per test record, same order as `test`.
    pub logits: Vec<Vec<f64>>,
    pub predictions: Vec<PredictionRecord>,
    /// `partner[c]` is the confusable partner of class `c`, if any.
    pub partner: Vec<Option<usize>>,
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

/// Unit vector at cosine `rho` from the unit vector `base`.
fn at_similarity(rng: &mut ChaCha8Rng, base: &[f64], rho: f64) -> Vec<f64> {
    loop {
        let r = unit(rng, base.len());
        let proj = dot(&r, base);
        let perp: Vec<f64> = r.iter().zip(base).map(|(x, b)| x - proj * b).collect();
        if let Ok(perp) = normalize(&perp) {
            let s = (1.0 - rho * rho).sqrt();
            return base.iter().zip(&perp).map(|(b, p)| rho * b + s * p).collect();
        }
    }
}

pub fn generate_fixture(cfg: &FixtureConfig) -> Result<Fixture> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.num_classes;

    let mut centers: Vec<Vec<f64>> = (0..c).map(|_| unit(&mut rng, cfg.dim)).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng);
    let mut partner = vec![None; c];
    for pair in order.chunks_exact(2).take(cfg.num_pairs()) {
        let (a, b) = (pair[0], pair[1]);
        centers[b] = at_similarity(&mut rng, &centers[a], cfg.partner_similarity);
        partner[a] = Some(b);
        partner[b] = Some(a);
    }

    let emb_noise = Normal::new(0.0, cfg.embedding_noise).map_err(|e| Error::config("embedding_noise", e.to_string()))?;
    let logit_noise = Normal::new(0.0, cfg.logit_noise).map_err(|e| Error::config("logit_noise", e.to_string()))?;
    let sample = |rng: &mut ChaCha8Rng, class: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = centers[class]
            .iter()
            .map(|x| x + emb_noise.sample(rng))
            .collect();
        normalize(&v)
    };

    let mut train = Vec::with_capacity(c * cfg.train_per_class);
    for class in 0..c {
        for k in 0..cfg.train_per_class {
            train.push(EmbeddingRecord {
                id: format!("train-{class:04}-{k:03}"),
                label: class,
                embedding: sample(&mut rng, class)?,
            });
        }
    }

    let mut test = Vec::with_capacity(c * cfg.test_per_class);
    let mut logits = Vec::with_capacity(c * cfg.test_per_class);
    let mut predictions = Vec::with_capacity(c * cfg.test_per_class);
    for class in 0..c {
        for k in 0..cfg.test_per_class {
            let id = format!("test-{class:04}-{k:03}");
            let embedding = sample(&mut rng, class)?;
            let mut z: Vec<f64> = (0..c).map(|_| logit_noise.sample(&mut rng)).collect();
            z[class] += cfg.logit_margin;
            if let Some(p) = partner[class] {
                z[p] += cfg.logit_margin;
            }
            predictions.push(PredictionRecord::from_logits(id.clone(), &z)?);
            logits.push(z);
            test.push(EmbeddingRecord {
                id,
                label: class,
                embedding,
            });
        }
    }

    Ok(Fixture {
        train,
        test,
        logits,
        predictions,
        partner,
    })
}
