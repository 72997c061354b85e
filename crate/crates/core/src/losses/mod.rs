//! Multi-level classification loss, cosine triplet loss and their gradients.
//!
//! Every loss returns a [`LossResult`] holding the forward value and one
//! gradient per differentiable input. Hinges use a zero subgradient at the kink.

mod gradcheck;
mod mining;

pub use gradcheck::{check_gradient, gradient_suite, GradientCheckRow, GRADIENT_TOLERANCE};
pub use mining::mine_triplets;

use crate::hierarchy::Hierarchy;
use crate::vector::{check_dim, check_finite, dot, l2_norm};
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_MU: f64 = 1.0;
pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// One entry per differentiable input, in argument order.
    pub gradients: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletInputs {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub margin: f64,
}

impl TripletInputs {
    pub fn new(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>, margin: f64) -> Self {
        Self {
            anchor,
            positive,
            negative,
            margin,
        }
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(logits)[label]` computed without forming the probabilities.
fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits[label] - lse
}

fn check_logits(context: &'static str, logits: &[f64], label: usize) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::EmptyInput(context));
    }
    check_finite(context, logits)?;
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(())
}

/// Softmax cross-entropy against a one-hot label. Gradient: `p - onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<LossResult> {
    check_logits("cross_entropy", logits, label)?;
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok(LossResult {
        value: -log_softmax_at(logits, label),
        gradients: vec![grad],
    })
}

/// `max(0, mean(children_probs) - parent_prob)`.
pub fn hierarchy_hinge(children_probs: &[f64], parent_prob: f64) -> f64 {
    if children_probs.is_empty() {
        return 0.0;
    }
    let mean = children_probs.iter().sum::<f64>() / children_probs.len() as f64;
    (mean - parent_prob).max(0.0)
}

/// The three terms of the multi-level loss, before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiLevelTerms {
    pub children_ce: f64,
    pub super_ce: f64,
    pub hinge: f64,
    /// Mean children probability over the ground truth's super class.
    pub p_children: f64,
    pub p_parent: f64,
}

impl MultiLevelTerms {
    pub fn total(&self, lambda: f64) -> f64 {
        self.children_ce + lambda * self.super_ce + self.hinge
    }
}

fn check_multi_level(
    children_logits: &[f64],
    super_logits: &[f64],
    hierarchy: &Hierarchy,
    label: usize,
    lambda: f64,
) -> Result<()> {
    check_dim(
        "multi_level_loss children logits",
        hierarchy.num_children(),
        children_logits.len(),
    )?;
    check_dim(
        "multi_level_loss super logits",
        hierarchy.num_super(),
        super_logits.len(),
    )?;
    check_logits("multi_level_loss children logits", children_logits, label)?;
    check_finite("multi_level_loss super logits", super_logits)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("lambda", format!("{lambda} must be >= 0")));
    }
    Ok(())
}

pub fn multi_level_terms(
    children_logits: &[f64],
    super_logits: &[f64],
    hierarchy: &Hierarchy,
    label: usize,
) -> Result<MultiLevelTerms> {
    check_multi_level(children_logits, super_logits, hierarchy, label, 0.0)?;
    let parent = hierarchy.parent_of(label);
    let p = softmax(children_logits);
    let q = softmax(super_logits);
    let group: Vec<f64> = hierarchy.children_of(parent).map(|i| p[i]).collect();
    let p_children = group.iter().sum::<f64>() / group.len() as f64;
    Ok(MultiLevelTerms {
        children_ce: -log_softmax_at(children_logits, label),
        super_ce: -log_softmax_at(super_logits, parent),
        hinge: hierarchy_hinge(&group, q[parent]),
        p_children,
        p_parent: q[parent],
    })
}

/// `ℓ1 + λ·ℓ2 + ℓh` where ℓ1, ℓ2 are cross-entropies on the children and
/// super heads and ℓh hinges the mean children probability of the ground
/// truth's super class against that super class's probability.
///
/// Gradients are `[d/d children_logits, d/d super_logits]`.
pub fn multi_level_loss(
    children_logits: &[f64],
    super_logits: &[f64],
    hierarchy: &Hierarchy,
    label: usize,
    lambda: f64,
) -> Result<LossResult> {
    check_multi_level(children_logits, super_logits, hierarchy, label, lambda)?;
    let terms = multi_level_terms(children_logits, super_logits, hierarchy, label)?;
    let parent = hierarchy.parent_of(label);
    let p = softmax(children_logits);
    let q = softmax(super_logits);

    let mut d_children = p.clone();
    d_children[label] -= 1.0;
    let mut d_super: Vec<f64> = q.iter().map(|qk| lambda * qk).collect();
    d_super[parent] -= lambda;

    if terms.p_children - terms.p_parent > 0.0 {
        // d mean_{i in G} p_i / d z_k = (p_k [k in G] - p_k * sum_{i in G} p_i) / |G|
        let members: Vec<usize> = hierarchy.children_of(parent).collect();
        let group_mass: f64 = members.iter().map(|&i| p[i]).sum();
        let g = members.len() as f64;
        for (k, d) in d_children.iter_mut().enumerate() {
            *d -= p[k] * group_mass / g;
        }
        for &i in &members {
            d_children[i] += p[i] / g;
        }
        // d q_P / d s_k = q_P (δ_Pk - q_k), entering with a minus sign
        for (k, d) in d_super.iter_mut().enumerate() {
            let delta = if k == parent { 1.0 } else { 0.0 };
            *d -= q[parent] * (delta - q[k]);
        }
    }

    Ok(LossResult {
        value: terms.total(lambda),
        gradients: vec![d_children, d_super],
    })
}

fn check_pair(context: &'static str, a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    check_dim(context, a.len(), b.len())?;
    check_finite(context, a)?;
    check_finite(context, b)?;
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm(context));
    }
    Ok((na, nb))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = check_pair("cosine_similarity", a, b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity and its gradient with respect to each argument.
fn cosine_with_grads(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = check_pair("triplet_loss", a, b)?;
    let cos = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - cos * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - cos * y / (nb * nb))
        .collect();
    Ok((cos, ga, gb))
}

/// Signed hinge argument `sim(A,P) - sim(A,N) - margin`; the loss is active
/// when this is negative.
pub fn triplet_margin(t: &TripletInputs) -> Result<f64> {
    Ok(cosine_similarity(&t.anchor, &t.positive)?
        - cosine_similarity(&t.anchor, &t.negative)?
        - t.margin)
}

/// `max(0, sim(A,N) - sim(A,P) + margin)` with cosine similarity.
///
/// Gradients are `[d/d anchor, d/d positive, d/d negative]`.
pub fn triplet_loss(t: &TripletInputs) -> Result<LossResult> {
    check_dim("triplet_loss", t.anchor.len(), t.positive.len())?;
    check_dim("triplet_loss", t.anchor.len(), t.negative.len())?;
    if !(t.margin >= 0.0 && t.margin.is_finite()) {
        return Err(Error::config("margin", format!("{} must be >= 0", t.margin)));
    }
    let (sim_ap, d_anchor_p, d_pos) = cosine_with_grads(&t.anchor, &t.positive)?;
    let (sim_an, d_anchor_n, d_neg) = cosine_with_grads(&t.anchor, &t.negative)?;
    let y = sim_ap - sim_an - t.margin;
    let dim = t.anchor.len();
    if -y > 0.0 {
        let d_anchor = d_anchor_n
            .iter()
            .zip(&d_anchor_p)
            .map(|(n, p)| n - p)
            .collect();
        Ok(LossResult {
            value: -y,
            gradients: vec![d_anchor, d_pos.iter().map(|g| -g).collect(), d_neg],
        })
    } else {
        Ok(LossResult {
            value: 0.0,
            gradients: vec![vec![0.0; dim]; 3],
        })
    }
}

/// Cross-entropy plus `mu` times the triplet loss.
///
/// Gradients are `[d/d logits, d/d anchor, d/d positive, d/d negative]`.
pub fn total_loss(logits: &[f64], label: usize, t: &TripletInputs, mu: f64) -> Result<LossResult> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::config("mu", format!("{mu} must be >= 0")));
    }
    let ce = cross_entropy(logits, label)?;
    let tl = triplet_loss(t)?;
    let mut gradients = ce.gradients;
    gradients.extend(
        tl.gradients
            .into_iter()
            .map(|g| g.into_iter().map(|x| mu * x).collect()),
    );
    Ok(LossResult {
        value: ce.value + mu * tl.value,
        gradients,
    })
}
