use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{cross_entropy, multi_level_loss, multi_level_terms, triplet_loss, triplet_margin};
use super::{LossResult, TripletInputs, DEFAULT_LAMBDA, DEFAULT_TRIPLET_MARGIN};
use crate::hierarchy::Hierarchy;
use crate::{Error, Result};

/// Maximum accepted relative error between analytic and numeric gradients.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const SUITE_EPSILON: f64 = 1e-5;
/// Instances whose hinge argument is closer than this to the kink are redrawn.
const KINK_CLEARANCE: f64 = 1e-3;

/// Central-difference check of every coordinate of every input.
///
/// Returns `max |analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn check_gradient<F>(loss_fn: F, inputs: &[Vec<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&[Vec<f64>]) -> Result<LossResult>,
{
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be positive"));
    }
    let analytic = loss_fn(inputs)?.gradients;
    if analytic.len() != inputs.len() {
        return Err(Error::DimensionMismatch {
            context: "check_gradient gradients",
            expected: inputs.len(),
            actual: analytic.len(),
        });
    }
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        if analytic[which].len() != input.len() {
            return Err(Error::DimensionMismatch {
                context: "check_gradient gradient shape",
                expected: input.len(),
                actual: analytic[which].len(),
            });
        }
        for k in 0..input.len() {
            let orig = input[k];
            probe[which][k] = orig + epsilon;
            let plus = loss_fn(&probe)?.value;
            probe[which][k] = orig - epsilon;
            let minus = loss_fn(&probe)?.value;
            probe[which][k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[which][k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckRow {
    pub loss: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradientCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADIENT_TOLERANCE
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, sd: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sd).expect("valid sd");
    (0..len).map(|_| normal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, len, 1.0);
        if let Ok(u) = crate::normalize(&v) {
            return u;
        }
    }
}

fn random_hierarchy(rng: &mut ChaCha8Rng, children: usize, supers: usize) -> Hierarchy {
    let mut parent: Vec<usize> = (0..children)
        .map(|i| if i < supers { i } else { rng.random_range(0..supers) })
        .collect();
    // shuffle so super classes are not tied to the first children
    for i in (1..parent.len()).rev() {
        let j = rng.random_range(0..=i);
        parent.swap(i, j);
    }
    Hierarchy::new(supers, parent).expect("every super class is used")
}

/// Seeded gradient checks for cross-entropy, the multi-level loss and the
/// triplet loss, `instances` of each. Multi-level and triplet instances are
/// redrawn until their hinge argument is at least 1e-3 away from the kink.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<GradientCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut ce_worst = 0.0f64;
    for _ in 0..instances {
        let classes = rng.random_range(2..=12);
        let logits = gaussian_vec(&mut rng, classes, 2.0);
        let label = rng.random_range(0..classes);
        let err = check_gradient(|x| cross_entropy(&x[0], label), &[logits], SUITE_EPSILON)?;
        ce_worst = ce_worst.max(err);
    }

    let mut ml_worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let children = rng.random_range(4..=12);
        let supers = rng.random_range(2..=children.min(5));
        let h = random_hierarchy(&mut rng, children, supers);
        let z = gaussian_vec(&mut rng, children, 2.0);
        // wider super logits so the hinge is active in a good share of draws
        let s = gaussian_vec(&mut rng, supers, 3.0);
        let label = rng.random_range(0..children);
        let terms = multi_level_terms(&z, &s, &h, label)?;
        if (terms.p_children - terms.p_parent).abs() <= KINK_CLEARANCE {
            continue;
        }
        let err = check_gradient(
            |x| multi_level_loss(&x[0], &x[1], &h, label, DEFAULT_LAMBDA),
            &[z, s],
            SUITE_EPSILON,
        )?;
        ml_worst = ml_worst.max(err);
        done += 1;
    }

    let mut tl_worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let dim = rng.random_range(2..=16);
        let t = TripletInputs::new(
            unit_vec(&mut rng, dim),
            unit_vec(&mut rng, dim),
            unit_vec(&mut rng, dim),
            DEFAULT_TRIPLET_MARGIN,
        );
        if triplet_margin(&t)?.abs() <= KINK_CLEARANCE {
            continue;
        }
        let margin = t.margin;
        let err = check_gradient(
            |x| triplet_loss(&TripletInputs::new(x[0].clone(), x[1].clone(), x[2].clone(), margin)),
            &[t.anchor, t.positive, t.negative],
            SUITE_EPSILON,
        )?;
        tl_worst = tl_worst.max(err);
        done += 1;
    }

    Ok(vec![
        GradientCheckRow {
            loss: "cross_entropy",
            instances,
            max_rel_error: ce_worst,
        },
        GradientCheckRow {
            loss: "multi_level_loss",
            instances,
            max_rel_error: ml_worst,
        },
        GradientCheckRow {
            loss: "triplet_loss",
            instances,
            max_rel_error: tl_worst,
        },
    ])
}
