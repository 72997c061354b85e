//! Two-level class hierarchy built by clustering class-mean embeddings.
//!
//! Super classes come from agglomerative clustering with average linkage
//! under cosine distance. The merge order is fully determined by the input:
//! equal linkage distances go to the lexicographically smallest cluster pair,
//! where a cluster is named by its smallest member class.

use serde::{Deserialize, Serialize};

use crate::retrieval::EmbeddingRecord;
use crate::vector::{check_dim, dot};
use crate::{normalize, Error, Result};

/// Children → super class mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "HierarchyFile", into = "HierarchyFile")]
pub struct Hierarchy {
    num_super: usize,
    parent: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct HierarchyFile {
    num_children: usize,
    num_super: usize,
    parent: Vec<usize>,
}

impl TryFrom<HierarchyFile> for Hierarchy {
    type Error = Error;

    fn try_from(f: HierarchyFile) -> Result<Self> {
        if f.parent.len() != f.num_children {
            return Err(Error::InvalidHierarchy(format!(
                "num_children is {} but parent has {} entries",
                f.num_children,
                f.parent.len()
            )));
        }
        Hierarchy::new(f.num_super, f.parent)
    }
}

impl From<Hierarchy> for HierarchyFile {
    fn from(h: Hierarchy) -> Self {
        HierarchyFile {
            num_children: h.parent.len(),
            num_super: h.num_super,
            parent: h.parent,
        }
    }
}

impl Hierarchy {
    pub fn new(num_super: usize, parent: Vec<usize>) -> Result<Self> {
        if parent.is_empty() {
            return Err(Error::InvalidHierarchy("no children".into()));
        }
        if num_super == 0 || num_super > parent.len() {
            return Err(Error::InvalidHierarchy(format!(
                "num_super {num_super} not in [1, {}]",
                parent.len()
            )));
        }
        let mut used = vec![false; num_super];
        for (child, &p) in parent.iter().enumerate() {
            if p >= num_super {
                return Err(Error::InvalidHierarchy(format!(
                    "child {child} has parent {p} >= num_super {num_super}"
                )));
            }
            used[p] = true;
        }
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(Error::InvalidHierarchy(format!(
                "super class {empty} has no children"
            )));
        }
        Ok(Self { num_super, parent })
    }

    /// Every child is its own super class.
    pub fn identity(num_children: usize) -> Result<Self> {
        Self::new(num_children, (0..num_children).collect())
    }

    pub fn num_children(&self) -> usize {
        self.parent.len()
    }

    pub fn num_super(&self) -> usize {
        self.num_super
    }

    pub fn parent(&self) -> &[usize] {
        &self.parent
    }

    /// Unchecked lookup; callers validate `child` first.
    pub(crate) fn parent_of(&self, child: usize) -> usize {
        self.parent[child]
    }

    pub fn children_of(&self, super_class: usize) -> impl Iterator<Item = usize> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter(move |(_, &p)| p == super_class)
            .map(|(c, _)| c)
    }
}

pub fn super_label(h: &Hierarchy, child: usize) -> Result<usize> {
    h.parent.get(child).copied().ok_or(Error::LabelOutOfRange {
        label: child,
        classes: h.num_children(),
    })
}

/// L2-normalized mean embedding of each class `0..num_classes`.
pub fn class_means(records: &[EmbeddingRecord], num_classes: usize) -> Result<Vec<Vec<f64>>> {
    let dim = records
        .first()
        .map(|r| r.embedding.len())
        .ok_or(Error::EmptyInput("class_means records"))?;
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for r in records {
        check_dim("class_means embedding", dim, r.embedding.len())?;
        if r.label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: r.label,
                classes: num_classes,
            });
        }
        for (s, x) in sums[r.label].iter_mut().zip(&r.embedding) {
            *s += x;
        }
        counts[r.label] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(class, (sum, n))| {
            if n == 0 {
                return Err(Error::EmptyClass(class));
            }
            let mean: Vec<f64> = sum.into_iter().map(|s| s / n as f64).collect();
            normalize(&mean)
        })
        .collect()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    (1.0 - dot(a, b)).clamp(0.0, 2.0)
}

/// Clusters `means` into `num_super` super classes. Labels are assigned in
/// increasing order of each cluster's smallest member class.
pub fn build_hierarchy(means: &[Vec<f64>], num_super: usize) -> Result<Hierarchy> {
    let n = means.len();
    if n == 0 {
        return Err(Error::EmptyInput("build_hierarchy means"));
    }
    if num_super == 0 || num_super > n {
        return Err(Error::config(
            "num_super",
            format!("{num_super} not in [1, {n}]"),
        ));
    }
    let dim = means[0].len();
    for m in means {
        check_dim("build_hierarchy mean", dim, m.len())?;
    }

    // Full distance matrix; row/column i is the cluster whose smallest member is i.
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine_distance(&means[i], &means[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut root: Vec<usize> = (0..n).collect();

    while active.len() > num_super {
        // scan in lexicographic order; strict < keeps the first minimum
        let mut best = (f64::INFINITY, 0, 0);
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                if dist[i][j] < best.0 {
                    best = (dist[i][j], i, j);
                }
            }
        }
        let (_, keep, gone) = best;
        // average linkage (Lance–Williams with size weights)
        let (nk, ng) = (size[keep] as f64, size[gone] as f64);
        for &other in &active {
            if other == keep || other == gone {
                continue;
            }
            let d = (nk * dist[keep][other] + ng * dist[gone][other]) / (nk + ng);
            dist[keep][other] = d;
            dist[other][keep] = d;
        }
        size[keep] += size[gone];
        active.retain(|&c| c != gone);
        for r in root.iter_mut() {
            if *r == gone {
                *r = keep;
            }
        }
    }

    // `active` is sorted and each entry is its cluster's smallest member
    let parent = root
        .iter()
        .map(|r| active.binary_search(r).expect("root is an active cluster"))
        .collect();
    Hierarchy::new(num_super, parent)
}

/// Default super class count: `round(C / 4)`, at least one.
pub fn default_num_super(num_children: usize) -> usize {
    ((num_children as f64 / 4.0).round() as usize).max(1)
}
