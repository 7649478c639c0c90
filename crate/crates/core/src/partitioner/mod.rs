//! Partition construction from the sample pool.

mod equal_depth;
mod kd;
mod one_d;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{AqpError, Result};
use crate::maxvar::{MaxVarIndex, MaxVarOracle};
use crate::model::{AggKind, Rect, SplitRule};

pub use equal_depth::{equal_mass_cuts, EqualDepth};
pub use kd::KdHeap;
pub use one_d::{feasible_1d, BinarySearch1d, ErrorGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub rect: Rect,
    /// Left child holds `coords[dim] < value`.
    pub split: Option<(usize, f64)>,
    pub children: Option<[usize; 2]>,
}

/// A partition tree shape plus the per-leaf maximum-variance values it was
/// built with. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub partitioner: String,
    pub kind: AggKind,
    pub nodes: Vec<PlanNode>,
    /// Leaf node indices, left to right.
    pub leaves: Vec<usize>,
    /// Normalized squared in-bucket error of each leaf.
    pub leaf_error: Vec<f64>,
    pub leaf_samples: Vec<usize>,
    pub max_error: f64,
}

impl PartitionPlan {
    pub fn single(root: Rect) -> Self {
        Self {
            partitioner: "single".into(),
            kind: AggKind::Sum,
            nodes: vec![PlanNode { rect: root, split: None, children: None }],
            leaves: vec![0],
            leaf_error: vec![0.0],
            leaf_samples: vec![0],
            max_error: 0.0,
        }
    }

    /// A balanced binary tree whose leaves are the slabs between sorted `cuts`
    /// along dimension 0.
    pub fn from_cuts_1d(root: Rect, cuts: &[f64]) -> Self {
        Self::from_cuts(root, 0, cuts)
    }

    pub fn from_cuts(root: Rect, dim: usize, cuts: &[f64]) -> Self {
        let mut plan = Self::single(root.clone());
        plan.nodes.clear();
        plan.leaves.clear();
        fn rec(plan: &mut PartitionPlan, rect: Rect, dim: usize, cuts: &[f64]) -> usize {
            let id = plan.nodes.len();
            plan.nodes.push(PlanNode { rect: rect.clone(), split: None, children: None });
            if cuts.is_empty() {
                plan.leaves.push(id);
                return id;
            }
            let mid = cuts.len() / 2;
            let (a, b) = rect.split(dim, cuts[mid]);
            let l = rec(plan, a, dim, &cuts[..mid]);
            let r = rec(plan, b, dim, &cuts[mid + 1..]);
            plan.nodes[id].split = Some((dim, cuts[mid]));
            plan.nodes[id].children = Some([l, r]);
            id
        }
        rec(&mut plan, root, dim, cuts);
        plan.leaf_error = vec![0.0; plan.leaves.len()];
        plan.leaf_samples = vec![0; plan.leaves.len()];
        plan
    }

    pub fn root_rect(&self) -> &Rect {
        &self.nodes[0].rect
    }

    pub fn leaf_rects(&self) -> Vec<Rect> {
        self.leaves.iter().map(|&l| self.nodes[l].rect.clone()).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Fills the per-leaf error baselines from `oracle`.
    pub fn annotate(&mut self, index: &mut MaxVarIndex, oracle: &dyn MaxVarOracle) {
        self.kind = oracle.kind();
        self.leaf_error.clear();
        self.leaf_samples.clear();
        for &l in &self.leaves {
            let r = &self.nodes[l].rect;
            let res = oracle.evaluate(index, r);
            self.leaf_error.push(res.error_sq());
            self.leaf_samples.push(index.aggregate(r).count);
        }
        self.max_error = self.leaf_error.iter().copied().fold(0.0, f64::max);
    }
}

/// Everything a partitioner needs: the pool index restricted to `region`,
/// the oracle of the focus aggregate, and the build constraints.
pub struct PartitionRequest<'a> {
    pub index: &'a mut MaxVarIndex,
    pub oracle: &'a dyn MaxVarOracle,
    pub region: Rect,
    pub k: usize,
    /// Minimum samples per leaf.
    pub floor: usize,
    pub rho: f64,
    /// Smallest nonzero and largest |value|; derived from the samples when absent.
    pub value_lo: Option<f64>,
    pub value_hi: Option<f64>,
    pub split_rule: SplitRule,
}

impl PartitionRequest<'_> {
    pub fn kind(&self) -> AggKind {
        self.oracle.kind()
    }

    pub fn samples(&self) -> usize {
        self.index.aggregate(&self.region).count
    }
}

pub trait Partitioner: Send + Sync {
    fn name(&self) -> &'static str;
    fn partition(&self, req: &mut PartitionRequest<'_>) -> Result<PartitionPlan>;
}

#[derive(Clone)]
pub struct PartitionerRegistry {
    items: BTreeMap<&'static str, Arc<dyn Partitioner>>,
}

impl Default for PartitionerRegistry {
    fn default() -> Self {
        let mut r = PartitionerRegistry { items: BTreeMap::new() };
        r.register(Arc::new(BinarySearch1d));
        r.register(Arc::new(KdHeap));
        r.register(Arc::new(EqualDepth));
        r
    }
}

impl PartitionerRegistry {
    pub fn register(&mut self, p: Arc<dyn Partitioner>) {
        self.items.insert(p.name(), p);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Partitioner>> {
        self.items
            .get(name)
            .cloned()
            .ok_or_else(|| AqpError::UnknownStrategy { kind: "partitioner", name: name.to_string() })
    }

    /// Resolves `auto`: the 1D binary search for SUM/AVG in one dimension,
    /// equal-mass slabs for COUNT in one dimension, the k-d heap otherwise.
    pub fn resolve(&self, name: &str, d: usize, kind: AggKind) -> Result<Arc<dyn Partitioner>> {
        if name != "auto" {
            return self.get(name);
        }
        match (d, kind) {
            (1, AggKind::Count) => self.get("equal-depth"),
            (1, _) => self.get("binary-search-1d"),
            _ => self.get("kd-heap"),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.items.keys().copied()
    }
}
