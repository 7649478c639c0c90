use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;

use super::{PartitionPlan, PartitionRequest, Partitioner, PlanNode};
use crate::error::{AqpError, Result};
use crate::model::{Rect, SplitRule};

/// Greedy k-d construction: repeatedly split the leaf with the largest
/// maximum variance at its sample median.
#[derive(Debug, Default, Clone, Copy)]
pub struct KdHeap;

impl KdHeap {
    fn split_dim(req: &PartitionRequest<'_>, rect: &Rect, depth: usize, n: usize) -> usize {
        let d = rect.dims();
        match req.split_rule {
            SplitRule::RoundRobin => depth % d,
            SplitRule::LongestSide => {
                let mut best = (depth % d, f64::NEG_INFINITY);
                for dim in 0..d {
                    let lo = req.index.select(rect, dim, 0).unwrap_or(0.0);
                    let hi = req.index.select(rect, dim, n - 1).unwrap_or(0.0);
                    if hi - lo > best.1 {
                        best = (dim, hi - lo);
                    }
                }
                best.0
            }
        }
    }
}

impl Partitioner for KdHeap {
    fn name(&self) -> &'static str {
        "kd-heap"
    }

    fn partition(&self, req: &mut PartitionRequest<'_>) -> Result<PartitionPlan> {
        let n = req.samples();
        if n < req.k {
            return Err(AqpError::TooFewSamples { needed: req.k, have: n });
        }
        let floor = req.floor.max(1);
        let mut nodes = vec![PlanNode { rect: req.region.clone(), split: None, children: None }];
        let mut depth = vec![0usize];
        let score = |req: &mut PartitionRequest<'_>, r: &Rect| req.oracle.evaluate(req.index, r).error_sq();
        let mut heap = BinaryHeap::new();
        heap.push((OrderedFloat(score(req, &req.region.clone())), Reverse(0usize)));
        let mut leaves = 1;
        while leaves < req.k {
            let Some((_, Reverse(i))) = heap.pop() else { break };
            let rect = nodes[i].rect.clone();
            let cnt = req.index.aggregate(&rect).count;
            if cnt < 2 * floor {
                continue;
            }
            let dim = Self::split_dim(req, &rect, depth[i], cnt);
            let Some(value) = req.index.select(&rect, dim, cnt / 2) else { continue };
            let (a, b) = rect.split(dim, value);
            let left = req.index.aggregate(&a).count;
            if left < floor || cnt - left < floor {
                continue;
            }
            for r in [a, b] {
                let id = nodes.len();
                let s = score(req, &r);
                nodes.push(PlanNode { rect: r, split: None, children: None });
                depth.push(depth[i] + 1);
                heap.push((OrderedFloat(s), Reverse(id)));
            }
            nodes[i].split = Some((dim, value));
            nodes[i].children = Some([nodes.len() - 2, nodes.len() - 1]);
            leaves += 1;
        }
        let mut plan = PartitionPlan::single(req.region.clone());
        plan.partitioner = self.name().into();
        plan.nodes = nodes;
        plan.leaves.clear();
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            match plan.nodes[i].children {
                Some([l, r]) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => plan.leaves.push(i),
            }
        }
        plan.annotate(req.index, req.oracle);
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maxvar::{MaxVarIndex, SumOracle};
    use crate::model::Tuple;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(d: usize, n: usize, k: usize, floor: usize, seed: u64) -> (PartitionPlan, MaxVarIndex) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts: Vec<Tuple> = (0..n)
            .map(|i| Tuple::new(i as u64, (0..d).map(|_| rng.random_range(0.0..1.0)).collect(), rng.random_range(0.0..10.0)))
            .collect();
        let mut idx = MaxVarIndex::build(d, 1, &ts).unwrap();
        let mut req = PartitionRequest {
            index: &mut idx,
            oracle: &SumOracle,
            region: Rect::unbounded(d),
            k,
            floor,
            rho: 2.0,
            value_lo: None,
            value_hi: None,
            split_rule: SplitRule::RoundRobin,
        };
        let plan = KdHeap.partition(&mut req).unwrap();
        (plan, idx)
    }

    #[test]
    fn one_leaf() {
        let (plan, _) = run(2, 20, 1, 1, 0);
        assert_eq!(plan.leaf_count(), 1);
    }

    #[test]
    fn first_split_is_the_median() {
        let (plan, idx) = run(1, 21, 2, 1, 1);
        let (dim, v) = plan.nodes[0].split.unwrap();
        assert_eq!(dim, 0);
        assert_eq!(Some(v), idx.select(&Rect::unbounded(1), 0, 10));
    }

    #[test]
    fn reaches_k_leaves_above_the_floor() {
        for seed in 0..20 {
            let (plan, _) = run(2, 200, 16, 5, seed);
            assert_eq!(plan.leaf_count(), 16);
            assert!(plan.leaf_samples.iter().all(|&s| s >= 5));
            assert_eq!(plan.leaf_samples.iter().sum::<usize>(), 200);
        }
    }

    #[test]
    fn stops_early_when_nothing_splits() {
        let (plan, _) = run(2, 20, 8, 6, 3);
        assert!(plan.leaf_count() < 8);
        assert!(plan.leaf_samples.iter().all(|&s| s >= 6));
    }
}
