use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::equal_depth::equal_mass_cuts;
use super::{PartitionPlan, PartitionRequest, Partitioner};
use crate::error::{AqpError, Result};
use crate::model::{AggKind, Rect};

/// Geometric candidate errors `rho^t` for `t_lo <= t <= t_hi`, plus zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorGrid {
    pub rho: f64,
    pub t_lo: i32,
    pub t_hi: i32,
}

impl ErrorGrid {
    /// Grid covering `[L / sqrt2, n * U]` for SUM/COUNT and
    /// `[L / (sqrt2 * n), sqrt(n) * U]` for AVG.
    pub fn new(kind: AggKind, rho: f64, value_lo: f64, value_hi: f64, n: usize) -> Self {
        let n = n.max(1) as f64;
        let (lo, hi) = match kind {
            AggKind::Avg => (value_lo / (2f64.sqrt() * n), n.sqrt() * value_hi),
            _ => (value_lo / 2f64.sqrt(), n * value_hi),
        };
        let t_lo = lo.log(rho).floor() as i32;
        let t_hi = (hi.log(rho).ceil() as i32).max(t_lo);
        Self { rho, t_lo, t_hi }
    }

    pub fn value(&self, t: i32) -> f64 {
        self.rho.powi(t)
    }

    pub fn len(&self) -> usize {
        (self.t_hi - self.t_lo + 2) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> Vec<f64> {
        std::iter::once(0.0).chain((self.t_lo..=self.t_hi).map(|t| self.value(t))).collect()
    }
}

/// Sorted view of the samples in the request region, with memoized bucket
/// errors. Buckets are runs `[s, j)` of sample positions; cuts sit only where
/// the coordinate changes.
struct Buckets<'r, 'a> {
    req: &'r mut PartitionRequest<'a>,
    xs: Vec<f64>,
    /// Valid cut positions `j` with `xs[j] > xs[j - 1]`.
    cands: Vec<usize>,
    cache: HashMap<(usize, usize), f64>,
}

impl<'r, 'a> Buckets<'r, 'a> {
    fn new(req: &'r mut PartitionRequest<'a>) -> Self {
        let mut xs: Vec<f64> = req.index.report(&req.region).iter().map(|t| t.coords[0]).collect();
        xs.sort_by(f64::total_cmp);
        let cands = (1..xs.len()).filter(|&j| xs[j] > xs[j - 1]).collect();
        Self { req, xs, cands, cache: HashMap::new() }
    }

    fn n(&self) -> usize {
        self.xs.len()
    }

    fn rect(&self, s: usize, j: usize) -> Rect {
        let mut r = self.req.region.clone();
        if s > 0 {
            r.lo[0] = self.xs[s];
        }
        if j < self.n() {
            r.hi[0] = self.xs[j];
        }
        r
    }

    fn err(&mut self, s: usize, j: usize) -> f64 {
        if let Some(&e) = self.cache.get(&(s, j)) {
            return e;
        }
        let r = self.rect(s, j);
        let e = self.req.oracle.evaluate(self.req.index, &r).error_sq().sqrt();
        self.cache.insert((s, j), e);
        e
    }

    /// Greedy maximal buckets of error at most `e`; cut positions on success.
    fn feasible(&mut self, e: f64) -> Option<Vec<usize>> {
        let n = self.n();
        let eta = self.req.floor.max(1);
        let mut s = 0;
        let mut cuts = Vec::new();
        for _ in 0..self.req.k {
            if self.err(s, n) <= e {
                return Some(cuts);
            }
            let lo = self.cands.partition_point(|&j| j < s + eta);
            let hi = self.cands.partition_point(|&j| j + eta <= n);
            if lo >= hi || self.err(s, self.cands[lo]) > e {
                return None;
            }
            // invariant: cands[a] feasible, cands[b] infeasible or past the end
            let (mut a, mut b) = (lo, hi);
            while b - a > 1 {
                let mid = (a + b) / 2;
                if self.err(s, self.cands[mid]) <= e {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            s = self.cands[a];
            cuts.push(s);
        }
        None
    }
}

/// Builds a plan from `req` whose every bucket has oracle error at most `e`,
/// or `None` when `k` buckets do not suffice.
pub fn feasible_1d(req: &mut PartitionRequest<'_>, e: f64) -> Option<PartitionPlan> {
    let mut b = Buckets::new(req);
    let cuts = b.feasible(e)?;
    let values: Vec<f64> = cuts.iter().map(|&j| b.xs[j]).collect();
    let mut plan = PartitionPlan::from_cuts(req.region.clone(), 0, &values);
    plan.partitioner = BinarySearch1d.name().into();
    plan.annotate(req.index, req.oracle);
    Some(plan)
}

/// Binary search over the error grid for the smallest value the greedy
/// bucketing can meet with `k` buckets.
#[derive(Debug, Default, Clone, Copy)]
pub struct BinarySearch1d;

impl BinarySearch1d {
    fn search(b: &mut Buckets<'_, '_>) -> Vec<usize> {
        if let Some(c) = b.feasible(0.0) {
            return c;
        }
        let kind = b.req.kind();
        let rho = b.req.rho;
        let n = b.n();
        let top = b.err(0, n);
        let abs: Vec<f64> = b.req.index.report(&b.req.region).iter().map(|t| t.value.abs()).collect();
        let lo_v = b.req.value_lo.unwrap_or_else(|| abs.iter().copied().filter(|a| *a > 0.0).fold(f64::INFINITY, f64::min));
        let hi_v = b.req.value_hi.unwrap_or_else(|| abs.iter().copied().fold(0.0, f64::max));
        let grid = if lo_v.is_finite() && lo_v > 0.0 {
            ErrorGrid::new(kind, rho, lo_v, hi_v.max(lo_v), n)
        } else {
            let t = top.log(rho).floor() as i32;
            ErrorGrid { rho, t_lo: t, t_hi: t }
        };
        // One bucket meets its own error, so the top is always feasible.
        let t_hi = grid.t_hi.max(top.log(rho).ceil() as i32);
        let mut t_lo = grid.t_lo.min(t_hi - 1);
        let mut step = 1;
        while t_lo > -1100 && b.feasible(grid.value(t_lo)).is_some() {
            t_lo -= step;
            step *= 2;
        }
        let (mut lo, mut hi) = (t_lo, t_hi);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if b.feasible(grid.value(mid)).is_some() {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        match b.feasible(grid.value(hi)) {
            Some(c) => Self::refine(b, grid.value(lo), grid.value(hi), c),
            None => {
                log::warn!("no feasible bucketing on the error grid; falling back to equal-mass buckets");
                let cuts = equal_mass_cuts(&b.xs, b.req.k);
                cuts.iter().map(|c| b.xs.partition_point(|x| x < c)).collect()
            }
        }
    }
}

const REFINE_STEPS: usize = 20;

/// Sample-index bounds `[s, e)` of the buckets cut at `cuts`.
fn spans(cuts: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(0);
    edges.extend_from_slice(cuts);
    edges.push(n);
    edges.windows(2).map(|w| (w[0], w[1])).collect()
}

impl BinarySearch1d {
    /// Bisects between an infeasible and a feasible error value. The grid
    /// step alone can leave most of the `k` buckets unused.
    fn refine(b: &mut Buckets<'_, '_>, mut bad: f64, mut good: f64, mut best: Vec<usize>) -> Vec<usize> {
        for _ in 0..REFINE_STEPS {
            let mid = 0.5 * (bad + good);
            if !(mid > bad && mid < good) {
                break;
            }
            match b.feasible(mid) {
                Some(c) => {
                    good = mid;
                    best = c;
                }
                None => bad = mid,
            }
        }
        best
    }
}

impl BinarySearch1d {
    /// Buckets left over once the max error is met go to the worst bucket
    /// that can still be split, halving it where the larger side is
    /// smallest. Error only shrinks under containment, so the max holds.
    fn spend_leftover(b: &mut Buckets<'_, '_>, mut cuts: Vec<usize>) -> Vec<usize> {
        let n = b.n();
        let eta = b.req.floor.max(1);
        let mut stuck = std::collections::HashSet::new();
        while cuts.len() + 1 < b.req.k {
            let mut worst: Option<(f64, usize, usize)> = None;
            for (s, e) in spans(&cuts, n) {
                if stuck.contains(&(s, e)) {
                    continue;
                }
                let err = b.err(s, e);
                if worst.is_none_or(|w| err > w.0) {
                    worst = Some((err, s, e));
                }
            }
            let Some((_, s, e)) = worst else { break };
            let lo = b.cands.partition_point(|&j| j < s + eta);
            let hi = b.cands.partition_point(|&j| j + eta <= e);
            if lo >= hi {
                stuck.insert((s, e));
                continue;
            }
            // left error grows with the cut, right error shrinks
            let (mut a, mut z) = (lo, hi - 1);
            while a < z {
                let mid = (a + z) / 2;
                if b.err(s, b.cands[mid]) < b.err(b.cands[mid], e) {
                    a = mid + 1;
                } else {
                    z = mid;
                }
            }
            let score = |b: &mut Buckets<'_, '_>, i: usize| b.err(s, b.cands[i]).max(b.err(b.cands[i], e));
            let mut pick = a;
            if a > lo && score(b, a - 1) < score(b, a) {
                pick = a - 1;
            }
            let j = b.cands[pick];
            let at = cuts.partition_point(|&c| c < j);
            cuts.insert(at, j);
        }
        cuts
    }
}

impl Partitioner for BinarySearch1d {
    fn name(&self) -> &'static str {
        "binary-search-1d"
    }

    fn partition(&self, req: &mut PartitionRequest<'_>) -> Result<PartitionPlan> {
        if req.region.dims() != 1 {
            return Err(AqpError::InvalidConfig(format!(
                "binary-search-1d needs one dimension, got {}",
                req.region.dims()
            )));
        }
        let n = req.samples();
        if n < req.k {
            return Err(AqpError::TooFewSamples { needed: req.k, have: n });
        }
        let values = {
            let mut b = Buckets::new(req);
            if b.req.kind() == AggKind::Count {
                equal_mass_cuts(&b.xs, b.req.k)
            } else {
                let cuts = Self::search(&mut b);
                let cuts = Self::spend_leftover(&mut b, cuts);
                cuts.iter().map(|&j| b.xs[j]).collect()
            }
        };
        let mut plan = PartitionPlan::from_cuts(req.region.clone(), 0, &values);
        plan.partitioner = self.name().into();
        plan.annotate(req.index, req.oracle);
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maxvar::{CountOracle, MaxVarIndex, SumOracle};
    use crate::model::{SplitRule, Tuple};

    fn index(values: &[f64]) -> MaxVarIndex {
        let ts: Vec<Tuple> = values.iter().enumerate().map(|(i, &a)| Tuple::new(i as u64, vec![i as f64], a)).collect();
        MaxVarIndex::build(1, 1, &ts).unwrap()
    }

    fn request<'a>(idx: &'a mut MaxVarIndex, oracle: &'a dyn crate::maxvar::MaxVarOracle, k: usize) -> PartitionRequest<'a> {
        PartitionRequest {
            index: idx,
            oracle,
            region: Rect::unbounded(1),
            k,
            floor: 1,
            rho: 2.0,
            value_lo: None,
            value_hi: None,
            split_rule: SplitRule::RoundRobin,
        }
    }

    #[test]
    fn infinite_error_is_one_bucket() {
        let mut idx = index(&[1.0, 5.0, 2.0, 8.0]);
        let mut req = request(&mut idx, &SumOracle, 1);
        assert_eq!(feasible_1d(&mut req, f64::INFINITY).unwrap().leaf_count(), 1);
    }

    #[test]
    fn zero_error_is_infeasible_for_varied_values() {
        let mut idx = index(&[1.0, 5.0, 2.0, 8.0, 3.0]);
        let mut req = request(&mut idx, &SumOracle, 3);
        assert!(feasible_1d(&mut req, 0.0).is_none());
    }

    #[test]
    fn constant_values_have_zero_error() {
        let mut idx = index(&[0.0; 12]);
        let mut req = request(&mut idx, &SumOracle, 3);
        let plan = BinarySearch1d.partition(&mut req).unwrap();
        assert_eq!(plan.max_error, 0.0);
    }

    #[test]
    fn outlier_does_not_starve_the_other_buckets() {
        // One huge value pins the max error; the remaining buckets still get used.
        let mut values = vec![1.0; 60];
        values[30] = 1e4;
        let mut idx = index(&values);
        let mut req = request(&mut idx, &SumOracle, 6);
        let plan = BinarySearch1d.partition(&mut req).unwrap();
        assert_eq!(plan.leaf_count(), 6);
        let req = request(&mut idx, &SumOracle, 6);
        let plain = BinarySearch1d.partition(&mut PartitionRequest { k: 2, ..req }).unwrap();
        assert!(plan.max_error <= plain.max_error * (1.0 + 1e-12));
    }

    #[test]
    fn count_buckets_are_equal() {
        let mut idx = index(&[1.0; 12]);
        let mut req = request(&mut idx, &CountOracle, 3);
        let plan = BinarySearch1d.partition(&mut req).unwrap();
        assert_eq!(plan.leaf_samples, vec![4, 4, 4]);
    }

    #[test]
    fn too_few_samples() {
        let mut idx = index(&[1.0, 2.0]);
        let mut req = request(&mut idx, &SumOracle, 3);
        assert!(BinarySearch1d.partition(&mut req).is_err());
    }

    #[test]
    fn grid_is_geometric() {
        let g = ErrorGrid::new(AggKind::Sum, 2.0, 1.0, 8.0, 100);
        let pts = g.points();
        assert_eq!(pts[0], 0.0);
        for w in pts[1..].windows(2) {
            assert_eq!(w[1] / w[0], 2.0);
        }
        assert!(pts[1] <= 1.0 / 2f64.sqrt() && *pts.last().unwrap() >= 800.0);
        assert_eq!(g.len(), pts.len());
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let values = [3.0, 9.0, 1.0, 4.0, 4.0, 7.0, 2.0, 8.0, 6.0, 5.0, 0.5, 12.0];
        let mut a = index(&values);
        let ts: Vec<Tuple> = values.iter().enumerate().rev().map(|(i, &v)| Tuple::new(i as u64, vec![i as f64], v)).collect();
        let mut b = MaxVarIndex::new(1, 1);
        for t in &ts {
            b.insert(t).unwrap();
        }
        let pa = BinarySearch1d.partition(&mut request(&mut a, &SumOracle, 3)).unwrap();
        let pb = BinarySearch1d.partition(&mut request(&mut b, &SumOracle, 3)).unwrap();
        assert_eq!(pa, pb);
    }
}
