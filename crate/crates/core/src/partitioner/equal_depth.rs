use super::{PartitionPlan, PartitionRequest, Partitioner};
use crate::error::Result;

/// Cut values splitting ascending `xs` into `k` runs of near-equal size.
/// Cuts fall only where the coordinate changes, so ties stay together and
/// fewer than `k - 1` cuts may come back.
pub fn equal_mass_cuts(xs: &[f64], k: usize) -> Vec<f64> {
    let n = xs.len();
    let cands: Vec<usize> = (1..n).filter(|&j| xs[j] > xs[j - 1]).collect();
    let mut cuts = Vec::new();
    let mut last = 0usize;
    for i in 1..k {
        if cands.is_empty() {
            break;
        }
        let target = (i * n + k / 2) / k;
        let p = cands.partition_point(|&j| j < target);
        let nearest = match (p.checked_sub(1).map(|q| cands[q]), cands.get(p).copied()) {
            (Some(a), Some(b)) => {
                if target - a <= b - target {
                    a
                } else {
                    b
                }
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!(),
        };
        if nearest > last {
            cuts.push(xs[nearest]);
            last = nearest;
        }
    }
    cuts
}

/// Equal-depth slabs along the first dimension.
#[derive(Debug, Default, Clone, Copy)]
pub struct EqualDepth;

impl Partitioner for EqualDepth {
    fn name(&self) -> &'static str {
        "equal-depth"
    }

    fn partition(&self, req: &mut PartitionRequest<'_>) -> Result<PartitionPlan> {
        let mut xs: Vec<f64> = req.index.report(&req.region).iter().map(|t| t.coords[0]).collect();
        xs.sort_by(f64::total_cmp);
        let cuts = equal_mass_cuts(&xs, req.k);
        let mut plan = PartitionPlan::from_cuts(req.region.clone(), 0, &cuts);
        plan.partitioner = self.name().into();
        plan.annotate(req.index, req.oracle);
        Ok(plan)
    }
}
