//! Max-variance oracles: given a rectangle `R`, find a sub-query inside it
//! whose sample-estimate variance is close to the largest possible.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Agg, MaxVarIndex};
use crate::error::{AqpError, Result};
use crate::model::{AggKind, Rect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxVarResult {
    pub kind: AggKind,
    /// A query rectangle inside `R` attaining `variance`.
    pub witness: Rect,
    /// `m_u * sum_q a^2 - (sum_q a)^2` for COUNT/SUM (with `a = 1` for COUNT);
    /// that bracket divided by `m_u * c^2` for AVG.
    pub variance: f64,
    /// Guaranteed ratio between the true maximum and `variance`.
    pub gamma: f64,
    /// Samples inside `R`.
    pub samples: usize,
    /// Samples inside the witness.
    pub witness_samples: usize,
}

impl MaxVarResult {
    pub fn empty(kind: AggKind, r: &Rect, samples: usize, gamma: f64) -> Self {
        Self { kind, witness: r.clone(), variance: 0.0, gamma, samples, witness_samples: 0 }
    }

    /// Squared in-bucket error up to the sampling-rate factor shared by every
    /// bucket; comparable across buckets of different sizes.
    pub fn error_sq(&self) -> f64 {
        match self.kind {
            AggKind::Avg => self.variance,
            _ if self.samples == 0 => 0.0,
            _ => self.variance / self.samples as f64,
        }
    }
}

/// In-bucket variance bracket of a sub-query with aggregates `q` inside a
/// bucket holding `m_u` samples.
pub fn bracket(kind: AggKind, m_u: usize, q: Agg) -> f64 {
    let m = m_u as f64;
    let v = match kind {
        AggKind::Count => {
            let c = q.count as f64;
            m * c - c * c
        }
        AggKind::Avg => {
            if q.count == 0 {
                return 0.0;
            }
            let c = q.count as f64;
            (m * q.sumsq - q.sum * q.sum) / (m * c * c)
        }
        _ => m * q.sumsq - q.sum * q.sum,
    };
    v.max(0.0)
}

pub trait MaxVarOracle: Send + Sync {
    fn name(&self) -> &'static str;
    fn kind(&self) -> AggKind;
    fn gamma(&self, d: usize, m: usize) -> f64;

    /// Approximate maximum-variance sub-query of `r`. Fails when `r` holds too
    /// few samples for the guarantee to apply.
    fn max_variance(&self, index: &mut MaxVarIndex, r: &Rect) -> Result<MaxVarResult>;

    /// Like `max_variance`, but degrades to a best-effort answer on small inputs.
    fn evaluate(&self, index: &mut MaxVarIndex, r: &Rect) -> MaxVarResult {
        match self.max_variance(index, r) {
            Ok(res) => res,
            Err(_) => {
                let n = index.aggregate(r).count;
                MaxVarResult::empty(self.kind(), r, n, self.gamma(index.dims(), index.len()))
            }
        }
    }
}

/// Splits `r` along `dim` so the left part holds the `rank` smallest samples.
fn split_at_rank(index: &MaxVarIndex, r: &Rect, dim: usize, rank: usize) -> Option<(Rect, Rect)> {
    let v = index.select(r, dim, rank)?;
    Some(r.split(dim, v))
}

/// The COUNT maximum is attained by any sub-query holding half the samples.
#[derive(Debug, Default, Clone, Copy)]
pub struct CountOracle;

impl MaxVarOracle for CountOracle {
    fn name(&self) -> &'static str {
        "count"
    }

    fn kind(&self) -> AggKind {
        AggKind::Count
    }

    fn gamma(&self, _d: usize, _m: usize) -> f64 {
        1.0
    }

    fn max_variance(&self, index: &mut MaxVarIndex, r: &Rect) -> Result<MaxVarResult> {
        let n = index.aggregate(r).count;
        if n < 2 {
            return Err(AqpError::TooFewSamples { needed: 2, have: n });
        }
        let half = n / 2;
        let mut best: Option<(Rect, Agg)> = None;
        for dim in 0..index.dims() {
            let Some((left, _)) = split_at_rank(index, r, dim, half) else { continue };
            let a = index.aggregate(&left);
            let better = best.as_ref().is_none_or(|(_, b)| bracket(AggKind::Count, n, a) > bracket(AggKind::Count, n, *b));
            if better {
                best = Some((left, a));
            }
            if a.count == half {
                break;
            }
        }
        let (witness, a) = best.expect("n >= 2 leaves a split");
        Ok(MaxVarResult {
            kind: AggKind::Count,
            variance: bracket(AggKind::Count, n, a),
            witness,
            gamma: 1.0,
            samples: n,
            witness_samples: a.count,
        })
    }
}

/// Median split into equal halves; the heavier half (by sum of squares)
/// carries at least a quarter of the maximum variance. Both median placements
/// and every dimension are tried and the best half kept.
#[derive(Debug, Default, Clone, Copy)]
pub struct SumOracle;

impl MaxVarOracle for SumOracle {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn kind(&self) -> AggKind {
        AggKind::Sum
    }

    fn gamma(&self, _d: usize, _m: usize) -> f64 {
        4.0
    }

    fn max_variance(&self, index: &mut MaxVarIndex, r: &Rect) -> Result<MaxVarResult> {
        let total = index.aggregate(r);
        let n = total.count;
        if n < 2 {
            return Err(AqpError::TooFewSamples { needed: 2, have: n });
        }
        let mut best: Option<(Rect, Agg, f64)> = None;
        let ranks = if n % 2 == 0 { vec![n / 2] } else { vec![n / 2, n / 2 + 1] };
        for dim in 0..index.dims() {
            for &rank in &ranks {
                let Some((left, right)) = split_at_rank(index, r, dim, rank) else { continue };
                let la = index.aggregate(&left);
                let ra = Agg { count: n - la.count, sum: total.sum - la.sum, sumsq: total.sumsq - la.sumsq };
                for (rect, a) in [(left, la), (right, ra)] {
                    let v = bracket(AggKind::Sum, n, a);
                    if best.as_ref().is_none_or(|b| v > b.2) {
                        best = Some((rect, a, v));
                    }
                }
            }
        }
        let (witness, a, variance) = best.expect("n >= 2 leaves a split");
        Ok(MaxVarResult { kind: AggKind::Sum, witness, variance, gamma: 4.0, samples: n, witness_samples: a.count })
    }
}

/// Heaviest stored rectangle inside `R`, grown until it holds exactly the
/// minimum query mass.
#[derive(Debug, Default, Clone, Copy)]
pub struct AvgOracle;

impl AvgOracle {
    /// Widens `q` inside `r` one side at a time, dimensions in round-robin
    /// order, stopping as soon as it holds `mass` samples.
    fn expand(index: &MaxVarIndex, r: &Rect, mut q: Rect, mass: usize) -> Rect {
        for dim in 0..index.dims() {
            if index.aggregate(&q).count >= mass {
                break;
            }
            let xs = index.sorted_coords(dim);
            // upper side: smallest bound in (q.hi, r.hi] reaching the mass
            let a = xs.partition_point(|x| *x < q.hi[dim]);
            let b = xs.partition_point(|x| *x < r.hi[dim]);
            let (mut lo, mut hi) = (a, b);
            let mut probe = q.clone();
            while lo < hi {
                let mid = (lo + hi) / 2;
                probe.hi[dim] = xs[mid].next_up().min(r.hi[dim]);
                if index.aggregate(&probe).count >= mass {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            q.hi[dim] = if lo < b { xs[lo].next_up().min(r.hi[dim]) } else { r.hi[dim] };
            if index.aggregate(&q).count >= mass {
                break;
            }
            // lower side: largest bound in [r.lo, q.lo) reaching the mass
            let a = xs.partition_point(|x| *x < r.lo[dim]);
            let b = xs.partition_point(|x| *x < q.lo[dim]);
            let (mut lo, mut hi) = (a, b);
            let mut probe = q.clone();
            while lo < hi {
                let mid = (lo + hi) / 2;
                probe.lo[dim] = xs[mid];
                if index.aggregate(&probe).count >= mass {
                    lo = mid + 1;
                } else {
                    hi = mid;
                }
            }
            q.lo[dim] = if lo > a { xs[lo - 1] } else { r.lo[dim] };
        }
        q
    }

    /// Exact maximum over runs of consecutive samples, for short 1D buckets.
    fn exact_1d(index: &MaxVarIndex, r: &Rect, mass: usize, gamma: f64) -> MaxVarResult {
        let (keys, values) = index.windows.values_in(r.lo[0], r.hi[0]);
        let n = values.len();
        let mut best = MaxVarResult::empty(AggKind::Avg, r, n, gamma);
        let mut p1 = vec![0.0; n + 1];
        let mut p2 = vec![0.0; n + 1];
        for i in 0..n {
            p1[i + 1] = p1[i] + values[i];
            p2[i + 1] = p2[i] + values[i] * values[i];
        }
        for i in 0..n {
            for j in (i + mass.max(1))..=n {
                let a = Agg { count: j - i, sum: p1[j] - p1[i], sumsq: p2[j] - p2[i] };
                let v = bracket(AggKind::Avg, n, a);
                if v > best.variance {
                    best.variance = v;
                    best.witness = Rect::closed(vec![keys[i].0], &[keys[j - 1].0]);
                    best.witness_samples = j - i;
                }
            }
        }
        best
    }
}

impl MaxVarOracle for AvgOracle {
    fn name(&self) -> &'static str {
        "avg"
    }

    fn kind(&self) -> AggKind {
        AggKind::Avg
    }

    fn gamma(&self, d: usize, m: usize) -> f64 {
        if d == 1 {
            4.0
        } else {
            4.0 * (m.max(2) as f64).log2().powi(d as i32 + 1)
        }
    }

    fn max_variance(&self, index: &mut MaxVarIndex, r: &Rect) -> Result<MaxVarResult> {
        let total = index.aggregate(r);
        let n = total.count;
        let mass = index.mass();
        if n <= 2 * mass {
            return Err(AqpError::TooFewSamples { needed: 2 * mass + 1, have: n });
        }
        let gamma = self.gamma(index.dims(), index.len());
        let (seed, _) = index.heaviest_inside(r).expect("a bucket above twice the mass holds a stored rectangle");
        let witness = Self::expand(index, r, seed.intersection(r), mass);
        let a = index.aggregate(&witness);
        Ok(MaxVarResult {
            kind: AggKind::Avg,
            witness,
            variance: bracket(AggKind::Avg, n, a),
            gamma,
            samples: n,
            witness_samples: a.count,
        })
    }

    fn evaluate(&self, index: &mut MaxVarIndex, r: &Rect) -> MaxVarResult {
        match self.max_variance(index, r) {
            Ok(res) => res,
            Err(_) => {
                let gamma = self.gamma(index.dims(), index.len());
                let mass = index.mass();
                if index.dims() == 1 {
                    return Self::exact_1d(index, r, mass, gamma);
                }
                let a = index.aggregate(r);
                let mut res = MaxVarResult::empty(AggKind::Avg, r, a.count, gamma);
                if a.count >= mass {
                    res.variance = bracket(AggKind::Avg, a.count, a);
                    res.witness_samples = a.count;
                }
                res
            }
        }
    }
}

/// Scans every sub-rectangle whose faces pass through sample coordinates.
/// Exponential in `d`; meant for small buckets and for tests.
#[derive(Debug, Clone, Copy)]
pub struct Exhaustive {
    pub kind: AggKind,
    /// Refuse buckets larger than this.
    pub limit: usize,
}

impl Exhaustive {
    pub fn new(kind: AggKind) -> Self {
        Self { kind, limit: 64 }
    }
}

impl MaxVarOracle for Exhaustive {
    fn name(&self) -> &'static str {
        match self.kind {
            AggKind::Count => "exhaustive-count",
            AggKind::Avg => "exhaustive-avg",
            _ => "exhaustive-sum",
        }
    }

    fn kind(&self) -> AggKind {
        self.kind
    }

    fn gamma(&self, _d: usize, _m: usize) -> f64 {
        1.0
    }

    fn max_variance(&self, index: &mut MaxVarIndex, r: &Rect) -> Result<MaxVarResult> {
        let pts = index.report(r);
        let n = pts.len();
        if n > self.limit {
            return Err(AqpError::Unanswerable(format!("{n} samples exceed the exhaustive limit {}", self.limit)));
        }
        let d = index.dims();
        let min_count = if self.kind == AggKind::Avg { index.mass() } else { 1 };
        let mut axes: Vec<Vec<f64>> = (0..d)
            .map(|j| {
                let mut v: Vec<f64> = pts.iter().map(|t| t.coords[j]).collect();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            })
            .collect();
        axes.iter_mut().for_each(|a| a.shrink_to_fit());
        let mut best = MaxVarResult::empty(self.kind, r, n, 1.0);
        if n == 0 {
            return Ok(best);
        }
        let mut lo_i = vec![0usize; d];
        let mut hi_i = vec![0usize; d];
        loop {
            let lo: Vec<f64> = (0..d).map(|j| axes[j][lo_i[j]]).collect();
            let hi: Vec<f64> = (0..d).map(|j| axes[j][hi_i[j]]).collect();
            let q = Rect::closed(lo, &hi);
            let a = pts.iter().filter(|t| q.contains_point(&t.coords)).fold(Agg::default(), |acc, t| acc.merge(Agg::of(t.value)));
            if a.count >= min_count {
                let v = bracket(self.kind, n, a);
                if v > best.variance {
                    best.variance = v;
                    best.witness = q;
                    best.witness_samples = a.count;
                }
            }
            // odometer over (lo, hi) index pairs with lo <= hi
            let mut j = 0;
            loop {
                if j == d {
                    return Ok(best);
                }
                if hi_i[j] + 1 < axes[j].len() {
                    hi_i[j] += 1;
                    break;
                }
                if lo_i[j] + 1 < axes[j].len() {
                    lo_i[j] += 1;
                    hi_i[j] = lo_i[j];
                    break;
                }
                lo_i[j] = 0;
                hi_i[j] = 0;
                j += 1;
            }
        }
    }
}

/// Oracles registered by name.
#[derive(Clone)]
pub struct OracleRegistry {
    by_name: BTreeMap<String, Arc<dyn MaxVarOracle>>,
}

impl Default for OracleRegistry {
    fn default() -> Self {
        let mut reg = OracleRegistry { by_name: BTreeMap::new() };
        reg.register(Arc::new(CountOracle));
        reg.register(Arc::new(SumOracle));
        reg.register(Arc::new(AvgOracle));
        for kind in [AggKind::Count, AggKind::Sum, AggKind::Avg] {
            reg.register(Arc::new(Exhaustive::new(kind)));
        }
        reg
    }
}

impl OracleRegistry {
    pub fn register(&mut self, oracle: Arc<dyn MaxVarOracle>) {
        self.by_name.insert(oracle.name().to_string(), oracle);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn MaxVarOracle>> {
        self.by_name
            .get(name)
            .cloned()
            .ok_or_else(|| AqpError::UnknownStrategy { kind: "oracle", name: name.to_string() })
    }

    /// The indexed oracle for an aggregate kind.
    pub fn for_kind(&self, kind: AggKind) -> Result<Arc<dyn MaxVarOracle>> {
        self.get(kind.name())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }
}
