//! Domain vocabulary shared by every module: tuples, rectangles, queries and
//! the engine configuration.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{AqpError, Result};

/// A record with `d` predicate coordinates and one aggregate value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuple {
    pub id: u64,
    pub coords: Vec<f64>,
    pub value: f64,
}

impl Tuple {
    pub fn new(id: u64, coords: Vec<f64>, value: f64) -> Self {
        Self { id, coords, value }
    }

    pub fn dims(&self) -> usize {
        self.coords.len()
    }
}

/// Position of a rectangle relative to a query rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Disjoint,
    ContainedInQ,
    PartialOverlap,
}

/// Axis-aligned half-open box: a point `p` is inside iff `lo[j] <= p[j] < hi[j]`
/// for every `j`. Bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    #[serde(with = "bounds")]
    pub lo: Vec<f64>,
    #[serde(with = "bounds")]
    pub hi: Vec<f64>,
}

impl Rect {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(AqpError::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        if lo.is_empty() {
            return Err(AqpError::InvalidConfig("rectangle must have at least one dimension".into()));
        }
        for (dim, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if l.is_nan() || h.is_nan() || l > h {
                return Err(AqpError::InvalidRectangle { dim, lo: l, hi: h });
            }
        }
        Ok(Self { lo, hi })
    }

    /// The whole space, `(-inf, +inf)^d`.
    pub fn unbounded(d: usize) -> Self {
        Self { lo: vec![f64::NEG_INFINITY; d], hi: vec![f64::INFINITY; d] }
    }

    /// Smallest half-open box containing exactly the point `p`.
    pub fn point(p: &[f64]) -> Self {
        Self { lo: p.to_vec(), hi: p.iter().map(|x| x.next_up()).collect() }
    }

    /// Smallest half-open box containing every point of the closed box `[lo, hi]`.
    pub fn closed(lo: Vec<f64>, hi: &[f64]) -> Self {
        Self { lo, hi: hi.iter().map(|x| x.next_up()).collect() }
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.iter().zip(&self.hi).any(|(l, h)| l >= h)
    }

    pub fn contains_point(&self, p: &[f64]) -> bool {
        debug_assert_eq!(p.len(), self.dims());
        self.lo.iter().zip(&self.hi).zip(p).all(|((l, h), x)| l <= x && x < h)
    }

    pub fn contains(&self, t: &Tuple) -> Result<bool> {
        self.check_dims(t.dims())?;
        Ok(self.contains_point(&t.coords))
    }

    /// True iff `self` is a subset of `outer`. Empty boxes are inside everything.
    pub fn is_inside(&self, outer: &Rect) -> bool {
        if self.is_empty() {
            return true;
        }
        self.lo.iter().zip(&outer.lo).all(|(a, b)| a >= b)
            && self.hi.iter().zip(&outer.hi).all(|(a, b)| a <= b)
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        (0..self.dims()).all(|j| self.lo[j].max(other.lo[j]) < self.hi[j].min(other.hi[j]))
    }

    pub fn intersection(&self, other: &Rect) -> Rect {
        let lo = self.lo.iter().zip(&other.lo).map(|(a, b)| a.max(*b)).collect::<Vec<_>>();
        let hi = self
            .hi
            .iter()
            .zip(&other.hi)
            .zip(&lo)
            .map(|((a, b), l)| a.min(*b).max(*l))
            .collect();
        Rect { lo, hi }
    }

    /// Classifies `self` relative to the query rectangle `q`.
    pub fn relation(&self, q: &Rect) -> Result<Relation> {
        self.check_dims(q.dims())?;
        Ok(self.relation_unchecked(q))
    }

    pub(crate) fn relation_unchecked(&self, q: &Rect) -> Relation {
        if !self.intersects(q) {
            Relation::Disjoint
        } else if self.is_inside(q) {
            Relation::ContainedInQ
        } else {
            Relation::PartialOverlap
        }
    }

    /// Splits along `dim` at `value`: left is `x < value`, right is `x >= value`.
    pub fn split(&self, dim: usize, value: f64) -> (Rect, Rect) {
        let mut left = self.clone();
        let mut right = self.clone();
        left.hi[dim] = value;
        right.lo[dim] = value;
        (left, right)
    }

    pub(crate) fn check_dims(&self, got: usize) -> Result<()> {
        if got != self.dims() {
            Err(AqpError::DimensionMismatch { expected: self.dims(), got })
        } else {
            Ok(())
        }
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (j, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if j > 0 {
                write!(f, "x")?;
            }
            write!(f, "[{l}, {h})")?;
        }
        Ok(())
    }
}

pub fn contains(r: &Rect, t: &Tuple) -> Result<bool> {
    r.contains(t)
}

pub fn relation(r: &Rect, q: &Rect) -> Result<Relation> {
    r.relation(q)
}

/// Total order on `(coordinate, id)` pairs used by every sorted sample structure.
pub(crate) fn key_cmp(a: (f64, u64), b: (f64, u64)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggKind {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl AggKind {
    pub const ALL: [AggKind; 5] = [AggKind::Count, AggKind::Sum, AggKind::Avg, AggKind::Min, AggKind::Max];

    pub fn name(self) -> &'static str {
        match self {
            AggKind::Count => "count",
            AggKind::Sum => "sum",
            AggKind::Avg => "avg",
            AggKind::Min => "min",
            AggKind::Max => "max",
        }
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AggKind {
    type Err = AqpError;

    fn from_str(s: &str) -> Result<Self> {
        AggKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| AqpError::UnknownStrategy { kind: "aggregate", name: s.to_string() })
    }
}

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub kind: AggKind,
    pub predicate: Rect,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    DEFAULT_CONFIDENCE
}

impl Query {
    pub fn new(kind: AggKind, predicate: Rect) -> Self {
        Self { kind, predicate, confidence: DEFAULT_CONFIDENCE }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    /// Two-sided normal critical value for the requested confidence.
    pub fn z(&self) -> Result<f64> {
        z_for_confidence(self.confidence)
    }
}

pub fn z_for_confidence(confidence: f64) -> Result<f64> {
    use statrs::distribution::{ContinuousCDF, Normal};
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(AqpError::InvalidConfig(format!("confidence {confidence} not in (0,1)")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 + confidence / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRule {
    /// Cycle through the dimensions by depth.
    #[default]
    RoundRobin,
    /// Split the dimension with the widest normalized sample spread.
    LongestSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Repeated random-offset probes.
    #[default]
    Singleton,
    /// One scan over the log keeping a random subset.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepartitionMode {
    #[default]
    Full,
    Partial,
}

/// Engine-wide knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Number of predicate dimensions.
    pub d: usize,
    /// Leaf count of the partition tree.
    pub k: usize,
    /// Reservoir half-capacity; the pool targets `2m` tuples.
    pub m: usize,
    /// Sampling rate of the pool. `None` uses the live ratio `|S| / N`.
    pub alpha: Option<f64>,
    /// Fraction of the snapshot population drawn during catch-up.
    pub catchup_ratio: f64,
    /// Multiplicative drift tolerated before a re-partition is considered.
    pub beta: f64,
    /// Ratio of the geometric error grid used by the 1D partitioner.
    pub rho: f64,
    /// Minimum fraction of pool samples a valid AVG query holds.
    pub delta: f64,
    /// Normal critical value used for engine-level error reporting.
    pub z: f64,
    /// Capacity of each node's MIN/MAX heaps.
    pub heap_k: usize,
    /// Smallest nonzero |value|. Derived from the pool when absent.
    pub value_lo: Option<f64>,
    /// Largest |value|. Derived from the pool when absent.
    pub value_hi: Option<f64>,
    /// Manual re-partition every `tau` updates.
    pub tau: Option<u64>,
    /// Constant `c` of the per-leaf sample floor `c * (1/alpha) * ln m`.
    pub floor_c: f64,
    /// A leaf triggers a re-partition when its stratum drops below floor / slack.
    pub floor_slack: f64,
    /// Aggregate whose worst-case error the partitioner minimizes.
    pub focus: AggKind,
    /// Registered partitioner name, or `auto`.
    pub partitioner: String,
    pub split_rule: SplitRule,
    pub sampler: SamplerMode,
    pub repartition: RepartitionMode,
    /// Levels above the degraded leaf rebuilt by a partial re-partition; `None` searches.
    pub psi: Option<usize>,
    /// Evaluate re-partition triggers on pool updates.
    pub triggers: bool,
    /// Catch-up samples absorbed per applied event. `None` runs catch-up to completion
    /// right after each (re)build.
    pub catchup_interleave: Option<usize>,
    /// Updates to wait after a rejected candidate plan before computing another.
    pub candidate_cooldown: u64,
    /// Build the first real partitioning once this many tuples are live.
    /// `None` waits for the first query.
    pub init_after: Option<usize>,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            d: 1,
            k: 16,
            m: 500,
            alpha: None,
            catchup_ratio: 0.1,
            beta: 10.0,
            rho: 2.0,
            delta: 0.05,
            z: 1.96,
            heap_k: 32,
            value_lo: None,
            value_hi: None,
            tau: None,
            floor_c: 1.0,
            floor_slack: 4.0,
            focus: AggKind::Sum,
            partitioner: "auto".to_string(),
            split_rule: SplitRule::RoundRobin,
            sampler: SamplerMode::Singleton,
            repartition: RepartitionMode::Full,
            psi: None,
            triggers: true,
            catchup_interleave: None,
            candidate_cooldown: 256,
            init_after: None,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AqpError::InvalidConfig(msg));
        if self.d == 0 {
            return bad("d must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.m < self.k {
            return bad(format!("m = {} must be at least k = {}", self.m, self.k));
        }
        if !(self.beta > 1.0) {
            return bad(format!("beta = {} must exceed 1", self.beta));
        }
        if !(self.rho > 1.0) {
            return bad(format!("rho = {} must exceed 1", self.rho));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return bad(format!("delta = {} must lie in (0, 1/2)", self.delta));
        }
        if !(self.catchup_ratio > 0.0 && self.catchup_ratio <= 1.0) {
            return bad(format!("catchup_ratio = {} must lie in (0, 1]", self.catchup_ratio));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return bad(format!("alpha = {a} must lie in (0, 1]"));
            }
        }
        if let (Some(lo), Some(hi)) = (self.value_lo, self.value_hi) {
            if lo > hi {
                return bad(format!("value_lo = {lo} exceeds value_hi = {hi}"));
            }
        }
        if self.heap_k == 0 {
            return bad("heap_k must be at least 1".into());
        }
        if !(self.z > 0.0) {
            return bad("z must be positive".into());
        }
        if !(self.floor_c >= 0.0) || !(self.floor_slack >= 1.0) {
            return bad("floor_c must be >= 0 and floor_slack >= 1".into());
        }
        if !matches!(self.focus, AggKind::Count | AggKind::Sum | AggKind::Avg) {
            return bad(format!("focus must be count, sum or avg, not {}", self.focus));
        }
        Ok(())
    }

    /// Minimum stratum size a freshly built leaf must hold.
    pub fn sample_floor(&self, pool_size: usize, archive_size: usize) -> usize {
        sample_floor(self.floor_c, self.effective_alpha(pool_size, archive_size), pool_size)
    }

    /// `sample_floor` capped at half the average stratum, `pool / (2k)`, so
    /// that `k` leaves always fit in the pool.
    pub fn leaf_floor(&self, pool_size: usize, archive_size: usize) -> usize {
        self.sample_floor(pool_size, archive_size).min((pool_size / (2 * self.k)).max(1))
    }

    pub fn effective_alpha(&self, pool_size: usize, archive_size: usize) -> f64 {
        self.alpha.unwrap_or_else(|| {
            if archive_size == 0 {
                1.0
            } else {
                (pool_size as f64 / archive_size as f64).clamp(f64::MIN_POSITIVE, 1.0)
            }
        })
    }

    /// Smallest sample count an AVG query must hold: `ceil(delta * pool)`, at least 1.
    pub fn min_query_mass(&self, pool_size: usize) -> usize {
        ((self.delta * pool_size as f64).ceil() as usize).max(1)
    }
}

/// `max(1, ceil(c * (1/alpha) * ln m))`.
pub fn sample_floor(c: f64, alpha: f64, m: usize) -> usize {
    if m <= 1 {
        return 1;
    }
    let raw = c * (m as f64).ln() / alpha;
    (raw.ceil() as usize).max(1)
}

/// Serde helper for bound vectors: non-finite values round-trip as `"inf"` / `"-inf"`.
pub mod bounds {
    use serde::de::{self, Deserializer, SeqAccess, Visitor};
    use serde::ser::{SerializeSeq, Serializer};
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Bound {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            if x.is_finite() {
                seq.serialize_element(x)?;
            } else if *x > 0.0 {
                seq.serialize_element("inf")?;
            } else {
                seq.serialize_element("-inf")?;
            }
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Vec<f64>;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a list of numbers or \"inf\"/\"-inf\"")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Vec<f64>, A::Error> {
                let mut out = Vec::new();
                while let Some(b) = seq.next_element::<Bound>()? {
                    out.push(match b {
                        Bound::Num(x) => x,
                        Bound::Text(t) => match t.as_str() {
                            "inf" | "+inf" | "Infinity" => f64::INFINITY,
                            "-inf" | "-Infinity" => f64::NEG_INFINITY,
                            other => return Err(de::Error::custom(format!("bad bound `{other}`"))),
                        },
                    });
                }
                Ok(out)
            }
        }
        d.deserialize_seq(V)
    }
}
