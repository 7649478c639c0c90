//! Synthetic datasets and query workloads over the domain `[0, 100)^d`.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use aqp_core::{AggKind, Query, Rect, Tuple};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::stream::Op;

pub const DOMAIN: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Uniform coordinates, values uniform in `[1, 10)`.
    Uniform,
    /// Clustered coordinates, log-normal values that are 20x larger in one cluster.
    Skewed,
    /// Uniform tuples inserted in ascending coordinate order.
    SortedArrival,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Uniform, Profile::Skewed, Profile::SortedArrival];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Uniform => "uniform",
            Profile::Skewed => "skewed",
            Profile::SortedArrival => "sorted-arrival",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match Profile::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(s)) {
            Some(p) => Ok(p),
            None => bail!("unknown profile {s:?}; expected uniform, skewed or sorted-arrival"),
        }
    }
}

const CENTERS: [f64; 4] = [15.0, 40.0, 62.0, 85.0];

fn skewed_tuple(rng: &mut ChaCha8Rng, id: u64, d: usize) -> Tuple {
    let spread = Normal::new(0.0, 3.0).expect("valid normal");
    let tail = LogNormal::new(0.0, 1.0).expect("valid lognormal");
    let clustered = rng.random_bool(0.7);
    let c = rng.random_range(0..CENTERS.len());
    let coords: Vec<f64> = (0..d)
        .map(|_| {
            if clustered {
                (CENTERS[c] + spread.sample(rng)).clamp(0.0, DOMAIN.next_down())
            } else {
                rng.random_range(0.0..DOMAIN)
            }
        })
        .collect();
    let boost = if clustered && c == 1 { 20.0 } else { 1.0 };
    Tuple::new(id, coords, boost * tail.sample(rng))
}

/// `n` tuples with ids `0..n` in arrival order.
pub fn generate_tuples(seed: u64, profile: Profile, n: usize, d: usize) -> Vec<Tuple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Tuple> = (0..n as u64)
        .map(|id| match profile {
            Profile::Skewed => skewed_tuple(&mut rng, id, d),
            _ => Tuple::new(id, (0..d).map(|_| rng.random_range(0.0..DOMAIN)).collect(), rng.random_range(1.0..10.0)),
        })
        .collect();
    if profile == Profile::SortedArrival {
        out.sort_by(|a, b| a.coords.iter().zip(&b.coords).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        for (i, t) in out.iter_mut().enumerate() {
            t.id = i as u64;
        }
    }
    out
}

/// Insert stream for `generate_tuples`; with `delete_frac > 0` a random
/// earlier tuple is deleted after an insert with that probability.
pub fn generate_dataset(seed: u64, profile: Profile, n: usize, d: usize, delete_frac: f64) -> Vec<Op> {
    let tuples = generate_tuples(seed, profile, n, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut live: Vec<u64> = Vec::with_capacity(n);
    let mut ops = Vec::with_capacity(n);
    for t in tuples {
        live.push(t.id);
        ops.push(Op::Insert(t));
        if delete_frac > 0.0 && live.len() > 1 && rng.random_bool(delete_frac.min(1.0)) {
            let id = live.swap_remove(rng.random_range(0..live.len()));
            ops.push(Op::Delete { id });
        }
    }
    ops
}

/// `n` random rectangles with corners uniform over the bounding box of
/// `tuples`, kinds cycling COUNT, SUM, AVG.
pub fn generate_workload(seed: u64, tuples: &[Tuple], n: usize, d: usize) -> Result<Vec<Query>> {
    if tuples.is_empty() {
        bail!("cannot draw queries over an empty archive");
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for t in tuples {
        if t.coords.len() != d {
            bail!("tuple {} has {} coordinates, expected {d}", t.id, t.coords.len());
        }
        for j in 0..d {
            lo[j] = lo[j].min(t.coords[j]);
            hi[j] = hi[j].max(t.coords[j]);
        }
    }
    workload_in(seed, &lo, &hi, n)
}

/// `n` random rectangles with corners uniform in the box `[lo, hi]`.
pub fn workload_in(seed: u64, lo: &[f64], hi: &[f64], n: usize) -> Result<Vec<Query>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [AggKind::Count, AggKind::Sum, AggKind::Avg];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = Vec::with_capacity(lo.len());
        let mut b = Vec::with_capacity(lo.len());
        for (&l, &h) in lo.iter().zip(hi) {
            let (x, y) = if h > l { (rng.random_range(l..=h), rng.random_range(l..=h)) } else { (l, h) };
            a.push(x.min(y));
            b.push(x.max(y).next_up());
        }
        out.push(Query::new(kinds[i % kinds.len()], Rect::new(a, b)?));
    }
    Ok(out)
}

/// Queries of one kind, for experiments that score a single aggregate.
pub fn generate_kind_workload(seed: u64, tuples: &[Tuple], n: usize, d: usize, kind: AggKind) -> Result<Vec<Query>> {
    let mut qs = generate_workload(seed, tuples, n, d)?;
    qs.iter_mut().for_each(|q| q.kind = kind);
    Ok(qs)
}
