//! Query answering from the tree and the pool alone. Covered nodes contribute
//! catch-up estimates plus exact deltas; leaves cut by the query contribute
//! scaled stratum sums.
//!
//! This module never sees the archive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AqpError, Result};
use crate::maxvar::Agg;
use crate::model::{AggKind, Query, Rect, Tuple};
use crate::reservoir::Reservoir;
use crate::tree::{NodeId, PartitionTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Covered,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub node: NodeId,
    pub source: Source,
    pub estimate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub contributions: Vec<Contribution>,
    /// Partial leaves whose stratum held no samples.
    pub empty_strata: usize,
    /// Covered nodes estimated from the pool because their epoch had no draws.
    pub pool_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub estimate: f64,
    /// `z * sqrt(nu_c + nu_s)`; NaN (null in JSON) for MIN/MAX.
    #[serde(rename = "ci")]
    pub ci_half_width: f64,
    pub nu_c: f64,
    pub nu_s: f64,
    pub exact: bool,
    #[serde(skip)]
    pub diagnostics: Diagnostics,
}

impl QueryAnswer {
    pub fn interval(&self) -> (f64, f64) {
        (self.estimate - self.ci_half_width, self.estimate + self.ci_half_width)
    }

    pub fn covers(&self, truth: f64) -> bool {
        let (lo, hi) = self.interval();
        lo <= truth && truth <= hi
    }
}

/// What a partial leaf knows when scaling one of its samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafContext {
    /// Estimated leaf population.
    pub n_i: f64,
    /// Stratum size.
    pub m_i: usize,
    /// Stratum samples satisfying the predicate.
    pub qualifying: usize,
}

/// Per-sample scaling whose stratum mean is the leaf's contribution.
pub fn phi(kind: AggKind, t: &Tuple, q: &Rect, ctx: LeafContext) -> Result<f64> {
    let pred = if q.contains(t)? { 1.0 } else { 0.0 };
    match kind {
        AggKind::Count => Ok(pred * ctx.n_i),
        AggKind::Sum => Ok(pred * ctx.n_i * t.value),
        AggKind::Avg => {
            if ctx.qualifying == 0 {
                return Err(AqpError::EmptySelection);
            }
            Ok(pred * ctx.m_i as f64 / ctx.qualifying as f64 * t.value)
        }
        AggKind::Min | AggKind::Max => Err(AqpError::Unanswerable(format!("no scaling for {kind}"))),
    }
}

/// `n * sum_sq - sum^2`, clamped at zero.
fn spread(n: f64, sum: f64, sum_sq: f64) -> f64 {
    (n * sum_sq - sum * sum).max(0.0)
}

/// Sample variance term of one partial leaf for COUNT/SUM:
/// `N_i^2 / m_i^3 * [m_i * sum a^2 - (sum a)^2]` over the qualifying samples
/// (`a = 1` for COUNT).
pub fn nu_s_term(kind: AggKind, n_i: f64, m_i: usize, q: Agg) -> f64 {
    if m_i == 0 {
        return 0.0;
    }
    let m = m_i as f64;
    let (s1, s2) = match kind {
        AggKind::Count => (q.count as f64, q.count as f64),
        _ => (q.sum, q.sumsq),
    };
    n_i * n_i / (m * m * m) * spread(m, s1, s2)
}

/// Sample variance term of one partial leaf for AVG with weight `w_i`:
/// `w_i^2 / (m_i c^2) * [m_i * sum a^2 - (sum a)^2]`, `c` qualifying samples.
pub fn nu_s_avg_term(w_i: f64, m_i: usize, q: Agg) -> f64 {
    if m_i == 0 || q.count == 0 {
        return 0.0;
    }
    let (m, c) = (m_i as f64, q.count as f64);
    w_i * w_i / (m * c * c) * spread(m, q.sum, q.sumsq)
}

/// Catch-up variance term of one covered node, `N_i^2 / h_i^3 * [h_i * sum a^2 - (sum a)^2]`,
/// with `w_i = 1` for COUNT/SUM or `w_i^2 / h_i^3 * [...]` for AVG (pass `scale = w_i`).
pub fn nu_c_term(scale: f64, h_i: u64, h_sum: f64, h_sumsq: f64) -> f64 {
    if h_i == 0 {
        return 0.0;
    }
    let h = h_i as f64;
    scale * scale / (h * h * h) * spread(h, h_sum, h_sumsq)
}

/// Catch-up variance of the estimate `(n0 / h) * sum_{t in H} b(t)` where
/// `g1 = sum b` and `g2 = sum b^2` over the draws that fall in the covered
/// nodes, and `h` counts every draw of the epoch.
pub fn nu_c_pooled(n0: f64, h: u64, g1: f64, g2: f64) -> f64 {
    nu_c_term(n0, h, g1, g2)
}

/// Running sums of a linear estimate `sum_i (scale) * sum b(t)`.
#[derive(Default)]
struct Linear {
    estimate: f64,
    nu_c: f64,
    nu_s: f64,
    exact: bool,
    diag: Diagnostics,
}

/// `b(t)` aggregated from count/sum/sumsq: COUNT uses 1, SUM uses `a`,
/// and the AVG residual pass uses `a - r`.
#[derive(Clone, Copy)]
enum Term {
    One,
    Value,
    Residual(f64),
}

impl Term {
    /// (sum b, sum b^2) from raw (count, sum a, sum a^2).
    fn sums(self, count: f64, sum: f64, sumsq: f64) -> (f64, f64) {
        match self {
            Term::One => (count, count),
            Term::Value => (sum, sumsq),
            Term::Residual(r) => (sum - r * count, sumsq - 2.0 * r * sum + r * r * count),
        }
    }
}

fn linear(term: Term, q: &Rect, tree: &PartitionTree, pool: &Reservoir, covered: &[NodeId], partial: &[NodeId]) -> Linear {
    let mut out = Linear { exact: partial.is_empty(), ..Default::default() };
    let s = pool.len() as f64;
    let n = pool.archive_size() as f64;
    // per epoch: (n0, h, g1, g2); key usize::MAX is the pool fallback
    let mut groups: BTreeMap<usize, (f64, u64, f64, f64)> = BTreeMap::new();
    for &id in covered {
        let node = tree.node(id);
        let st = &node.stats;
        let epoch = tree.epoch(node.epoch);
        let (dc, ds) = (st.net_count() as f64, st.net_sum());
        let net = term.sums(dc, ds, 0.0).0;
        let est = if epoch.n0 == 0 {
            net
        } else if epoch.h > 0 {
            out.exact = false;
            let (g1, g2) = term.sums(st.h_i as f64, st.h_sum.value(), st.h_sumsq.value());
            let g = groups.entry(node.epoch).or_insert((epoch.n0 as f64, epoch.h, 0.0, 0.0));
            g.2 += g1;
            g.3 += g2;
            epoch.n0 as f64 / epoch.h as f64 * g1 + net
        } else {
            out.exact = false;
            out.diag.pool_fallbacks += 1;
            if s == 0.0 {
                0.0
            } else {
                let a = pool.stratum_agg(&node.rect);
                let (g1, g2) = term.sums(a.count as f64, a.sum, a.sumsq);
                let g = groups.entry(usize::MAX).or_insert((n, pool.len() as u64, 0.0, 0.0));
                g.2 += g1;
                g.3 += g2;
                n / s * g1
            }
        };
        out.estimate += est;
        out.diag.contributions.push(Contribution { node: id, source: Source::Covered, estimate: est });
    }
    for &id in partial {
        let node = tree.node(id);
        let m_i = pool.stratum_agg(&node.rect).count;
        if m_i == 0 {
            out.diag.empty_strata += 1;
            out.diag.contributions.push(Contribution { node: id, source: Source::Partial, estimate: 0.0 });
            continue;
        }
        let n_i = tree
            .estimated_population(id)
            .unwrap_or_else(|| if s > 0.0 { m_i as f64 / s * n } else { 0.0 })
            .max(0.0);
        let a = pool.stratum_agg(&node.rect.intersection(q));
        let (b1, b2) = term.sums(a.count as f64, a.sum, a.sumsq);
        let est = n_i / m_i as f64 * b1;
        // N_i itself comes from catch-up draws; each draw in the leaf carries
        // the stratum mean b1 / m_i, so it joins its epoch's catch-up group.
        let epoch = tree.epoch(node.epoch);
        if epoch.n0 > 0 && epoch.h > 0 {
            let (h_i, p) = (node.stats.h_i as f64, b1 / m_i as f64);
            let g = groups.entry(node.epoch).or_insert((epoch.n0 as f64, epoch.h, 0.0, 0.0));
            g.2 += h_i * p;
            g.3 += h_i * p * p;
        }
        out.estimate += est;
        out.nu_s += nu_s_term(AggKind::Sum, n_i, m_i, Agg { count: a.count, sum: b1, sumsq: b2 });
        out.diag.contributions.push(Contribution { node: id, source: Source::Partial, estimate: est });
    }
    for (n0, h, g1, g2) in groups.into_values() {
        out.nu_c += nu_c_pooled(n0, h, g1, g2);
    }
    out
}

/// Answers `q` from the synopsis.
pub fn answer(q: &Query, tree: &PartitionTree, pool: &Reservoir) -> Result<QueryAnswer> {
    let z = q.z()?;
    let f = tree.frontier(&q.predicate)?;
    let finish = |est: f64, nu_c: f64, nu_s: f64, exact: bool, diag: Diagnostics| QueryAnswer {
        estimate: est,
        ci_half_width: if exact { 0.0 } else { z * (nu_c + nu_s).sqrt() },
        nu_c: if exact { 0.0 } else { nu_c },
        nu_s: if exact { 0.0 } else { nu_s },
        exact,
        diagnostics: diag,
    };
    match q.kind {
        AggKind::Count | AggKind::Sum => {
            let term = if q.kind == AggKind::Count { Term::One } else { Term::Value };
            let l = linear(term, &q.predicate, tree, pool, &f.covered, &f.partial);
            Ok(finish(l.estimate, l.nu_c, l.nu_s, l.exact, l.diag))
        }
        AggKind::Avg => {
            let c = linear(Term::One, &q.predicate, tree, pool, &f.covered, &f.partial);
            let s = linear(Term::Value, &q.predicate, tree, pool, &f.covered, &f.partial);
            if !(c.estimate > 0.0) {
                return Err(AqpError::Unanswerable("no estimated population satisfies the predicate".into()));
            }
            let r = s.estimate / c.estimate;
            // delta method: Var(S/C) ~ Var(S - rC) / C^2
            let res = linear(Term::Residual(r), &q.predicate, tree, pool, &f.covered, &f.partial);
            let c2 = c.estimate * c.estimate;
            Ok(finish(r, res.nu_c / c2, res.nu_s / c2, c.exact && s.exact, s.diag))
        }
        AggKind::Min | AggKind::Max => extreme(q, tree, pool, &f.covered, &f.partial),
    }
}

fn extreme(q: &Query, tree: &PartitionTree, pool: &Reservoir, covered: &[NodeId], partial: &[NodeId]) -> Result<QueryAnswer> {
    let want_max = q.kind == AggKind::Max;
    let better = |a: f64, b: Option<f64>| b.is_none_or(|b| if want_max { a > b } else { a < b });
    let mut best: Option<f64> = None;
    let mut exact = true;
    let mut diag = Diagnostics::default();
    for &id in covered {
        let node = tree.node(id);
        let heap = if want_max { &node.stats.topk } else { &node.stats.botk };
        let node_exact = tree.is_exact(id) && !(heap.is_empty() && node.stats.net_count() > 0);
        exact &= node_exact;
        if let Some(v) = heap.top() {
            diag.contributions.push(Contribution { node: id, source: Source::Covered, estimate: v });
            if better(v, best) {
                best = Some(v);
            }
        }
    }
    for &id in partial {
        exact &= pool.is_complete();
        let mut leaf_best: Option<f64> = None;
        pool.index().for_each_in(&tree.node(id).rect.intersection(&q.predicate), |_, _, a| {
            if better(a, leaf_best) {
                leaf_best = Some(a);
            }
        });
        match leaf_best {
            Some(v) => {
                diag.contributions.push(Contribution { node: id, source: Source::Partial, estimate: v });
                if better(v, best) {
                    best = Some(v);
                }
            }
            None => diag.empty_strata += 1,
        }
    }
    let Some(v) = best else {
        return Err(AqpError::Unanswerable(format!("no candidate value for {}", q.kind)));
    };
    Ok(QueryAnswer { estimate: v, ci_half_width: f64::NAN, nu_c: 0.0, nu_s: 0.0, exact, diagnostics: diag })
}
