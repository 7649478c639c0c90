//! Replays one fixed stream through several engines and scores every query
//! against the exact archive.

use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use aqp_core::stats::quantile_sorted;
use aqp_core::{Archive, EngineConfig};

use crate::engines::{AqpEngine, EngineRegistry};
use crate::report::{relative_error, EngineReport, Latency, QueryRecord, RunReport, Timing};
use crate::stream::Op;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Leave wall-clock numbers out so reports are reproducible byte for byte.
    pub omit_timing: bool,
    /// Include one record per query.
    pub per_query: bool,
    pub stream_name: Option<String>,
}

/// Ground truth for every query op, in stream order.
pub fn ground_truth(ops: &[Op], d: usize) -> Result<Vec<Option<f64>>> {
    let mut archive = Archive::new(d);
    let mut out = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        match op {
            Op::Query(q) => out.push(archive.ground_truth(q).ok()),
            _ => {
                archive.apply(op.event().expect("update op")).with_context(|| format!("stream op {}", i + 1))?;
            }
        }
    }
    Ok(out)
}

/// Runs one engine over `ops`, scoring queries against `truth`.
pub fn run_engine(engine: &mut dyn AqpEngine, ops: &[Op], truth: &[Option<f64>], opts: &RunOptions) -> Result<EngineReport> {
    let mut records = Vec::with_capacity(truth.len());
    let mut update_time = Duration::ZERO;
    let mut latencies = Vec::with_capacity(truth.len());
    let mut events = 0u64;
    for (i, op) in ops.iter().enumerate() {
        match op {
            Op::Query(q) => {
                let t0 = Instant::now();
                let ans = engine.answer(q);
                latencies.push(t0.elapsed().as_secs_f64() * 1e6);
                let idx = records.len();
                let truth = truth[idx];
                let rec = match ans {
                    Ok(a) => QueryRecord {
                        index: idx,
                        kind: q.kind,
                        truth,
                        estimate: Some(a.estimate),
                        ci: a.ci_half_width.is_finite().then_some(a.ci_half_width),
                        relative_error: truth.and_then(|t| relative_error(t, a.estimate)),
                        covered: truth.filter(|_| a.ci_half_width.is_finite()).map(|t| a.covers(t)),
                        error: None,
                    },
                    Err(e) => QueryRecord {
                        index: idx,
                        kind: q.kind,
                        truth,
                        estimate: None,
                        ci: None,
                        relative_error: None,
                        covered: None,
                        error: Some(e.to_string()),
                    },
                };
                records.push(rec);
            }
            _ => {
                let ev = op.event().expect("update op");
                let t0 = Instant::now();
                engine.apply(ev).with_context(|| format!("{}: stream op {}", engine.name(), i + 1))?;
                update_time += t0.elapsed();
                events += 1;
            }
        }
    }
    let mut report = EngineReport::from_records(engine.name(), records, engine.resident_samples());
    report.rebuilds = engine.rebuilds();
    if !opts.omit_timing {
        latencies.sort_by(f64::total_cmp);
        let secs = update_time.as_secs_f64();
        report.timing = Some(Timing {
            update_secs: secs,
            events_per_sec: if secs > 0.0 { events as f64 / secs } else { 0.0 },
            query_latency: (!latencies.is_empty()).then(|| Latency {
                mean_us: latencies.iter().sum::<f64>() / latencies.len() as f64,
                p50_us: quantile_sorted(&latencies, 0.5).unwrap_or(0.0),
                p95_us: quantile_sorted(&latencies, 0.95).unwrap_or(0.0),
            }),
        });
    }
    if !opts.per_query {
        report.queries.clear();
    }
    Ok(report)
}

/// Every engine sees the identical sequence.
pub fn run(ops: &[Op], cfg: &EngineConfig, engines: &[String], registry: &EngineRegistry, opts: &RunOptions) -> Result<RunReport> {
    let truth = ground_truth(ops, cfg.d)?;
    let mut reports = Vec::with_capacity(engines.len());
    for name in engines {
        let mut e = registry.create(name, cfg)?;
        reports.push(run_engine(e.as_mut(), ops, &truth, opts)?);
    }
    Ok(RunReport {
        stream: opts.stream_name.clone(),
        events: ops.iter().filter(|o| !matches!(o, Op::Query(_))).count() as u64,
        queries: truth.len(),
        config: cfg.clone(),
        engines: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use aqp_core::{AggKind, Query, Rect, Tuple};

    fn ops() -> Vec<Op> {
        let mut v: Vec<Op> = (0..200u64).map(|i| Op::Insert(Tuple::new(i, vec![i as f64], 1.0 + (i % 5) as f64))).collect();
        v.push(Op::Delete { id: 3 });
        v.push(Op::Query(Query::new(AggKind::Count, Rect::unbounded(1))));
        v.push(Op::Query(Query::new(AggKind::Sum, Rect::new(vec![500.0], vec![600.0]).unwrap())));
        v.push(Op::Query(Query::new(AggKind::Avg, Rect::new(vec![500.0], vec![600.0]).unwrap())));
        v
    }

    #[test]
    fn root_count_is_exact_after_full_catchup() {
        let cfg = EngineConfig { k: 4, m: 20, catchup_ratio: 1.0, ..EngineConfig::default() };
        let opts = RunOptions { omit_timing: true, per_query: true, ..Default::default() };
        let r = run(&ops(), &cfg, &["dpt".into()], &EngineRegistry::default(), &opts).unwrap();
        let q = &r.engines[0].queries[0];
        assert_eq!(q.truth, Some(199.0));
        assert_eq!(q.estimate, Some(199.0));
        assert_eq!(q.relative_error, Some(0.0));
        assert_eq!(r.engines[0].zero_truth.count, 1);
        assert_eq!(r.engines[0].queries[2].truth, None);
        assert_eq!(r.events, 201);
    }

    #[test]
    fn deterministic_without_timing() {
        let cfg = EngineConfig { k: 4, m: 20, seed: 5, ..EngineConfig::default() };
        let opts = RunOptions { omit_timing: true, per_query: true, ..Default::default() };
        let names: Vec<String> = ["dpt", "rs", "srs"].map(String::from).to_vec();
        let reg = EngineRegistry::default();
        let a = serde_json::to_string(&run(&ops(), &cfg, &names, &reg, &opts).unwrap()).unwrap();
        let b = serde_json::to_string(&run(&ops(), &cfg, &names, &reg, &opts).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_delete_aborts_with_position() {
        let mut v = ops();
        v.insert(5, Op::Delete { id: 999 });
        let err = format!("{:#}", ground_truth(&v, 1).unwrap_err());
        assert!(err.contains("stream op 6"), "{err}");
    }
}
