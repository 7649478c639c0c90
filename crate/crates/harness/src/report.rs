//! Accuracy and timing summaries written by `aqp run`.

use std::collections::BTreeMap;

use aqp_core::lifecycle::RebuildEvent;
use aqp_core::stats::quantile_sorted;
use aqp_core::{AggKind, EngineConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stream: Option<String>,
    /// Inserts and deletes in the stream.
    pub events: u64,
    pub queries: usize,
    pub config: EngineConfig,
    pub engines: Vec<EngineReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    /// Scored queries (nonzero truth, answered).
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub p95: Option<f64>,
    pub max: Option<f64>,
}

impl ErrorSummary {
    pub fn from_errors(errs: &[f64]) -> Self {
        let mut v: Vec<f64> = errs.iter().copied().filter(|e| e.is_finite()).collect();
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        Self {
            count: v.len(),
            mean: Some(v.iter().sum::<f64>() / v.len() as f64),
            median: quantile_sorted(&v, 0.5),
            p95: quantile_sorted(&v, 0.95),
            max: v.last().copied(),
        }
    }
}

/// Queries whose ground truth is zero; relative error is undefined there.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZeroTruth {
    pub count: usize,
    pub mean_abs_error: Option<f64>,
    pub max_abs_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub update_secs: f64,
    pub events_per_sec: f64,
    pub query_latency: Option<Latency>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    /// Position among the stream's queries.
    pub index: usize,
    pub kind: AggKind,
    pub truth: Option<f64>,
    pub estimate: Option<f64>,
    pub ci: Option<f64>,
    pub relative_error: Option<f64>,
    pub covered: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineReport {
    pub engine: String,
    pub answered: usize,
    pub failed: usize,
    pub relative_error: ErrorSummary,
    /// Keyed by aggregate name.
    pub per_kind: BTreeMap<String, ErrorSummary>,
    /// Share of answered queries with a finite interval that contains the truth.
    pub coverage: Option<f64>,
    pub zero_truth: ZeroTruth,
    pub resident_samples: usize,
    pub rebuilds: Vec<RebuildEvent>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub queries: Vec<QueryRecord>,
}

impl EngineReport {
    /// Summaries from per-query records; timing and rebuilds are filled in by the caller.
    pub fn from_records(engine: &str, records: Vec<QueryRecord>, resident_samples: usize) -> Self {
        let answered = records.iter().filter(|r| r.estimate.is_some()).count();
        let failed = records.iter().filter(|r| r.error.is_some()).count();
        let rel: Vec<f64> = records.iter().filter_map(|r| r.relative_error).collect();
        let mut per_kind = BTreeMap::new();
        for kind in AggKind::ALL {
            let errs: Vec<f64> = records.iter().filter(|r| r.kind == kind).filter_map(|r| r.relative_error).collect();
            if !errs.is_empty() {
                per_kind.insert(kind.name().to_string(), ErrorSummary::from_errors(&errs));
            }
        }
        let cov: Vec<bool> = records.iter().filter_map(|r| r.covered).collect();
        let zero: Vec<f64> = records
            .iter()
            .filter(|r| r.truth == Some(0.0))
            .filter_map(|r| r.estimate.map(f64::abs))
            .collect();
        Self {
            engine: engine.to_string(),
            answered,
            failed,
            relative_error: ErrorSummary::from_errors(&rel),
            per_kind,
            coverage: (!cov.is_empty()).then(|| cov.iter().filter(|c| **c).count() as f64 / cov.len() as f64),
            zero_truth: ZeroTruth {
                count: records.iter().filter(|r| r.truth == Some(0.0)).count(),
                mean_abs_error: (!zero.is_empty()).then(|| zero.iter().sum::<f64>() / zero.len() as f64),
                max_abs_error: zero.iter().copied().reduce(f64::max),
            },
            resident_samples,
            rebuilds: Vec::new(),
            timing: None,
            queries: records,
        }
    }
}

/// `|truth - estimate| / |truth|`, undefined for zero truth.
pub fn relative_error(truth: f64, estimate: f64) -> Option<f64> {
    (truth != 0.0).then(|| (truth - estimate).abs() / truth.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, kind: AggKind, truth: f64, est: f64) -> QueryRecord {
        QueryRecord {
            index: i,
            kind,
            truth: Some(truth),
            estimate: Some(est),
            ci: Some(1.0),
            relative_error: relative_error(truth, est),
            covered: Some((truth - est).abs() <= 1.0),
            error: None,
        }
    }

    #[test]
    fn summaries() {
        let recs = vec![
            rec(0, AggKind::Count, 10.0, 11.0),
            rec(1, AggKind::Sum, 4.0, 2.0),
            rec(2, AggKind::Sum, 0.0, 0.5),
            rec(3, AggKind::Avg, 2.0, 2.0),
        ];
        let r = EngineReport::from_records("x", recs, 7);
        assert_eq!(r.answered, 4);
        assert_eq!(r.relative_error.count, 3);
        assert_eq!(r.relative_error.median, Some(0.1));
        assert_eq!(r.relative_error.max, Some(0.5));
        assert_eq!(r.per_kind["sum"].count, 1);
        assert_eq!(r.zero_truth.count, 1);
        assert_eq!(r.zero_truth.mean_abs_error, Some(0.5));
        assert_eq!(r.coverage, Some(0.75));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("timing").is_none());
        assert!(json["per_kind"].get("sum").is_some());
    }

    #[test]
    fn relative_error_skips_zero() {
        assert_eq!(relative_error(0.0, 3.0), None);
        assert_eq!(relative_error(-4.0, -2.0), Some(0.5));
    }
}
