use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tree::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum TriggerReason {
    /// A leaf stratum fell below the sample floor.
    Floor { leaf: NodeId, samples: usize, floor: usize },
    /// A leaf's maximum variance moved outside `[baseline / beta, beta * baseline]`.
    Drift { leaf: NodeId, baseline: f64, current: f64 },
    /// The manual period elapsed.
    Period,
    Manual,
    Initial,
}

impl TriggerReason {
    pub fn leaf(&self) -> Option<NodeId> {
        match self {
            TriggerReason::Floor { leaf, .. } | TriggerReason::Drift { leaf, .. } => Some(*leaf),
            _ => None,
        }
    }

    /// Forced reasons rebuild without the improvement test.
    pub fn is_forced(&self) -> bool {
        matches!(self, TriggerReason::Period | TriggerReason::Manual | TriggerReason::Initial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TriggerDecision {
    NoAction,
    CandidateRepartition(TriggerReason),
}

/// Per-leaf baselines captured at build time plus the thresholds they are
/// checked against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerState {
    pub beta: f64,
    /// Minimum stratum size at build time.
    pub floor: usize,
    /// A leaf triggers below `floor / slack`.
    pub slack: f64,
    baselines: HashMap<NodeId, f64>,
}

impl TriggerState {
    pub fn new(beta: f64, floor: usize, slack: f64) -> Self {
        Self { beta, floor, slack, baselines: HashMap::new() }
    }

    pub fn set_baseline(&mut self, leaf: NodeId, m: f64) {
        self.baselines.insert(leaf, m);
    }

    pub fn clear(&mut self) {
        self.baselines.clear();
    }

    pub fn remove(&mut self, leaf: NodeId) {
        self.baselines.remove(&leaf);
    }

    pub fn baseline(&self, leaf: NodeId) -> Option<f64> {
        self.baselines.get(&leaf).copied()
    }

    pub fn len(&self) -> usize {
        self.baselines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baselines.is_empty()
    }

    /// Checks a leaf whose stratum just changed; `current` is its recomputed
    /// maximum variance and `samples` its stratum size.
    pub fn evaluate(&self, leaf: NodeId, current: f64, samples: usize) -> TriggerDecision {
        if (samples as f64) < self.floor as f64 / self.slack {
            return TriggerDecision::CandidateRepartition(TriggerReason::Floor { leaf, samples, floor: self.floor });
        }
        let Some(baseline) = self.baseline(leaf) else { return TriggerDecision::NoAction };
        if current > self.beta * baseline || current < baseline / self.beta {
            return TriggerDecision::CandidateRepartition(TriggerReason::Drift { leaf, baseline, current });
        }
        TriggerDecision::NoAction
    }
}
