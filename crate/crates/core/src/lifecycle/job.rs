use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::trigger::TriggerReason;
use crate::error::Result;
use crate::maxvar::{MaxVarIndex, MaxVarOracle};
use crate::model::{EngineConfig, Rect, Tuple};
use crate::partitioner::{PartitionPlan, PartitionRequest, Partitioner};
use crate::tree::NodeId;

/// One subtree a job may rebuild: the node, its rectangle, how many leaves
/// the new subtree gets, and the current maximum variance below it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub node: NodeId,
    pub region: Rect,
    pub k: usize,
    pub current: f64,
}

/// A self-contained partitioning task over a copy of the pool. Runs off the
/// writer thread while the old tree keeps absorbing events.
#[derive(Clone)]
pub struct RebuildJob {
    pub reason: TriggerReason,
    /// Tried in order; the first whose plan beats `current / beta` wins.
    pub candidates: Vec<Candidate>,
    pub samples: Vec<Tuple>,
    pub mass: usize,
    pub floor: usize,
    pub config: EngineConfig,
    pub partitioner: Arc<dyn Partitioner>,
    pub oracle: Arc<dyn MaxVarOracle>,
    /// Event count when the job was cut.
    pub started_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub candidate: Candidate,
    pub plan: PartitionPlan,
    pub adopt: bool,
}

impl RebuildJob {
    pub fn run(&self) -> Result<JobResult> {
        let mut index = MaxVarIndex::build(self.config.d, self.mass, &self.samples)?;
        let forced = self.reason.is_forced();
        let mut last = None;
        for cand in &self.candidates {
            let n = index.aggregate(&cand.region).count;
            let k = cand.k.min(n / self.floor.max(1)).max(1);
            let mut req = PartitionRequest {
                index: &mut index,
                oracle: self.oracle.as_ref(),
                region: cand.region.clone(),
                k,
                floor: self.floor,
                rho: self.config.rho,
                value_lo: self.config.value_lo,
                value_hi: self.config.value_hi,
                split_rule: self.config.split_rule,
            };
            let plan = if n == 0 || k == 1 {
                let mut p = PartitionPlan::single(cand.region.clone());
                p.annotate(req.index, req.oracle);
                p
            } else {
                self.partitioner.partition(&mut req)?
            };
            let adopt = forced || plan.max_error < cand.current / self.config.beta;
            if adopt {
                return Ok(JobResult { candidate: cand.clone(), plan, adopt });
            }
            last = Some(JobResult { candidate: cand.clone(), plan, adopt });
        }
        Ok(last.expect("a job has at least one candidate"))
    }
}
