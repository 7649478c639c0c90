//! The engine: applies the event stream to the archive, the pool and the
//! tree, runs catch-up, watches leaves for drift, and swaps in new
//! partitionings.

mod job;
pub mod runtime;
mod trigger;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Event, SnapshotSampler};
use crate::error::{AqpError, Result};
use crate::estimator::{self, QueryAnswer};
use crate::maxvar::{MaxVarOracle, OracleRegistry};
use crate::model::{EngineConfig, Query, Rect, RepartitionMode, Tuple};
use crate::partitioner::{PartitionPlan, Partitioner, PartitionerRegistry};
use crate::reservoir::{DeleteOutcome, InsertOutcome, Reservoir};
use crate::tree::{NodeId, PartitionTree};

pub use job::{Candidate, JobResult, RebuildJob};
pub use trigger::{TriggerDecision, TriggerReason, TriggerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// No partitioning built yet; a single exact leaf serves queries.
    Idle,
    /// A candidate plan is being computed.
    Optimizing,
    /// The new tree is being populated; queries wait.
    Blocking,
    CatchingUp,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatchupProgress {
    pub epoch: usize,
    pub target: u64,
    pub absorbed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebuildEvent {
    /// Events applied when the new tree went live.
    pub at_event: u64,
    pub reason: TriggerReason,
    pub partial: bool,
    pub before: f64,
    pub after: f64,
    pub leaves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RepartitionOutcome {
    Kept { current: f64, candidate: f64 },
    Rebuilt(RebuildEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineStatus {
    pub phase: Phase,
    pub events: u64,
    pub archive_size: usize,
    pub pool_size: usize,
    pub leaves: usize,
    pub catchup: Option<CatchupProgress>,
    pub max_variance: f64,
    pub rebuilds: usize,
    pub candidates: u64,
}

struct Catchup {
    epoch: usize,
    sampler: SnapshotSampler,
}

pub struct Engine {
    cfg: EngineConfig,
    archive: Archive,
    pool: Reservoir,
    tree: PartitionTree,
    triggers: TriggerState,
    catchup: Option<Catchup>,
    phase: Phase,
    rng: ChaCha8Rng,
    oracle: Arc<dyn MaxVarOracle>,
    partitioner: Arc<dyn Partitioner>,
    pending: Option<TriggerReason>,
    in_flight: bool,
    /// Leave candidate jobs to the caller instead of running them inline.
    external_jobs: bool,
    cooldown_until: u64,
    events: u64,
    built_at: u64,
    candidates: u64,
    rebuilds: Vec<RebuildEvent>,
    initialized: bool,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        Self::with_registries(cfg, &OracleRegistry::default(), &PartitionerRegistry::default())
    }

    pub fn with_registries(cfg: EngineConfig, oracles: &OracleRegistry, partitioners: &PartitionerRegistry) -> Result<Self> {
        cfg.validate()?;
        let oracle = oracles.for_kind(cfg.focus)?;
        let partitioner = partitioners.resolve(&cfg.partitioner, cfg.d, cfg.focus)?;
        Ok(Self {
            archive: Archive::new(cfg.d),
            pool: Reservoir::new(cfg.d, cfg.m, cfg.sampler),
            tree: PartitionTree::single(cfg.d, cfg.heap_k, 0),
            triggers: TriggerState::new(cfg.beta, 1, cfg.floor_slack),
            catchup: None,
            phase: Phase::Idle,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            oracle,
            partitioner,
            pending: None,
            in_flight: false,
            external_jobs: false,
            cooldown_until: 0,
            events: 0,
            built_at: 0,
            candidates: 0,
            rebuilds: Vec::new(),
            initialized: false,
            cfg,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn reservoir(&self) -> &Reservoir {
        &self.pool
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn rebuilds(&self) -> &[RebuildEvent] {
        &self.rebuilds
    }

    pub fn triggers(&self) -> &TriggerState {
        &self.triggers
    }

    pub fn catchup_progress(&self) -> Option<CatchupProgress> {
        self.catchup.as_ref().map(|c| CatchupProgress {
            epoch: c.epoch,
            target: c.sampler.limit() as u64,
            absorbed: c.sampler.drawn() as u64,
        })
    }

    /// Hands rebuild jobs to the caller (see `take_job`) instead of running
    /// them inside `apply`.
    pub fn set_external_jobs(&mut self, on: bool) {
        self.external_jobs = on;
    }

    pub fn status(&mut self) -> EngineStatus {
        let max_variance = self.leaf_variances().into_iter().map(|(_, v, _)| v).fold(0.0, f64::max);
        EngineStatus {
            phase: self.phase,
            events: self.events,
            archive_size: self.archive.len(),
            pool_size: self.pool.len(),
            leaves: self.tree.leaves().len(),
            catchup: self.catchup_progress(),
            max_variance,
            rebuilds: self.rebuilds.len(),
            candidates: self.candidates,
        }
    }

    /// Applies one update. Query events are rejected; use `query`.
    pub fn apply(&mut self, ev: Event) -> Result<()> {
        let touched = match ev {
            Event::Insert(t) => self.insert(t)?,
            Event::Delete { id } => self.delete(id)?,
        };
        self.events += 1;
        if let Some(n) = self.cfg.catchup_interleave {
            self.step_catchup(n)?;
        }
        if !self.initialized {
            if self.cfg.init_after.is_some_and(|n| self.archive.len() >= n) {
                self.initialize()?;
            }
            return Ok(());
        }
        if self.cfg.triggers && self.pending.is_none() && self.events >= self.cooldown_until {
            if let Some(leaves) = touched {
                for leaf in leaves {
                    if let TriggerDecision::CandidateRepartition(r) = self.evaluate_trigger(leaf) {
                        self.pending = Some(r);
                        break;
                    }
                }
            }
        }
        if self.pending.is_none() && self.cfg.tau.is_some_and(|tau| self.events - self.built_at >= tau) {
            self.pending = Some(TriggerReason::Period);
        }
        if !self.external_jobs {
            self.maybe_repartition()?;
        }
        Ok(())
    }

    /// Leaves whose stratum changed, or `None` when the pool did not move.
    fn insert(&mut self, t: Tuple) -> Result<Option<Vec<NodeId>>> {
        self.archive.insert(t.clone())?;
        self.tree.route_insert(&t)?;
        match self.pool.on_insert(&t, self.archive.len(), &mut self.rng)? {
            InsertOutcome::Skipped => Ok(None),
            InsertOutcome::Kept { replaced } => {
                let mut v = vec![self.tree.leaf_of(&t.coords)];
                if let Some(old) = replaced.and_then(|id| self.archive.get(id)) {
                    let l = self.tree.leaf_of(&old.coords);
                    if l != v[0] {
                        v.push(l);
                    }
                }
                Ok(Some(v))
            }
        }
    }

    fn delete(&mut self, id: u64) -> Result<Option<Vec<NodeId>>> {
        let t = self.archive.delete(id)?;
        self.tree.route_delete(&t)?;
        match self.pool.on_delete(id, &self.archive, &mut self.rng)? {
            DeleteOutcome::Untouched => Ok(None),
            DeleteOutcome::Removed => Ok(Some(vec![self.tree.leaf_of(&t.coords)])),
            DeleteOutcome::Refilled { .. } => {
                self.refresh_pool_mass();
                Ok(Some(self.tree.leaves()))
            }
        }
    }

    fn refresh_pool_mass(&mut self) {
        let mass = self.cfg.min_query_mass(self.pool.len());
        if self.pool.index().mass() != mass {
            self.pool.index_mut().set_mass(mass);
        }
    }

    /// Recomputes a leaf's maximum variance on the current pool and checks it
    /// against its baseline and the sample floor.
    pub fn evaluate_trigger(&mut self, leaf: NodeId) -> TriggerDecision {
        let rect = self.tree.node(leaf).rect.clone();
        let current = self.oracle.evaluate(self.pool.index_mut(), &rect).error_sq();
        let samples = self.pool.stratum_agg(&rect).count;
        self.triggers.evaluate(leaf, current, samples)
    }

    /// (leaf, current maximum variance, stratum size) for every leaf.
    fn leaf_variances(&mut self) -> Vec<(NodeId, f64, usize)> {
        let leaves = self.tree.leaves();
        leaves
            .into_iter()
            .map(|l| {
                let rect = self.tree.node(l).rect.clone();
                let v = self.oracle.evaluate(self.pool.index_mut(), &rect).error_sq();
                (l, v, self.pool.stratum_agg(&rect).count)
            })
            .collect()
    }

    fn subtree_variance(&mut self, u: NodeId) -> f64 {
        let leaves = self.tree.subtree_leaves(u);
        let mut best = 0.0f64;
        for l in leaves {
            let rect = self.tree.node(l).rect.clone();
            best = best.max(self.oracle.evaluate(self.pool.index_mut(), &rect).error_sq());
        }
        best
    }

    fn leaf_floor(&self) -> usize {
        self.cfg.leaf_floor(self.pool.len(), self.archive.len())
    }

    /// Builds the first partitioning from the pool.
    pub fn initialize(&mut self) -> Result<()> {
        if self.archive.len() < self.cfg.k {
            return Err(AqpError::NotEnoughTuples { requested: self.cfg.k, available: self.archive.len() });
        }
        self.pending = Some(TriggerReason::Initial);
        self.initialized = true;
        let job = self.take_job().expect("pending initial job");
        let res = job.run();
        self.complete_job(job, res).map(|_| ())
    }

    /// Forces a rebuild on the next opportunity.
    pub fn request_rebuild(&mut self) {
        self.pending = Some(TriggerReason::Manual);
    }

    /// Runs a pending candidate inline.
    pub fn maybe_repartition(&mut self) -> Result<Option<RepartitionOutcome>> {
        let Some(job) = self.take_job() else { return Ok(None) };
        let res = job.run();
        self.complete_job(job, res).map(Some)
    }

    /// Cuts a job for the pending trigger, if any and none is in flight.
    pub fn take_job(&mut self) -> Option<RebuildJob> {
        if self.in_flight || !self.initialized {
            return None;
        }
        let reason = self.pending.take()?;
        self.candidates += 1;
        let partial = self.cfg.repartition == RepartitionMode::Partial && !reason.is_forced();
        let mut candidates = Vec::new();
        if partial {
            if let Some(leaf) = reason.leaf().filter(|l| self.tree.node_ids().any(|i| i == *l)) {
                let depth = self.tree.node(leaf).depth;
                let levels: Vec<usize> = match self.cfg.psi {
                    Some(p) => vec![p.min(depth)],
                    None => (1..=depth).collect(),
                };
                for psi in levels {
                    let u = self.tree.ancestor(leaf, psi);
                    let k = self.tree.subtree_leaves(u).len();
                    let current = self.subtree_variance(u);
                    candidates.push(Candidate { node: u, region: self.tree.node(u).rect.clone(), k, current });
                }
            }
        }
        let root = self.tree.root();
        if candidates.last().is_none_or(|c| c.node != root) {
            let current = self.subtree_variance(root);
            candidates.push(Candidate { node: root, region: self.tree.node(root).rect.clone(), k: self.cfg.k, current });
        }
        self.in_flight = true;
        self.phase = Phase::Optimizing;
        Some(RebuildJob {
            reason,
            candidates,
            samples: self.pool.tuples().to_vec(),
            mass: self.cfg.min_query_mass(self.pool.len()),
            floor: self.leaf_floor(),
            config: self.cfg.clone(),
            partitioner: self.partitioner.clone(),
            oracle: self.oracle.clone(),
            started_at: self.events,
        })
    }

    /// Installs or discards a finished job. Adoption is the blocking step:
    /// the pool is redrawn, the new nodes are seeded from it, and catch-up
    /// restarts.
    pub fn complete_job(&mut self, job: RebuildJob, res: Result<JobResult>) -> Result<RepartitionOutcome> {
        self.in_flight = false;
        self.phase = if self.catchup.is_some() { Phase::CatchingUp } else if self.initialized { Phase::Done } else { Phase::Idle };
        let res = match res {
            Ok(r) => r,
            Err(e) => {
                self.cooldown_until = self.events + self.cfg.candidate_cooldown;
                return Err(e);
            }
        };
        if !res.adopt {
            self.cooldown_until = self.events + self.cfg.candidate_cooldown;
            return Ok(RepartitionOutcome::Kept { current: res.candidate.current, candidate: res.plan.max_error });
        }
        self.phase = Phase::Blocking;
        let n0 = self.archive.len() as u64;
        let root = self.tree.root();
        let partial = res.candidate.node != root;
        let epoch = if partial {
            for l in self.tree.subtree_leaves(res.candidate.node) {
                self.triggers.remove(l);
            }
            self.tree.replace_subtree(res.candidate.node, &res.plan, n0)?
        } else {
            self.tree = PartitionTree::from_plan(&res.plan, self.cfg.heap_k, n0)?;
            self.triggers.clear();
            0
        };
        // Seeding from the pool the plan was optimized on biases SUM upward:
        // greedy cuts end buckets just before large samples. A fresh pool is
        // independent of the cut positions.
        self.pool.resample(&self.archive, &mut self.rng)?;
        self.refresh_pool_mass();
        for t in self.pool.tuples().to_vec() {
            self.tree.absorb_catchup(&t, epoch)?;
        }
        let new_leaves = if partial { self.tree.subtree_leaves(res.candidate.node) } else { self.tree.leaves() };
        for (leaf, m) in new_leaves.iter().zip(&res.plan.leaf_error) {
            self.triggers.set_baseline(*leaf, *m);
        }
        self.triggers.floor = job.floor;
        let target = (self.cfg.catchup_ratio * n0 as f64).ceil() as usize;
        let snap = self.archive.snapshot();
        self.catchup = Some(Catchup {
            epoch,
            sampler: SnapshotSampler::new(&self.archive, snap, target.min(n0 as usize), self.cfg.sampler, &mut self.rng),
        });
        self.phase = Phase::CatchingUp;
        self.built_at = self.events;
        let event = RebuildEvent {
            at_event: self.events,
            reason: job.reason.clone(),
            partial,
            before: res.candidate.current,
            after: res.plan.max_error,
            leaves: self.tree.leaves().len(),
        };
        if job.reason != TriggerReason::Initial {
            log::info!("rebuilt at event {} ({:?}): max variance {:.4e} -> {:.4e}, {} leaves", event.at_event, event.reason, event.before, event.after, event.leaves);
            self.rebuilds.push(event.clone());
        }
        if self.cfg.catchup_interleave.is_none() {
            self.step_catchup(usize::MAX)?;
        }
        Ok(RepartitionOutcome::Rebuilt(event))
    }

    /// Absorbs up to `n` catch-up draws. Returns how many were absorbed.
    pub fn step_catchup(&mut self, n: usize) -> Result<usize> {
        let Some(c) = self.catchup.as_mut() else { return Ok(0) };
        let mut done = 0;
        while done < n {
            match c.sampler.next_sample(&self.archive, &mut self.rng) {
                Some(t) => {
                    self.tree.absorb_catchup(&t, c.epoch)?;
                    done += 1;
                }
                None => break,
            }
        }
        if c.sampler.is_exhausted() {
            self.catchup = None;
            if !self.in_flight {
                self.phase = Phase::Done;
            }
        }
        Ok(done)
    }

    /// Answers from the synopsis without touching the archive.
    pub fn answer(&self, q: &Query) -> Result<QueryAnswer> {
        if self.phase == Phase::Blocking {
            return Err(AqpError::Blocked);
        }
        estimator::answer(q, &self.tree, &self.pool)
    }

    /// Like `answer`, building the first partitioning if none exists yet.
    pub fn query(&mut self, q: &Query) -> Result<QueryAnswer> {
        if !self.initialized && self.archive.len() >= self.cfg.k {
            self.initialize()?;
        }
        self.answer(q)
    }

    /// Partition plan describing the current tree shape.
    pub fn current_plan(&mut self) -> PartitionPlan {
        let leaves = self.tree.leaves();
        let mut plan = PartitionPlan::single(Rect::unbounded(self.cfg.d));
        plan.partitioner = self.partitioner.name().into();
        plan.kind = self.cfg.focus;
        plan.nodes.clear();
        let ids: Vec<NodeId> = {
            let mut v = Vec::new();
            let mut stack = vec![self.tree.root()];
            while let Some(i) = stack.pop() {
                v.push(i);
                if let Some([l, r]) = self.tree.node(i).children {
                    stack.push(r);
                    stack.push(l);
                }
            }
            v
        };
        let pos = |id: NodeId| ids.iter().position(|&x| x == id).expect("tree node");
        for &i in &ids {
            let n = self.tree.node(i);
            plan.nodes.push(crate::partitioner::PlanNode {
                rect: n.rect.clone(),
                split: n.split,
                children: n.children.map(|[l, r]| [pos(l), pos(r)]),
            });
        }
        plan.leaves = leaves.iter().map(|&l| pos(l)).collect();
        plan.annotate(self.pool.index_mut(), self.oracle.as_ref());
        plan
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AggKind;
    use rand::Rng;

    fn cfg() -> EngineConfig {
        EngineConfig { k: 8, m: 50, seed: 1, ..EngineConfig::default() }
    }

    fn feed(e: &mut Engine, n: u64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..n {
            e.apply(Event::Insert(Tuple::new(i, vec![rng.random_range(0.0..100.0)], rng.random_range(1.0..10.0)))).unwrap();
        }
    }

    #[test]
    fn idle_engine_is_exact() {
        let mut e = Engine::new(cfg()).unwrap();
        feed(&mut e, 5, 0);
        assert_eq!(e.phase(), Phase::Idle);
        let ans = e.answer(&Query::new(AggKind::Count, Rect::unbounded(1))).unwrap();
        assert!(ans.exact);
        assert_eq!(ans.estimate, 5.0);
    }

    #[test]
    fn initialize_needs_k_tuples() {
        let mut e = Engine::new(cfg()).unwrap();
        feed(&mut e, 3, 0);
        assert!(e.initialize().is_err());
    }

    #[test]
    fn answers_during_catchup() {
        let mut e = Engine::new(EngineConfig { catchup_interleave: Some(1), ..cfg() }).unwrap();
        feed(&mut e, 1000, 0);
        e.initialize().unwrap();
        assert_eq!(e.phase(), Phase::CatchingUp);
        let p = e.catchup_progress().unwrap();
        assert_eq!(p.target, 100);
        let q = Query::new(AggKind::Sum, Rect::new(vec![10.0], vec![60.0]).unwrap());
        assert!(e.answer(&q).is_ok());
        for i in 0..200u64 {
            e.apply(Event::Delete { id: i }).unwrap();
        }
        assert_eq!(e.phase(), Phase::Done);
        assert!(e.catchup_progress().is_none());
        assert_eq!(e.rebuilds().len(), 0);
    }

    #[test]
    fn root_population_stays_exact() {
        let mut e = Engine::new(cfg()).unwrap();
        feed(&mut e, 500, 2);
        e.initialize().unwrap();
        for i in 0..100u64 {
            e.apply(Event::Delete { id: i * 3 }).unwrap();
        }
        e.request_rebuild();
        feed_more(&mut e, 500, 100);
        let root = e.tree().root();
        assert_eq!(e.tree().estimated_population(root), Some(e.archive().len() as f64));
        assert!(!e.rebuilds().is_empty());
    }

    fn feed_more(e: &mut Engine, from: u64, n: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(from);
        for i in from..from + n {
            e.apply(Event::Insert(Tuple::new(i, vec![rng.random_range(0.0..100.0)], 1.0))).unwrap();
        }
    }

    #[test]
    fn beta_infinite_never_rebuilds() {
        let mut e = Engine::new(EngineConfig { beta: f64::INFINITY, ..cfg() }).unwrap();
        feed(&mut e, 200, 3);
        e.initialize().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 200..3000u64 {
            e.apply(Event::Insert(Tuple::new(i, vec![500.0 + i as f64], rng.random_range(0.0..1000.0)))).unwrap();
        }
        assert!(e.rebuilds().is_empty());
    }

    #[test]
    fn status_reports_phase_and_counts() {
        let mut e = Engine::new(cfg()).unwrap();
        feed(&mut e, 300, 5);
        e.query(&Query::new(AggKind::Count, Rect::unbounded(1))).unwrap();
        let s = e.status();
        assert_eq!(s.phase, Phase::Done);
        assert_eq!(s.events, 300);
        assert!(s.leaves > 1 && s.leaves <= 8);
        assert_eq!(s.rebuilds, 0);
        let plan = e.current_plan();
        assert_eq!(plan.leaf_count(), s.leaves);
    }
}
