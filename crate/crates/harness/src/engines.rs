//! Engines the harness can replay a stream through, selected by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use anyhow::{anyhow, Result};
use aqp_core::estimator::{nu_s_term, QueryAnswer};
use aqp_core::lifecycle::{Engine, RebuildEvent};
use aqp_core::maxvar::Agg;
use aqp_core::partitioner::equal_mass_cuts;
use aqp_core::reservoir::Reservoir;
use aqp_core::{AggKind, AqpError, Archive, EngineConfig, Event, Query, Tuple};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub trait AqpEngine: Send {
    fn name(&self) -> &str;
    fn apply(&mut self, ev: Event) -> aqp_core::Result<()>;
    fn answer(&mut self, q: &Query) -> aqp_core::Result<QueryAnswer>;
    /// Samples currently held in memory.
    fn resident_samples(&self) -> usize;
    fn rebuilds(&self) -> Vec<RebuildEvent> {
        Vec::new()
    }
}

pub type EngineFactory = Arc<dyn Fn(&EngineConfig) -> Result<Box<dyn AqpEngine>> + Send + Sync>;

#[derive(Clone)]
pub struct EngineRegistry {
    by_name: BTreeMap<String, EngineFactory>,
}

impl Default for EngineRegistry {
    fn default() -> Self {
        let mut reg = Self { by_name: BTreeMap::new() };
        reg.register("dpt", Arc::new(|c| Ok(Box::new(Dpt::new("dpt", c.clone())?))));
        reg.register(
            "dpt-frozen",
            Arc::new(|c| Ok(Box::new(Dpt::new("dpt-frozen", EngineConfig { triggers: false, tau: None, ..c.clone() })?))),
        );
        reg.register("rs", Arc::new(|c| Ok(Box::new(Rs::new(c)))));
        reg.register("srs", Arc::new(|c| Ok(Box::new(Srs::new(c)))));
        reg
    }
}

impl EngineRegistry {
    pub fn register(&mut self, name: &str, factory: EngineFactory) {
        self.by_name.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn create(&self, name: &str, cfg: &EngineConfig) -> Result<Box<dyn AqpEngine>> {
        let f = self
            .by_name
            .get(name)
            .ok_or_else(|| anyhow!("unknown engine {name:?}; known: {}", self.names().collect::<Vec<_>>().join(", ")))?;
        f(cfg)
    }
}

/// The partition-tree engine.
pub struct Dpt {
    label: &'static str,
    engine: Engine,
}

impl Dpt {
    pub fn new(label: &'static str, cfg: EngineConfig) -> Result<Self> {
        Ok(Self { label, engine: Engine::new(cfg)? })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }
}

impl AqpEngine for Dpt {
    fn name(&self) -> &str {
        self.label
    }

    fn apply(&mut self, ev: Event) -> aqp_core::Result<()> {
        self.engine.apply(ev)
    }

    fn answer(&mut self, q: &Query) -> aqp_core::Result<QueryAnswer> {
        self.engine.query(q)
    }

    fn resident_samples(&self) -> usize {
        self.engine.reservoir().len()
    }

    fn rebuilds(&self) -> Vec<RebuildEvent> {
        self.engine.rebuilds().to_vec()
    }
}

/// Estimate over independent uniform strata, each given as (population, sample).
pub fn stratified_answer(q: &Query, strata: &[(f64, &[Tuple])]) -> aqp_core::Result<QueryAnswer> {
    let z = q.z()?;
    // (estimate, variance) of sum_i N_i / m_i * sum_{t in S_i, t in q} b(t)
    let linear = |b: &dyn Fn(f64) -> f64| -> aqp_core::Result<(f64, f64)> {
        let (mut est, mut var) = (0.0, 0.0);
        for (n_i, s) in strata {
            if s.is_empty() {
                continue;
            }
            let mut g = Agg::default();
            for t in s.iter() {
                if q.predicate.contains(t)? {
                    let x = b(t.value);
                    g = Agg { count: g.count + 1, sum: g.sum + x, sumsq: g.sumsq + x * x };
                }
            }
            est += n_i / s.len() as f64 * g.sum;
            var += nu_s_term(AggKind::Sum, *n_i, s.len(), g);
        }
        Ok((est, var))
    };
    let done = |est: f64, var: f64| QueryAnswer {
        estimate: est,
        ci_half_width: z * var.sqrt(),
        nu_c: 0.0,
        nu_s: var,
        exact: false,
        diagnostics: Default::default(),
    };
    match q.kind {
        AggKind::Count => linear(&|_| 1.0).map(|(e, v)| done(e, v)),
        AggKind::Sum => linear(&|a| a).map(|(e, v)| done(e, v)),
        AggKind::Avg => {
            let (c, _) = linear(&|_| 1.0)?;
            let (s, _) = linear(&|a| a)?;
            if !(c > 0.0) {
                return Err(AqpError::Unanswerable("no sample satisfies the predicate".into()));
            }
            let r = s / c;
            let (_, v) = linear(&|a| a - r)?;
            Ok(done(r, v / (c * c)))
        }
        AggKind::Min | AggKind::Max => {
            let mut best: Option<f64> = None;
            for (_, s) in strata {
                for t in s.iter() {
                    if q.predicate.contains(t)? {
                        let better = best.is_none_or(|b| if q.kind == AggKind::Max { t.value > b } else { t.value < b });
                        if better {
                            best = Some(t.value);
                        }
                    }
                }
            }
            let v = best.ok_or_else(|| AqpError::Unanswerable("no sample satisfies the predicate".into()))?;
            Ok(QueryAnswer { ci_half_width: f64::NAN, ..done(v, 0.0) })
        }
    }
}

/// One uniform reservoir over the whole archive.
pub struct Rs {
    archive: Archive,
    pool: Reservoir,
    rng: ChaCha8Rng,
}

impl Rs {
    pub fn new(cfg: &EngineConfig) -> Self {
        Self {
            archive: Archive::new(cfg.d),
            pool: Reservoir::new(cfg.d, cfg.m, cfg.sampler),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

impl AqpEngine for Rs {
    fn name(&self) -> &str {
        "rs"
    }

    fn apply(&mut self, ev: Event) -> aqp_core::Result<()> {
        match ev {
            Event::Insert(t) => {
                self.archive.insert(t.clone())?;
                self.pool.on_insert(&t, self.archive.len(), &mut self.rng)?;
            }
            Event::Delete { id } => {
                self.archive.delete(id)?;
                self.pool.on_delete(id, &self.archive, &mut self.rng)?;
            }
        }
        Ok(())
    }

    fn answer(&mut self, q: &Query) -> aqp_core::Result<QueryAnswer> {
        stratified_answer(q, &[(self.archive.len() as f64, self.pool.tuples())])
    }

    fn resident_samples(&self) -> usize {
        self.pool.len()
    }
}

struct Stratum {
    archive: Archive,
    pool: Reservoir,
}

/// Equal-depth strata on the first dimension, one reservoir each. Behaves
/// like `Rs` until the strata are laid out, which happens when the engine's
/// first partitioning would (`init_after`, or the first query).
pub struct Srs {
    cfg: EngineConfig,
    whole: Rs,
    /// Cut values on dimension 0 and the strata between them.
    cuts: Vec<f64>,
    strata: Vec<Stratum>,
}

impl Srs {
    pub fn new(cfg: &EngineConfig) -> Self {
        Self { cfg: cfg.clone(), whole: Rs::new(cfg), cuts: Vec::new(), strata: Vec::new() }
    }

    fn built(&self) -> bool {
        !self.strata.is_empty()
    }

    /// Stratum holding first coordinate `x`.
    pub fn stratum_of(&self, x: f64) -> usize {
        self.cuts.partition_point(|c| *c <= x)
    }

    /// Live tuples per stratum; empty until the strata are laid out.
    pub fn strata_sizes(&self) -> Vec<usize> {
        self.strata.iter().map(|s| s.archive.len()).collect()
    }

    fn build(&mut self) -> aqp_core::Result<()> {
        let mut xs: Vec<f64> = self.whole.pool.tuples().iter().map(|t| t.coords[0]).collect();
        xs.sort_by(f64::total_cmp);
        self.cuts = equal_mass_cuts(&xs, self.cfg.k);
        let per = (self.cfg.m / (self.cuts.len() + 1)).max(1);
        let mut strata: Vec<Stratum> = (0..=self.cuts.len())
            .map(|_| Stratum { archive: Archive::new(self.cfg.d), pool: Reservoir::new(self.cfg.d, per, self.cfg.sampler) })
            .collect();
        for t in self.whole.archive.live_tuples() {
            strata[self.stratum_of(t.coords[0])].archive.insert(t.clone())?;
        }
        for s in &mut strata {
            s.pool.resample(&s.archive, &mut self.whole.rng)?;
        }
        self.strata = strata;
        Ok(())
    }
}

impl AqpEngine for Srs {
    fn name(&self) -> &str {
        "srs"
    }

    fn apply(&mut self, ev: Event) -> aqp_core::Result<()> {
        if !self.built() {
            self.whole.apply(ev)?;
            if self.cfg.init_after.is_some_and(|n| self.whole.archive.len() >= n) {
                self.build()?;
            }
            return Ok(());
        }
        match ev {
            Event::Insert(t) => {
                let i = self.stratum_of(t.coords[0]);
                let rng = &mut self.whole.rng;
                let s = &mut self.strata[i];
                s.archive.insert(t.clone())?;
                s.pool.on_insert(&t, s.archive.len(), rng)?;
            }
            Event::Delete { id } => {
                let i = self
                    .strata
                    .iter()
                    .position(|s| s.archive.is_live(id))
                    .ok_or(AqpError::MissingId(id))?;
                let s = &mut self.strata[i];
                s.archive.delete(id)?;
                s.pool.on_delete(id, &s.archive, &mut self.whole.rng)?;
            }
        }
        Ok(())
    }

    fn answer(&mut self, q: &Query) -> aqp_core::Result<QueryAnswer> {
        if !self.built() && self.whole.archive.len() >= self.cfg.k {
            self.build()?;
        }
        if !self.built() {
            return self.whole.answer(q);
        }
        let strata: Vec<(f64, &[Tuple])> = self.strata.iter().map(|s| (s.archive.len() as f64, s.pool.tuples())).collect();
        stratified_answer(q, &strata)
    }

    fn resident_samples(&self) -> usize {
        if self.built() {
            self.strata.iter().map(|s| s.pool.len()).sum()
        } else {
            self.whole.resident_samples()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aqp_core::Rect;

    fn cfg() -> EngineConfig {
        EngineConfig { k: 4, m: 40, seed: 1, ..EngineConfig::default() }
    }

    fn fill(e: &mut dyn AqpEngine, n: u64) {
        for i in 0..n {
            e.apply(Event::Insert(Tuple::new(i, vec![i as f64], (i % 7) as f64))).unwrap();
        }
    }

    #[test]
    fn registry_knows_the_engines() {
        let reg = EngineRegistry::default();
        assert_eq!(reg.names().collect::<Vec<_>>(), ["dpt", "dpt-frozen", "rs", "srs"]);
        assert!(reg.create("nope", &cfg()).is_err());
    }

    #[test]
    fn complete_pools_answer_exactly() {
        for name in ["dpt", "rs", "srs"] {
            let cfg = EngineConfig { catchup_ratio: 1.0, ..cfg() };
            let mut e = EngineRegistry::default().create(name, &cfg).unwrap();
            fill(e.as_mut(), 35);
            let q = Query::new(AggKind::Sum, Rect::new(vec![10.0], vec![30.0]).unwrap());
            let truth: f64 = (10..30).map(|i| (i % 7) as f64).sum();
            let a = e.answer(&q).unwrap();
            assert!((a.estimate - truth).abs() < 1e-9, "{name}: {} vs {truth}", a.estimate);
        }
    }

    #[test]
    fn budgets_match() {
        let reg = EngineRegistry::default();
        for name in ["dpt", "rs", "srs"] {
            let mut e = reg.create(name, &cfg()).unwrap();
            fill(e.as_mut(), 2000);
            e.answer(&Query::new(AggKind::Count, Rect::unbounded(1))).unwrap();
            for i in 0..500 {
                e.apply(Event::Delete { id: i * 3 }).unwrap();
            }
            let r = e.resident_samples();
            assert!((40..=80).contains(&r), "{name} holds {r}");
        }
    }

    #[test]
    fn srs_strata_are_equal_depth() {
        let mut s = Srs::new(&cfg());
        fill(&mut s, 400);
        s.answer(&Query::new(AggKind::Count, Rect::unbounded(1))).unwrap();
        let sizes = s.strata_sizes();
        assert_eq!(sizes.len(), 4);
        assert!(sizes.iter().all(|&n| (60..=140).contains(&n)), "{sizes:?}");
        assert_eq!(s.stratum_of(-1.0), 0);
        assert_eq!(s.stratum_of(1e9), 3);
    }
}
