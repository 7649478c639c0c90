//! The authoritative dataset: an append-only log of inserts and deletes plus
//! the two samplers used to draw uniform tuples from it.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AqpError, Result};
use crate::model::{AggKind, Query, SamplerMode, Tuple};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Event {
    Insert(Tuple),
    Delete { id: u64 },
}

#[derive(Debug, Clone)]
struct Entry {
    tuple: Tuple,
    inserted_at: u64,
    deleted_at: Option<u64>,
    /// Position in `live`, or `usize::MAX` once deleted.
    live_pos: usize,
}

impl Entry {
    fn live_at(&self, version: u64) -> bool {
        self.inserted_at < version && self.deleted_at.is_none_or(|v| v >= version)
    }
}

#[derive(Debug, Clone, Copy)]
enum LogRecord {
    Insert(usize),
    Delete(usize),
}

/// A frozen view of the archive at some version. Entries never move, so a
/// snapshot stays readable while the archive keeps growing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Snapshot {
    pub version: u64,
    pub size: usize,
    slab_len: usize,
}

#[derive(Debug, Clone)]
pub struct Archive {
    d: usize,
    slab: Vec<Entry>,
    by_id: HashMap<u64, usize>,
    live: Vec<usize>,
    log: Vec<LogRecord>,
}

impl Archive {
    pub fn new(d: usize) -> Self {
        Self { d, slab: Vec::new(), by_id: HashMap::new(), live: Vec::new(), log: Vec::new() }
    }

    pub fn dims(&self) -> usize {
        self.d
    }

    /// Number of live tuples.
    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    /// Number of events applied so far.
    pub fn version(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn get(&self, id: u64) -> Option<&Tuple> {
        self.by_id.get(&id).map(|&i| &self.slab[i].tuple)
    }

    pub fn is_live(&self, id: u64) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn live_tuples(&self) -> impl Iterator<Item = &Tuple> + '_ {
        self.live.iter().map(|&i| &self.slab[i].tuple)
    }

    pub fn apply(&mut self, event: Event) -> Result<u64> {
        match event {
            Event::Insert(t) => self.insert(t).map(|_| self.version()),
            Event::Delete { id } => self.delete(id).map(|_| self.version()),
        }
    }

    pub fn insert(&mut self, t: Tuple) -> Result<()> {
        if t.dims() != self.d {
            return Err(AqpError::DimensionMismatch { expected: self.d, got: t.dims() });
        }
        if self.by_id.contains_key(&t.id) {
            return Err(AqpError::DuplicateId(t.id));
        }
        let idx = self.slab.len();
        self.by_id.insert(t.id, idx);
        self.slab.push(Entry { tuple: t, inserted_at: self.version(), deleted_at: None, live_pos: self.live.len() });
        self.live.push(idx);
        self.log.push(LogRecord::Insert(idx));
        Ok(())
    }

    /// Removes a live tuple and returns it.
    pub fn delete(&mut self, id: u64) -> Result<Tuple> {
        let idx = self.by_id.remove(&id).ok_or(AqpError::MissingId(id))?;
        let pos = self.slab[idx].live_pos;
        self.live.swap_remove(pos);
        if let Some(&moved) = self.live.get(pos) {
            self.slab[moved].live_pos = pos;
        }
        let version = self.version();
        let entry = &mut self.slab[idx];
        entry.deleted_at = Some(version);
        entry.live_pos = usize::MAX;
        self.log.push(LogRecord::Delete(idx));
        Ok(entry.tuple.clone())
    }

    /// The applied events in order.
    pub fn events(&self) -> impl Iterator<Item = Event> + '_ {
        self.log.iter().map(|r| match *r {
            LogRecord::Insert(i) => Event::Insert(self.slab[i].tuple.clone()),
            LogRecord::Delete(i) => Event::Delete { id: self.slab[i].tuple.id },
        })
    }

    pub fn replay<I: IntoIterator<Item = Event>>(d: usize, events: I) -> Result<Self> {
        let mut a = Archive::new(d);
        for e in events {
            a.apply(e)?;
        }
        Ok(a)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { version: self.version(), size: self.len(), slab_len: self.slab.len() }
    }

    /// Draws `n` distinct live tuples uniformly at random.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, n: usize, mode: SamplerMode, rng: &mut R) -> Result<Vec<Tuple>> {
        if n > self.len() {
            return Err(AqpError::NotEnoughTuples { requested: n, available: self.len() });
        }
        match mode {
            SamplerMode::Singleton => {
                // partial Fisher-Yates over the dense live vector, swaps kept in a side map
                let mut swaps: HashMap<usize, usize> = HashMap::with_capacity(n);
                let len = self.live.len();
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let j = rng.random_range(i..len);
                    let vj = *swaps.get(&j).unwrap_or(&j);
                    let vi = *swaps.get(&i).unwrap_or(&i);
                    swaps.insert(j, vi);
                    out.push(self.slab[self.live[vj]].tuple.clone());
                }
                Ok(out)
            }
            SamplerMode::Sequential => {
                let snap = self.snapshot();
                Ok(self.sequential_select(&snap, n, rng))
            }
        }
    }

    /// Exact aggregate over the live tuples inside the query rectangle.
    pub fn ground_truth(&self, q: &Query) -> Result<f64> {
        q.predicate.check_dims(self.d)?;
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for t in self.live_tuples().filter(|t| q.predicate.contains_point(&t.coords)) {
            count += 1;
            sum += t.value;
            min = min.min(t.value);
            max = max.max(t.value);
        }
        match q.kind {
            AggKind::Count => Ok(count as f64),
            AggKind::Sum => Ok(sum),
            _ if count == 0 => Err(AqpError::EmptySelection),
            AggKind::Avg => Ok(sum / count as f64),
            AggKind::Min => Ok(min),
            AggKind::Max => Ok(max),
        }
    }

    /// Selection sampling over the snapshot prefix of the log, then shuffled so
    /// the result can be consumed incrementally in random order.
    fn sequential_select<R: Rng + ?Sized>(&self, snap: &Snapshot, n: usize, rng: &mut R) -> Vec<Tuple> {
        let mut needed = n.min(snap.size);
        let mut remaining = snap.size;
        let mut out = Vec::with_capacity(needed);
        for e in &self.slab[..snap.slab_len] {
            if needed == 0 {
                break;
            }
            if !e.live_at(snap.version) {
                continue;
            }
            if rng.random_range(0..remaining) < needed {
                out.push(e.tuple.clone());
                needed -= 1;
            }
            remaining -= 1;
        }
        out.shuffle(rng);
        out
    }
}

/// Incremental without-replacement sampler over a snapshot, used by catch-up.
#[derive(Debug, Clone)]
pub struct SnapshotSampler {
    snap: Snapshot,
    mode: SamplerMode,
    seen: HashSet<usize>,
    queue: Vec<Tuple>,
    drawn: usize,
    limit: usize,
}

impl SnapshotSampler {
    /// Prepares to draw up to `limit` distinct tuples live at `snap`.
    pub fn new<R: Rng + ?Sized>(archive: &Archive, snap: Snapshot, limit: usize, mode: SamplerMode, rng: &mut R) -> Self {
        let limit = limit.min(snap.size);
        let queue = match mode {
            SamplerMode::Sequential => {
                let mut q = archive.sequential_select(&snap, limit, rng);
                q.reverse();
                q
            }
            SamplerMode::Singleton => Vec::new(),
        };
        Self { snap, mode, seen: HashSet::new(), queue, drawn: 0, limit }
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snap
    }

    pub fn drawn(&self) -> usize {
        self.drawn
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn is_exhausted(&self) -> bool {
        self.drawn >= self.limit
    }

    pub fn next_sample<R: Rng + ?Sized>(&mut self, archive: &Archive, rng: &mut R) -> Option<Tuple> {
        if self.is_exhausted() {
            return None;
        }
        let t = match self.mode {
            SamplerMode::Sequential => self.queue.pop()?,
            SamplerMode::Singleton => {
                let slab = &archive.slab[..self.snap.slab_len];
                // Random-offset probes; a snapshot dominated by deleted entries
                // falls back to enumerating the survivors once.
                let mut probes = 0usize;
                loop {
                    if probes > 64 {
                        let rest: Vec<usize> = (0..slab.len())
                            .filter(|i| slab[*i].live_at(self.snap.version) && !self.seen.contains(i))
                            .collect();
                        let i = rest[rng.random_range(0..rest.len())];
                        self.seen.insert(i);
                        break slab[i].tuple.clone();
                    }
                    probes += 1;
                    let i = rng.random_range(0..slab.len());
                    if slab[i].live_at(self.snap.version) && self.seen.insert(i) {
                        break slab[i].tuple.clone();
                    }
                }
            }
        };
        self.drawn += 1;
        Some(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Rect;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(id: u64, x: f64, a: f64) -> Tuple {
        Tuple::new(id, vec![x], a)
    }

    #[test]
    fn apply_examples() {
        let mut a = Archive::new(1);
        a.apply(Event::Insert(t(1, 0.0, 1.0))).unwrap();
        assert_eq!(a.len(), 1);
        a.apply(Event::Delete { id: 1 }).unwrap();
        assert_eq!(a.len(), 0);
        assert_eq!(a.apply(Event::Delete { id: 9 }), Err(AqpError::MissingId(9)));
        a.insert(t(2, 0.0, 1.0)).unwrap();
        assert_eq!(a.insert(t(2, 1.0, 1.0)), Err(AqpError::DuplicateId(2)));
    }

    #[test]
    fn ground_truth_examples() {
        let mut a = Archive::new(1);
        for (i, v) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            a.insert(t(i as u64, i as f64, v)).unwrap();
        }
        let all = Rect::new(vec![0.0], vec![10.0]).unwrap();
        assert_eq!(a.ground_truth(&Query::new(AggKind::Sum, all.clone())).unwrap(), 6.0);
        assert_eq!(a.ground_truth(&Query::new(AggKind::Avg, all)).unwrap(), 2.0);
        let none = Rect::new(vec![20.0], vec![30.0]).unwrap();
        assert_eq!(a.ground_truth(&Query::new(AggKind::Count, none.clone())).unwrap(), 0.0);
        assert_eq!(a.ground_truth(&Query::new(AggKind::Avg, none.clone())), Err(AqpError::EmptySelection));
        assert_eq!(a.ground_truth(&Query::new(AggKind::Max, none)), Err(AqpError::EmptySelection));
    }

    #[test]
    fn sample_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Archive::new(1);
        for i in 0..5 {
            a.insert(t(i, i as f64, 0.0)).unwrap();
        }
        for mode in [SamplerMode::Singleton, SamplerMode::Sequential] {
            let mut ids: Vec<u64> = a.sample_uniform(5, mode, &mut rng).unwrap().iter().map(|t| t.id).collect();
            ids.sort();
            assert_eq!(ids, vec![0, 1, 2, 3, 4]);
            assert!(a.sample_uniform(0, mode, &mut rng).unwrap().is_empty());
            assert!(a.sample_uniform(6, mode, &mut rng).is_err());
        }
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        let mut a = Archive::new(1);
        for i in 0..1000 {
            a.insert(t(i, i as f64, 0.0)).unwrap();
        }
        let trials = 2000;
        let sigma = (trials as f64 * 0.1 * 0.9).sqrt();
        for mode in [SamplerMode::Singleton, SamplerMode::Sequential] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut hits = vec![0u32; 1000];
            for _ in 0..trials {
                for s in a.sample_uniform(100, mode, &mut rng).unwrap() {
                    hits[s.id as usize] += 1;
                }
            }
            let expected = trials as f64 * 0.1;
            // 3 sigma per tuple holds with high probability across 1000 tuples; allow a handful
            let outliers = hits.iter().filter(|&&h| (h as f64 - expected).abs() > 3.0 * sigma).count();
            assert!(outliers <= 8, "{mode:?}: {outliers} tuples outside 3 sigma");
            // chi-square over all tuples, 999 dof: 0.01 critical value is about 1106
            let chi2: f64 = hits.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum::<f64>() * (1.0 / 0.9);
            assert!(chi2 < 1106.0, "{mode:?}: chi2 = {chi2}");
        }
    }

    #[test]
    fn replay_reproduces_live_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = Archive::new(2);
        let mut next = 0u64;
        for _ in 0..500 {
            if a.is_empty() || rng.random_bool(0.6) {
                a.insert(Tuple::new(next, vec![rng.random(), rng.random()], rng.random())).unwrap();
                next += 1;
            } else {
                let victim = a.live_tuples().nth(rng.random_range(0..a.len())).unwrap().id;
                a.delete(victim).unwrap();
            }
        }
        let b = Archive::replay(2, a.events()).unwrap();
        let mut x: Vec<u64> = a.live_tuples().map(|t| t.id).collect();
        let mut y: Vec<u64> = b.live_tuples().map(|t| t.id).collect();
        x.sort();
        y.sort();
        assert_eq!(x, y);
        assert_eq!(a.version(), b.version());
    }

    #[test]
    fn snapshot_sampler_ignores_later_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = Archive::new(1);
        for i in 0..100 {
            a.insert(t(i, i as f64, 0.0)).unwrap();
        }
        for i in 0..50 {
            a.delete(i).unwrap();
        }
        let snap = a.snapshot();
        for mode in [SamplerMode::Singleton, SamplerMode::Sequential] {
            let mut b = a.clone();
            let mut s = SnapshotSampler::new(&b, snap, 1000, mode, &mut rng);
            assert_eq!(s.limit(), 50);
            // later events must be invisible to the sampler
            b.delete(60).unwrap();
            b.insert(t(500, 0.0, 0.0)).unwrap();
            let mut got = HashSet::new();
            while let Some(x) = s.next_sample(&b, &mut rng) {
                assert!((50..100).contains(&x.id));
                assert!(got.insert(x.id));
            }
            assert_eq!(got.len(), 50);
        }
    }
}
