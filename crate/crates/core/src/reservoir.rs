//! Pooled uniform sample of the live archive, kept between `m` and `2m`
//! tuples under inserts and deletes. Leaves read their strata from it through
//! the range-tree index.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::Result;
use crate::maxvar::{Agg, MaxVarIndex};
use crate::model::{Rect, SamplerMode, Tuple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InsertOutcome {
    Kept { replaced: Option<u64> },
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeleteOutcome {
    Untouched,
    Removed,
    Refilled { size: usize },
}

#[derive(Debug, Clone)]
pub struct Stratum {
    pub tuples: Vec<Tuple>,
    pub m_i: usize,
}

#[derive(Debug, Clone)]
pub struct Reservoir {
    m: usize,
    pool: Vec<Tuple>,
    pos: HashMap<u64, usize>,
    index: MaxVarIndex,
    /// True while the pool holds every live tuple.
    complete: bool,
    mode: SamplerMode,
    refills: u64,
    /// Archive size as of the last update seen.
    n: usize,
}

impl Reservoir {
    /// An empty reservoir over an empty archive.
    pub fn new(d: usize, m: usize, mode: SamplerMode) -> Self {
        assert!(m >= 1, "m must be positive");
        Self { m, pool: Vec::new(), pos: HashMap::new(), index: MaxVarIndex::new(d, 1), complete: true, mode, refills: 0, n: 0 }
    }

    /// Draws a fresh pool of `min(2m, N)` uniform tuples from the archive.
    pub fn fill(d: usize, m: usize, mode: SamplerMode, archive: &Archive, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut r = Reservoir::new(d, m, mode);
        r.resample(archive, rng)?;
        Ok(r)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn capacity(&self) -> usize {
        2 * self.m
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn archive_size(&self) -> usize {
        self.n
    }

    pub fn refills(&self) -> u64 {
        self.refills
    }

    pub fn contains(&self, id: u64) -> bool {
        self.pos.contains_key(&id)
    }

    pub fn tuples(&self) -> &[Tuple] {
        &self.pool
    }

    pub fn index(&self) -> &MaxVarIndex {
        &self.index
    }

    pub fn index_mut(&mut self) -> &mut MaxVarIndex {
        &mut self.index
    }

    /// Discards the pool and draws `min(2m, N)` fresh uniform tuples.
    pub fn resample(&mut self, archive: &Archive, rng: &mut ChaCha8Rng) -> Result<()> {
        let n = self.capacity().min(archive.len());
        let fresh = archive.sample_uniform(n, self.mode, rng)?;
        self.complete = n == archive.len();
        self.n = archive.len();
        self.pos = fresh.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
        self.index = MaxVarIndex::build(archive.dims(), self.index.mass(), &fresh)?;
        self.pool = fresh;
        Ok(())
    }

    /// Call after `t` has been inserted into the archive; `n` is the archive
    /// size including `t`.
    pub fn on_insert(&mut self, t: &Tuple, n: usize, rng: &mut ChaCha8Rng) -> Result<InsertOutcome> {
        self.n = n;
        if self.complete && self.pool.len() < self.capacity() {
            self.push(t.clone())?;
            return Ok(InsertOutcome::Kept { replaced: None });
        }
        self.complete = false;
        if self.pool.is_empty() || rng.random_range(0..n) >= self.pool.len() {
            return Ok(InsertOutcome::Skipped);
        }
        let victim = self.pool[rng.random_range(0..self.pool.len())].id;
        self.remove(victim)?;
        self.push(t.clone())?;
        Ok(InsertOutcome::Kept { replaced: Some(victim) })
    }

    /// Call after `id` has been deleted from the archive.
    pub fn on_delete(&mut self, id: u64, archive: &Archive, rng: &mut ChaCha8Rng) -> Result<DeleteOutcome> {
        self.n = archive.len();
        if !self.contains(id) {
            return Ok(DeleteOutcome::Untouched);
        }
        if self.complete || self.pool.len() > self.m {
            self.remove(id)?;
            return Ok(DeleteOutcome::Removed);
        }
        self.resample(archive, rng)?;
        self.refills += 1;
        Ok(DeleteOutcome::Refilled { size: self.pool.len() })
    }

    fn push(&mut self, t: Tuple) -> Result<()> {
        self.index.insert(&t)?;
        self.pos.insert(t.id, self.pool.len());
        self.pool.push(t);
        Ok(())
    }

    fn remove(&mut self, id: u64) -> Result<Tuple> {
        self.index.delete(id)?;
        let i = self.pos.remove(&id).expect("pool position");
        let t = self.pool.swap_remove(i);
        if let Some(moved) = self.pool.get(i) {
            self.pos.insert(moved.id, i);
        }
        Ok(t)
    }

    /// Pool members inside `r`.
    pub fn stratum(&self, r: &Rect) -> Stratum {
        let tuples = self.index.report(r);
        Stratum { m_i: tuples.len(), tuples }
    }

    pub fn stratum_agg(&self, r: &Rect) -> Agg {
        self.index.aggregate(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tup(id: u64) -> Tuple {
        Tuple::new(id, vec![id as f64], id as f64)
    }

    fn setup(n: u64, m: usize, seed: u64) -> (Archive, Reservoir, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Archive::new(1);
        let mut r = Reservoir::new(1, m, SamplerMode::Singleton);
        for i in 0..n {
            a.insert(tup(i)).unwrap();
            r.on_insert(&tup(i), a.len(), &mut rng).unwrap();
        }
        (a, r, rng)
    }

    #[test]
    fn below_cap_always_added() {
        let (_, r, _) = setup(5, 5, 1);
        assert_eq!(r.len(), 5);
        let (mut a, mut r, mut rng) = setup(5, 5, 1);
        a.insert(tup(5)).unwrap();
        assert_eq!(r.on_insert(&tup(5), a.len(), &mut rng).unwrap(), InsertOutcome::Kept { replaced: None });
        assert_eq!(r.len(), 6);
    }

    #[test]
    fn delete_outcomes() {
        let (mut a, mut r, mut rng) = setup(200, 5, 2);
        assert_eq!(r.len(), 10);
        let outside = (0..200).find(|i| !r.contains(*i)).unwrap();
        a.delete(outside).unwrap();
        assert_eq!(r.on_delete(outside, &a, &mut rng).unwrap(), DeleteOutcome::Untouched);
        // drain the pool down to m + 1, then one more removal lands on m
        while r.len() > 6 {
            let id = r.tuples()[0].id;
            a.delete(id).unwrap();
            assert_eq!(r.on_delete(id, &a, &mut rng).unwrap(), DeleteOutcome::Removed);
        }
        let id = r.tuples()[0].id;
        a.delete(id).unwrap();
        assert_eq!(r.on_delete(id, &a, &mut rng).unwrap(), DeleteOutcome::Removed);
        assert_eq!(r.len(), 5);
        let id = r.tuples()[0].id;
        a.delete(id).unwrap();
        assert_eq!(r.on_delete(id, &a, &mut rng).unwrap(), DeleteOutcome::Refilled { size: 10 });
        assert_eq!(r.len(), 10);
        assert!(r.tuples().iter().all(|t| a.is_live(t.id)));
    }

    #[test]
    fn refill_below_capacity_takes_everything() {
        let (mut a, mut r, mut rng) = setup(30, 5, 3);
        while a.len() > 7 {
            let id = a.live_tuples().next().unwrap().id;
            a.delete(id).unwrap();
            r.on_delete(id, &a, &mut rng).unwrap();
        }
        // once the pool has hit m it refills with the whole live set, or keeps
        // shrinking by plain removal while still above m
        assert!(r.len() >= 5 || r.is_complete());
        while !a.is_empty() {
            let id = a.live_tuples().next().unwrap().id;
            a.delete(id).unwrap();
            r.on_delete(id, &a, &mut rng).unwrap();
            assert!(r.tuples().iter().all(|t| a.is_live(t.id)));
        }
        assert!(r.is_empty());
    }

    #[test]
    fn acceptance_rate_at_capacity() {
        // |S| = 10, N grows from 1000: acceptance probability 10 / N
        let (mut a, mut r, mut rng) = setup(999, 5, 4);
        let mut kept = 0u32;
        let trials = 20_000u64;
        let mut expected = 0.0;
        for i in 0..trials {
            let t = tup(1000 + i);
            a.insert(t.clone()).unwrap();
            expected += 10.0 / a.len() as f64;
            if matches!(r.on_insert(&t, a.len(), &mut rng).unwrap(), InsertOutcome::Kept { .. }) {
                kept += 1;
            }
        }
        assert!((kept as f64 - expected).abs() < 4.0 * expected.sqrt(), "kept {kept}, expected {expected}");
    }

    #[test]
    fn replacement_victims_are_uniform() {
        let mut counts = vec![0u32; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20_000 {
            let mut a = Archive::new(1);
            let mut r = Reservoir::new(1, 5, SamplerMode::Singleton);
            for i in 0..10 {
                a.insert(tup(i)).unwrap();
                r.on_insert(&tup(i), a.len(), &mut rng).unwrap();
            }
            a.insert(tup(10)).unwrap();
            if let InsertOutcome::Kept { replaced: Some(v) } = r.on_insert(&tup(10), 11, &mut rng).unwrap() {
                counts[v as usize] += 1;
            }
        }
        let total: u32 = counts.iter().sum();
        let e = total as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 9 dof, 0.01 critical value 21.67
        assert!(chi2 < 21.67, "chi2 {chi2}");
    }

    #[test]
    fn strata_match_linear_scan() {
        let (_, r, mut rng) = setup(64, 32, 6);
        for _ in 0..50 {
            let x: f64 = rng.random_range(-5.0..70.0);
            let y: f64 = rng.random_range(-5.0..70.0);
            let q = Rect::new(vec![x.min(y)], vec![x.max(y)]).unwrap();
            let mut want: Vec<u64> = r.tuples().iter().filter(|t| q.contains_point(&t.coords)).map(|t| t.id).collect();
            let mut got: Vec<u64> = r.stratum(&q).tuples.iter().map(|t| t.id).collect();
            want.sort();
            got.sort();
            assert_eq!(got, want);
        }
        assert_eq!(r.stratum(&Rect::unbounded(1)).m_i, r.len());
        assert_eq!(r.stratum(&Rect::new(vec![100.0], vec![200.0]).unwrap()).m_i, 0);
    }
}
