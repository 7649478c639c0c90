//! Dynamic index over sample points answering range aggregates and
//! approximate "highest-variance sub-query inside R" questions.

mod oracle;
mod rangetree;
mod rectstore;

use crate::error::{AqpError, Result};
use crate::model::{Rect, Tuple};

pub use oracle::{
    AvgOracle, CountOracle, Exhaustive, MaxVarOracle, MaxVarResult, OracleRegistry, SumOracle,
};
pub use rangetree::Agg;

use rangetree::{Change, Ctx, Level, Points, Sample};
use rectstore::{RectStore, WindowStore};

#[derive(Debug, Clone)]
pub struct MaxVarIndex {
    d: usize,
    mass: usize,
    points: Points,
    tree: Level,
    sorted: Vec<Vec<f64>>,
    rects: RectStore,
    windows: WindowStore,
    next_uid: u64,
    log: Vec<Change>,
}

impl MaxVarIndex {
    /// `mass` is the smallest sample count an AVG sub-query may hold.
    pub fn new(d: usize, mass: usize) -> Self {
        assert!(d >= 1, "at least one dimension");
        Self {
            d,
            mass: mass.max(1),
            points: Points::default(),
            tree: Level::empty(0, d),
            sorted: vec![Vec::new(); d],
            rects: RectStore::default(),
            windows: WindowStore::default(),
            next_uid: 0,
            log: Vec::new(),
        }
    }

    /// Builds a balanced index over `tuples` in one pass.
    pub fn build<'a, I: IntoIterator<Item = &'a Tuple>>(d: usize, mass: usize, tuples: I) -> Result<Self> {
        let mut idx = MaxVarIndex::new(d, mass);
        let mut slots = Vec::new();
        for t in tuples {
            idx.check(t)?;
            if idx.points.by_id.contains_key(&t.id) {
                return Err(AqpError::DuplicateSample(t.id));
            }
            slots.push(idx.points.add(Sample { id: t.id, coords: t.coords.clone(), value: t.value }));
            for j in 0..d {
                idx.sorted[j].push(t.coords[j]);
            }
            if d == 1 {
                idx.windows.insert(t.coords[0], t.id, t.value);
            }
        }
        for s in &mut idx.sorted {
            s.sort_by(f64::total_cmp);
        }
        let mut ctx = Ctx { points: &idx.points, track: false, mass: idx.mass, next_uid: &mut idx.next_uid, log: &mut idx.log };
        idx.tree = Level::build(0, d, &mut slots, &mut ctx);
        idx.rebuild_rects();
        Ok(idx)
    }

    pub fn dims(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.len() == 0
    }

    pub fn contains(&self, id: u64) -> bool {
        self.points.by_id.contains_key(&id)
    }

    pub fn mass(&self) -> usize {
        self.mass
    }

    pub fn set_mass(&mut self, mass: usize) {
        let mass = mass.max(1);
        if mass != self.mass {
            self.mass = mass;
            self.rebuild_rects();
        }
    }

    fn check(&self, t: &Tuple) -> Result<()> {
        if t.dims() != self.d {
            return Err(AqpError::DimensionMismatch { expected: self.d, got: t.dims() });
        }
        Ok(())
    }

    pub fn insert(&mut self, t: &Tuple) -> Result<()> {
        self.check(t)?;
        if self.contains(t.id) {
            return Err(AqpError::DuplicateSample(t.id));
        }
        let slot = self.points.add(Sample { id: t.id, coords: t.coords.clone(), value: t.value });
        for j in 0..self.d {
            let v = t.coords[j];
            let pos = self.sorted[j].partition_point(|x| x.total_cmp(&v).is_lt());
            self.sorted[j].insert(pos, v);
        }
        if self.d == 1 {
            self.windows.insert(t.coords[0], t.id, t.value);
        }
        let mut ctx = Ctx { points: &self.points, track: self.d > 1, mass: self.mass, next_uid: &mut self.next_uid, log: &mut self.log };
        self.tree.insert(slot, &mut ctx);
        self.drain_log();
        Ok(())
    }

    pub fn delete(&mut self, id: u64) -> Result<Tuple> {
        let slot = *self.points.by_id.get(&id).ok_or(AqpError::MissingSample(id))?;
        let mut ctx = Ctx { points: &self.points, track: self.d > 1, mass: self.mass, next_uid: &mut self.next_uid, log: &mut self.log };
        let removed = self.tree.delete(slot, &mut ctx);
        debug_assert!(removed);
        self.drain_log();
        let s = self.points.remove(slot);
        for j in 0..self.d {
            let v = s.coords[j];
            let pos = self.sorted[j].partition_point(|x| x.total_cmp(&v).is_lt());
            self.sorted[j].remove(pos);
        }
        if self.d == 1 {
            self.windows.delete(s.coords[0], s.id);
        }
        Ok(Tuple { id: s.id, coords: s.coords, value: s.value })
    }

    fn drain_log(&mut self) {
        for c in self.log.drain(..) {
            match c {
                Change::Upsert { uid, parts } => self.rects.upsert(uid, parts),
                Change::Remove(uid) => self.rects.remove(uid),
            }
        }
    }

    fn rebuild_rects(&mut self) {
        self.rects.clear();
        if self.d == 1 {
            return;
        }
        let mut log = Vec::new();
        let mut uid = self.next_uid;
        {
            let mut ctx = Ctx { points: &self.points, track: true, mass: self.mass, next_uid: &mut uid, log: &mut log };
            self.tree.for_each_last(&mut |lvl, i| lvl.emit_node(i, &mut ctx));
        }
        for c in log {
            if let Change::Upsert { uid, parts } = c {
                self.rects.upsert(uid, parts);
            }
        }
        self.rects.rebuild();
    }

    /// Count, sum and sum of squares of the samples inside `r`.
    pub fn aggregate(&self, r: &Rect) -> Agg {
        self.tree.aggregate(r)
    }

    /// Aggregates of the last-level canonical nodes covering `r`.
    pub fn canonical(&self, r: &Rect) -> Vec<Agg> {
        let mut out = Vec::new();
        self.tree.canonical(r, &mut |lvl, i| out.push(lvl.node_agg(i)));
        out
    }

    /// Samples inside `r`.
    pub fn report(&self, r: &Rect) -> Vec<Tuple> {
        let mut slots = Vec::new();
        self.tree.report(r, &mut slots);
        slots
            .into_iter()
            .map(|s| {
                let p = self.points.get(s);
                Tuple { id: p.id, coords: p.coords.clone(), value: p.value }
            })
            .collect()
    }

    /// Calls `f(coords, value)` for every sample inside `r`.
    pub fn for_each_in(&self, r: &Rect, mut f: impl FnMut(u64, &[f64], f64)) {
        let mut slots = Vec::new();
        self.tree.report(r, &mut slots);
        for s in slots {
            let p = self.points.get(s);
            f(p.id, &p.coords, p.value);
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = (u64, &[f64], f64)> + '_ {
        self.points.iter().map(|(_, s)| (s.id, s.coords.as_slice(), s.value))
    }

    /// The `rank`-th smallest (0-based) coordinate along `dim` among samples in `r`.
    pub fn select(&self, r: &Rect, dim: usize, rank: usize) -> Option<f64> {
        let xs = &self.sorted[dim];
        let mut a = xs.partition_point(|x| *x < r.lo[dim]);
        let mut b = xs.partition_point(|x| *x < r.hi[dim]);
        let mut probe = r.clone();
        let mut found = None;
        // smallest i with count(r, x_dim <= xs[i]) > rank
        while a < b {
            let mid = (a + b) / 2;
            probe.hi[dim] = xs[mid].next_up().min(r.hi[dim]);
            if self.aggregate(&probe).count > rank {
                found = Some(xs[mid]);
                b = mid;
            } else {
                a = mid + 1;
            }
        }
        found
    }

    /// Sorted coordinates of all samples along `dim`.
    pub(crate) fn sorted_coords(&self, dim: usize) -> &[f64] {
        &self.sorted[dim]
    }

    /// Heaviest (by sum of squared values) stored rectangle inside `r`. In one
    /// dimension the candidates are all runs of exactly `mass` samples.
    pub fn heaviest_inside(&mut self, r: &Rect) -> Option<(Rect, f64)> {
        if self.d == 1 {
            self.windows.max_inside(r.lo[0], r.hi[0], self.mass)
        } else {
            self.rects.max_inside(r)
        }
    }

    pub fn height(&self) -> usize {
        self.tree.height()
    }

    #[cfg(test)]
    fn stored_parts(&self) -> Vec<(Vec<f64>, Vec<f64>, f64)> {
        let mut v: Vec<_> = self.rects.parts().into_iter().map(|(_, p)| (p.lo, p.hi, p.weight)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }
}
