//! Weighted-rectangle stores answering "heaviest stored rectangle lying inside R".

use std::collections::{HashMap, HashSet};

use super::rangetree::Part;
use crate::model::Rect;

/// A stored rectangle is a closed box `[lo, hi]`, handled as a 2d-dimensional
/// point `(lo, hi)`. A static k-d tree is rebuilt once enough updates pile up
/// in the pending buffer and tombstone set.
#[derive(Debug, Clone, Default)]
pub(crate) struct RectStore {
    live: HashMap<(u64, u8), Part>,
    built: Vec<((u64, u8), Part)>,
    nodes: Vec<KdNode>,
    dead: HashSet<(u64, u8)>,
    pending: HashSet<(u64, u8)>,
}

#[derive(Debug, Clone)]
struct KdNode {
    start: u32,
    end: u32,
    /// Componentwise min and max of the 2d-points below.
    min: Vec<f64>,
    max: Vec<f64>,
    best: f64,
    left: u32,
    right: u32,
}

const LEAF: usize = 8;

impl RectStore {
    pub fn clear(&mut self) {
        *self = RectStore::default();
    }

    pub fn remove(&mut self, uid: u64) {
        for part in 0..2u8 {
            let key = (uid, part);
            if self.live.remove(&key).is_some() && !self.pending.remove(&key) {
                self.dead.insert(key);
            }
        }
    }

    pub fn upsert(&mut self, uid: u64, parts: Vec<Part>) {
        self.remove(uid);
        for (i, p) in parts.into_iter().enumerate() {
            let key = (uid, i as u8);
            self.live.insert(key, p);
            self.pending.insert(key);
        }
        if self.pending.len() + self.dead.len() > 64 + self.built.len() / 2 {
            self.rebuild();
        }
    }

    pub fn rebuild(&mut self) {
        let mut items: Vec<((u64, u8), Part)> = self.live.iter().map(|(k, p)| (*k, p.clone())).collect();
        items.sort_by(|a, b| a.0.cmp(&b.0));
        self.nodes.clear();
        self.dead.clear();
        self.pending.clear();
        if !items.is_empty() {
            let n = items.len();
            self.build_rec(&mut items, 0, n, 0);
        }
        self.built = items;
    }

    fn build_rec(&mut self, items: &mut [((u64, u8), Part)], start: usize, end: usize, depth: usize) -> u32 {
        let dd = 2 * items[start].1.lo.len();
        let coord = |p: &Part, j: usize| if j < dd / 2 { p.lo[j] } else { p.hi[j - dd / 2] };
        let mut min = vec![f64::INFINITY; dd];
        let mut max = vec![f64::NEG_INFINITY; dd];
        let mut best = f64::NEG_INFINITY;
        for (_, p) in &items[start..end] {
            for j in 0..dd {
                min[j] = min[j].min(coord(p, j));
                max[j] = max[j].max(coord(p, j));
            }
            best = best.max(p.weight);
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(KdNode { start: start as u32, end: end as u32, min, max, best, left: u32::MAX, right: u32::MAX });
        if end - start > LEAF {
            let axis = depth % dd;
            let mid = (start + end) / 2;
            items[start..end].select_nth_unstable_by(mid - start, |a, b| coord(&a.1, axis).total_cmp(&coord(&b.1, axis)));
            let l = self.build_rec(items, start, mid, depth + 1);
            let r = self.build_rec(items, mid, end, depth + 1);
            self.nodes[idx as usize].left = l;
            self.nodes[idx as usize].right = r;
        }
        idx
    }

    /// Heaviest stored rectangle inside the half-open query box `r`; ties go
    /// to the smallest key so results do not depend on update history.
    pub fn max_inside(&self, r: &Rect) -> Option<(Rect, f64)> {
        let inside = |p: &Part| {
            p.lo.iter().zip(&r.lo).all(|(a, b)| a >= b) && p.hi.iter().zip(&r.hi).all(|(a, b)| a < b)
        };
        let mut best: Option<((u64, u8), f64)> = None;
        let better = |cand: ((u64, u8), f64), best: &Option<((u64, u8), f64)>| match best {
            None => true,
            Some((k, w)) => cand.1 > *w || (cand.1 == *w && cand.0 < *k),
        };
        for key in &self.pending {
            let p = &self.live[key];
            if inside(p) && better((*key, p.weight), &best) {
                best = Some((*key, p.weight));
            }
        }
        if !self.nodes.is_empty() {
            let d = r.lo.len();
            let mut stack = vec![0u32];
            while let Some(i) = stack.pop() {
                let n = &self.nodes[i as usize];
                if let Some((_, w)) = best {
                    if n.best < w {
                        continue;
                    }
                }
                // some point must have lo >= r.lo and hi < r.hi in every dimension
                let feasible = (0..d).all(|j| n.max[j] >= r.lo[j] && n.min[d + j] < r.hi[j]);
                if !feasible {
                    continue;
                }
                if n.left == u32::MAX {
                    for (key, p) in &self.built[n.start as usize..n.end as usize] {
                        if !self.dead.contains(key) && inside(p) && better((*key, p.weight), &best) {
                            best = Some((*key, p.weight));
                        }
                    }
                } else {
                    stack.push(n.left);
                    stack.push(n.right);
                }
            }
        }
        best.map(|(key, w)| {
            let p = &self.live[&key];
            (Rect::closed(p.lo.clone(), &p.hi), w)
        })
    }

    #[cfg(test)]
    pub fn parts(&self) -> Vec<((u64, u8), Part)> {
        let mut v: Vec<_> = self.live.iter().map(|(k, p)| (*k, p.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

/// One-dimensional variant: every run of exactly `w` consecutive samples in
/// coordinate order, weighted by its sum of squared values.
#[derive(Debug, Clone, Default)]
pub(crate) struct WindowStore {
    /// Samples sorted by `(coord, id)`.
    keys: Vec<(f64, u64)>,
    values: Vec<f64>,
    prefix_sq: Vec<f64>,
    dirty: bool,
}

impl WindowStore {
    pub fn insert(&mut self, coord: f64, id: u64, value: f64) {
        let pos = self.keys.partition_point(|k| crate::model::key_cmp(*k, (coord, id)).is_lt());
        self.keys.insert(pos, (coord, id));
        self.values.insert(pos, value);
        self.dirty = true;
    }

    pub fn delete(&mut self, coord: f64, id: u64) {
        let pos = self.keys.partition_point(|k| crate::model::key_cmp(*k, (coord, id)).is_lt());
        debug_assert_eq!(self.keys.get(pos), Some(&(coord, id)));
        self.keys.remove(pos);
        self.values.remove(pos);
        self.dirty = true;
    }

    fn refresh(&mut self) {
        if self.dirty || self.prefix_sq.len() != self.values.len() + 1 {
            self.prefix_sq.clear();
            self.prefix_sq.push(0.0);
            let mut acc = 0.0;
            for v in &self.values {
                acc += v * v;
                self.prefix_sq.push(acc);
            }
            self.dirty = false;
        }
    }

    /// Heaviest window of `w` samples inside `[lo, hi)`.
    pub fn max_inside(&mut self, lo: f64, hi: f64, w: usize) -> Option<(Rect, f64)> {
        self.refresh();
        let a = self.keys.partition_point(|k| k.0 < lo);
        let b = self.keys.partition_point(|k| k.0 < hi);
        if w == 0 || b < a + w {
            return None;
        }
        let mut best = (a, f64::NEG_INFINITY);
        for s in a..=b - w {
            let weight = self.prefix_sq[s + w] - self.prefix_sq[s];
            if weight > best.1 {
                best = (s, weight);
            }
        }
        let (s, weight) = best;
        Some((Rect::closed(vec![self.keys[s].0], &[self.keys[s + w - 1].0]), weight))
    }

    /// Values of the samples inside `[lo, hi)` in coordinate order.
    pub fn values_in(&self, lo: f64, hi: f64) -> (&[(f64, u64)], &[f64]) {
        let a = self.keys.partition_point(|k| k.0 < lo);
        let b = self.keys.partition_point(|k| k.0 < hi);
        (&self.keys[a..b], &self.values[a..b])
    }
}
