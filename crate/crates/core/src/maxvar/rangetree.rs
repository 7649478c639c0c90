//! Leaf-oriented, weight-balanced d-level range tree. Every node of level `j`
//! that is not on the last level owns an associated tree over its subtree on
//! dimension `j + 1`. Subtrees that drift out of balance are rebuilt whole.

use std::collections::HashMap;

use crate::model::{key_cmp, Rect};

pub(crate) const NIL: u32 = u32::MAX;

/// Balance slack: a child may hold up to this fraction of its parent (plus one).
const ALPHA: f64 = 0.75;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Agg {
    pub count: usize,
    pub sum: f64,
    pub sumsq: f64,
}

impl Agg {
    pub fn of(a: f64) -> Self {
        Self { count: 1, sum: a, sumsq: a * a }
    }

    pub fn merge(self, o: Agg) -> Agg {
        Agg { count: self.count + o.count, sum: self.sum + o.sum, sumsq: self.sumsq + o.sumsq }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Sample {
    pub id: u64,
    pub coords: Vec<f64>,
    pub value: f64,
}

/// Slot storage for the indexed samples; trees refer to slots by index.
#[derive(Debug, Clone, Default)]
pub(crate) struct Points {
    slots: Vec<Option<Sample>>,
    free: Vec<u32>,
    pub by_id: HashMap<u64, u32>,
}

impl Points {
    pub fn add(&mut self, s: Sample) -> u32 {
        let id = s.id;
        let slot = match self.free.pop() {
            Some(i) => {
                self.slots[i as usize] = Some(s);
                i
            }
            None => {
                self.slots.push(Some(s));
                (self.slots.len() - 1) as u32
            }
        };
        self.by_id.insert(id, slot);
        slot
    }

    pub fn remove(&mut self, slot: u32) -> Sample {
        let s = self.slots[slot as usize].take().expect("live slot");
        self.by_id.remove(&s.id);
        self.free.push(slot);
        s
    }

    pub fn get(&self, slot: u32) -> &Sample {
        self.slots[slot as usize].as_ref().expect("live slot")
    }

    pub fn key(&self, slot: u32, dim: usize) -> (f64, u64) {
        let s = self.get(slot);
        (s.coords[dim], s.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &Sample)> + '_ {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|s| (i as u32, s)))
    }
}

/// One stored rectangle derived from a last-level node: closed bounding box
/// of its samples and their sum of squared values.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Part {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub(crate) enum Change {
    Upsert { uid: u64, parts: Vec<Part> },
    Remove(u64),
}

/// Mutable state threaded through tree updates.
pub(crate) struct Ctx<'a> {
    pub points: &'a Points,
    /// Whether last-level nodes report their stored rectangles.
    pub track: bool,
    /// Sample count threshold of the rectangle store.
    pub mass: usize,
    pub next_uid: &'a mut u64,
    pub log: &'a mut Vec<Change>,
}

#[derive(Debug, Clone)]
struct Node {
    left: u32,
    right: u32,
    slot: u32,
    size: u32,
    agg: Agg,
    min_key: (f64, u64),
    max_key: (f64, u64),
    /// Closed bounding box `[lo.., hi..]` over all dimensions (last level only).
    bbox: Option<Box<[f64]>>,
    assoc: Option<Box<Level>>,
    uid: u64,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.left == NIL
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Level {
    dim: usize,
    d: usize,
    nodes: Vec<Node>,
    free: Vec<u32>,
    root: u32,
}

impl Level {
    pub fn empty(dim: usize, d: usize) -> Self {
        Self { dim, d, nodes: Vec::new(), free: Vec::new(), root: NIL }
    }

    fn is_last(&self) -> bool {
        self.dim + 1 == self.d
    }

    /// Builds a balanced tree over `slots`, which need not be sorted.
    pub fn build(dim: usize, d: usize, slots: &mut [u32], ctx: &mut Ctx) -> Self {
        let mut lvl = Level::empty(dim, d);
        slots.sort_by(|a, b| key_cmp(ctx.points.key(*a, dim), ctx.points.key(*b, dim)));
        if !slots.is_empty() {
            lvl.root = lvl.build_sorted(slots, ctx);
        }
        lvl
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        if self.root == NIL {
            0
        } else {
            self.nodes[self.root as usize].size as usize
        }
    }

    fn alloc(&mut self, n: Node) -> u32 {
        match self.free.pop() {
            Some(i) => {
                self.nodes[i as usize] = n;
                i
            }
            None => {
                self.nodes.push(n);
                (self.nodes.len() - 1) as u32
            }
        }
    }

    fn build_sorted(&mut self, slots: &[u32], ctx: &mut Ctx) -> u32 {
        if slots.len() == 1 {
            return self.new_leaf(slots[0], ctx);
        }
        let mid = slots.len() / 2;
        let l = self.build_sorted(&slots[..mid], ctx);
        let r = self.build_sorted(&slots[mid..], ctx);
        let assoc = if self.is_last() {
            None
        } else {
            let mut copy = slots.to_vec();
            Some(Box::new(Level::build(self.dim + 1, self.d, &mut copy, ctx)))
        };
        self.new_internal(l, r, assoc, ctx)
    }

    fn new_leaf(&mut self, slot: u32, ctx: &mut Ctx) -> u32 {
        let s = ctx.points.get(slot);
        let key = (s.coords[self.dim], s.id);
        let last = self.is_last();
        let bbox = last.then(|| s.coords.iter().chain(&s.coords).copied().collect::<Box<[f64]>>());
        let assoc = (!last).then(|| {
            let mut one = [slot];
            Box::new(Level::build(self.dim + 1, self.d, &mut one, ctx))
        });
        let uid = if last { fresh_uid(ctx) } else { 0 };
        let idx = self.alloc(Node {
            left: NIL,
            right: NIL,
            slot,
            size: 1,
            agg: Agg::of(s.value),
            min_key: key,
            max_key: key,
            bbox,
            assoc,
            uid,
        });
        self.emit(idx, ctx);
        idx
    }

    fn new_internal(&mut self, l: u32, r: u32, assoc: Option<Box<Level>>, ctx: &mut Ctx) -> u32 {
        let uid = if self.is_last() { fresh_uid(ctx) } else { 0 };
        let idx = self.alloc(Node {
            left: l,
            right: r,
            slot: NIL,
            size: 0,
            agg: Agg::default(),
            min_key: (0.0, 0),
            max_key: (0.0, 0),
            bbox: None,
            assoc,
            uid,
        });
        self.pull(idx);
        self.emit(idx, ctx);
        idx
    }

    /// Recomputes a node's summaries from its children.
    fn pull(&mut self, idx: u32) {
        let (l, r) = {
            let n = &self.nodes[idx as usize];
            (n.left as usize, n.right as usize)
        };
        let (ln, rn) = (&self.nodes[l], &self.nodes[r]);
        let size = ln.size + rn.size;
        let agg = ln.agg.merge(rn.agg);
        let min_key = ln.min_key;
        let max_key = rn.max_key;
        let bbox = match (&ln.bbox, &rn.bbox) {
            (Some(a), Some(b)) => {
                let d = a.len() / 2;
                let mut out = vec![0.0; 2 * d];
                for j in 0..d {
                    out[j] = a[j].min(b[j]);
                    out[d + j] = a[d + j].max(b[d + j]);
                }
                Some(out.into_boxed_slice())
            }
            _ => None,
        };
        let n = &mut self.nodes[idx as usize];
        n.size = size;
        n.agg = agg;
        n.min_key = min_key;
        n.max_key = max_key;
        n.bbox = bbox;
    }

    fn emit(&self, idx: u32, ctx: &mut Ctx) {
        if !ctx.track || !self.is_last() {
            return;
        }
        let n = &self.nodes[idx as usize];
        let size = n.size as usize;
        let parts = if size <= ctx.mass {
            let b = n.bbox.as_ref().expect("last-level bbox");
            let d = b.len() / 2;
            vec![Part { lo: b[..d].to_vec(), hi: b[d..].to_vec(), weight: n.agg.sumsq }]
        } else if size <= 2 * ctx.mass {
            let mut slots = Vec::with_capacity(size);
            self.collect(idx, &mut slots);
            let mid = size / 2;
            vec![part_of(&slots[..mid], ctx.points), part_of(&slots[mid..], ctx.points)]
        } else {
            Vec::new()
        };
        ctx.log.push(Change::Upsert { uid: n.uid, parts });
    }

    /// In-order slots of the subtree at `idx`.
    fn collect(&self, idx: u32, out: &mut Vec<u32>) {
        let n = &self.nodes[idx as usize];
        if n.is_leaf() {
            out.push(n.slot);
        } else {
            self.collect(n.left, out);
            self.collect(n.right, out);
        }
    }

    fn free_subtree(&mut self, idx: u32, ctx: &mut Ctx) {
        let (l, r) = (self.nodes[idx as usize].left, self.nodes[idx as usize].right);
        if l != NIL {
            self.free_subtree(l, ctx);
            self.free_subtree(r, ctx);
        }
        self.free_node(idx, ctx);
    }

    fn free_node(&mut self, idx: u32, ctx: &mut Ctx) {
        let n = &mut self.nodes[idx as usize];
        if let Some(mut a) = n.assoc.take() {
            a.clear(ctx);
        }
        if ctx.track && self.dim + 1 == self.d {
            ctx.log.push(Change::Remove(self.nodes[idx as usize].uid));
        }
        self.free.push(idx);
    }

    /// Drops every node, reporting removals.
    pub fn clear(&mut self, ctx: &mut Ctx) {
        if self.root != NIL {
            self.free_subtree(self.root, ctx);
        }
        self.nodes.clear();
        self.free.clear();
        self.root = NIL;
    }

    pub fn insert(&mut self, slot: u32, ctx: &mut Ctx) {
        if self.root == NIL {
            self.root = self.new_leaf(slot, ctx);
            return;
        }
        let key = ctx.points.key(slot, self.dim);
        let mut path = Vec::new();
        let mut cur = self.root;
        while !self.nodes[cur as usize].is_leaf() {
            path.push(cur);
            let n = &self.nodes[cur as usize];
            cur = if key_cmp(key, self.nodes[n.left as usize].max_key).is_le() { n.left } else { n.right };
        }
        let leaf = cur;
        let fresh = self.new_leaf(slot, ctx);
        let (a, b) = if key_cmp(key, self.nodes[leaf as usize].min_key).is_lt() { (fresh, leaf) } else { (leaf, fresh) };
        let assoc = if self.is_last() {
            None
        } else {
            let mut two = [self.nodes[a as usize].slot, self.nodes[b as usize].slot];
            Some(Box::new(Level::build(self.dim + 1, self.d, &mut two, ctx)))
        };
        let joined = self.new_internal(a, b, assoc, ctx);
        self.replace_child(path.last().copied(), leaf, joined);
        for &p in path.iter().rev() {
            self.pull(p);
            if let Some(a) = self.nodes[p as usize].assoc.as_mut() {
                a.insert(slot, ctx);
            }
            self.emit(p, ctx);
        }
        path.push(joined);
        self.rebalance(&path, ctx);
    }

    /// Removes `slot`; returns false if it is not in the tree.
    pub fn delete(&mut self, slot: u32, ctx: &mut Ctx) -> bool {
        if self.root == NIL {
            return false;
        }
        let key = ctx.points.key(slot, self.dim);
        let mut path = Vec::new();
        let mut cur = self.root;
        while !self.nodes[cur as usize].is_leaf() {
            path.push(cur);
            let n = &self.nodes[cur as usize];
            cur = if key_cmp(key, self.nodes[n.left as usize].max_key).is_le() { n.left } else { n.right };
        }
        if self.nodes[cur as usize].slot != slot {
            return false;
        }
        let Some(parent) = path.pop() else {
            self.free_node(cur, ctx);
            self.root = NIL;
            return true;
        };
        let p = &self.nodes[parent as usize];
        let sibling = if p.left == cur { p.right } else { p.left };
        self.replace_child(path.last().copied(), parent, sibling);
        self.free_node(cur, ctx);
        self.free_node(parent, ctx);
        for &q in path.iter().rev() {
            self.pull(q);
            if let Some(a) = self.nodes[q as usize].assoc.as_mut() {
                a.delete(slot, ctx);
            }
            self.emit(q, ctx);
        }
        self.rebalance(&path, ctx);
        true
    }

    fn replace_child(&mut self, parent: Option<u32>, old: u32, new: u32) {
        match parent {
            None => self.root = new,
            Some(p) => {
                let n = &mut self.nodes[p as usize];
                if n.left == old {
                    n.left = new;
                } else {
                    n.right = new;
                }
            }
        }
    }

    /// Rebuilds the highest node on `path` that violates weight balance.
    fn rebalance(&mut self, path: &[u32], ctx: &mut Ctx) {
        for (i, &v) in path.iter().enumerate() {
            let n = &self.nodes[v as usize];
            if n.is_leaf() {
                continue;
            }
            let heavy = self.nodes[n.left as usize].size.max(self.nodes[n.right as usize].size) as f64;
            if heavy > ALPHA * n.size as f64 + 1.0 {
                let mut slots = Vec::with_capacity(n.size as usize);
                self.collect(v, &mut slots);
                self.free_subtree(v, ctx);
                let fresh = self.build_sorted(&slots, ctx);
                self.replace_child(if i == 0 { None } else { Some(path[i - 1]) }, v, fresh);
                return;
            }
        }
    }

    pub fn aggregate(&self, r: &Rect) -> Agg {
        let mut acc = Agg::default();
        if self.root != NIL {
            self.visit_canonical(self.root, r, &mut |lvl, idx| acc = acc.merge(lvl.nodes[idx as usize].agg));
        }
        acc
    }

    /// Calls `f` on each last-level canonical node of `r`.
    pub fn canonical(&self, r: &Rect, f: &mut dyn FnMut(&Level, u32)) {
        if self.root != NIL {
            self.visit_canonical(self.root, r, f);
        }
    }

    fn visit_canonical(&self, idx: u32, r: &Rect, f: &mut dyn FnMut(&Level, u32)) {
        let n = &self.nodes[idx as usize];
        let (lo, hi) = (r.lo[self.dim], r.hi[self.dim]);
        if n.max_key.0 < lo || n.min_key.0 >= hi {
            return;
        }
        if n.min_key.0 >= lo && n.max_key.0 < hi {
            match &n.assoc {
                Some(a) => a.canonical(r, f),
                None => f(self, idx),
            }
            return;
        }
        self.visit_canonical(n.left, r, f);
        self.visit_canonical(n.right, r, f);
    }

    pub fn node_agg(&self, idx: u32) -> Agg {
        self.nodes[idx as usize].agg
    }

    pub fn report(&self, r: &Rect, out: &mut Vec<u32>) {
        self.canonical(r, &mut |lvl, idx| lvl.collect(idx, out));
    }

    /// Every last-level node with its uid, for rebuilding the rectangle store.
    pub fn for_each_last(&self, f: &mut dyn FnMut(&Level, u32)) {
        if self.root == NIL {
            return;
        }
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i as usize];
            match &n.assoc {
                Some(a) => a.for_each_last(f),
                None => f(self, i),
            }
            if !n.is_leaf() {
                stack.push(n.left);
                stack.push(n.right);
            }
        }
    }

    pub fn emit_node(&self, idx: u32, ctx: &mut Ctx) {
        self.emit(idx, ctx)
    }

    /// Height of the primary tree.
    pub fn height(&self) -> usize {
        fn h(l: &Level, i: u32) -> usize {
            let n = &l.nodes[i as usize];
            if n.is_leaf() {
                1
            } else {
                1 + h(l, n.left).max(h(l, n.right))
            }
        }
        if self.root == NIL {
            0
        } else {
            h(self, self.root)
        }
    }

    /// Recomputes every summary from scratch and compares; for tests.
    #[cfg(test)]
    pub fn check(&self, points: &Points) {
        fn rec(l: &Level, i: u32, points: &Points) -> Vec<u32> {
            let n = &l.nodes[i as usize];
            let slots = if n.is_leaf() {
                vec![n.slot]
            } else {
                let mut a = rec(l, n.left, points);
                let b = rec(l, n.right, points);
                assert!(key_cmp(points.key(*a.last().unwrap(), l.dim), points.key(b[0], l.dim)).is_lt());
                a.extend(b);
                a
            };
            assert_eq!(n.size as usize, slots.len());
            let c: Agg = slots.iter().fold(Agg::default(), |acc, s| acc.merge(Agg::of(points.get(*s).value)));
            assert_eq!(n.agg.count, c.count);
            assert!((n.agg.sum - c.sum).abs() <= 1e-9 * (1.0 + c.sum.abs()));
            if let Some(a) = &n.assoc {
                assert_eq!(a.len(), slots.len());
                a.check(points);
            }
            slots
        }
        if self.root != NIL {
            rec(self, self.root, points);
        }
    }
}

fn fresh_uid(ctx: &mut Ctx) -> u64 {
    *ctx.next_uid += 1;
    *ctx.next_uid
}

fn part_of(slots: &[u32], points: &Points) -> Part {
    let d = points.get(slots[0]).coords.len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut weight = 0.0;
    for &s in slots {
        let p = points.get(s);
        for j in 0..d {
            lo[j] = lo[j].min(p.coords[j]);
            hi[j] = hi[j].max(p.coords[j]);
        }
        weight += p.value * p.value;
    }
    Part { lo, hi, weight }
}
