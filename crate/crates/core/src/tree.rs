//! The partition tree: rectangles split by axis-aligned planes, each node
//! carrying exact post-build deltas, catch-up sample statistics, and bounded
//! MIN/MAX heaps.

use std::collections::BTreeSet;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::error::{AqpError, Result};
use crate::model::{Rect, Relation, Tuple};
use crate::partitioner::PartitionPlan;
use crate::stats::KahanSum;

pub type NodeId = usize;

/// Keeps the `cap` most extreme `(value, id)` pairs in one direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundedHeap {
    cap: usize,
    largest: bool,
    items: BTreeSet<(OrderedFloat<f64>, u64)>,
    /// Some value was pushed out by a more extreme one.
    evicted: bool,
}

impl BoundedHeap {
    pub fn new(cap: usize, largest: bool) -> Self {
        Self { cap, largest, items: BTreeSet::new(), evicted: false }
    }

    pub fn push(&mut self, value: f64, id: u64) {
        self.items.insert((OrderedFloat(value), id));
        if self.items.len() > self.cap {
            if self.largest {
                self.items.pop_first();
            } else {
                self.items.pop_last();
            }
            self.evicted = true;
        }
    }

    /// Removes the pair if present; evicted pairs are silently ignored.
    pub fn remove(&mut self, value: f64, id: u64) -> bool {
        self.items.remove(&(OrderedFloat(value), id))
    }

    /// The most extreme value held.
    pub fn top(&self) -> Option<f64> {
        let e = if self.largest { self.items.last() } else { self.items.first() };
        e.map(|(v, _)| v.0)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn has_evicted(&self) -> bool {
        self.evicted
    }

    /// Held values, most extreme first.
    pub fn values(&self) -> Vec<f64> {
        let it = self.items.iter().map(|(v, _)| v.0);
        if self.largest {
            it.rev().collect()
        } else {
            it.collect()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeStats {
    pub ins_count: u64,
    pub ins_sum: KahanSum,
    pub del_count: u64,
    pub del_sum: KahanSum,
    pub h_i: u64,
    pub h_sum: KahanSum,
    pub h_sumsq: KahanSum,
    pub topk: BoundedHeap,
    pub botk: BoundedHeap,
    /// Heaps received sample values, so they may miss unsampled extremes.
    pub seeded: bool,
}

impl NodeStats {
    pub fn new(heap_k: usize) -> Self {
        Self {
            ins_count: 0,
            ins_sum: KahanSum::default(),
            del_count: 0,
            del_sum: KahanSum::default(),
            h_i: 0,
            h_sum: KahanSum::default(),
            h_sumsq: KahanSum::default(),
            topk: BoundedHeap::new(heap_k, true),
            botk: BoundedHeap::new(heap_k, false),
            seeded: false,
        }
    }

    pub fn net_count(&self) -> i64 {
        self.ins_count as i64 - self.del_count as i64
    }

    pub fn net_sum(&self) -> f64 {
        self.ins_sum.value() - self.del_sum.value()
    }

    fn on_insert(&mut self, t: &Tuple) {
        self.ins_count += 1;
        self.ins_sum.add(t.value);
        self.topk.push(t.value, t.id);
        self.botk.push(t.value, t.id);
    }

    fn on_delete(&mut self, t: &Tuple) {
        self.del_count += 1;
        self.del_sum.add(t.value);
        self.topk.remove(t.value, t.id);
        self.botk.remove(t.value, t.id);
    }

    fn on_sample(&mut self, t: &Tuple) {
        self.h_i += 1;
        self.h_sum.add(t.value);
        self.h_sumsq.add(t.value * t.value);
        self.topk.push(t.value, t.id);
        self.botk.push(t.value, t.id);
        self.seeded = true;
    }
}

/// A generation of catch-up statistics. Nodes built together share an epoch:
/// `n0` is the archive size when it began and `h` counts every uniform draw
/// from that snapshot, including draws that fell outside the epoch's region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Epoch {
    pub n0: u64,
    pub h: u64,
    pub region: Rect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub rect: Rect,
    pub parent: Option<NodeId>,
    /// Left holds `coords[dim] < value`.
    pub split: Option<(usize, f64)>,
    pub children: Option<[NodeId; 2]>,
    pub depth: usize,
    pub epoch: usize,
    pub stats: NodeStats,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Frontier {
    /// Maximal nodes inside the query.
    pub covered: Vec<NodeId>,
    /// Leaves cut by the query.
    pub partial: Vec<NodeId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionTree {
    d: usize,
    heap_k: usize,
    nodes: Vec<Option<Node>>,
    root: NodeId,
    epochs: Vec<Epoch>,
}

impl PartitionTree {
    /// Builds the tree described by `plan` as a new epoch over `n0` tuples.
    /// The plan root must be unbounded so that every tuple routes.
    pub fn from_plan(plan: &PartitionPlan, heap_k: usize, n0: u64) -> Result<Self> {
        let d = plan.root_rect().dims();
        let mut tree = PartitionTree { d, heap_k, nodes: Vec::new(), root: 0, epochs: Vec::new() };
        let epoch = tree.begin_epoch(n0, plan.root_rect().clone());
        tree.root = tree.graft(plan, 0, None, 0, epoch);
        Ok(tree)
    }

    /// A one-leaf tree over the whole space.
    pub fn single(d: usize, heap_k: usize, n0: u64) -> Self {
        Self::from_plan(&PartitionPlan::single(Rect::unbounded(d)), heap_k, n0).expect("single-leaf plan")
    }

    fn graft(&mut self, plan: &PartitionPlan, p: usize, parent: Option<NodeId>, depth: usize, epoch: usize) -> NodeId {
        let pn = &plan.nodes[p];
        let id = self.nodes.len();
        self.nodes.push(Some(Node {
            rect: pn.rect.clone(),
            parent,
            split: pn.split,
            children: None,
            depth,
            epoch,
            stats: NodeStats::new(self.heap_k),
        }));
        if let Some([l, r]) = pn.children {
            let lc = self.graft(plan, l, Some(id), depth + 1, epoch);
            let rc = self.graft(plan, r, Some(id), depth + 1, epoch);
            self.node_mut(id).children = Some([lc, rc]);
        }
        id
    }

    pub fn dims(&self) -> usize {
        self.d
    }

    pub fn heap_k(&self) -> usize {
        self.heap_k
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &Node {
        self.nodes[id].as_ref().expect("live node")
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes[id].as_mut().expect("live node")
    }

    pub fn epoch(&self, e: usize) -> &Epoch {
        &self.epochs[e]
    }

    pub fn epochs(&self) -> &[Epoch] {
        &self.epochs
    }

    pub fn current_epoch(&self) -> usize {
        self.epochs.len() - 1
    }

    pub fn begin_epoch(&mut self, n0: u64, region: Rect) -> usize {
        self.epochs.push(Epoch { n0, h: 0, region });
        self.epochs.len() - 1
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.is_some()).map(|(i, _)| i)
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.subtree_leaves(self.root)
    }

    pub fn subtree_leaves(&self, u: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![u];
        while let Some(i) = stack.pop() {
            match self.node(i).children {
                Some([l, r]) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => out.push(i),
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.leaves().iter().map(|&l| self.node(l).depth).max().unwrap_or(0)
    }

    /// Root-to-leaf path of the node holding `coords`.
    pub fn path(&self, coords: &[f64]) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(8);
        self.walk(coords, |id| out.push(id));
        out
    }

    pub fn leaf_of(&self, coords: &[f64]) -> NodeId {
        let mut last = self.root;
        self.walk(coords, |id| last = id);
        last
    }

    fn walk(&self, coords: &[f64], mut f: impl FnMut(NodeId)) {
        let mut i = self.root;
        loop {
            f(i);
            let n = self.node(i);
            match (n.children, n.split) {
                (Some([l, r]), Some((dim, v))) => i = if coords[dim] < v { l } else { r },
                _ => return,
            }
        }
    }

    fn check(&self, t: &Tuple) -> Result<()> {
        if t.coords.len() != self.d {
            return Err(AqpError::DimensionMismatch { expected: self.d, got: t.coords.len() });
        }
        Ok(())
    }

    /// Records an arrival along its path; returns the leaf.
    pub fn route_insert(&mut self, t: &Tuple) -> Result<NodeId> {
        self.check(t)?;
        let mut i = self.root;
        loop {
            let n = self.nodes[i].as_mut().expect("live node");
            n.stats.on_insert(t);
            match (n.children, n.split) {
                (Some([l, r]), Some((dim, v))) => i = if t.coords[dim] < v { l } else { r },
                _ => return Ok(i),
            }
        }
    }

    pub fn route_delete(&mut self, t: &Tuple) -> Result<NodeId> {
        self.check(t)?;
        let mut i = self.root;
        loop {
            let n = self.nodes[i].as_mut().expect("live node");
            n.stats.on_delete(t);
            match (n.children, n.split) {
                (Some([l, r]), Some((dim, v))) => i = if t.coords[dim] < v { l } else { r },
                _ => return Ok(i),
            }
        }
    }

    /// Folds one uniform draw of epoch `e` into the nodes of that epoch on its
    /// path. The epoch's draw count grows even when no node absorbs it.
    pub fn absorb_catchup(&mut self, t: &Tuple, e: usize) -> Result<()> {
        self.check(t)?;
        self.epochs[e].h += 1;
        let mut i = self.root;
        loop {
            let n = self.nodes[i].as_mut().expect("live node");
            if n.epoch == e {
                n.stats.on_sample(t);
            }
            match (n.children, n.split) {
                (Some([l, r]), Some((dim, v))) => i = if t.coords[dim] < v { l } else { r },
                _ => return Ok(()),
            }
        }
    }

    /// Maximal nodes inside `q`, and leaves that `q` cuts.
    pub fn frontier(&self, q: &Rect) -> Result<Frontier> {
        q.check_dims(self.d)?;
        let mut f = Frontier::default();
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            let n = self.node(i);
            match n.rect.relation_unchecked(q) {
                Relation::Disjoint => {}
                Relation::ContainedInQ => f.covered.push(i),
                Relation::PartialOverlap => match n.children {
                    Some([l, r]) => {
                        stack.push(r);
                        stack.push(l);
                    }
                    None => f.partial.push(i),
                },
            }
        }
        Ok(f)
    }

    /// Catch-up estimate of the node's population plus exact deltas, or
    /// `None` when its epoch has no draws yet and began over a nonempty archive.
    pub fn estimated_population(&self, id: NodeId) -> Option<f64> {
        let n = self.node(id);
        let e = &self.epochs[n.epoch];
        let base = if e.n0 == 0 {
            0.0
        } else if e.h == 0 {
            return None;
        } else {
            n.stats.h_i as f64 / e.h as f64 * e.n0 as f64
        };
        Some(base + n.stats.net_count() as f64)
    }

    /// Same as `estimated_population` for the SUM of values.
    pub fn estimated_sum(&self, id: NodeId) -> Option<f64> {
        let n = self.node(id);
        let e = &self.epochs[n.epoch];
        let base = if e.n0 == 0 {
            0.0
        } else if e.h == 0 {
            return None;
        } else {
            n.stats.h_sum.value() / e.h as f64 * e.n0 as f64
        };
        Some(base + n.stats.net_sum())
    }

    /// Node statistics are exact: its epoch began over an empty archive.
    pub fn is_exact(&self, id: NodeId) -> bool {
        self.epochs[self.node(id).epoch].n0 == 0
    }

    /// The ancestor `psi` levels above `id`, stopping at the root.
    pub fn ancestor(&self, id: NodeId, psi: usize) -> NodeId {
        let mut i = id;
        for _ in 0..psi {
            match self.node(i).parent {
                Some(p) => i = p,
                None => break,
            }
        }
        i
    }

    /// Replaces everything below `u` with the non-root nodes of `plan`, whose
    /// root must be `u`'s rectangle. `u` keeps its statistics; the new nodes
    /// join a fresh epoch over `n0` tuples, which is returned.
    pub fn replace_subtree(&mut self, u: NodeId, plan: &PartitionPlan, n0: u64) -> Result<usize> {
        if plan.root_rect() != &self.node(u).rect {
            return Err(AqpError::InvalidConfig("plan root does not match the subtree rectangle".into()));
        }
        let mut stack: Vec<NodeId> = self.node(u).children.map(|c| c.to_vec()).unwrap_or_default();
        while let Some(i) = stack.pop() {
            if let Some(c) = self.node(i).children {
                stack.extend(c);
            }
            self.nodes[i] = None;
        }
        let epoch = self.begin_epoch(n0, self.node(u).rect.clone());
        let depth = self.node(u).depth;
        let root = &plan.nodes[0];
        self.node_mut(u).split = root.split;
        self.node_mut(u).children = None;
        if let Some([l, r]) = root.children {
            let lc = self.graft(plan, l, Some(u), depth + 1, epoch);
            let rc = self.graft(plan, r, Some(u), depth + 1, epoch);
            self.node_mut(u).children = Some([lc, rc]);
        }
        Ok(epoch)
    }

    /// Total ordering check used by tests: children tile their parent.
    pub fn check_structure(&self) -> Result<(), String> {
        for id in self.node_ids() {
            let n = self.node(id);
            if let Some([l, r]) = n.children {
                let (dim, v) = n.split.ok_or("interior node without split")?;
                let (a, b) = n.rect.split(dim, v);
                if self.node(l).rect != a || self.node(r).rect != b {
                    return Err(format!("children of {id} do not tile it"));
                }
                if self.node(l).parent != Some(id) || self.node(r).parent != Some(id) {
                    return Err(format!("parent links broken under {id}"));
                }
            }
        }
        Ok(())
    }
}
