// Randomized structural checks shared by the property suites and the
// acceptance run. Each check builds one random case from `seed` and returns a
// description of the first violation.

use aqp_core::lifecycle::Engine;
use aqp_core::maxvar::{CountOracle, MaxVarIndex, MaxVarOracle, SumOracle};
use aqp_core::model::{AggKind, RepartitionMode};
use aqp_core::tree::PartitionTree;
use aqp_core::{EngineConfig, Event, Rect, Tuple};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<(), String>;

fn point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    // coarse grid so ties and points on split values come up often
    (0..d).map(|_| f64::from(rng.random_range(0..40u32)) * 2.5).collect()
}

fn rect(rng: &mut ChaCha8Rng, d: usize) -> Rect {
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    for _ in 0..d {
        match rng.random_range(0..6) {
            0 => {
                lo.push(f64::NEG_INFINITY);
                hi.push(f64::from(rng.random_range(0..40u32)) * 2.5);
            }
            1 => {
                lo.push(f64::from(rng.random_range(0..40u32)) * 2.5);
                hi.push(f64::INFINITY);
            }
            _ => {
                let a = f64::from(rng.random_range(0..40u32)) * 2.5;
                let b = f64::from(rng.random_range(0..40u32)) * 2.5;
                lo.push(a.min(b));
                hi.push(a.max(b) + 2.5);
            }
        }
    }
    Rect::new(lo, hi).expect("valid bounds")
}

/// A random engine driven through a random stream with forced rebuilds.
/// Returns the engine and the number of updates applied.
pub fn random_engine(seed: u64) -> Result<(Engine, u64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=2);
    let k = rng.random_range(1..=6);
    let cfg = EngineConfig {
        d,
        k,
        m: rng.random_range(k.max(4)..=24),
        beta: [1.5, 2.0, 10.0][rng.random_range(0..3)],
        focus: [AggKind::Count, AggKind::Sum, AggKind::Avg][rng.random_range(0..3)],
        repartition: if rng.random_bool(0.5) { RepartitionMode::Partial } else { RepartitionMode::Full },
        psi: if rng.random_bool(0.5) { Some(rng.random_range(0..3)) } else { None },
        catchup_interleave: if rng.random_bool(0.5) { Some(rng.random_range(1..4)) } else { None },
        candidate_cooldown: rng.random_range(0..20),
        init_after: Some(rng.random_range(k..k + 30)),
        seed,
        ..EngineConfig::default()
    };
    let mut e = Engine::new(cfg).map_err(|x| x.to_string())?;
    let mut live: Vec<u64> = Vec::new();
    let mut next = 0u64;
    let mut applied = 0u64;
    let steps = rng.random_range(40..160);
    for _ in 0..steps {
        let ev = if live.len() > 2 && rng.random_bool(0.3) {
            let id = live.swap_remove(rng.random_range(0..live.len()));
            Event::Delete { id }
        } else {
            next += 1;
            live.push(next);
            Event::Insert(Tuple::new(next, point(&mut rng, d), rng.random_range(-5.0..50.0)))
        };
        e.apply(ev).map_err(|x| format!("apply: {x}"))?;
        applied += 1;
        if e.is_initialized() && rng.random_bool(0.04) {
            e.request_rebuild();
        }
    }
    Ok((e, applied))
}

/// Leaves are disjoint and cover the space; children tile their parent.
pub fn tiling(seed: u64) -> Check {
    let (e, _) = random_engine(seed)?;
    tree_tiles(e.tree(), &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))
}

pub fn tree_tiles(tree: &PartitionTree, rng: &mut ChaCha8Rng) -> Check {
    tree.check_structure()?;
    let leaves = tree.leaves();
    for (i, &a) in leaves.iter().enumerate() {
        for &b in &leaves[i + 1..] {
            if tree.node(a).rect.intersects(&tree.node(b).rect) {
                return Err(format!("leaves {a} and {b} overlap"));
            }
        }
    }
    let d = tree.dims();
    for _ in 0..64 {
        let p = point(rng, d);
        let holders = leaves.iter().filter(|&&l| tree.node(l).rect.contains_point(&p)).count();
        if holders != 1 {
            return Err(format!("{p:?} lies in {holders} leaves"));
        }
        if !tree.node(tree.leaf_of(&p)).rect.contains_point(&p) {
            return Err(format!("routing sends {p:?} to a leaf that does not hold it"));
        }
    }
    Ok(())
}

/// Covered nodes lie inside the query, partial leaves straddle it, and every
/// point of the query lies in exactly one of them.
pub fn frontier(seed: u64) -> Check {
    let (e, _) = random_engine(seed)?;
    let tree = e.tree();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
    let d = tree.dims();
    for _ in 0..8 {
        let q = rect(&mut rng, d);
        let f = tree.frontier(&q).map_err(|x| x.to_string())?;
        for &c in &f.covered {
            if !tree.node(c).rect.is_inside(&q) {
                return Err(format!("covered node {c} is not inside {q:?}"));
            }
        }
        for &p in &f.partial {
            let r = &tree.node(p).rect;
            if !tree.node(p).is_leaf() || !r.intersects(&q) || r.is_inside(&q) {
                return Err(format!("partial node {p} does not straddle {q:?}"));
            }
        }
        let pts: Vec<Vec<f64>> = e
            .archive()
            .live_tuples()
            .map(|t| t.coords.clone())
            .chain((0..32).map(|_| point(&mut rng, d)))
            .collect();
        for p in pts {
            let hits = f.covered.iter().chain(&f.partial).filter(|&&n| tree.node(n).rect.contains_point(&p)).count();
            let want = usize::from(q.contains_point(&p));
            if want == 1 && hits != 1 || want == 0 && f.covered.iter().any(|&n| tree.node(n).rect.contains_point(&p)) {
                return Err(format!("{p:?} is in {hits} frontier nodes, query holds it: {}", want == 1));
            }
        }
    }
    Ok(())
}

/// An index maintained through inserts and deletes answers like one built
/// from scratch over the surviving samples.
pub fn index_equivalence(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=2);
    let mass = rng.random_range(1..4);
    let mut live: Vec<Tuple> = Vec::new();
    let mut idx = MaxVarIndex::new(d, mass);
    let mut next = 0u64;
    for _ in 0..rng.random_range(1..120) {
        if !live.is_empty() && rng.random_bool(0.35) {
            let t = live.swap_remove(rng.random_range(0..live.len()));
            idx.delete(t.id).map_err(|x| x.to_string())?;
        } else {
            next += 1;
            let t = Tuple::new(next, point(&mut rng, d), f64::from(rng.random_range(-20..100i32)));
            idx.insert(&t).map_err(|x| x.to_string())?;
            live.push(t);
        }
    }
    let mut fresh = MaxVarIndex::build(d, mass, &live).map_err(|x| x.to_string())?;
    if idx.len() != fresh.len() {
        return Err(format!("sizes differ: {} vs {}", idx.len(), fresh.len()));
    }
    for _ in 0..8 {
        let r = rect(&mut rng, d);
        let (a, b) = (idx.aggregate(&r), fresh.aggregate(&r));
        if a.count != b.count || a.sum != b.sum || a.sumsq != b.sumsq {
            return Err(format!("aggregate over {r:?}: {a:?} vs {b:?}"));
        }
        let mut ra: Vec<u64> = idx.report(&r).iter().map(|t| t.id).collect();
        let mut rb: Vec<u64> = fresh.report(&r).iter().map(|t| t.id).collect();
        ra.sort_unstable();
        rb.sort_unstable();
        if ra != rb {
            return Err(format!("report over {r:?} differs"));
        }
        if a.count > 0 {
            let dim = rng.random_range(0..d);
            let rank = rng.random_range(0..a.count);
            if idx.select(&r, dim, rank) != fresh.select(&r, dim, rank) {
                return Err(format!("select({dim}, {rank}) over {r:?} differs"));
            }
        }
        let oracles: [&dyn MaxVarOracle; 2] = [&CountOracle, &SumOracle];
        for o in oracles {
            let (x, y) = (o.evaluate(&mut idx, &r), o.evaluate(&mut fresh, &r));
            if x.variance != y.variance || x.samples != y.samples {
                return Err(format!("{} oracle over {r:?}: {} vs {}", o.name(), x.variance, y.variance));
            }
        }
    }
    Ok(())
}

/// Every update reaches the live tree: after a stream with rebuilds the
/// root's population equals the archive size, and the pool only holds live tuples.
pub fn event_loss(seed: u64) -> Check {
    let (mut e, applied) = random_engine(seed)?;
    if e.events() != applied {
        return Err(format!("engine counted {} events, stream had {applied}", e.events()));
    }
    let n = e.archive().len();
    // drain catch-up so the final epoch's estimate is defined
    e.step_catchup(usize::MAX).map_err(|x| x.to_string())?;
    let root = e.tree().root();
    match e.tree().estimated_population(root) {
        Some(p) if p == n as f64 => {}
        other => return Err(format!("root population {other:?}, archive holds {n}")),
    }
    for t in e.reservoir().tuples() {
        if !e.archive().is_live(t.id) {
            return Err(format!("pool holds deleted tuple {}", t.id));
        }
    }
    if e.reservoir().len() > 2 * e.config().m {
        return Err(format!("pool holds {} > 2m tuples", e.reservoir().len()));
    }
    Ok(())
}
