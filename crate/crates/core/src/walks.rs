//! Simple random walk steps and loop-erased walks.

use std::collections::HashMap;
use std::hash::Hash;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::treegen::{LazyTree, NodeId, TreeHandle, VertexId, ROOT};

pub const DEFAULT_DEPTH_CAP: u32 = 60;
pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkLimits {
    pub depth_cap: u32,
    pub step_budget: u64,
}

impl Default for WalkLimits {
    fn default() -> Self {
        WalkLimits { depth_cap: DEFAULT_DEPTH_CAP, step_budget: DEFAULT_STEP_BUDGET }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LerwTag {
    HitRoot,
    Escaped,
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LerwOutcome {
    pub tag: LerwTag,
    /// Loop-erased path, self-avoiding.
    pub path: Vec<NodeId>,
    pub steps_consumed: u64,
    pub killed_at_leaf: bool,
}

impl LerwOutcome {
    pub fn vertex_path(&self, tree: &LazyTree) -> Vec<VertexId> {
        self.path.iter().map(|&v| tree.vertex_id(v)).collect()
    }
}

/// One uniform step to a neighbor of `v`.
#[inline]
pub fn srw_step<R: Rng + ?Sized>(tree: &mut LazyTree, v: NodeId, rng: &mut R) -> Result<NodeId> {
    let r = rng.random_range(0..tree.degree(v));
    tree.neighbor(v, r)
}

/// One step on a handle, by path.
pub fn srw_step_vertex<R: Rng + ?Sized>(tree: &TreeHandle, v: &VertexId, rng: &mut R) -> Result<VertexId> {
    let c = tree.children(v)?;
    let deg = c + u32::from(!v.is_root());
    let r = rng.random_range(0..deg);
    Ok(if r < c { v.child(r) } else { v.parent().expect("non-root") })
}

/// Chronological loop erasure.
pub fn loop_erase<T: Eq + Hash + Clone>(path: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(path.len());
    let mut at: HashMap<T, usize> = HashMap::with_capacity(path.len());
    for x in path {
        if let Some(&i) = at.get(x) {
            for y in out.drain(i + 1..) {
                at.remove(&y);
            }
        } else {
            at.insert(x.clone(), out.len());
            out.push(x.clone());
        }
    }
    out
}

/// Loop erasure maintained incrementally for a walk on a tree: the erased
/// path is always the geodesic from the start to the current position.
#[derive(Clone, Debug, Default)]
pub struct TreeLoopEraser {
    stack: Vec<NodeId>,
}

impl TreeLoopEraser {
    pub fn new(start: NodeId) -> Self {
        TreeLoopEraser { stack: vec![start] }
    }

    #[inline]
    pub fn push(&mut self, w: NodeId) {
        let n = self.stack.len();
        if n >= 2 && self.stack[n - 2] == w {
            self.stack.pop();
        } else {
            self.stack.push(w);
        }
    }

    pub fn path(&self) -> &[NodeId] {
        &self.stack
    }

    pub fn into_path(self) -> Vec<NodeId> {
        self.stack
    }
}

/// Runs a simple random walk from `start` until it hits the root, reaches
/// `depth_cap`, or exhausts the step budget, erasing loops as it goes.
pub fn lerw_to_root_or_escape<R: Rng + ?Sized>(
    tree: &mut LazyTree,
    start: NodeId,
    limits: &WalkLimits,
    rng: &mut R,
) -> Result<LerwOutcome> {
    assert!(start != ROOT, "walk must start away from the root");
    assert!(limits.depth_cap > tree.depth(start), "start lies beyond the depth cap");
    let mut le = TreeLoopEraser::new(start);
    let mut v = start;
    let mut steps = 0u64;
    let tag = loop {
        if v == ROOT {
            break LerwTag::HitRoot;
        }
        if tree.depth(v) >= limits.depth_cap {
            break LerwTag::Escaped;
        }
        if steps == limits.step_budget {
            break LerwTag::Truncated;
        }
        v = srw_step(tree, v, rng)?;
        le.push(v);
        steps += 1;
    };
    Ok(LerwOutcome { tag, path: le.into_path(), steps_consumed: steps, killed_at_leaf: false })
}

/// Simple random walk on the tree with an extra leaf attached to the root.
/// Each visit to the leaf ends the walk with probability `p`; surviving
/// excursions to the leaf are erased. A killed walk reports `HitRoot` with
/// a path ending at the root.
pub fn walk_with_leaf_kill<R: Rng + ?Sized>(
    tree: &mut LazyTree,
    start: NodeId,
    p: f64,
    limits: &WalkLimits,
    rng: &mut R,
) -> Result<LerwOutcome> {
    let mut le = TreeLoopEraser::new(start);
    let mut v = start;
    let mut steps = 0u64;
    loop {
        if tree.depth(v) >= limits.depth_cap {
            return Ok(LerwOutcome { tag: LerwTag::Escaped, path: le.into_path(), steps_consumed: steps, killed_at_leaf: false });
        }
        if steps >= limits.step_budget {
            return Ok(LerwOutcome { tag: LerwTag::Truncated, path: le.into_path(), steps_consumed: steps, killed_at_leaf: false });
        }
        if v == ROOT {
            let c = tree.child_count(ROOT);
            let r = rng.random_range(0..=c);
            steps += 1;
            if r == c {
                if rng.random::<f64>() < p {
                    return Ok(LerwOutcome { tag: LerwTag::HitRoot, path: le.into_path(), steps_consumed: steps, killed_at_leaf: true });
                }
                steps += 1;
                continue;
            }
            v = tree.child(ROOT, r)?;
        } else {
            v = srw_step(tree, v, rng)?;
            steps += 1;
        }
        le.push(v);
    }
}

/// Whether consecutive vertices of `path` are adjacent.
pub fn is_tree_path(path: &[VertexId]) -> bool {
    !path.is_empty()
        && path.windows(2).all(|w| {
            w[0].parent().as_ref() == Some(&w[1]) || w[1].parent().as_ref() == Some(&w[0])
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::treegen::{make_tree, TreeKind};
    use proptest::prelude::*;

    fn dary(d: u32) -> LazyTree {
        make_tree(TreeKind::Dary { d }, 0).unwrap().lazy(10_000_000)
    }

    fn ancestors(tree: &LazyTree, mut v: NodeId) -> Vec<NodeId> {
        let mut out = vec![v];
        while let Some(p) = tree.parent(v) {
            out.push(p);
            v = p;
        }
        out
    }

    #[test]
    fn root_step_is_uniform() {
        let mut t = dary(2);
        let mut rng = stream(1);
        let n = 100_000;
        let left = (0..n).filter(|_| srw_step(&mut t, ROOT, &mut rng).unwrap() == 1).count();
        let z = (left as f64 - n as f64 / 2.0) / (n as f64 / 4.0).sqrt();
        assert!(z.abs() < 4.0, "z = {z}");
    }

    #[test]
    fn parent_step_frequencies() {
        let mut rng = stream(2);
        let mut t = dary(2);
        let v = t.child(ROOT, 0).unwrap();
        let n = 90_000;
        let up = (0..n).filter(|_| srw_step(&mut t, v, &mut rng).unwrap() == ROOT).count() as f64 / n as f64;
        assert!((up - 1.0 / 3.0).abs() < 4.0 * (2.0f64 / 9.0 / n as f64).sqrt());

        let hat = make_tree(TreeKind::Hat, 0).unwrap();
        let mut h = hat.lazy(1_000_000);
        let w = h.node_of(&VertexId(vec![1, 0])).unwrap();
        let parent = h.parent(w).unwrap();
        let up = (0..n).filter(|_| srw_step(&mut h, w, &mut rng).unwrap() == parent).count() as f64 / n as f64;
        assert!((up - 0.2).abs() < 4.0 * (0.16 / n as f64).sqrt());
    }

    #[test]
    fn vertex_level_step() {
        let t = make_tree(TreeKind::Dary { d: 3 }, 0).unwrap();
        let mut rng = stream(3);
        for _ in 0..100 {
            let w = srw_step_vertex(&t, &VertexId(vec![2]), &mut rng).unwrap();
            assert!(is_tree_path(&[VertexId(vec![2]), w]));
        }
    }

    #[test]
    fn loop_erase_examples() {
        assert_eq!(loop_erase(&['a']), vec!['a']);
        assert_eq!(loop_erase(&['a', 'b', 'a', 'c']), vec!['a', 'c']);
        assert_eq!(loop_erase(&[1, 2, 3, 2, 4, 1, 5]), vec![1, 5]);
    }

    #[test]
    fn root_hitting_paths_are_geodesics() {
        let mut t = dary(3);
        let mut rng = stream(4);
        let mut hits = 0;
        while hits < 100 {
            let start = t.node_of(&VertexId(vec![1, 2, 0])).unwrap();
            let mut raw = vec![start];
            let mut v = start;
            while v != ROOT && t.depth(v) < 12 {
                v = srw_step(&mut t, v, &mut rng).unwrap();
                raw.push(v);
            }
            if v == ROOT {
                hits += 1;
                let mut geo = ancestors(&t, start);
                assert_eq!(loop_erase(&raw), geo);
                geo.clear();
            }
        }
    }

    #[test]
    fn hit_root_frequencies() {
        let limits = WalkLimits::default();
        for (d, tol) in [(2u32, 0.005), (5, 0.004)] {
            let mut rng = stream(5 + d as u64);
            let n = 100_000;
            let mut hits = 0;
            for _ in 0..n {
                let mut t = dary(d);
                let start = t.child(ROOT, 0).unwrap();
                let o = lerw_to_root_or_escape(&mut t, start, &limits, &mut rng).unwrap();
                assert_ne!(o.tag, LerwTag::Truncated);
                if o.tag == LerwTag::HitRoot {
                    hits += 1;
                    assert_eq!(o.path, vec![start, ROOT]);
                } else {
                    assert_eq!(t.depth(*o.path.last().unwrap()), limits.depth_cap);
                }
            }
            let f = hits as f64 / n as f64;
            assert!((f - 1.0 / d as f64).abs() < tol, "d={d}: {f}");
        }
    }

    #[test]
    fn depth_cap_sensitivity_is_small() {
        let n = 20_000;
        let freq = |cap: u32| {
            let limits = WalkLimits { depth_cap: cap, step_budget: DEFAULT_STEP_BUDGET };
            (0..n)
                .filter(|&i| {
                    let mut rng = stream(crate::rng::key_of(&[99, i]));
                    let mut t = dary(2);
                    let start = t.child(ROOT, 1).unwrap();
                    lerw_to_root_or_escape(&mut t, start, &limits, &mut rng).unwrap().tag == LerwTag::HitRoot
                })
                .count() as f64
                / n as f64
        };
        let a = freq(40);
        let b = freq(60);
        // escapes declared at a shallower cap can only become later returns
        assert!(b >= a);
        assert!(b - a < 1e-3);
    }

    #[test]
    fn truncated_when_budget_runs_out() {
        let mut t = dary(2);
        let start = t.child(ROOT, 0).unwrap();
        let limits = WalkLimits { depth_cap: 60, step_budget: 3 };
        let mut rng = stream(6);
        let tags: Vec<_> = (0..200).map(|_| lerw_to_root_or_escape(&mut t, start, &limits, &mut rng).unwrap()).collect();
        assert!(tags.iter().any(|o| o.tag == LerwTag::Truncated && o.steps_consumed == 3));
    }

    #[test]
    fn leaf_kill_probability_from_root() {
        let limits = WalkLimits::default();
        for (p, start_depth) in [(0.5, 0u32), (0.999, 1)] {
            let mut t = dary(2);
            let start = if start_depth == 0 { ROOT } else { t.child(ROOT, 0).unwrap() };
            let exact = p / (1.0 + p) / if start_depth == 0 { 1.0 } else { 2.0 };
            let mut rng = stream(7);
            let n = 100_000;
            let mut kills = 0;
            for _ in 0..n {
                let o = walk_with_leaf_kill(&mut t, start, p, &limits, &mut rng).unwrap();
                if o.killed_at_leaf {
                    kills += 1;
                    assert_eq!(o.tag, LerwTag::HitRoot);
                    assert_eq!(*o.path.last().unwrap(), ROOT);
                }
            }
            let f = kills as f64 / n as f64;
            let sd = (exact * (1.0 - exact) / n as f64).sqrt();
            assert!((f - exact).abs() < 3.0 * sd, "p={p}: {f} vs {exact}");
        }
    }

    #[test]
    fn surviving_leaf_excursions_are_erased() {
        let mut t = dary(2);
        let mut rng = stream(8);
        let limits = WalkLimits::default();
        for _ in 0..2000 {
            let o = walk_with_leaf_kill(&mut t, ROOT, 0.5, &limits, &mut rng).unwrap();
            let ids = o.vertex_path(&t);
            assert!(is_tree_path(&ids));
            assert_eq!(loop_erase(&o.path), o.path);
            if !o.killed_at_leaf {
                assert_eq!(o.tag, LerwTag::Escaped);
            }
        }
    }

    proptest! {
        #[test]
        fn loop_erase_is_idempotent_and_self_avoiding(p in prop::collection::vec(0u8..6, 1..60)) {
            let e = loop_erase(&p);
            prop_assert_eq!(loop_erase(&e), e.clone());
            let mut seen = std::collections::HashSet::new();
            prop_assert!(e.iter().all(|x| seen.insert(*x)));
            prop_assert_eq!(e.first(), p.first());
            prop_assert_eq!(e.last(), p.last());
        }

        #[test]
        fn tree_eraser_matches_generic(seed in any::<u64>(), len in 1usize..300) {
            let mut t = dary(3);
            let mut rng = stream(seed);
            let start = t.node_of(&VertexId(vec![0, 1])).unwrap();
            let mut raw = vec![start];
            let mut le = TreeLoopEraser::new(start);
            let mut v = start;
            for _ in 0..len {
                v = srw_step(&mut t, v, &mut rng).unwrap();
                raw.push(v);
                le.push(v);
            }
            let erased = loop_erase(&raw);
            prop_assert_eq!(le.path(), erased.as_slice());
        }
    }
}
