//! Hitting probabilities and harmonic measure on trees.
//!
//! For a non-root vertex `u` with `d_u` children, the probability that
//! simple random walk from `u` ever hits the parent of `u` satisfies
//! `h(u) = 1 / (1 + d_u - Σ_c h(c))`. Evaluating the recursion upward from a
//! depth cap with the two boundary values `h = 0` and `h = 1/k_min` gives
//! a certified interval for every quantity built from it.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, RngExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frog::RunStats;
use crate::rng::{key_of, stream, TAG_RAY, TAG_TREE};
use crate::treegen::{
    make_tree, AgwMode, FiniteTree, NodeInfo, OffspringDistribution, TreeHandle, TreeKind, VertexId,
    DEFAULT_VERTEX_CAP,
};

/// Relative outward rounding applied after each interval operation.
pub const SLACK: f64 = 1e-15;
pub const MIN_CAP: u32 = 10;
pub const B1_CONSTANT: f64 = 33.0 / 2.0;
pub const A1_CONSTANT: f64 = 4.0 / 81.0;
pub const LOW_PRECISION_WIDTH: f64 = 0.01;
const LAZY_MEMO_DEPTH: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbBracket {
    pub lo: f64,
    pub hi: f64,
}

impl ProbBracket {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "empty bracket [{lo}, {hi}]");
        ProbBracket { lo, hi }
    }

    pub fn exact(x: f64) -> Self {
        ProbBracket { lo: x, hi: x }
    }

    fn outward(lo: f64, hi: f64) -> Self {
        ProbBracket { lo: (lo * (1.0 - SLACK)).max(0.0), hi: (hi * (1.0 + SLACK)).min(1.0) }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn mul(&self, o: &ProbBracket) -> ProbBracket {
        Self::outward(self.lo * o.lo, self.hi * o.hi)
    }

    /// `1 - x`, as an escape probability.
    fn complement(&self) -> ProbBracket {
        ProbBracket { lo: 1.0 - self.hi, hi: 1.0 - self.lo }
    }
}

#[inline]
fn h_step(children: f64, sum_child_h: f64) -> f64 {
    1.0 / (1.0 + children - sum_child_h)
}

/// Child counts that depend only on depth and root branch.
#[derive(Clone, Copy, Debug)]
enum Profile {
    Const(u32),
    Hat,
    Joined(u32),
}

impl Profile {
    fn of(kind: &TreeKind) -> Option<Profile> {
        match kind {
            TreeKind::Dary { d } => Some(Profile::Const(*d)),
            TreeKind::Hat => Some(Profile::Hat),
            TreeKind::Joined { d } => Some(Profile::Joined(*d)),
            TreeKind::Gw { offspring } if offspring.support().len() == 1 => {
                Some(Profile::Const(offspring.min_children()))
            }
            _ => None,
        }
    }

    fn branches(&self) -> usize {
        match self {
            Profile::Joined(_) => 2,
            _ => 1,
        }
    }

    fn children(&self, depth: u32, branch: usize) -> u32 {
        match (self, branch) {
            (Profile::Const(d), _) => *d,
            (Profile::Hat, _) => depth + 2,
            (Profile::Joined(_), _) if depth == 0 => 2,
            (Profile::Joined(_), 0) => 2,
            (Profile::Joined(d), _) => *d,
        }
    }
}

enum Table {
    /// `h[branch][depth]` for `1 <= depth <= cap`.
    Profile { profile: Profile, h: Vec<Vec<ProbBracket>> },
    Explicit { ft: FiniteTree, h: Vec<ProbBracket> },
    /// Memo of subtree values keyed by vertex key, kept for shallow vertices.
    Lazy { memo: RefCell<HashMap<u64, ProbBracket>> },
}

/// Certified hitting-probability solver over one tree and depth cap.
pub struct HarmonicSolver<'t> {
    tree: &'t TreeHandle,
    cap: u32,
    table: Table,
}

fn boundary_hi(kind: &TreeKind, depth: u32) -> f64 {
    kind.min_children_from(depth).map_or(0.0, |k| 1.0 / k as f64)
}

impl<'t> HarmonicSolver<'t> {
    /// Solver that evaluates subtrees on demand; O(cap) per query on trees
    /// whose child counts depend only on depth.
    pub fn new(tree: &'t TreeHandle, cap: u32) -> Result<Self> {
        if let Some(s) = Self::profile(tree, cap) {
            return Ok(s);
        }
        if let TreeKind::Finite { .. } = tree.kind() {
            return Self::tabulated(tree, cap, DEFAULT_VERTEX_CAP);
        }
        Ok(HarmonicSolver { tree, cap, table: Table::Lazy { memo: RefCell::new(HashMap::new()) } })
    }

    /// Solver that tabulates every vertex of the truncation up front.
    pub fn tabulated(tree: &'t TreeHandle, cap: u32, vertex_cap: usize) -> Result<Self> {
        if let Some(s) = Self::profile(tree, cap) {
            return Ok(s);
        }
        let ft = match tree.kind() {
            TreeKind::Finite { tree: ft } => ft.clone(),
            _ => tree.truncate(cap, vertex_cap)?,
        };
        let mut h = vec![ProbBracket::exact(0.0); ft.len()];
        for x in (1..ft.len()).rev() {
            h[x] = if ft.is_boundary(x) {
                if ft.depth(x) >= cap {
                    ProbBracket::new(0.0, boundary_hi(tree.kind(), ft.depth(x)))
                } else {
                    ProbBracket::exact(0.0)
                }
            } else {
                let c = ft.child_count(x) as f64;
                let (lo, hi) = ft.children(x).fold((0.0, 0.0), |(l, u), y| (l + h[y].lo, u + h[y].hi));
                ProbBracket::outward(h_step(c, lo), h_step(c, hi))
            };
        }
        Ok(HarmonicSolver { tree, cap, table: Table::Explicit { ft, h } })
    }

    fn profile(tree: &'t TreeHandle, cap: u32) -> Option<Self> {
        let profile = Profile::of(tree.kind())?;
        let h = (0..profile.branches())
            .map(|b| {
                let mut col = vec![ProbBracket::exact(0.0); cap as usize + 1];
                if cap >= 1 {
                    col[cap as usize] = ProbBracket::new(0.0, boundary_hi(tree.kind(), cap));
                }
                for j in (1..cap).rev() {
                    let c = profile.children(j, b) as f64;
                    let next = col[j as usize + 1];
                    col[j as usize] = ProbBracket::outward(h_step(c, c * next.lo), h_step(c, c * next.hi));
                }
                col
            })
            .collect();
        Some(HarmonicSolver { tree, cap, table: Table::Profile { profile, h } })
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    pub fn tree(&self) -> &TreeHandle {
        self.tree
    }

    pub fn children(&self, v: &VertexId) -> Result<u32> {
        match &self.table {
            Table::Explicit { ft, .. } if v.depth() < self.cap || matches!(self.tree.kind(), TreeKind::Finite { .. }) => {
                Ok(ft.child_count(ft.index_of(v)?))
            }
            _ => self.tree.children(v),
        }
    }

    /// Bracket for the probability that walk from `v` ever hits its parent.
    pub fn h(&self, v: &VertexId) -> Result<ProbBracket> {
        if v.is_root() {
            return Err(Error::InvalidVertex("the root has no parent".into()));
        }
        if v.depth() > self.cap {
            return Err(Error::InvalidConfig(format!("vertex {v} lies below the depth cap {}", self.cap)));
        }
        match &self.table {
            Table::Profile { profile, h } => {
                self.tree.children(v)?;
                let b = if profile.branches() > 1 { v.0[0] as usize } else { 0 };
                Ok(h[b][v.depth() as usize])
            }
            Table::Explicit { ft, h } => Ok(h[ft.index_of(v)?]),
            Table::Lazy { .. } => {
                let info = self.tree.info(v)?;
                Ok(self.dfs(&info))
            }
        }
    }

    fn dfs(&self, info: &NodeInfo) -> ProbBracket {
        if info.depth >= self.cap {
            return ProbBracket::new(0.0, boundary_hi(self.tree.kind(), info.depth));
        }
        let memo = match &self.table {
            Table::Lazy { memo } if info.depth <= LAZY_MEMO_DEPTH => Some(memo),
            _ => None,
        };
        if let Some(b) = memo.and_then(|m| m.borrow().get(&info.key).copied()) {
            return b;
        }
        let b = self.dfs_uncached(info);
        if let Some(m) = memo {
            m.borrow_mut().insert(info.key, b);
        }
        b
    }

    fn dfs_uncached(&self, info: &NodeInfo) -> ProbBracket {
        let c = self.tree.count_at(info);
        if c == 0 {
            return ProbBracket::exact(0.0);
        }
        let (mut lo, mut hi) = (0.0, 0.0);
        for i in 0..c {
            let b = self.dfs(&self.tree.kind().child_info(info, i));
            lo += b.lo;
            hi += b.hi;
        }
        ProbBracket::outward(h_step(c as f64, lo), h_step(c as f64, hi))
    }

    /// HARM of each child of `v` within the subtree rooted at `v`.
    pub fn child_harms(&self, v: &VertexId) -> Result<Vec<ProbBracket>> {
        if v.depth() >= self.cap {
            return Err(Error::InvalidConfig(format!("vertex {v} lies at or below the depth cap {}", self.cap)));
        }
        let c = self.children(v)?;
        let esc: Vec<ProbBracket> =
            (0..c).map(|i| self.h(&v.child(i)).map(|b| b.complement())).collect::<Result<_>>()?;
        let sum_lo: f64 = esc.iter().map(|a| a.lo).sum();
        let sum_hi: f64 = esc.iter().map(|a| a.hi).sum();
        Ok(esc
            .iter()
            .map(|a| {
                let others_hi = sum_hi - a.hi;
                let others_lo = sum_lo - a.lo;
                let lo = if a.lo > 0.0 { a.lo / (a.lo + others_hi.max(0.0)) } else { 0.0 };
                let hi = if a.hi > 0.0 { a.hi / (a.hi + others_lo.max(0.0)) } else { 0.0 };
                ProbBracket::outward(lo, hi)
            })
            .collect())
    }

    pub fn harm_child(&self, v: &VertexId, i: u32) -> Result<ProbBracket> {
        let all = self.child_harms(v)?;
        all.get(i as usize).copied().ok_or_else(|| Error::InvalidVertex(v.child(i).to_string()))
    }

    /// HARM of `v` within the subtree rooted at its ancestor `top`.
    pub fn harm_below(&self, top: &VertexId, v: &VertexId) -> Result<ProbBracket> {
        if !top.is_ancestor_of(v) {
            return Err(Error::InvalidVertex(format!("{top} is not an ancestor of {v}")));
        }
        let mut acc = ProbBracket::exact(1.0);
        for d in top.depth()..v.depth() {
            let x = v.ancestor(d);
            acc = acc.mul(&self.harm_child(&x, v.0[d as usize])?);
        }
        Ok(acc)
    }

    pub fn harm_vertex(&self, v: &VertexId) -> Result<ProbBracket> {
        self.harm_below(&VertexId::root(), v)
    }

    /// Probability that walk from `u` ever reaches the root.
    pub fn hit_root(&self, u: &VertexId) -> Result<ProbBracket> {
        if u.is_root() {
            return Ok(ProbBracket::exact(1.0));
        }
        let mut acc = self.h(u)?;
        for d in (1..u.depth()).rev() {
            acc = acc.mul(&self.h(&u.ancestor(d))?);
        }
        Ok(acc)
    }

    /// HARM brackets of every vertex at depth `n`, breadth-first.
    pub fn harm_level(&self, n: u32) -> Result<Vec<(VertexId, ProbBracket)>> {
        let mut level = vec![(VertexId::root(), ProbBracket::exact(1.0))];
        for _ in 0..n {
            let mut next = Vec::new();
            for (v, b) in &level {
                for (i, c) in self.child_harms(v)?.into_iter().enumerate() {
                    next.push((v.child(i as u32), b.mul(&c)));
                }
            }
            level = next;
        }
        Ok(level)
    }

    /// Probability that walk started at `start` on the tree with a killing
    /// leaf attached to the root is eventually killed there.
    pub fn leaf_kill_prob(&self, start: &VertexId, p: f64) -> Result<ProbBracket> {
        let c = self.children(&VertexId::root())?;
        let esc: Vec<ProbBracket> =
            (0..c).map(|i| self.h(&VertexId(vec![i])).map(|b| b.complement())).collect::<Result<_>>()?;
        let lo = p / (p + esc.iter().map(|a| a.hi).sum::<f64>());
        let hi = p / (p + esc.iter().map(|a| a.lo).sum::<f64>());
        let at_root = ProbBracket::outward(lo, hi);
        if start.is_root() {
            Ok(at_root)
        } else {
            Ok(self.hit_root(start)?.mul(&at_root))
        }
    }
}

fn check_cap(cap: u32) -> Result<()> {
    if cap < MIN_CAP {
        return Err(Error::InvalidConfig(format!("depth cap {cap} below the minimum {MIN_CAP}")));
    }
    Ok(())
}

pub fn hit_parent_prob(tree: &TreeHandle, v: &VertexId, depth_cap: u32) -> Result<ProbBracket> {
    if depth_cap <= v.depth() {
        return Err(Error::InvalidConfig("depth cap must exceed the vertex depth".into()));
    }
    HarmonicSolver::new(tree, depth_cap)?.h(v)
}

pub fn hit_root_prob(tree: &TreeHandle, u: &VertexId, depth_cap: u32) -> Result<ProbBracket> {
    if u.is_root() {
        return Err(Error::InvalidVertex("start must differ from the root".into()));
    }
    if depth_cap <= u.depth() {
        return Err(Error::InvalidConfig("depth cap must exceed the vertex depth".into()));
    }
    HarmonicSolver::new(tree, depth_cap)?.hit_root(u)
}

pub fn harm_child(tree: &TreeHandle, v: &VertexId, child: u32, depth_cap: u32) -> Result<ProbBracket> {
    check_cap(depth_cap)?;
    HarmonicSolver::new(tree, depth_cap)?.harm_child(v, child)
}

pub fn harm_vertex(tree: &TreeHandle, v: &VertexId, depth_cap: u32) -> Result<ProbBracket> {
    check_cap(depth_cap)?;
    HarmonicSolver::new(tree, depth_cap)?.harm_vertex(v)
}

/// Exact distribution of the first level-`n` vertex hit by walk from the
/// root, on the truncation with level `n` absorbing.
pub fn first_hit_level_n(tree: &TreeHandle, n: u32, vertex_cap: usize) -> Result<Vec<(VertexId, f64)>> {
    let ft = tree.truncate(n, vertex_cap)?;
    let mut h = vec![0.0f64; ft.len()];
    for x in (1..ft.len()).rev() {
        if !ft.is_boundary(x) {
            let s: f64 = ft.children(x).map(|y| h[y]).sum();
            h[x] = h_step(ft.child_count(x) as f64, s);
        }
    }
    let mut f = vec![0.0f64; ft.len()];
    f[0] = 1.0;
    for x in 0..ft.len() {
        if ft.is_boundary(x) {
            continue;
        }
        let total: f64 = ft.children(x).map(|y| 1.0 - h[y]).sum();
        for y in ft.children(x) {
            f[y] = f[x] * (1.0 - h[y]) / total;
        }
    }
    Ok(ft.level(n).map(|x| (ft.vertex_id(x), f[x])).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmTable {
    pub level: u32,
    pub vertices: Vec<VertexId>,
    pub harm: Vec<ProbBracket>,
    pub first_hit: Vec<f64>,
}

pub fn harm_table(tree: &TreeHandle, n: u32, depth_cap: u32, vertex_cap: usize) -> Result<HarmTable> {
    check_cap(depth_cap)?;
    if depth_cap <= n {
        return Err(Error::InvalidConfig("depth cap must exceed the level".into()));
    }
    let solver = HarmonicSolver::tabulated(tree, depth_cap, vertex_cap)?;
    let harm = solver.harm_level(n)?;
    let f = first_hit_level_n(tree, n, vertex_cap)?;
    debug_assert!(harm.iter().zip(&f).all(|(a, b)| a.0 == b.0));
    Ok(HarmTable {
        level: n,
        vertices: harm.iter().map(|x| x.0.clone()).collect(),
        harm: harm.iter().map(|x| x.1).collect(),
        first_hit: f.into_iter().map(|x| x.1).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub vertices: Vec<VertexId>,
    /// Sum of the bracket widths used to choose each step.
    pub bias_bound: f64,
    pub low_precision: bool,
}

/// Samples `v_0 = root, ..., v_n`, choosing each child with probability
/// proportional to its HARM bracket midpoint.
pub fn sample_harmonic_ray<R: Rng + ?Sized>(solver: &HarmonicSolver, n: u32, rng: &mut R) -> Result<Ray> {
    let mut v = VertexId::root();
    let mut vertices = vec![v.clone()];
    let mut bias = 0.0;
    for _ in 0..n {
        let harms = solver.child_harms(&v)?;
        let total: f64 = harms.iter().map(|b| b.mid()).sum();
        bias += harms.iter().map(|b| b.width()).sum::<f64>();
        let mut u = rng.random::<f64>() * total;
        let mut pick = harms.len() - 1;
        for (i, b) in harms.iter().enumerate() {
            if u < b.mid() {
                pick = i;
                break;
            }
            u -= b.mid();
        }
        v = v.child(pick as u32);
        vertices.push(v.clone());
    }
    Ok(Ray { vertices, bias_bound: bias, low_precision: bias > LOW_PRECISION_WIDTH })
}

/// One audited instance of a lemma inequality; `slack >= 1` means the
/// inequality holds with that multiplicative margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditInstance {
    pub lemma: String,
    pub slack: f64,
    pub pass: bool,
    pub detail: String,
}

fn require_min_children(tree: &TreeHandle, k: u32) -> Result<()> {
    match tree.kind().min_children_from(0) {
        Some(m) if m >= k => Ok(()),
        _ => Err(Error::Hypothesis(format!("tree must have at least {k} children at every vertex"))),
    }
}

/// Checks `f(v) <= C HARM_lo(v)` and `HARM_hi(v) <= C f(v)` at every
/// level-`n` vertex with `C = 33/2`.
pub fn audit_lemma_b1(tree: &TreeHandle, n: u32, depth_cap: u32, vertex_cap: usize) -> Result<AuditInstance> {
    require_min_children(tree, 2)?;
    let t = harm_table(tree, n, depth_cap, vertex_cap)?;
    let mut worst = 0.0f64;
    let mut worst_at = VertexId::root();
    for ((v, b), f) in t.vertices.iter().zip(&t.harm).zip(&t.first_hit) {
        let r = (f / b.lo).max(b.hi / f);
        if r > worst || r.is_nan() {
            worst = r;
            worst_at = v.clone();
        }
    }
    let slack = B1_CONSTANT / worst;
    Ok(AuditInstance {
        lemma: "B.1".into(),
        slack,
        pass: slack >= 1.0,
        detail: format!("worst ratio {worst:.6} at {worst_at} over {} vertices", t.vertices.len()),
    })
}

/// Checks `p0_lo(u) >= (4/81) HARM_{T(v)}(u)_hi / (|T1(u)| |T1(parent(v))|)`
/// where `v` is the depth-2 ancestor of `u`.
pub fn audit_lemma_a1(solver: &HarmonicSolver, u: &VertexId) -> Result<AuditInstance> {
    let tree = solver.tree();
    require_min_children(tree, 2)?;
    if tree.children(&VertexId::root())? < 3 {
        return Err(Error::Hypothesis("root degree below 3".into()));
    }
    if u.depth() < 2 {
        return Err(Error::InvalidVertex(format!("{u} must lie at depth 2 or more")));
    }
    let v = u.ancestor(2);
    let p0 = solver.hit_root(u)?;
    let harm = solver.harm_below(&v, u)?;
    let rhs = A1_CONSTANT * harm.hi / (solver.children(u)? as f64 * solver.children(&v.ancestor(1))? as f64);
    let slack = p0.lo / rhs;
    Ok(AuditInstance {
        lemma: "A.1".into(),
        slack,
        pass: slack >= 1.0,
        detail: format!("p0_lo {:.6e} vs bound {rhs:.6e} at {u}", p0.lo),
    })
}

/// Checks `1/(2|T1|) <= HARM(v_i) <= 2/|T1|` for every root child.
pub fn audit_level_one(solver: &HarmonicSolver) -> Result<AuditInstance> {
    let harms = solver.child_harms(&VertexId::root())?;
    let k = harms.len() as f64;
    let slack = harms
        .iter()
        .map(|b| (b.lo * 2.0 * k).min(2.0 / (k * b.hi)))
        .fold(f64::INFINITY, f64::min);
    Ok(AuditInstance {
        lemma: "level-1".into(),
        slack,
        pass: slack >= 1.0,
        detail: format!("{} root children", harms.len()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedValue {
    pub value: f64,
    pub width: f64,
    pub low_precision: bool,
}

impl WeightedValue {
    fn new(value: f64, width: f64) -> Self {
        WeightedValue { value, width, low_precision: width > LOW_PRECISION_WIDTH }
    }
}

/// `Σ_{v in level n} HARM(v) 1{|T1(v)| >= big}` with bracket midpoints.
pub fn lemma_4_4_observable(solver: &HarmonicSolver, n: u32, big: u32) -> Result<WeightedValue> {
    let (mut value, mut width) = (0.0, 0.0);
    for (v, b) in solver.harm_level(n)? {
        if solver.children(&v)? >= big {
            value += b.mid();
            width += b.width();
        }
    }
    Ok(WeightedValue::new(value, width))
}

/// HARM-weighted share of level `n` that a run activated.
pub fn harmonic_weighted_activation(stats: &RunStats, solver: &HarmonicSolver, n: u32) -> Result<WeightedValue> {
    let (mut value, mut width) = (0.0, 0.0);
    for v in stats.first_activation_time.keys().filter(|v| v.depth() == n) {
        let b = solver.harm_vertex(v)?;
        value += b.mid();
        width += b.width();
    }
    Ok(WeightedValue::new(value, width))
}

/// Events on rooted trees decidable from the first few levels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TreeEvent {
    Always,
    ChildrenEq { k: u32 },
    ChildrenAtLeast { k: u32 },
    GrandchildrenEq { k: u32 },
}

impl TreeEvent {
    pub fn holds(&self, tree: &TreeHandle, at: &VertexId) -> Result<bool> {
        Ok(match self {
            TreeEvent::Always => true,
            TreeEvent::ChildrenEq { k } => tree.children(at)? == *k,
            TreeEvent::ChildrenAtLeast { k } => tree.children(at)? >= *k,
            TreeEvent::GrandchildrenEq { k } => {
                let c = tree.children(at)?;
                let mut g = 0;
                for i in 0..c {
                    g += tree.children(&at.child(i))?;
                }
                g == *k
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RnConfig {
    pub depth_cap: u32,
    pub agw_mode: AgwMode,
    pub z: f64,
}

impl Default for RnConfig {
    fn default() -> Self {
        RnConfig { depth_cap: MIN_CAP, agw_mode: AgwMode::ExtraSubtree, z: 3.0 }
    }
}

/// Outcome of one replica: event indicators on `T(v_n)` of an augmented
/// tree and on an independent plain tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnSample {
    pub augmented: Vec<bool>,
    pub plain: Vec<bool>,
    pub bias_bound: f64,
}

pub fn rn_sample(
    dist: &OffspringDistribution,
    n: u32,
    events: &[TreeEvent],
    seed: u64,
    replica: u64,
    cfg: &RnConfig,
) -> Result<RnSample> {
    let cap = cfg.depth_cap.max(n + 1);
    check_cap(cap)?;
    let agw = make_tree(TreeKind::agw(dist.clone(), cfg.agw_mode), key_of(&[seed, TAG_TREE, replica, 1]))?;
    let solver = HarmonicSolver::new(&agw, cap)?;
    let mut rng = stream(key_of(&[seed, TAG_RAY, replica]));
    let ray = sample_harmonic_ray(&solver, n, &mut rng)?;
    let vn = ray.vertices.last().expect("ray has a root");
    let gw = make_tree(TreeKind::gw(dist.clone()), key_of(&[seed, TAG_TREE, replica, 2]))?;
    Ok(RnSample {
        augmented: events.iter().map(|e| e.holds(&agw, vn)).collect::<Result<_>>()?,
        plain: events.iter().map(|e| e.holds(&gw, &VertexId::root())).collect::<Result<_>>()?,
        bias_bound: ray.bias_bound,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub event: TreeEvent,
    pub augmented_rate: f64,
    pub plain_rate: f64,
    pub ratio: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub replicas: u64,
    pub max_bias_bound: f64,
}

/// Ratio of event frequencies with a delta-method interval at `z` standard
/// errors. Refuses when the plain-tree count is below 10.
pub fn ratio_from_samples(samples: &[RnSample], events: &[TreeEvent], z: f64) -> Vec<Result<RatioEstimate>> {
    let r = samples.len() as f64;
    let bias = samples.iter().map(|s| s.bias_bound).fold(0.0, f64::max);
    events
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let a = samples.iter().filter(|s| s.augmented[k]).count() as f64;
            let g = samples.iter().filter(|s| s.plain[k]).count() as f64;
            if g < 10.0 {
                return Err(Error::Unstable(format!("plain-tree count {g} below 10 for {e:?}")));
            }
            let (pa, pg) = (a / r, g / r);
            let ratio = pa / pg;
            let rel = (1.0 - pg) / g + if a > 0.0 { (1.0 - pa) / a } else { 1.0 / r };
            let se = ratio.max(1.0 / g) * rel.sqrt();
            Ok(RatioEstimate {
                event: e.clone(),
                augmented_rate: pa,
                plain_rate: pg,
                ratio,
                ci_lo: (ratio - z * se).max(0.0),
                ci_hi: ratio + z * se,
                replicas: samples.len() as u64,
                max_bias_bound: bias,
            })
        })
        .collect()
}

pub fn rn_ratio_estimate_many(
    dist: &OffspringDistribution,
    n: u32,
    events: &[TreeEvent],
    replicas: u64,
    seed: u64,
    cfg: &RnConfig,
) -> Result<Vec<Result<RatioEstimate>>> {
    let samples: Vec<RnSample> = (0..replicas)
        .into_par_iter()
        .map(|r| rn_sample(dist, n, events, seed, r, cfg))
        .collect::<Result<_>>()?;
    Ok(ratio_from_samples(&samples, events, cfg.z))
}

pub fn rn_ratio_estimate(
    dist: &OffspringDistribution,
    n: u32,
    event: &TreeEvent,
    replicas: u64,
    seed: u64,
) -> Result<RatioEstimate> {
    rn_ratio_estimate_many(dist, n, std::slice::from_ref(event), replicas, seed, &RnConfig::default())?
        .pop()
        .expect("one event")
}
