//! Lazily materialized rooted trees.
//!
//! A tree is a pure function of `(kind, seed)`: the child count of a vertex
//! is drawn from a uniform hashed from the tree seed and the vertex's root
//! path, so any exploration order produces the same tree.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{combine, unit_f64, TAG_OFFSPRING, TAG_OFFSPRING_EXTRA};

pub const MAX_SUPPORT: u32 = 1 << 16;
pub const DEFAULT_VERTEX_CAP: usize = 10_000_000;
const ROOT_KEY: u64 = 0x726f_6f74_7061_7468;

/// Serialized description of an offspring law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum OffspringLaw {
    Constant { d: u32 },
    /// `a` with probability `1 - q`, `b` with probability `q`.
    TwoPoint { a: u32, b: u32, q: f64 },
    /// `weights[i]` is the probability of `k_min + i` children.
    Pmf { k_min: u32, weights: Vec<f64> },
    /// `2 + (d - 2) * Bernoulli(d^-5)`.
    Corollary { d: u32 },
}

/// A validated offspring law with a precomputed inverse CDF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OffspringLaw", into = "OffspringLaw")]
pub struct OffspringDistribution {
    law: OffspringLaw,
    support: Vec<u32>,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl From<OffspringDistribution> for OffspringLaw {
    fn from(d: OffspringDistribution) -> Self {
        d.law
    }
}

impl TryFrom<OffspringLaw> for OffspringDistribution {
    type Error = Error;

    fn try_from(law: OffspringLaw) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidDistribution(m));
        let (support, probs): (Vec<u32>, Vec<f64>) = match &law {
            OffspringLaw::Constant { d } => (vec![*d], vec![1.0]),
            OffspringLaw::TwoPoint { a, b, q } => {
                if !(0.0..=1.0).contains(q) {
                    return bad(format!("two-point weight {q} outside [0, 1]"));
                }
                if a == b {
                    (vec![*a], vec![1.0])
                } else {
                    (vec![*a, *b], vec![1.0 - q, *q])
                }
            }
            OffspringLaw::Pmf { k_min, weights } => {
                if weights.is_empty() {
                    return bad("empty pmf".into());
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return bad(format!("pmf sums to {total}, not 1"));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return bad("pmf weights must be finite and nonnegative".into());
                }
                (0..weights.len() as u32)
                    .map(|i| k_min + i)
                    .zip(weights.iter().copied())
                    .filter(|(_, w)| *w > 0.0)
                    .unzip()
            }
            OffspringLaw::Corollary { d } => {
                if *d < 3 {
                    return bad(format!("corollary law needs d >= 3, got {d}"));
                }
                let eps = (*d as f64).powi(-5);
                (vec![2, *d], vec![1.0 - eps, eps])
            }
        };
        let (support, probs): (Vec<u32>, Vec<f64>) = support
            .into_iter()
            .zip(probs)
            .filter(|(_, p)| *p > 0.0)
            .unzip();
        if let Some(k) = support.iter().find(|&&k| k < 2) {
            return bad(format!("mass on {k} < 2 children"));
        }
        if let Some(k) = support.iter().find(|&&k| k > MAX_SUPPORT) {
            return bad(format!("support point {k} exceeds {MAX_SUPPORT}"));
        }
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        *cdf.last_mut().expect("nonempty support") = 1.0;
        Ok(Self { law, support, probs, cdf })
    }
}

impl OffspringDistribution {
    pub fn new(law: OffspringLaw) -> Result<Self> {
        Self::try_from(law)
    }

    pub fn constant(d: u32) -> Result<Self> {
        Self::new(OffspringLaw::Constant { d })
    }

    pub fn two_point(a: u32, b: u32, q: f64) -> Result<Self> {
        Self::new(OffspringLaw::TwoPoint { a, b, q })
    }

    pub fn pmf(k_min: u32, weights: Vec<f64>) -> Result<Self> {
        Self::new(OffspringLaw::Pmf { k_min, weights })
    }

    pub fn corollary(d: u32) -> Result<Self> {
        Self::new(OffspringLaw::Corollary { d })
    }

    pub fn law(&self) -> &OffspringLaw {
        &self.law
    }

    /// Support points with positive mass, ascending.
    pub fn support(&self) -> &[u32] {
        &self.support
    }

    pub fn pmf_at(&self, k: u32) -> f64 {
        self.support
            .iter()
            .position(|&s| s == k)
            .map_or(0.0, |i| self.probs[i])
    }

    pub fn min_children(&self) -> u32 {
        self.support[0]
    }

    pub fn mean(&self) -> f64 {
        self.support
            .iter()
            .zip(&self.probs)
            .map(|(&k, p)| k as f64 * p)
            .sum()
    }

    /// P(Z >= n).
    pub fn tail(&self, n: u32) -> f64 {
        self.support
            .iter()
            .zip(&self.probs)
            .filter(|(&k, _)| k >= n)
            .map(|(_, p)| p)
            .sum()
    }

    /// Inverse-CDF lookup of a uniform in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> u32 {
        let i = self.cdf.partition_point(|&c| c <= u);
        self.support[i.min(self.support.len() - 1)]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.quantile(rng.random::<f64>())
    }
}

/// Root convention for augmented Galton-Watson trees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgwMode {
    /// Root has `Z + 1` children.
    #[default]
    ExtraSubtree,
    /// Root has `Z + Z'` children for two independent draws.
    DoubleRoot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeKind {
    Gw {
        offspring: OffspringDistribution,
    },
    Agw {
        offspring: OffspringDistribution,
        #[serde(default)]
        mode: AgwMode,
    },
    Dary {
        d: u32,
    },
    Hat,
    /// Root with two children: a 2-ary subtree and a `d`-ary subtree.
    Joined {
        d: u32,
    },
    Finite {
        tree: FiniteTree,
    },
}

impl TreeKind {
    pub fn gw(offspring: OffspringDistribution) -> Self {
        TreeKind::Gw { offspring }
    }

    pub fn agw(offspring: OffspringDistribution, mode: AgwMode) -> Self {
        TreeKind::Agw { offspring, mode }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TreeKind::Dary { d } if !(2..=MAX_SUPPORT).contains(d) => {
                Err(Error::InvalidTree(format!("d-ary tree needs 2 <= d <= {MAX_SUPPORT}, got {d}")))
            }
            TreeKind::Joined { d } if !(2..=MAX_SUPPORT).contains(d) => {
                Err(Error::InvalidTree(format!("joined tree needs d >= 2, got {d}")))
            }
            _ => Ok(()),
        }
    }

    /// A lower bound on the child count of every vertex at depth `>= depth`,
    /// or `None` when vertices may be leaves.
    pub fn min_children_from(&self, depth: u32) -> Option<u32> {
        match self {
            TreeKind::Gw { offspring } | TreeKind::Agw { offspring, .. } => {
                Some(offspring.min_children())
            }
            TreeKind::Dary { d } => Some(*d),
            TreeKind::Hat => Some(depth + 2),
            TreeKind::Joined { d } => Some((*d).min(2)),
            TreeKind::Finite { .. } => None,
        }
    }

    pub(crate) fn root_info(&self) -> NodeInfo {
        NodeInfo { key: ROOT_KEY, depth: 0, branch: u32::MAX, finite: 0 }
    }

    pub(crate) fn child_info(&self, parent: &NodeInfo, i: u32) -> NodeInfo {
        let finite = match self {
            TreeKind::Finite { tree } => tree.first_child[parent.finite as usize] + i,
            _ => 0,
        };
        NodeInfo {
            key: combine(parent.key, i as u64),
            depth: parent.depth + 1,
            branch: if parent.depth == 0 { i } else { parent.branch },
            finite,
        }
    }

    pub(crate) fn child_count(&self, offspring_key: u64, v: &NodeInfo) -> u32 {
        let n = match self {
            TreeKind::Gw { offspring } => offspring.quantile(unit_f64(combine(offspring_key, v.key))),
            TreeKind::Agw { offspring, mode } => {
                let z = offspring.quantile(unit_f64(combine(offspring_key, v.key)));
                match (v.depth, mode) {
                    (0, AgwMode::ExtraSubtree) => z + 1,
                    (0, AgwMode::DoubleRoot) => {
                        let extra = combine(combine(offspring_key, TAG_OFFSPRING_EXTRA), v.key);
                        z + offspring.quantile(unit_f64(extra))
                    }
                    _ => z,
                }
            }
            TreeKind::Dary { d } => *d,
            TreeKind::Hat => v.depth + 2,
            TreeKind::Joined { d } => match (v.depth, v.branch) {
                (0, _) => 2,
                (_, 0) => 2,
                _ => *d,
            },
            TreeKind::Finite { tree } => return tree.child_counts[v.finite as usize],
        };
        assert!(n >= 2, "materialized a vertex with {n} < 2 children");
        n
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NodeInfo {
    pub key: u64,
    pub depth: u32,
    pub branch: u32,
    pub finite: u32,
}

/// A vertex addressed by its path of child indices from the root.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct VertexId(pub Vec<u32>);

impl VertexId {
    pub fn root() -> Self {
        VertexId(Vec::new())
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn depth(&self) -> u32 {
        self.0.len() as u32
    }

    pub fn child(&self, i: u32) -> Self {
        let mut p = self.0.clone();
        p.push(i);
        VertexId(p)
    }

    pub fn parent(&self) -> Option<Self> {
        (!self.is_root()).then(|| VertexId(self.0[..self.0.len() - 1].to_vec()))
    }

    pub fn ancestor(&self, depth: u32) -> Self {
        VertexId(self.0[..depth as usize].to_vec())
    }

    pub fn is_ancestor_of(&self, other: &VertexId) -> bool {
        other.0.starts_with(&self.0)
    }
}

impl Ord for VertexId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.len().cmp(&other.0.len()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for VertexId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("r")?;
        for i in &self.0 {
            write!(f, ".{i}")?;
        }
        Ok(())
    }
}

impl FromStr for VertexId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('.');
        if parts.next() != Some("r") {
            return Err(Error::Parse(format!("vertex path must start with 'r': {s:?}")));
        }
        parts
            .map(|p| p.parse::<u32>().map_err(|e| Error::Parse(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()
            .map(VertexId)
    }
}

impl From<VertexId> for String {
    fn from(v: VertexId) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for VertexId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// An explicit finite tree stored in breadth-first order. Vertices without
/// children are boundary vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FiniteTreeRepr", into = "FiniteTreeRepr")]
pub struct FiniteTree {
    child_counts: Vec<u32>,
    first_child: Vec<u32>,
    parent: Vec<u32>,
    depth: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct FiniteTreeRepr {
    child_counts: Vec<u32>,
}

impl From<FiniteTree> for FiniteTreeRepr {
    fn from(t: FiniteTree) -> Self {
        FiniteTreeRepr { child_counts: t.child_counts }
    }
}

impl TryFrom<FiniteTreeRepr> for FiniteTree {
    type Error = Error;
    fn try_from(r: FiniteTreeRepr) -> Result<Self> {
        FiniteTree::from_child_counts(r.child_counts)
    }
}

impl FiniteTree {
    /// Builds a tree from breadth-first child counts, root first.
    pub fn from_child_counts(child_counts: Vec<u32>) -> Result<Self> {
        let n = child_counts.len();
        if n == 0 {
            return Err(Error::InvalidTree("finite tree needs a root".into()));
        }
        let total: u64 = 1 + child_counts.iter().map(|&c| c as u64).sum::<u64>();
        if total != n as u64 {
            return Err(Error::InvalidTree(format!(
                "child counts describe {total} vertices but {n} are listed"
            )));
        }
        let mut first_child = vec![0u32; n];
        let mut parent = vec![u32::MAX; n];
        let mut depth = vec![0u32; n];
        let mut next = 1u32;
        for v in 0..n {
            if v > 0 && parent[v] == u32::MAX {
                return Err(Error::InvalidTree(format!("vertex {v} is unreachable")));
            }
            first_child[v] = next;
            for c in next..next + child_counts[v] {
                parent[c as usize] = v as u32;
                depth[c as usize] = depth[v] + 1;
            }
            next += child_counts[v];
        }
        Ok(FiniteTree { child_counts, first_child, parent, depth })
    }

    pub fn len(&self) -> usize {
        self.child_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn child_count(&self, v: usize) -> u32 {
        self.child_counts[v]
    }

    pub fn child_counts(&self) -> &[u32] {
        &self.child_counts
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.child_counts[v] == 0
    }

    pub fn children(&self, v: usize) -> std::ops::Range<usize> {
        let f = self.first_child[v] as usize;
        f..f + self.child_counts[v] as usize
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        (v > 0).then(|| self.parent[v] as usize)
    }

    pub fn depth(&self, v: usize) -> u32 {
        self.depth[v]
    }

    pub fn max_depth(&self) -> u32 {
        self.depth[self.len() - 1]
    }

    /// Index of the vertex with the given path.
    pub fn index_of(&self, v: &VertexId) -> Result<usize> {
        let mut x = 0usize;
        for &i in &v.0 {
            if i >= self.child_counts[x] {
                return Err(Error::InvalidVertex(v.to_string()));
            }
            x = self.first_child[x] as usize + i as usize;
        }
        Ok(x)
    }

    pub fn vertex_id(&self, mut x: usize) -> VertexId {
        let mut path = Vec::with_capacity(self.depth[x] as usize);
        while x > 0 {
            let p = self.parent[x] as usize;
            path.push((x - self.first_child[p] as usize) as u32);
            x = p;
        }
        path.reverse();
        VertexId(path)
    }

    /// Indices of all vertices at depth `n`, in breadth-first order.
    pub fn level(&self, n: u32) -> std::ops::Range<usize> {
        let lo = self.depth.partition_point(|&d| d < n);
        let hi = self.depth.partition_point(|&d| d <= n);
        lo..hi
    }

    /// One line per vertex, `path<TAB>child_count`, breadth-first.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in 0..self.len() {
            s.push_str(&format!("{}\t{}\n", self.vertex_id(v), self.child_counts[v]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut counts = Vec::new();
        let mut paths = Vec::new();
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (p, c) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("line {}: expected path<TAB>count", ln + 1)))?;
            paths.push(p.parse::<VertexId>()?);
            counts.push(
                c.trim()
                    .parse::<u32>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))?,
            );
        }
        let tree = FiniteTree::from_child_counts(counts)?;
        for (x, p) in paths.iter().enumerate() {
            if tree.vertex_id(x) != *p {
                return Err(Error::Parse(format!("vertex {p} listed out of breadth-first order")));
            }
        }
        Ok(tree)
    }
}

/// Shareable handle on a lazily generated tree with a memo of child counts.
pub struct TreeHandle {
    kind: Arc<TreeKind>,
    seed: u64,
    offspring_key: u64,
    cache: RwLock<HashMap<VertexId, u32>>,
}

impl Clone for TreeHandle {
    fn clone(&self) -> Self {
        TreeHandle {
            kind: self.kind.clone(),
            seed: self.seed,
            offspring_key: self.offspring_key,
            cache: RwLock::new(self.cache.read().expect("cache poisoned").clone()),
        }
    }
}

impl fmt::Debug for TreeHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TreeHandle").field("kind", &self.kind).field("seed", &self.seed).finish()
    }
}

pub fn make_tree(kind: TreeKind, seed: u64) -> Result<TreeHandle> {
    kind.validate()?;
    Ok(TreeHandle {
        kind: Arc::new(kind),
        seed,
        offspring_key: combine(seed, TAG_OFFSPRING),
        cache: RwLock::new(HashMap::new()),
    })
}

impl TreeHandle {
    pub fn kind(&self) -> &TreeKind {
        &self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn info(&self, v: &VertexId) -> Result<NodeInfo> {
        let mut info = self.kind.root_info();
        for &i in &v.0 {
            if i >= self.kind.child_count(self.offspring_key, &info) {
                return Err(Error::InvalidVertex(v.to_string()));
            }
            info = self.kind.child_info(&info, i);
        }
        Ok(info)
    }

    pub(crate) fn count_at(&self, info: &NodeInfo) -> u32 {
        self.kind.child_count(self.offspring_key, info)
    }

    /// Child count of `v`; the children are `v.child(0..count)`.
    pub fn children(&self, v: &VertexId) -> Result<u32> {
        if let Some(&c) = self.cache.read().expect("cache poisoned").get(v) {
            return Ok(c);
        }
        let c = self.count_at(&self.info(v)?);
        self.cache.write().expect("cache poisoned").insert(v.clone(), c);
        Ok(c)
    }

    /// Fresh arena over the same tree.
    pub fn lazy(&self, vertex_cap: usize) -> LazyTree {
        LazyTree::new(self.kind.clone(), self.offspring_key, vertex_cap)
    }

    /// Arena over the subtree at `top`. Depths are relative to `top`;
    /// child counts and vertex keys are those of the full tree.
    pub fn lazy_below(&self, top: &VertexId, vertex_cap: usize) -> Result<LazyTree> {
        let info = self.info(top)?;
        Ok(LazyTree::with_root(self.kind.clone(), self.offspring_key, vertex_cap, info))
    }

    pub fn truncate(&self, depth: u32, vertex_cap: usize) -> Result<FiniteTree> {
        self.truncate_below(&VertexId::root(), depth, vertex_cap)
    }

    /// Breadth-first truncation of the subtree at `top` to relative depth
    /// `depth`; vertices at that depth become boundary vertices.
    pub fn truncate_below(&self, top: &VertexId, depth: u32, vertex_cap: usize) -> Result<FiniteTree> {
        let mut counts = Vec::new();
        let mut queue = VecDeque::from([(self.info(top)?, 0u32)]);
        let mut listed = 1usize;
        while let Some((info, d)) = queue.pop_front() {
            let c = if d < depth { self.count_at(&info) } else { 0 };
            listed += c as usize;
            if listed > vertex_cap {
                return Err(Error::VertexCapExceeded { count: listed, cap: vertex_cap });
            }
            for i in 0..c {
                queue.push_back((self.kind.child_info(&info, i), d + 1));
            }
            counts.push(c);
        }
        FiniteTree::from_child_counts(counts)
    }
}

pub fn children(tree: &TreeHandle, v: &VertexId) -> Result<u32> {
    tree.children(v)
}

pub fn truncate(tree: &TreeHandle, depth: u32, vertex_cap: usize) -> Result<FiniteTree> {
    tree.truncate(depth, vertex_cap)
}

pub fn sample_offspring<R: Rng + ?Sized>(dist: &OffspringDistribution, rng: &mut R) -> u32 {
    dist.sample(rng)
}

pub type NodeId = u32;
pub const ROOT: NodeId = 0;
const UNMATERIALIZED: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
pub struct Node {
    pub parent: NodeId,
    pub depth: u32,
    pub child_count: u32,
    first_child: u32,
    info: NodeInfo,
}

impl Node {
    pub fn key(&self) -> u64 {
        self.info.key
    }

    /// Index of the root child whose subtree contains this vertex.
    pub fn branch(&self) -> Option<u32> {
        (self.depth > 0).then_some(self.info.branch)
    }
}

/// Arena of materialized vertices used by the simulation engines. Children
/// of a vertex are materialized together on first access.
pub struct LazyTree {
    kind: Arc<TreeKind>,
    offspring_key: u64,
    nodes: Vec<Node>,
    vertex_cap: usize,
}

impl LazyTree {
    fn new(kind: Arc<TreeKind>, offspring_key: u64, vertex_cap: usize) -> Self {
        let info = kind.root_info();
        Self::with_root(kind, offspring_key, vertex_cap, info)
    }

    fn with_root(kind: Arc<TreeKind>, offspring_key: u64, vertex_cap: usize, info: NodeInfo) -> Self {
        let root = Node {
            parent: UNMATERIALIZED,
            depth: 0,
            child_count: kind.child_count(offspring_key, &info),
            first_child: UNMATERIALIZED,
            info,
        };
        LazyTree { kind, offspring_key, nodes: vec![root], vertex_cap }
    }

    pub fn kind(&self) -> &TreeKind {
        &self.kind
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn node(&self, v: NodeId) -> &Node {
        &self.nodes[v as usize]
    }

    #[inline]
    pub fn child_count(&self, v: NodeId) -> u32 {
        self.nodes[v as usize].child_count
    }

    #[inline]
    pub fn depth(&self, v: NodeId) -> u32 {
        self.nodes[v as usize].depth
    }

    #[inline]
    pub fn parent(&self, v: NodeId) -> Option<NodeId> {
        (v != ROOT).then(|| self.nodes[v as usize].parent)
    }

    /// Number of neighbors in the tree.
    #[inline]
    pub fn degree(&self, v: NodeId) -> u32 {
        self.nodes[v as usize].child_count + u32::from(v != ROOT)
    }

    #[inline]
    pub fn child(&mut self, v: NodeId, i: u32) -> Result<NodeId> {
        let n = self.nodes[v as usize];
        debug_assert!(i < n.child_count);
        if n.first_child != UNMATERIALIZED {
            return Ok(n.first_child + i);
        }
        let first = self.nodes.len();
        if first + n.child_count as usize > self.vertex_cap {
            return Err(Error::VertexCapExceeded {
                count: first + n.child_count as usize,
                cap: self.vertex_cap,
            });
        }
        for j in 0..n.child_count {
            let info = self.kind.child_info(&n.info, j);
            self.nodes.push(Node {
                parent: v,
                depth: n.depth + 1,
                child_count: self.kind.child_count(self.offspring_key, &info),
                first_child: UNMATERIALIZED,
                info,
            });
        }
        self.nodes[v as usize].first_child = first as u32;
        Ok(first as u32 + i)
    }

    /// Neighbor number `r` of `v`: children first, then the parent.
    #[inline]
    pub fn neighbor(&mut self, v: NodeId, r: u32) -> Result<NodeId> {
        let c = self.nodes[v as usize].child_count;
        if r < c {
            self.child(v, r)
        } else {
            Ok(self.nodes[v as usize].parent)
        }
    }

    pub fn child_index(&self, v: NodeId) -> Option<u32> {
        self.parent(v).map(|p| v - self.nodes[p as usize].first_child)
    }

    pub fn vertex_id(&self, mut v: NodeId) -> VertexId {
        let mut path = Vec::with_capacity(self.depth(v) as usize);
        while let Some(i) = self.child_index(v) {
            path.push(i);
            v = self.nodes[v as usize].parent;
        }
        path.reverse();
        VertexId(path)
    }

    pub fn node_of(&mut self, v: &VertexId) -> Result<NodeId> {
        let mut x = ROOT;
        for &i in &v.0 {
            if i >= self.child_count(x) {
                return Err(Error::InvalidVertex(v.to_string()));
            }
            x = self.child(x, i)?;
        }
        Ok(x)
    }
}
