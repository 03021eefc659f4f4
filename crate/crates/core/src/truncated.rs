//! The truncated frog model, its leaf-augmented variant, and the coupling
//! that realizes each truncated frog as the loop erasure of a frog-model
//! partner.

use std::collections::{BTreeMap, HashMap};

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frog::{
    CouplingAudit, EliminationSummary, FrogConfig, FrogId, FrogPath, RunStats, SimKeys, SimState, Termination,
};
use crate::harmonic::{sample_harmonic_ray, HarmonicSolver, MIN_CAP};
use crate::rng::{combine, key_of, stream, TAG_RAY, TAG_SIM, TAG_TIE, TAG_TREE};
use crate::stats::wilson;
use crate::treegen::{make_tree, LazyTree, NodeId, TreeHandle, TreeKind, VertexId, DEFAULT_VERTEX_CAP, ROOT};
use crate::walks::{
    lerw_to_root_or_escape, loop_erase, walk_with_leaf_kill, LerwTag, TreeLoopEraser, WalkLimits,
    DEFAULT_DEPTH_CAP, DEFAULT_STEP_BUDGET,
};

pub const DEFAULT_P_GRID: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.99];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruncConfig {
    pub lambda: f64,
    /// Leaf-kill probability; `None` runs the plain truncated model.
    pub p: Option<f64>,
    pub depth_cap: u32,
    pub max_active: usize,
    pub horizon: u64,
    pub vertex_cap: usize,
    pub step_budget: u64,
    pub record_activation_depth: u32,
}

impl Default for TruncConfig {
    fn default() -> Self {
        TruncConfig {
            lambda: 0.0,
            p: None,
            depth_cap: DEFAULT_DEPTH_CAP,
            max_active: 1_000_000,
            horizon: 1000,
            vertex_cap: DEFAULT_VERTEX_CAP,
            step_budget: DEFAULT_STEP_BUDGET,
            record_activation_depth: 6,
        }
    }
}

impl TruncConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        TruncConfig { lambda, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        FrogConfig {
            lambda: self.lambda,
            horizon: self.horizon,
            depth_cap: self.depth_cap,
            max_active: self.max_active,
            ..Default::default()
        }
        .validate()?;
        if let Some(p) = self.p {
            if !(0.5..1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("leaf-kill probability {p} outside [1/2, 1)")));
            }
        }
        Ok(())
    }

    fn limits(&self) -> WalkLimits {
        WalkLimits { depth_cap: self.depth_cap, step_budget: self.step_budget }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeathCause {
    AwayStepOntoLanded,
    SimultaneityLoser,
}

/// Vertices landed on so far and the deaths caused by the elimination rule.
#[derive(Clone, Debug, Default)]
pub struct EliminationLedger {
    landed: Vec<bool>,
    order: Vec<NodeId>,
    pub away_step_onto_landed: u64,
    pub simultaneity_loser: u64,
    pub truncated_walks: u64,
}

impl EliminationLedger {
    pub fn is_landed(&self, v: NodeId) -> bool {
        self.landed.get(v as usize).copied().unwrap_or(false)
    }

    fn land(&mut self, v: NodeId) {
        if v as usize >= self.landed.len() {
            self.landed.resize(v as usize + 1, false);
        }
        assert!(!self.landed[v as usize], "vertex landed twice");
        self.landed[v as usize] = true;
        self.order.push(v);
    }

    fn record(&mut self, cause: DeathCause) {
        match cause {
            DeathCause::AwayStepOntoLanded => self.away_step_onto_landed += 1,
            DeathCause::SimultaneityLoser => self.simultaneity_loser += 1,
        }
    }

    /// Landed vertices in landing order.
    pub fn landed(&self) -> &[NodeId] {
        &self.order
    }

    pub fn landed_vertices(&self, tree: &LazyTree) -> Vec<VertexId> {
        self.order.iter().map(|&v| tree.vertex_id(v)).collect()
    }

    pub fn summary(&self) -> EliminationSummary {
        EliminationSummary {
            landed: self.order.len() as u64,
            away_step_onto_landed: self.away_step_onto_landed,
            simultaneity_loser: self.simultaneity_loser,
            truncated_walks: self.truncated_walks,
        }
    }
}

struct TFrog {
    traj: Vec<NodeId>,
    k: usize,
    done: bool,
}

enum Source {
    Walks { leaf_p: Option<f64> },
    Partners { paths: HashMap<FrogId, FrogPath>, audit: CouplingAudit },
}

/// Live state of a truncated-model run.
pub struct TfmState {
    pub tree: LazyTree,
    cfg: TruncConfig,
    keys: SimKeys,
    tie_key: u64,
    source: Source,
    frogs: Vec<TFrog>,
    pub ledger: EliminationLedger,
    pub clock: u64,
    root_returns: u64,
    returns_by_time: Vec<u64>,
    activated_per_level: Vec<u64>,
    first_activation: Vec<(NodeId, u64)>,
    frogs_activated: u64,
    peak_active: u64,
    target: Option<NodeId>,
    termination: Option<Termination>,
}

impl TfmState {
    fn new(tree: LazyTree, cfg: &TruncConfig, seed: u64, source: Source) -> Result<Self> {
        cfg.validate()?;
        let mut s = TfmState {
            tree,
            cfg: cfg.clone(),
            keys: SimKeys::new(seed),
            tie_key: combine(seed, TAG_TIE),
            source,
            frogs: Vec::new(),
            ledger: EliminationLedger::default(),
            clock: 0,
            root_returns: 0,
            returns_by_time: vec![0],
            activated_per_level: vec![1],
            first_activation: vec![(ROOT, 0)],
            frogs_activated: 0,
            peak_active: 0,
            target: None,
            termination: None,
        };
        s.ledger.land(ROOT);
        s.spawn(FrogId { origin: ROOT, idx: 0 })?;
        if matches!(s.source, Source::Walks { leaf_p: Some(_) }) {
            let n = s.keys.sleeper_count(s.tree.node(ROOT).key(), cfg.lambda);
            for i in 0..n {
                s.spawn(FrogId { origin: ROOT, idx: 1 + i })?;
            }
        }
        s.peak_active = s.frogs.len() as u64;
        if s.frogs.is_empty() {
            s.termination = Some(Termination::Extinct);
        }
        Ok(s)
    }

    /// Stops the run as soon as `v` is landed on.
    pub fn stop_when_landed(&mut self, v: NodeId) {
        self.target = Some(v);
    }

    fn trajectory(&mut self, id: FrogId) -> Result<Vec<NodeId>> {
        let limits = self.cfg.limits();
        let initial = id == FrogId { origin: ROOT, idx: 0 };
        match &mut self.source {
            Source::Walks { leaf_p } => {
                let mut rng = self.keys.frog_stream(self.tree.node(id.origin).key(), id.idx);
                let out = if initial {
                    let r = rng.random_range(0..self.tree.child_count(ROOT));
                    let c = self.tree.child(ROOT, r)?;
                    let mut o = lerw_to_root_or_escape(&mut self.tree, c, &limits, &mut rng)?;
                    o.path.insert(0, ROOT);
                    o
                } else if let Some(p) = leaf_p {
                    walk_with_leaf_kill(&mut self.tree, id.origin, *p, &limits, &mut rng)?
                } else {
                    lerw_to_root_or_escape(&mut self.tree, id.origin, &limits, &mut rng)?
                };
                if out.tag == LerwTag::Truncated {
                    self.ledger.truncated_walks += 1;
                }
                Ok(out.path)
            }
            Source::Partners { paths, audit } => {
                audit.tfm_frogs += 1;
                let Some(partner) = paths.get(&id) else {
                    audit.partners_missing += 1;
                    return Ok(vec![id.origin]);
                };
                let (traj, censored) = partner_trajectory(partner, initial);
                let skip = usize::from(initial);
                let tau = traj_prefix_len(&partner.path, initial);
                let mut check = loop_erase(&partner.path[skip..tau]);
                if initial {
                    check.insert(0, ROOT);
                }
                if check != traj {
                    audit.subpath_violations += 1;
                }
                if censored {
                    audit.censored_partner_paths += 1;
                }
                Ok(traj)
            }
        }
    }

    fn spawn(&mut self, id: FrogId) -> Result<()> {
        self.frogs_activated += 1;
        let traj = self.trajectory(id)?;
        if traj.len() > 1 {
            self.frogs.push(TFrog { traj, k: 0, done: false });
        }
        Ok(())
    }

    fn terminate_at_root(&self) -> bool {
        !matches!(self.source, Source::Walks { leaf_p: Some(_) })
    }

    pub fn step(&mut self) -> Option<Termination> {
        if self.termination.is_some() {
            return self.termination;
        }
        match self.step_inner() {
            Ok(t) => t,
            Err(_) => {
                self.termination = Some(Termination::VertexCapped);
                self.termination
            }
        }
    }

    fn step_inner(&mut self) -> Result<Option<Termination>> {
        self.clock += 1;
        let t = self.clock;
        let stop_at_root = self.terminate_at_root();
        let mut arrivals: Vec<(NodeId, usize)> = Vec::new();
        for (i, f) in self.frogs.iter_mut().enumerate() {
            let x = f.traj[f.k];
            f.k += 1;
            let y = f.traj[f.k];
            let last = f.k + 1 == f.traj.len();
            if y == ROOT {
                self.root_returns += 1;
                f.done = stop_at_root || last;
                continue;
            }
            if self.ledger.is_landed(y) {
                if self.tree.parent(y) == Some(x) {
                    self.ledger.record(DeathCause::AwayStepOntoLanded);
                    f.done = true;
                } else {
                    f.done = last;
                }
                continue;
            }
            arrivals.push((y, i));
        }
        arrivals.sort_by_key(|a| a.0);
        let mut woken = Vec::new();
        for group in arrivals.chunk_by(|a, b| a.0 == b.0) {
            let y = group[0].0;
            let winner = if group.len() == 1 {
                0
            } else {
                let key = combine(combine(self.tie_key, self.tree.node(y).key()), t);
                stream(key).random_range(0..group.len())
            };
            for (j, &(_, i)) in group.iter().enumerate() {
                let f = &mut self.frogs[i];
                if j == winner {
                    f.done = f.k + 1 == f.traj.len();
                } else {
                    f.done = true;
                    self.ledger.record(DeathCause::SimultaneityLoser);
                }
            }
            self.ledger.land(y);
            let d = self.tree.depth(y) as usize;
            if self.activated_per_level.len() <= d {
                self.activated_per_level.resize(d + 1, 0);
            }
            self.activated_per_level[d] += 1;
            if d as u32 <= self.cfg.record_activation_depth {
                self.first_activation.push((y, t));
            }
            if (d as u32) < self.cfg.depth_cap {
                woken.push(y);
            }
        }
        self.frogs.retain(|f| !f.done);
        for y in woken {
            let n = self.keys.sleeper_count(self.tree.node(y).key(), self.cfg.lambda);
            for i in 0..n {
                self.spawn(FrogId { origin: y, idx: i })?;
            }
        }
        self.returns_by_time.push(self.root_returns);
        self.peak_active = self.peak_active.max(self.frogs.len() as u64);
        self.termination = if self.target.is_some_and(|v| self.ledger.is_landed(v)) {
            Some(Termination::TargetReached)
        } else if self.frogs.len() > self.cfg.max_active {
            Some(Termination::PopulationCapped)
        } else if self.frogs.is_empty() {
            Some(Termination::Extinct)
        } else if t >= self.cfg.horizon {
            Some(Termination::HorizonReached)
        } else {
            None
        };
        Ok(self.termination)
    }

    pub fn run(&mut self) -> Termination {
        loop {
            if let Some(t) = self.step() {
                return t;
            }
        }
    }

    pub fn stats(&self) -> RunStats {
        RunStats {
            root_returns_by_time: self.returns_by_time.clone(),
            total_root_returns: self.root_returns,
            activated_per_level: self.activated_per_level.clone(),
            first_activation_time: self
                .first_activation
                .iter()
                .map(|&(v, t)| (self.tree.vertex_id(v), t))
                .collect::<BTreeMap<_, _>>(),
            termination: self.termination.unwrap_or(Termination::HorizonReached),
            end_time: self.returns_by_time.len() as u64 - 1,
            retired_at_cap: 0,
            frogs_activated: self.frogs_activated,
            peak_active: self.peak_active,
            escape_branch: None,
            elimination_deaths: Some(self.ledger.summary()),
            coupling_audit: match &self.source {
                Source::Partners { audit, .. } => Some(audit.clone()),
                Source::Walks { .. } => None,
            },
        }
    }
}

/// Index one past the end of the partner prefix used for the trajectory:
/// the first root hit (after the start for the initial frog) or the whole
/// realized path.
fn traj_prefix_len(path: &[NodeId], initial: bool) -> usize {
    let skip = usize::from(initial);
    path.iter()
        .skip(skip.max(1))
        .position(|&v| v == ROOT)
        .map_or(path.len(), |i| i + skip.max(1) + 1)
}

/// Loop erasure of the partner's realized prefix, and whether that prefix
/// was cut by the end of the observation window.
fn partner_trajectory(partner: &FrogPath, initial: bool) -> (Vec<NodeId>, bool) {
    let p = &partner.path;
    if initial && p.len() == 1 {
        return (vec![ROOT], true);
    }
    let tau = traj_prefix_len(p, initial);
    let skip = usize::from(initial);
    let mut le = TreeLoopEraser::new(p[skip]);
    for &v in &p[skip + 1..tau] {
        le.push(v);
    }
    let mut traj = le.into_path();
    if initial {
        traj.insert(0, ROOT);
    }
    let censored = tau == p.len() && p[tau - 1] != ROOT && !partner.retired_at_cap;
    (traj, censored)
}

pub fn run_tfm(tree: &TreeHandle, cfg: &TruncConfig, seed: u64) -> Result<RunStats> {
    let cfg = TruncConfig { p: None, ..cfg.clone() };
    let mut s = TfmState::new(tree.lazy(cfg.vertex_cap), &cfg, seed, Source::Walks { leaf_p: None })?;
    s.run();
    Ok(s.stats())
}

/// Truncated model on the tree with an extra leaf at the root.
pub fn tfm_p_state(tree: &TreeHandle, cfg: &TruncConfig, seed: u64) -> Result<TfmState> {
    let p = cfg
        .p
        .ok_or_else(|| Error::InvalidConfig("leaf-kill probability required".into()))?;
    TfmState::new(tree.lazy(cfg.vertex_cap), cfg, seed, Source::Walks { leaf_p: Some(p) })
}

/// TFM_p on the subtree rooted at `top`, with the leaf attached at `top`.
pub fn tfm_p_state_below(tree: &TreeHandle, top: &VertexId, cfg: &TruncConfig, seed: u64) -> Result<TfmState> {
    let p = cfg
        .p
        .ok_or_else(|| Error::InvalidConfig("leaf-kill probability required".into()))?;
    TfmState::new(tree.lazy_below(top, cfg.vertex_cap)?, cfg, seed, Source::Walks { leaf_p: Some(p) })
}

pub fn run_tfm_p(tree: &TreeHandle, cfg: &TruncConfig, seed: u64) -> Result<RunStats> {
    let mut s = tfm_p_state(tree, cfg, seed)?;
    s.run();
    Ok(s.stats())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CouplingCaps {
    pub horizon: u64,
    pub depth_cap: u32,
    pub max_active: usize,
    pub vertex_cap: usize,
}

impl Default for CouplingCaps {
    fn default() -> Self {
        CouplingCaps { horizon: 1000, depth_cap: DEFAULT_DEPTH_CAP, max_active: 5000, vertex_cap: DEFAULT_VERTEX_CAP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledOutcome {
    pub z1: u64,
    pub z2: u64,
    pub fm: RunStats,
    pub tfm: RunStats,
    pub audit: CouplingAudit,
}

/// Runs FM, then builds the truncated model from loop erasures of the FM
/// frogs' realized paths on the same tree and sleeper field.
pub fn coupled_run(tree: &TreeHandle, lambda: f64, seed: u64, caps: &CouplingCaps) -> Result<CoupledOutcome> {
    let fm_cfg = FrogConfig {
        lambda,
        horizon: caps.horizon,
        depth_cap: caps.depth_cap,
        max_active: caps.max_active,
        vertex_cap: caps.vertex_cap,
        ..Default::default()
    };
    let mut fm = SimState::new(tree, &fm_cfg, seed, true)?;
    fm.run();
    let fm_stats = fm.stats();
    let (lazy, visited, paths) = fm.into_parts();
    let paths: HashMap<FrogId, FrogPath> = paths.into_iter().map(|p| (p.id, p)).collect();
    let tfm_cfg = TruncConfig {
        lambda,
        p: None,
        depth_cap: caps.depth_cap,
        max_active: usize::MAX,
        horizon: u64::MAX,
        vertex_cap: caps.vertex_cap,
        ..Default::default()
    };
    let audit = CouplingAudit { fm_termination: Some(fm_stats.termination), ..Default::default() };
    let mut tfm = TfmState::new(lazy, &tfm_cfg, seed, Source::Partners { paths, audit })?;
    tfm.run();
    let unvisited = tfm
        .ledger
        .landed()
        .iter()
        .filter(|&&v| !visited.get(v as usize).copied().unwrap_or(false))
        .count() as u64;
    let mut tfm_stats = tfm.stats();
    let mut audit = tfm_stats.coupling_audit.take().expect("partner source");
    audit.unvisited_landings = unvisited;
    let z1 = fm_stats.total_root_returns;
    let z2 = tfm_stats.total_root_returns;
    audit.dominance = z1 >= z2;
    Ok(CoupledOutcome { z1, z2, fm: fm_stats, tfm: tfm_stats, audit })
}

pub const ACTIVATION_Z: f64 = 1.96;
pub const WIDE_INTERVAL: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationEstimate {
    pub p: f64,
    pub hits: u64,
    pub replicas: u64,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub wide: bool,
}

impl ActivationEstimate {
    fn new(p: f64, hits: u64, replicas: u64) -> Self {
        let (ci_lo, ci_hi) = wilson(hits, replicas, ACTIVATION_Z);
        ActivationEstimate {
            p,
            hits,
            replicas,
            estimate: hits as f64 / replicas as f64,
            ci_lo,
            ci_hi,
            wide: ci_hi - ci_lo > WIDE_INTERVAL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub level: u32,
    pub lambda: f64,
    pub per_p: Vec<ActivationEstimate>,
    pub min: ActivationEstimate,
    pub max_ray_bias: f64,
}

/// One replica of the activation profile: whether `v_{level+1}` was landed
/// on for each `p`, and the bias bound of the sampled ray.
pub fn activation_replica(
    kind: &TreeKind,
    lambda: f64,
    p_grid: &[f64],
    level: u32,
    seed: u64,
    r: u64,
    caps: &TruncConfig,
) -> Result<(Vec<bool>, f64)> {
    let tree = make_tree(kind.clone(), key_of(&[seed, TAG_TREE, r]))?;
    let solver = HarmonicSolver::new(&tree, (level + 7).max(MIN_CAP))?;
    let ray = sample_harmonic_ray(&solver, level + 1, &mut stream(key_of(&[seed, TAG_RAY, r])))?;
    let top = &ray.vertices[level as usize];
    let target = VertexId(vec![*ray.vertices[level as usize + 1].0.last().expect("nonroot")]);
    let sim_seed = key_of(&[seed, TAG_SIM, r]);
    let hits = p_grid
        .iter()
        .map(|&p| {
            let cfg = TruncConfig { lambda, p: Some(p), ..caps.clone() };
            let mut st = tfm_p_state_below(&tree, top, &cfg, sim_seed)?;
            let v = st.tree.node_of(&target)?;
            st.stop_when_landed(v);
            Ok(st.run() == Termination::TargetReached)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok((hits, ray.bias_bound))
}

pub fn summarize_activation(lambda: f64, level: u32, p_grid: &[f64], per_rep: &[(Vec<bool>, f64)]) -> ActivationProfile {
    let replicas = per_rep.len() as u64;
    let per_p: Vec<ActivationEstimate> = p_grid
        .iter()
        .enumerate()
        .map(|(k, &p)| ActivationEstimate::new(p, per_rep.iter().filter(|x| x.0[k]).count() as u64, replicas))
        .collect();
    let min = *per_p
        .iter()
        .min_by(|a, b| a.estimate.total_cmp(&b.estimate))
        .expect("nonempty grid");
    ActivationProfile {
        level,
        lambda,
        per_p,
        min,
        max_ray_bias: per_rep.iter().map(|x| x.1).fold(0.0, f64::max),
    }
}

/// Per replica: samples a tree, a harmonic ray `v_0..v_{level+1}`, and runs
/// TFM_p on `T+(v_level)` for every `p` on the same seed until
/// `v_{level+1}` is landed on. Returns Wilson intervals per `p` and the
/// grid minimum.
pub fn activation_profile_min_over_p(
    kind: &TreeKind,
    lambda: f64,
    p_grid: &[f64],
    level: u32,
    replicas: u64,
    seed: u64,
    caps: &TruncConfig,
) -> Result<ActivationProfile> {
    if p_grid.is_empty() || replicas == 0 {
        return Err(Error::InvalidConfig("p grid and replica count must be nonempty".into()));
    }
    for &p in p_grid {
        TruncConfig { lambda, p: Some(p), ..caps.clone() }.validate()?;
    }
    let per_rep: Vec<(Vec<bool>, f64)> = (0..replicas)
        .into_par_iter()
        .map(|r| activation_replica(kind, lambda, p_grid, level, seed, r, caps))
        .collect::<Result<_>>()?;
    Ok(summarize_activation(lambda, level, p_grid, &per_rep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treegen::OffspringDistribution;
    use proptest::prelude::*;

    fn dary(d: u32) -> TreeHandle {
        make_tree(TreeKind::Dary { d }, 0).unwrap()
    }

    #[test]
    fn single_frog_returns_at_most_once() {
        let t = dary(2);
        let cfg = TruncConfig::with_lambda(0.0);
        let n = 100_000;
        let mut hits = 0;
        for seed in 0..n {
            let s = run_tfm(&t, &cfg, seed).unwrap();
            assert!(s.total_root_returns <= 1);
            hits += s.total_root_returns;
        }
        let f = hits as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.005, "{f}");
    }

    #[test]
    fn landed_vertices_are_distinct() {
        let t = dary(2);
        let cfg = TruncConfig { horizon: 30, max_active: 100_000, ..TruncConfig::with_lambda(3.0) };
        let mut s = TfmState::new(t.lazy(1_000_000), &cfg, 5, Source::Walks { leaf_p: None }).unwrap();
        s.run();
        let landed = s.ledger.landed_vertices(&s.tree);
        let set: std::collections::HashSet<_> = landed.iter().collect();
        assert_eq!(set.len(), landed.len());
        let st = s.stats();
        let deaths = st.elimination_deaths.unwrap();
        assert!(deaths.away_step_onto_landed + deaths.simultaneity_loser > 0);
    }

    #[test]
    fn leaf_variant_without_sleepers_is_the_root_frog() {
        let t = dary(2);
        for p in [0.5, 0.9] {
            let cfg = TruncConfig { p: Some(p), ..TruncConfig::with_lambda(0.0) };
            let plain = TruncConfig::with_lambda(0.0);
            for seed in 0..200 {
                let a = run_tfm_p(&t, &cfg, seed).unwrap();
                let b = run_tfm(&t, &plain, seed).unwrap();
                assert_eq!(a.frogs_activated, 1);
                assert_eq!(a.total_root_returns, b.total_root_returns);
                assert_eq!(a.first_activation_time, b.first_activation_time);
            }
        }
    }

    #[test]
    fn leaf_variant_rejects_bad_p() {
        let cfg = TruncConfig { p: Some(0.3), ..Default::default() };
        assert!(run_tfm_p(&dary(2), &cfg, 0).is_err());
        let cfg = TruncConfig { p: Some(1.0), ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn depth_one_activation_under_leaf_kill() {
        let t = dary(2);
        let target = VertexId(vec![0]);
        for p in [0.5, 0.99] {
            let cfg = TruncConfig { p: Some(p), horizon: 40, max_active: 5_000, ..TruncConfig::with_lambda(1.0) };
            let n = 500;
            let hit = (0..n)
                .filter(|&seed| {
                    let mut s = tfm_p_state(&t, &cfg, seed).unwrap();
                    let v = s.tree.node_of(&target).unwrap();
                    s.stop_when_landed(v);
                    s.run() == Termination::TargetReached
                })
                .count() as f64
                / n as f64;
            assert!(hit > 0.5 && hit < 1.0, "p={p}: {hit}");
        }
    }

    #[test]
    fn activation_with_only_the_root_frog() {
        let caps = TruncConfig { horizon: 400, ..Default::default() };
        for kind in [TreeKind::Dary { d: 2 }, TreeKind::gw(OffspringDistribution::two_point(2, 3, 0.5).unwrap())] {
            let prof = activation_profile_min_over_p(&kind, 0.0, &[0.5, 0.99], 0, 4000, 3, &caps).unwrap();
            // the first step of the root frog picks a child uniformly and the
            // frog stops on its return to the root
            let mut exact = 0.0;
            for r in 0..4000u64 {
                let t = make_tree(kind.clone(), key_of(&[3, TAG_TREE, r])).unwrap();
                exact += 1.0 / t.children(&VertexId::root()).unwrap() as f64;
            }
            exact /= 4000.0;
            for e in &prof.per_p {
                let sd = (exact * (1.0 - exact) / 4000.0).sqrt();
                assert!((e.estimate - exact).abs() < 3.0 * sd, "{kind:?} {e:?} vs {exact}");
            }
            assert_eq!(prof.per_p[0].hits, prof.per_p[1].hits);
        }
    }

    #[test]
    fn activation_near_certain_at_large_lambda() {
        let caps = TruncConfig { horizon: 50, max_active: 100_000, ..Default::default() };
        let prof = activation_profile_min_over_p(&TreeKind::Dary { d: 2 }, 20.0, &DEFAULT_P_GRID, 2, 300, 8, &caps).unwrap();
        for e in &prof.per_p {
            assert!(e.estimate >= 0.99, "{e:?}");
        }
        assert!(prof.per_p.iter().all(|e| e.estimate >= prof.min.estimate));
    }

    #[test]
    fn single_point_grid_matches_direct_runs() {
        let kind = TreeKind::Dary { d: 3 };
        let caps = TruncConfig { horizon: 60, max_active: 5000, ..Default::default() };
        let prof = activation_profile_min_over_p(&kind, 0.5, &[0.5], 1, 300, 4, &caps).unwrap();
        let mut hits = 0;
        for r in 0..300u64 {
            let t = make_tree(kind.clone(), key_of(&[4, TAG_TREE, r])).unwrap();
            let s = HarmonicSolver::new(&t, 10).unwrap();
            let ray = sample_harmonic_ray(&s, 2, &mut stream(key_of(&[4, TAG_RAY, r]))).unwrap();
            let cfg = TruncConfig { lambda: 0.5, p: Some(0.5), ..caps.clone() };
            let mut st = tfm_p_state_below(&t, &ray.vertices[1], &cfg, key_of(&[4, TAG_SIM, r])).unwrap();
            let v = st.tree.node_of(&VertexId(vec![ray.vertices[2].0[1]])).unwrap();
            st.stop_when_landed(v);
            hits += u64::from(st.run() == Termination::TargetReached);
        }
        assert_eq!(prof.min.hits, hits);
        assert!(prof.min.wide);
    }

    #[test]
    fn coupling_on_a_single_walker() {
        let t = dary(2);
        let caps = CouplingCaps::default();
        for seed in 0..500 {
            let o = coupled_run(&t, 0.0, seed, &caps).unwrap();
            assert!(o.z2 <= 1);
            assert!(o.z1 >= o.z2);
            assert_eq!(o.z2 == 1, o.z1 >= 1, "seed {seed}");
            assert!(o.audit.passed());
        }
    }

    #[test]
    fn coupled_tfm_matches_standalone_tfm_when_uncensored() {
        let t = dary(3);
        let caps = CouplingCaps { horizon: 100_000, max_active: 1_000_000, ..Default::default() };
        for seed in 0..100 {
            let o = coupled_run(&t, 0.1, seed, &caps).unwrap();
            if o.fm.termination != Termination::Extinct {
                continue;
            }
            let plain = run_tfm(&t, &TruncConfig { horizon: 100_000, ..TruncConfig::with_lambda(0.1) }, seed).unwrap();
            assert_eq!(o.z2, plain.total_root_returns);
            assert_eq!(o.tfm.activated_per_level, plain.activated_per_level);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn coupling_dominance(seed in any::<u64>(), lambda in 0.0f64..4.0, two_point in any::<bool>()) {
            let kind = if two_point {
                TreeKind::gw(OffspringDistribution::two_point(2, 3, 0.5).unwrap())
            } else {
                TreeKind::Dary { d: 2 }
            };
            let t = make_tree(kind, seed ^ 7).unwrap();
            let caps = CouplingCaps { horizon: 200, max_active: 3000, ..Default::default() };
            let o = coupled_run(&t, lambda, seed, &caps).unwrap();
            prop_assert!(o.z1 >= o.z2);
            prop_assert!(o.audit.passed(), "{:?}", o.audit);
        }

        #[test]
        fn elimination_rule_exclusive(seed in any::<u64>(), lambda in 0.5f64..3.0) {
            let cfg = TruncConfig { horizon: 20, max_active: 20_000, ..TruncConfig::with_lambda(lambda) };
            let s = run_tfm(&dary(2), &cfg, seed).unwrap();
            let levels: u64 = s.activated_per_level.iter().sum();
            prop_assert_eq!(levels, s.elimination_deaths.unwrap().landed);
        }
    }
}
