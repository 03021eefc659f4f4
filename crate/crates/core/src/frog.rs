//! The frog model FM^(λ) and its root-seeded variant FM^(λ+).

use std::collections::BTreeMap;

use rand::RngExt;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{combine, stream, StreamRng, TAG_FROG, TAG_SLEEPERS};
use crate::treegen::{LazyTree, NodeId, TreeHandle, VertexId, DEFAULT_VERTEX_CAP, ROOT};
use crate::walks::DEFAULT_DEPTH_CAP;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrogConfig {
    pub lambda: f64,
    pub horizon: u64,
    pub depth_cap: u32,
    pub max_active: usize,
    pub sleep_at_root: bool,
    pub vertex_cap: usize,
    /// Activation times are kept for vertices up to this depth.
    pub record_activation_depth: u32,
    /// Records which root subtree the initial frog is in when it first
    /// reaches this depth.
    pub escape_probe_depth: Option<u32>,
    /// Ends the run once this many root returns have occurred.
    pub stop_at_returns: Option<u64>,
}

impl Default for FrogConfig {
    fn default() -> Self {
        FrogConfig {
            lambda: 0.0,
            horizon: 1000,
            depth_cap: DEFAULT_DEPTH_CAP,
            max_active: 1_000_000,
            sleep_at_root: false,
            vertex_cap: DEFAULT_VERTEX_CAP,
            record_activation_depth: 6,
            escape_probe_depth: None,
            stop_at_returns: None,
        }
    }
}

impl FrogConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        FrogConfig { lambda, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and nonnegative");
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if self.depth_cap < 2 {
            return bad("depth_cap must be at least 2");
        }
        if self.max_active < 1 {
            return bad("max_active must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Termination {
    HorizonReached,
    PopulationCapped,
    Extinct,
    VertexCapped,
    TargetReached,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EliminationSummary {
    pub landed: u64,
    pub away_step_onto_landed: u64,
    pub simultaneity_loser: u64,
    pub truncated_walks: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingAudit {
    pub tfm_frogs: u64,
    pub partners_missing: u64,
    pub subpath_violations: u64,
    pub unvisited_landings: u64,
    pub censored_partner_paths: u64,
    pub fm_termination: Option<Termination>,
    pub dominance: bool,
}

impl CouplingAudit {
    pub fn passed(&self) -> bool {
        self.dominance
            && self.partners_missing == 0
            && self.subpath_violations == 0
            && self.unvisited_landings == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Entry `t` is the number of root returns during ticks `1..=t`.
    pub root_returns_by_time: Vec<u64>,
    pub total_root_returns: u64,
    /// Number of vertices first landed on, per depth.
    pub activated_per_level: Vec<u64>,
    pub first_activation_time: BTreeMap<VertexId, u64>,
    pub termination: Termination,
    pub end_time: u64,
    pub retired_at_cap: u64,
    pub frogs_activated: u64,
    pub peak_active: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escape_branch: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elimination_deaths: Option<EliminationSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_audit: Option<CouplingAudit>,
}

impl RunStats {
    /// Returns during ticks `t` with `from < t <= to`, clipped to the run.
    pub fn returns_between(&self, from: u64, to: u64) -> u64 {
        let at = |t: u64| self.root_returns_by_time[t.min(self.end_time) as usize];
        at(to) - at(from)
    }

    /// Returns by tick `t`, clipped to the run.
    pub fn returns_by(&self, t: u64) -> u64 {
        self.returns_between(0, t)
    }

    /// Whether observation stopped early for a reason other than extinction.
    pub fn censored_before(&self, t: u64) -> bool {
        self.end_time < t
            && matches!(self.termination, Termination::PopulationCapped | Termination::VertexCapped)
    }
}

/// Keys shared by every stream of one simulation seed.
#[derive(Clone, Copy, Debug)]
pub struct SimKeys {
    pub sleepers: u64,
    pub frogs: u64,
    pub seed: u64,
}

impl SimKeys {
    pub fn new(seed: u64) -> Self {
        SimKeys { sleepers: combine(seed, TAG_SLEEPERS), frogs: combine(seed, TAG_FROG), seed }
    }

    /// Poisson(λ) count realized as the number of unit-rate arrivals in
    /// `[0, λ]`, so counts grow monotonically with λ.
    pub fn sleeper_count(&self, vertex_key: u64, lambda: f64) -> u32 {
        if lambda <= 0.0 {
            return 0;
        }
        let mut rng = stream(combine(self.sleepers, vertex_key));
        let mut exp = || -> f64 { Exp1.sample(&mut rng) };
        let mut t = exp();
        let mut n = 0;
        while t <= lambda {
            n += 1;
            t += exp();
        }
        n
    }

    pub fn frog_stream(&self, origin_key: u64, idx: u32) -> StreamRng {
        stream(combine(combine(self.frogs, origin_key), idx as u64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrogId {
    pub origin: NodeId,
    pub idx: u32,
}

/// Path of one frog as realized during a run.
#[derive(Clone, Debug)]
pub struct FrogPath {
    pub id: FrogId,
    pub start_time: u64,
    pub path: Vec<NodeId>,
    pub retired_at_cap: bool,
}

struct Frog {
    pos: NodeId,
    rng: StreamRng,
    id: FrogId,
    start_time: u64,
    path: Option<Vec<NodeId>>,
    probe: bool,
}

/// Live state of an FM run.
pub struct SimState {
    pub tree: LazyTree,
    cfg: FrogConfig,
    keys: SimKeys,
    frogs: Vec<Frog>,
    visited: Vec<bool>,
    pub clock: u64,
    pub root_returns: u64,
    returns_by_time: Vec<u64>,
    activated_per_level: Vec<u64>,
    first_activation: Vec<(NodeId, u64)>,
    retired_at_cap: u64,
    frogs_activated: u64,
    peak_active: u64,
    escape_branch: Option<u32>,
    record_paths: bool,
    finished_paths: Vec<FrogPath>,
    termination: Option<Termination>,
}

pub fn init_fm(tree: &TreeHandle, cfg: &FrogConfig, seed: u64) -> Result<SimState> {
    SimState::new(tree, cfg, seed, false)
}

impl SimState {
    pub fn new(tree: &TreeHandle, cfg: &FrogConfig, seed: u64, record_paths: bool) -> Result<Self> {
        cfg.validate()?;
        let keys = SimKeys::new(seed);
        let lazy = tree.lazy(cfg.vertex_cap);
        let root_key = lazy.node(ROOT).key();
        let mut s = SimState {
            tree: lazy,
            cfg: cfg.clone(),
            keys,
            frogs: Vec::new(),
            visited: vec![true],
            clock: 0,
            root_returns: 0,
            returns_by_time: vec![0],
            activated_per_level: vec![1],
            first_activation: vec![(ROOT, 0)],
            retired_at_cap: 0,
            frogs_activated: 0,
            peak_active: 0,
            escape_branch: None,
            record_paths,
            finished_paths: Vec::new(),
            termination: None,
        };
        s.spawn(ROOT, 0, 0);
        s.frogs[0].probe = cfg.escape_probe_depth.is_some();
        if cfg.sleep_at_root {
            let n = keys.sleeper_count(root_key, cfg.lambda);
            for i in 0..n {
                s.spawn(ROOT, 1 + i, 0);
            }
        }
        s.peak_active = s.frogs.len() as u64;
        Ok(s)
    }

    fn spawn(&mut self, at: NodeId, idx: u32, t: u64) {
        let key = self.tree.node(at).key();
        self.frogs.push(Frog {
            pos: at,
            rng: self.keys.frog_stream(key, idx),
            id: FrogId { origin: at, idx },
            start_time: t,
            path: self.record_paths.then(|| vec![at]),
            probe: false,
        });
        self.frogs_activated += 1;
    }

    pub fn active_count(&self) -> usize {
        self.frogs.len()
    }

    pub fn active(&self) -> Vec<VertexId> {
        self.frogs.iter().map(|f| self.tree.vertex_id(f.pos)).collect()
    }

    pub fn is_visited(&self, v: NodeId) -> bool {
        self.visited.get(v as usize).copied().unwrap_or(false)
    }

    pub fn termination(&self) -> Option<Termination> {
        self.termination
    }

    fn activate(&mut self, w: NodeId, t: u64) {
        let d = self.tree.depth(w) as usize;
        if self.activated_per_level.len() <= d {
            self.activated_per_level.resize(d + 1, 0);
        }
        self.activated_per_level[d] += 1;
        if d as u32 <= self.cfg.record_activation_depth {
            self.first_activation.push((w, t));
        }
        let n = self.keys.sleeper_count(self.tree.node(w).key(), self.cfg.lambda);
        for i in 0..n {
            self.spawn(w, i, t);
        }
    }

    /// One synchronous round. Frogs woken this round start moving next round.
    pub fn step(&mut self) -> Option<Termination> {
        if self.termination.is_some() {
            return self.termination;
        }
        self.clock += 1;
        let t = self.clock;
        let live = self.frogs.len();
        let mut woke: Vec<NodeId> = Vec::new();
        let mut i = 0;
        let mut end = live;
        while i < end {
            let f = &mut self.frogs[i];
            let r = f.rng.random_range(0..self.tree.degree(f.pos));
            let w = match self.tree.neighbor(f.pos, r) {
                Ok(w) => w,
                Err(_) => {
                    self.termination = Some(Termination::VertexCapped);
                    break;
                }
            };
            f.pos = w;
            if let Some(p) = f.path.as_mut() {
                p.push(w);
            }
            if w == ROOT {
                self.root_returns += 1;
            }
            let d = self.tree.depth(w);
            if f.probe && self.escape_branch.is_none() && Some(d) == self.cfg.escape_probe_depth {
                self.escape_branch = self.tree.node(w).branch();
                f.probe = false;
            }
            if d >= self.cfg.depth_cap {
                if w as usize >= self.visited.len() {
                    self.visited.resize(self.tree.len(), false);
                }
                self.visited[w as usize] = true;
                self.retired_at_cap += 1;
                end -= 1;
                self.frogs.swap(i, end);
                let gone = self.frogs.swap_remove(end);
                if let Some(path) = gone.path {
                    self.finished_paths.push(FrogPath { id: gone.id, start_time: gone.start_time, path, retired_at_cap: true });
                }
                continue;
            }
            if w as usize >= self.visited.len() || !self.visited[w as usize] {
                if w as usize >= self.visited.len() {
                    self.visited.resize(self.tree.len(), false);
                }
                self.visited[w as usize] = true;
                woke.push(w);
            }
            i += 1;
        }
        if self.termination.is_some() {
            return self.termination;
        }
        for w in woke {
            self.activate(w, t);
        }
        self.returns_by_time.push(self.root_returns);
        self.peak_active = self.peak_active.max(self.frogs.len() as u64);
        self.termination = if self.cfg.stop_at_returns.is_some_and(|r| self.root_returns >= r) {
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
        self.termination
    }

    pub fn run(&mut self) -> Termination {
        loop {
            if let Some(t) = self.step() {
                return t;
            }
        }
    }

    pub fn stats(&self) -> RunStats {
        let mut returns = self.returns_by_time.clone();
        returns.truncate(self.clock as usize + 1);
        while returns.len() <= self.clock as usize {
            returns.push(self.root_returns);
        }
        RunStats {
            total_root_returns: *returns.last().expect("nonempty"),
            root_returns_by_time: returns,
            activated_per_level: self.activated_per_level.clone(),
            first_activation_time: self
                .first_activation
                .iter()
                .map(|&(v, t)| (self.tree.vertex_id(v), t))
                .collect(),
            termination: self.termination.unwrap_or(Termination::HorizonReached),
            end_time: self.clock.min(self.returns_by_time.len() as u64 - 1),
            retired_at_cap: self.retired_at_cap,
            frogs_activated: self.frogs_activated,
            peak_active: self.peak_active,
            escape_branch: self.escape_branch,
            elimination_deaths: None,
            coupling_audit: None,
        }
    }

    /// Splits a finished run into its arena, visited flags and realized paths.
    pub fn into_parts(mut self) -> (LazyTree, Vec<bool>, Vec<FrogPath>) {
        let paths = self.take_paths();
        (self.tree, self.visited, paths)
    }

    /// Realized paths of every frog, finished or still active.
    pub fn take_paths(&mut self) -> Vec<FrogPath> {
        let mut out = std::mem::take(&mut self.finished_paths);
        for f in &mut self.frogs {
            if let Some(path) = f.path.take() {
                out.push(FrogPath { id: f.id, start_time: f.start_time, path, retired_at_cap: false });
            }
        }
        out
    }
}

pub fn run_fm(tree: &TreeHandle, cfg: &FrogConfig, seed: u64) -> Result<RunStats> {
    let mut s = SimState::new(tree, cfg, seed, false)?;
    s.run();
    Ok(s.stats())
}
