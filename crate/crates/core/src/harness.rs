//! Experiment orchestration: spec files, seeded replicas, persistence,
//! summaries, verification and bisection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::brw::{hat_min_n, make_schedule, run_brw, BirthLaw, BrwCaps, BrwTrajectory, ScheduleVariant};
use crate::error::{Error, Result};
use crate::frog::{run_fm, CouplingAudit, FrogConfig, RunStats, Termination};
use crate::harmonic::{
    audit_lemma_a1, audit_lemma_b1, audit_level_one, lemma_4_4_observable, ratio_from_samples, rn_sample,
    AuditInstance, HarmonicSolver, RnConfig, RnSample, TreeEvent, WeightedValue, B1_CONSTANT, MIN_CAP,
};
use crate::rng::{key_of, stream, TAG_RAY, TAG_REPLICA, TAG_SIM, TAG_TREE};
use crate::stats::{median, wilson, MeanVar, PairedTrend};
use crate::treegen::{make_tree, OffspringDistribution, TreeKind, VertexId, DEFAULT_VERTEX_CAP};
use crate::truncated::{
    activation_replica, coupled_run, run_tfm, run_tfm_p, summarize_activation, CouplingCaps, TruncConfig,
    DEFAULT_P_GRID,
};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "FROGSIM_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    PhaseSweep,
    HorizonScaling,
    CouplingAudit,
    BrwSupermartingale,
    LemmaAudits,
    HatTreeSuite,
    JoinedTreeSuite,
    ActivationMinOverP,
    RnRatio,
    TailObservable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Fm,
    FmPlus,
    Tfm,
    TfmP,
    Brw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    B1,
    A1,
    C1,
    LevelOne,
}

impl AuditKind {
    fn lemma(&self) -> &'static str {
        match self {
            AuditKind::B1 => "B.1",
            AuditKind::A1 => "A.1",
            AuditKind::C1 => "C.1",
            AuditKind::LevelOne => "level-1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Caps {
    pub depth_cap: u32,
    pub max_active: usize,
    pub vertex_cap: usize,
    /// Depth cap for the certified harmonic brackets in audits.
    pub audit_depth_cap: u32,
    /// Largest tolerated share of replicas stopped by a cap or an error.
    pub max_abort_rate: f64,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            depth_cap: 60,
            max_active: 100_000,
            vertex_cap: DEFAULT_VERTEX_CAP,
            audit_depth_cap: 14,
            max_abort_rate: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// `R` in the headline proxy `returns >= R`.
    pub return_threshold: u64,
    /// Ray length for rn_ratio and activation, level for the B.1 audit.
    pub level: u32,
    pub tail_levels: Vec<u32>,
    pub big_n: u32,
    pub tail_threshold: f64,
    pub events: Vec<TreeEvent>,
    pub audits: Vec<AuditKind>,
    pub a1_tree: TreeKind,
    pub rn_replicas: u64,
    pub probe_depth: u32,
    pub z: f64,
    pub record_activation_depth: u32,
    pub schedule: Option<ScheduleVariant>,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            return_threshold: 1,
            level: 3,
            tail_levels: vec![2, 4, 6],
            big_n: 8,
            tail_threshold: 0.25,
            events: vec![TreeEvent::ChildrenEq { k: 2 }, TreeEvent::ChildrenEq { k: 3 }],
            audits: vec![AuditKind::B1, AuditKind::A1, AuditKind::C1, AuditKind::LevelOne],
            a1_tree: TreeKind::gw(OffspringDistribution::constant(3).expect("valid")),
            rn_replicas: 100_000,
            probe_depth: 5,
            z: 3.0,
            record_activation_depth: 1,
            schedule: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub tree: TreeKind,
    pub model: Model,
    pub lambda_grid: Vec<f64>,
    pub p_grid: Vec<f64>,
    pub horizons: Vec<u64>,
    pub replicas: u64,
    pub master_seed: u64,
    pub caps: Caps,
    pub params: Params,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            experiment: Experiment::PhaseSweep,
            tree: TreeKind::Dary { d: 2 },
            model: Model::Fm,
            lambda_grid: vec![0.0],
            p_grid: DEFAULT_P_GRID.to_vec(),
            horizons: vec![1000],
            replicas: 100,
            master_seed: 0,
            caps: Caps::default(),
            params: Params::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: ExperimentSpec = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let s: ExperimentSpec = serde_json::from_str(&text)?;
                s.validate()?;
                Ok(s)
            }
            _ => Self::from_toml(&text),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.tree.validate()?;
        if self.lambda_grid.is_empty() || self.p_grid.is_empty() || self.horizons.is_empty() {
            return bad("lambda_grid, p_grid and horizons must be nonempty".into());
        }
        if self.replicas < 1 {
            return bad("replicas must be at least 1".into());
        }
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambda values must be finite and nonnegative".into());
        }
        if self.p_grid.iter().any(|p| !(0.5..1.0).contains(p)) {
            return bad("p values must lie in [1/2, 1)".into());
        }
        if self.horizons.windows(2).any(|w| w[0] >= w[1]) || self.horizons[0] == 0 {
            return bad("horizons must be positive and strictly increasing".into());
        }
        if !(0.0..=1.0).contains(&self.caps.max_abort_rate) {
            return bad("max_abort_rate must lie in [0, 1]".into());
        }
        match (self.experiment, self.model) {
            (Experiment::PhaseSweep | Experiment::HorizonScaling, Model::Brw) => {
                return bad("use brw_supermartingale for the branching walk".into())
            }
            (Experiment::HatTreeSuite, _) if self.tree != TreeKind::Hat => {
                return bad("hat_tree_suite runs on the hat tree".into())
            }
            (Experiment::JoinedTreeSuite, _) if !matches!(self.tree, TreeKind::Joined { .. }) => {
                return bad("joined_tree_suite runs on a joined tree".into())
            }
            (Experiment::RnRatio, _) if self.offspring().is_none() => {
                return bad("rn_ratio needs a Galton-Watson tree".into())
            }
            _ => {}
        }
        if self.experiment == Experiment::LemmaAudits && self.params.audits.is_empty() {
            return bad("audits must be nonempty".into());
        }
        Ok(())
    }

    fn offspring(&self) -> Option<&OffspringDistribution> {
        match &self.tree {
            TreeKind::Gw { offspring } | TreeKind::Agw { offspring, .. } => Some(offspring),
            _ => None,
        }
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable");
        Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn max_horizon(&self) -> u64 {
        *self.horizons.last().expect("nonempty")
    }

    pub fn grid(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        let mut push = |lambda: f64, p: Option<f64>, label: String, replicas: u64| {
            out.push(GridPoint { index: out.len(), lambda, p, label, replicas });
        };
        match self.experiment {
            Experiment::PhaseSweep | Experiment::HorizonScaling if self.model == Model::TfmP => {
                for &l in &self.lambda_grid {
                    for &p in &self.p_grid {
                        push(l, Some(p), format!("lambda={l} p={p}"), self.replicas);
                    }
                }
            }
            Experiment::LemmaAudits => {
                let mut kinds = self.params.audits.clone();
                kinds.sort();
                kinds.dedup();
                for k in kinds {
                    let n = if k == AuditKind::C1 { self.params.rn_replicas } else { self.replicas };
                    push(0.0, None, k.lemma().to_string(), n);
                }
            }
            Experiment::RnRatio => push(0.0, None, "rn_ratio".into(), self.replicas),
            Experiment::TailObservable => push(0.0, None, "tail".into(), self.replicas),
            _ => {
                for &l in &self.lambda_grid {
                    push(l, None, format!("lambda={l}"), self.replicas);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub lambda: f64,
    pub p: Option<f64>,
    pub label: String,
    pub replicas: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Observation {
    Frog { stats: RunStats },
    Coupled { z1: u64, z2: u64, audit: CouplingAudit },
    Brw { trajectory: BrwTrajectory },
    Audit { instances: Vec<AuditInstance> },
    Rn { sample: RnSample },
    Activation { hits: Vec<bool>, ray_bias: f64 },
    Tail { values: Vec<WeightedValue> },
}

impl Observation {
    fn capped(&self) -> bool {
        let t = match self {
            Observation::Frog { stats } => stats.termination,
            Observation::Coupled { audit, .. } => audit.fm_termination.unwrap_or(Termination::HorizonReached),
            Observation::Brw { trajectory } => trajectory.termination,
            _ => return false,
        };
        matches!(t, Termination::PopulationCapped | Termination::VertexCapped)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec_hash: String,
    pub grid: usize,
    pub replica: u64,
    pub label: String,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    pub derived_seed: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
    pub wall_ms: f64,
    pub engine_version: String,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// Serialized form of everything that must reproduce exactly.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(&(&self.status, &self.observation)).expect("serializable")
    }
}

pub fn spec_seed(spec_hash: &str) -> u64 {
    u64::from_str_radix(&spec_hash[..16], 16).expect("hex digest")
}

/// Seed of replica `r`, shared by every grid point of one spec.
pub fn replica_seed(spec_hash: &str, r: u64) -> u64 {
    key_of(&[spec_seed(spec_hash), TAG_REPLICA, r])
}

fn frog_observation(spec: &ExperimentSpec, gp: &GridPoint, seed: u64) -> Result<Observation> {
    let tree = make_tree(spec.tree.clone(), key_of(&[seed, TAG_TREE]))?;
    let sim = key_of(&[seed, TAG_SIM]);
    let c = &spec.caps;
    let stats = match spec.model {
        Model::Fm | Model::FmPlus => {
            let cfg = FrogConfig {
                lambda: gp.lambda,
                horizon: spec.max_horizon(),
                depth_cap: c.depth_cap,
                max_active: c.max_active,
                sleep_at_root: spec.model == Model::FmPlus,
                vertex_cap: c.vertex_cap,
                record_activation_depth: spec.params.record_activation_depth,
                escape_probe_depth: (spec.experiment == Experiment::JoinedTreeSuite).then_some(spec.params.probe_depth),
                stop_at_returns: None,
            };
            run_fm(&tree, &cfg, sim)?
        }
        Model::Tfm | Model::TfmP => {
            let cfg = TruncConfig {
                lambda: gp.lambda,
                p: gp.p,
                depth_cap: c.depth_cap,
                max_active: c.max_active,
                horizon: spec.max_horizon(),
                vertex_cap: c.vertex_cap,
                record_activation_depth: spec.params.record_activation_depth,
                ..TruncConfig::default()
            };
            if gp.p.is_some() {
                run_tfm_p(&tree, &cfg, sim)?
            } else {
                run_tfm(&tree, &cfg, sim)?
            }
        }
        Model::Brw => return Err(Error::InvalidConfig("frog experiments do not run the branching walk".into())),
    };
    Ok(Observation::Frog { stats })
}

fn brw_schedule(spec: &ExperimentSpec, lambda: f64) -> ScheduleVariant {
    spec.params.schedule.unwrap_or(match &spec.tree {
        TreeKind::Hat => ScheduleVariant::Hat { lambda, n: hat_min_n(lambda) },
        kind => ScheduleVariant::Regular { k: kind.min_children_from(0).unwrap_or(2).max(2), eta_mean: lambda },
    })
}

fn audit_observation(spec: &ExperimentSpec, kind: AuditKind, seed: u64) -> Result<Observation> {
    let cap = spec.caps.audit_depth_cap;
    let tree_seed = key_of(&[seed, TAG_TREE]);
    let instances = match kind {
        AuditKind::B1 => {
            let tree = make_tree(spec.tree.clone(), tree_seed)?;
            vec![audit_lemma_b1(&tree, spec.params.level.max(1), cap, spec.caps.vertex_cap)?]
        }
        AuditKind::LevelOne => {
            let tree = make_tree(spec.tree.clone(), tree_seed)?;
            let solver = HarmonicSolver::tabulated(&tree, cap, spec.caps.vertex_cap)?;
            vec![audit_level_one(&solver)?]
        }
        AuditKind::A1 => {
            let tree = make_tree(spec.params.a1_tree.clone(), tree_seed)?;
            let solver = HarmonicSolver::new(&tree, cap)?;
            let mut rng = stream(key_of(&[seed, TAG_RAY]));
            let mut v = VertexId::root();
            for _ in 0..2 {
                let c = tree.children(&v)?;
                v = v.child(rng.random_range(0..c));
            }
            (0..tree.children(&v)?).map(|i| audit_lemma_a1(&solver, &v.child(i))).collect::<Result<_>>()?
        }
        AuditKind::C1 => return rn_observation(spec, seed),
    };
    Ok(Observation::Audit { instances })
}

fn rn_observation(spec: &ExperimentSpec, seed: u64) -> Result<Observation> {
    let dist = spec.offspring().ok_or_else(|| Error::InvalidConfig("ratio estimate needs a Galton-Watson law".into()))?;
    let cfg = RnConfig { z: spec.params.z, ..RnConfig::default() };
    Ok(Observation::Rn { sample: rn_sample(dist, spec.params.level, &spec.params.events, seed, 0, &cfg)? })
}

/// Runs replica `r` of grid point `gp`.
pub fn run_replica(spec: &ExperimentSpec, gp: &GridPoint, seed: u64) -> Result<Observation> {
    let c = &spec.caps;
    match spec.experiment {
        Experiment::PhaseSweep | Experiment::HorizonScaling | Experiment::HatTreeSuite | Experiment::JoinedTreeSuite => {
            frog_observation(spec, gp, seed)
        }
        Experiment::CouplingAudit => {
            let tree = make_tree(spec.tree.clone(), key_of(&[seed, TAG_TREE]))?;
            let caps = CouplingCaps {
                horizon: spec.max_horizon(),
                depth_cap: c.depth_cap,
                max_active: c.max_active,
                vertex_cap: c.vertex_cap,
            };
            let o = coupled_run(&tree, gp.lambda, key_of(&[seed, TAG_SIM]), &caps)?;
            Ok(Observation::Coupled { z1: o.z1, z2: o.z2, audit: o.audit })
        }
        Experiment::BrwSupermartingale => {
            let tree = make_tree(spec.tree.clone(), key_of(&[seed, TAG_TREE]))?;
            let variant = brw_schedule(spec, gp.lambda);
            let schedule = make_schedule(variant)?;
            let mean = match variant {
                ScheduleVariant::Regular { eta_mean, .. } => eta_mean,
                ScheduleVariant::Hat { lambda, .. } => lambda,
            };
            let caps = BrwCaps {
                horizon: spec.max_horizon(),
                depth_cap: c.depth_cap,
                max_particles: c.max_active as u64,
                vertex_cap: c.vertex_cap,
            };
            let trajectory = run_brw(&tree, &schedule, &BirthLaw::Poisson { mean }, &caps, key_of(&[seed, TAG_SIM]))?;
            Ok(Observation::Brw { trajectory })
        }
        Experiment::LemmaAudits => {
            let kind = spec
                .params
                .audits
                .iter()
                .find(|k| k.lemma() == gp.label)
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("unknown audit {}", gp.label)))?;
            audit_observation(spec, kind, seed)
        }
        Experiment::RnRatio => rn_observation(spec, seed),
        Experiment::ActivationMinOverP => {
            let caps = TruncConfig {
                depth_cap: c.depth_cap,
                max_active: c.max_active,
                horizon: spec.max_horizon(),
                vertex_cap: c.vertex_cap,
                ..TruncConfig::default()
            };
            let (hits, ray_bias) =
                activation_replica(&spec.tree, gp.lambda, &spec.p_grid, spec.params.level, seed, 0, &caps)?;
            Ok(Observation::Activation { hits, ray_bias })
        }
        Experiment::TailObservable => {
            let tree = make_tree(spec.tree.clone(), key_of(&[seed, TAG_TREE]))?;
            let top = spec.params.tail_levels.iter().copied().max().unwrap_or(0);
            let solver = HarmonicSolver::tabulated(&tree, (top + 4).max(MIN_CAP), c.vertex_cap)?;
            let values = spec
                .params
                .tail_levels
                .iter()
                .map(|&n| lemma_4_4_observable(&solver, n, spec.params.big_n))
                .collect::<Result<_>>()?;
            Ok(Observation::Tail { values })
        }
    }
}

fn make_record(spec: &ExperimentSpec, hash: &str, gp: &GridPoint, r: u64) -> RunRecord {
    let seed = replica_seed(hash, r);
    let start = Instant::now();
    let (status, observation) = match run_replica(spec, gp, seed) {
        Ok(o) if o.capped() => ("capped".to_string(), Some(o)),
        Ok(o) => ("ok".to_string(), Some(o)),
        Err(e) => (format!("error: {e}"), None),
    };
    RunRecord {
        spec_hash: hash.to_string(),
        grid: gp.index,
        replica: r,
        label: gp.label.clone(),
        lambda: gp.lambda,
        p: gp.p,
        derived_seed: seed,
        status,
        observation,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        engine_version: ENGINE_VERSION.to_string(),
    }
}

/// Runs `f` on a pool sized by `FROGSIM_THREADS` when it is set.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok());
    match threads.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub grid: usize,
    pub label: String,
    pub observable: String,
    pub n: u64,
    pub mean: f64,
    pub variance: f64,
    pub std_err: f64,
    pub successes: u64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub censored: u64,
    pub note: String,
}

impl SummaryRow {
    fn new(gp: &GridPoint, observable: impl Into<String>) -> Self {
        SummaryRow {
            grid: gp.index,
            label: gp.label.clone(),
            observable: observable.into(),
            n: 0,
            mean: f64::NAN,
            variance: f64::NAN,
            std_err: f64::NAN,
            successes: 0,
            ci_lo: f64::NAN,
            ci_hi: f64::NAN,
            censored: 0,
            note: String::new(),
        }
    }

    fn with_values(mut self, mv: &MeanVar) -> Self {
        self.n = mv.n;
        self.mean = mv.mean;
        self.variance = mv.variance();
        self.std_err = mv.std_err();
        self
    }

    fn with_successes(mut self, k: u64, z: f64) -> Self {
        self.successes = k;
        (self.ci_lo, self.ci_hi) = wilson(k, self.n, z);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub lemma: String,
    pub instances: u64,
    pub worst_slack: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub audits: Vec<AuditReport>,
    pub trajectory: Option<String>,
}

/// Window bounds `0 = b_0 < b_1 < ...` built from the horizons.
pub fn window_bounds(horizons: &[u64]) -> Vec<u64> {
    std::iter::once(0).chain(horizons.iter().copied()).collect()
}

/// Paired trends between consecutive windows of the given frog runs, and
/// whether any run was stopped by a cap before the last bound.
pub fn window_trends(stats: &[&RunStats], horizons: &[u64]) -> (Vec<PairedTrend>, bool) {
    let b = window_bounds(horizons);
    let windows: Vec<Vec<f64>> =
        b.windows(2).map(|w| stats.iter().map(|s| s.returns_between(w[0], w[1]) as f64).collect()).collect();
    let trends = windows.windows(2).map(|w| PairedTrend::new(&w[0], &w[1])).collect();
    let censored = stats.iter().any(|s| s.censored_before(*b.last().expect("nonempty")));
    (trends, censored)
}

fn frog_rows(spec: &ExperimentSpec, gp: &GridPoint, recs: &[&RunRecord], rows: &mut Vec<SummaryRow>) {
    let stats: Vec<&RunStats> = recs
        .iter()
        .filter_map(|r| match &r.observation {
            Some(Observation::Frog { stats }) => Some(stats),
            _ => None,
        })
        .collect();
    let z = spec.params.z;
    let big_r = spec.params.return_threshold;
    for &h in &spec.horizons {
        let mv: MeanVar = stats.iter().map(|s| s.returns_by(h) as f64).collect();
        let k = stats.iter().filter(|s| s.returns_by(h) >= big_r).count() as u64;
        let mut row = SummaryRow::new(gp, format!("returns_by_{h}")).with_values(&mv).with_successes(k, z);
        row.censored = stats.iter().filter(|s| s.censored_before(h)).count() as u64;
        row.note = format!("successes count returns >= {big_r}");
        rows.push(row);
    }
    let b = window_bounds(&spec.horizons);
    for w in b.windows(2) {
        let mv: MeanVar = stats.iter().map(|s| s.returns_between(w[0], w[1]) as f64).collect();
        let mut row = SummaryRow::new(gp, format!("window_{}_{}", w[0], w[1])).with_values(&mv);
        row.censored = stats.iter().filter(|s| s.censored_before(w[1])).count() as u64;
        rows.push(row);
    }
    let (trends, censored) = window_trends(&stats, &spec.horizons);
    for (k, t) in trends.iter().enumerate() {
        let mut row = SummaryRow::new(gp, format!("trend_{k}"));
        row.n = stats.len() as u64;
        row.mean = t.diff;
        row.std_err = t.std_err;
        row.censored = u64::from(censored);
        row.note = if censored {
            "censored"
        } else if t.increasing(z) {
            "increasing"
        } else {
            "nonincreasing"
        }
        .to_string();
        rows.push(row);
    }
    if spec.experiment == Experiment::JoinedTreeSuite {
        let h = spec.max_horizon();
        let side = |b: u32| -> MeanVar {
            stats.iter().filter(|s| s.escape_branch == Some(b)).map(|s| s.returns_by(h) as f64).collect()
        };
        let (two, wide) = (side(0), side(1));
        rows.push(SummaryRow::new(gp, "returns_two_ary_side").with_values(&two));
        rows.push(SummaryRow::new(gp, "returns_d_ary_side").with_values(&wide));
        let mut row = SummaryRow::new(gp, "side_ratio");
        row.n = two.n + wide.n;
        row.mean = two.mean / wide.mean;
        row.note = format!("no escape in {}", stats.len() as u64 - two.n - wide.n);
        rows.push(row);
    }
}

fn brw_rows(spec: &ExperimentSpec, gp: &GridPoint, recs: &[&RunRecord], rows: &mut Vec<SummaryRow>) -> Option<String> {
    let trajs: Vec<&BrwTrajectory> = recs
        .iter()
        .filter_map(|r| match &r.observation {
            Some(Observation::Brw { trajectory }) => Some(trajectory),
            _ => None,
        })
        .collect();
    let schedule = make_schedule(brw_schedule(spec, gp.lambda)).ok()?;
    let h = spec.max_horizon() as usize;
    let z = spec.params.z;
    let mut tsv = String::new();
    let (mut tested, mut held, mut worst) = (0u64, 0u64, f64::NEG_INFINITY);
    for n in 0..=h {
        let at = |t: &BrwTrajectory, n: usize| t.rows.get(n).copied();
        let w: MeanVar = trajs.iter().map(|t| at(t, n).map_or(0.0, |r| r.w)).collect();
        let parts: MeanVar = trajs.iter().map(|t| at(t, n).map_or(0.0, |r| r.particles as f64)).collect();
        let rets: MeanVar =
            trajs.iter().map(|t| at(t, n).or(t.rows.last().copied()).map_or(0.0, |r| r.returns as f64)).collect();
        let live = trajs.iter().filter(|t| at(t, n).is_some_and(|r| r.particles > 0)).count();
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            gp.index,
            n,
            w.mean,
            w.mean / schedule.m.powi(n as i32),
            parts.mean,
            rets.mean,
            live
        );
        if n < h {
            let d: MeanVar = trajs
                .iter()
                .filter(|t| t.rows.len() > n + 1)
                .map(|t| t.rows[n + 1].w - schedule.m * t.rows[n].w)
                .collect();
            if d.n >= 30 {
                tested += 1;
                held += u64::from(d.mean <= z * d.std_err());
                if d.std_err() > 0.0 {
                    worst = worst.max(d.mean / d.std_err());
                }
            }
        }
    }
    let mut row = SummaryRow::new(gp, "supermartingale_steps");
    row.n = tested;
    row.successes = held;
    row.mean = worst;
    row.note = format!("mean(W[n+1] - m W[n]) <= {z} se; mean is the largest standardized excess");
    rows.push(row);
    let w0: Vec<f64> = trajs.iter().map(|t| t.rows[0].w).collect();
    let wh: Vec<f64> = trajs.iter().map(|t| t.rows.get(h).map_or(0.0, |r| r.w)).collect();
    let mut row = SummaryRow::new(gp, format!("w_{h}_over_w_0"));
    row.n = trajs.len() as u64;
    row.mean = median(&wh) / median(&w0);
    row.note = "median ratio".into();
    rows.push(row);
    let extinct = trajs.iter().filter(|t| t.termination == Termination::Extinct).count() as u64;
    let mut row = SummaryRow::new(gp, "extinct");
    row.n = trajs.len() as u64;
    row = row.with_successes(extinct, z);
    row.censored = trajs.iter().filter(|t| t.termination == Termination::PopulationCapped).count() as u64;
    rows.push(row);
    Some(tsv)
}

fn c1_report(spec: &ExperimentSpec, gp: &GridPoint, recs: &[&RunRecord], rows: &mut Vec<SummaryRow>) -> AuditReport {
    let samples: Vec<RnSample> = recs
        .iter()
        .filter_map(|r| match &r.observation {
            Some(Observation::Rn { sample }) => Some(sample.clone()),
            _ => None,
        })
        .collect();
    let errors = recs.len() - samples.len();
    let mut worst = f64::INFINITY;
    let mut pass = errors == 0 && !samples.is_empty();
    for (e, est) in spec.params.events.iter().zip(ratio_from_samples(&samples, &spec.params.events, spec.params.z)) {
        let mut row = SummaryRow::new(gp, format!("ratio_{}", serde_json::to_string(e).expect("ser").replace(',', ";")));
        match est {
            Ok(est) => {
                row.n = est.replicas;
                row.mean = est.ratio;
                row.ci_lo = est.ci_lo;
                row.ci_hi = est.ci_hi;
                row.note = format!("max ray bias {:.3e}", est.max_bias_bound);
                let slack = (est.ci_hi * B1_CONSTANT).min(B1_CONSTANT / est.ci_lo);
                worst = worst.min(slack);
                pass &= slack >= 1.0;
            }
            Err(err) => {
                row.note = err.to_string();
                pass = false;
            }
        }
        rows.push(row);
    }
    AuditReport { lemma: "C.1".into(), instances: spec.params.events.len() as u64, worst_slack: worst, pass }
}

/// Summary of a record set; a pure function of the experiment spec and the records.
pub fn summarize(spec: &ExperimentSpec, records: &[RunRecord]) -> Summary {
    let mut by_grid: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_grid.entry(r.grid).or_default().push(r);
    }
    let mut out = Summary::default();
    let mut tsv = String::new();
    let z = spec.params.z;
    for gp in spec.grid() {
        let mut recs = by_grid.remove(&gp.index).unwrap_or_default();
        recs.sort_by_key(|r| r.replica);
        let mut status = SummaryRow::new(&gp, "records");
        status.n = recs.len() as u64;
        status.successes = recs.iter().filter(|r| r.is_ok()).count() as u64;
        status.censored = recs.iter().filter(|r| r.status == "capped").count() as u64;
        status.note = format!("{} errors", recs.iter().filter(|r| r.status.starts_with("error")).count());
        out.rows.push(status);
        match spec.experiment {
            Experiment::PhaseSweep | Experiment::HorizonScaling | Experiment::HatTreeSuite | Experiment::JoinedTreeSuite => {
                frog_rows(spec, &gp, &recs, &mut out.rows)
            }
            Experiment::CouplingAudit => {
                let obs: Vec<(u64, u64, &CouplingAudit)> = recs
                    .iter()
                    .filter_map(|r| match &r.observation {
                        Some(Observation::Coupled { z1, z2, audit }) => Some((*z1, *z2, audit)),
                        _ => None,
                    })
                    .collect();
                let z1: MeanVar = obs.iter().map(|o| o.0 as f64).collect();
                let z2: MeanVar = obs.iter().map(|o| o.1 as f64).collect();
                out.rows.push(SummaryRow::new(&gp, "z1").with_values(&z1));
                out.rows.push(SummaryRow::new(&gp, "z2").with_values(&z2));
                let ok = obs.iter().filter(|o| o.0 >= o.1 && o.2.passed()).count() as u64;
                let mut row = SummaryRow::new(&gp, "dominance");
                row.n = recs.len() as u64;
                row = row.with_successes(ok, z);
                row.censored = obs.iter().filter(|o| o.2.censored_partner_paths > 0).count() as u64;
                row.note = "z1 >= z2 with a clean coupling audit".into();
                out.rows.push(row);
            }
            Experiment::BrwSupermartingale => {
                if let Some(t) = brw_rows(spec, &gp, &recs, &mut out.rows) {
                    tsv.push_str(&t);
                }
            }
            Experiment::LemmaAudits if gp.label == "C.1" => {
                let rep = c1_report(spec, &gp, &recs, &mut out.rows);
                out.audits.push(rep);
            }
            Experiment::LemmaAudits => {
                let mut worst = f64::INFINITY;
                let mut count = 0u64;
                let mut pass = !recs.is_empty();
                let mut slack = MeanVar::default();
                for r in &recs {
                    match &r.observation {
                        Some(Observation::Audit { instances }) => {
                            for i in instances {
                                count += 1;
                                worst = worst.min(i.slack);
                                pass &= i.pass;
                                slack.push(i.slack);
                            }
                        }
                        _ => pass = false,
                    }
                }
                let mut row = SummaryRow::new(&gp, "slack").with_values(&slack);
                row.successes = if pass { count } else { 0 };
                row.note = format!("worst slack {worst}");
                out.rows.push(row);
                out.audits.push(AuditReport { lemma: gp.label.clone(), instances: count, worst_slack: worst, pass });
            }
            Experiment::RnRatio => {
                let rep = c1_report(spec, &gp, &recs, &mut out.rows);
                let mut row = SummaryRow::new(&gp, "within_c1_bounds");
                row.n = rep.instances;
                row.mean = rep.worst_slack;
                row.note = if rep.pass { "pass" } else { "fail" }.into();
                out.rows.push(row);
            }
            Experiment::ActivationMinOverP => {
                let per: Vec<(Vec<bool>, f64)> = recs
                    .iter()
                    .filter_map(|r| match &r.observation {
                        Some(Observation::Activation { hits, ray_bias }) => Some((hits.clone(), *ray_bias)),
                        _ => None,
                    })
                    .collect();
                if per.is_empty() {
                    continue;
                }
                let prof = summarize_activation(gp.lambda, spec.params.level, &spec.p_grid, &per);
                for e in prof.per_p.iter().chain(std::iter::once(&prof.min)) {
                    let name = if std::ptr::eq(e, &prof.min) { "min_over_p".to_string() } else { format!("p={}", e.p) };
                    let mut row = SummaryRow::new(&gp, name);
                    row.n = e.replicas;
                    row.mean = e.estimate;
                    row.successes = e.hits;
                    row.ci_lo = e.ci_lo;
                    row.ci_hi = e.ci_hi;
                    row.note = if e.wide { "wide interval".into() } else { String::new() };
                    out.rows.push(row);
                }
            }
            Experiment::TailObservable => {
                let values: Vec<&Vec<WeightedValue>> = recs
                    .iter()
                    .filter_map(|r| match &r.observation {
                        Some(Observation::Tail { values }) => Some(values),
                        _ => None,
                    })
                    .collect();
                let thr = spec.params.tail_threshold;
                let ind = |k: usize| -> Vec<f64> { values.iter().map(|v| f64::from(u8::from(v[k].value >= thr))).collect() };
                for (k, n) in spec.params.tail_levels.iter().enumerate() {
                    let mv: MeanVar = values.iter().map(|v| v[k].value).collect();
                    let hits = ind(k).iter().sum::<f64>() as u64;
                    let mut row = SummaryRow::new(&gp, format!("tail_n={n}")).with_values(&mv).with_successes(hits, z);
                    row.censored = values.iter().filter(|v| v[k].low_precision).count() as u64;
                    row.note = format!("successes count observable >= {thr}");
                    out.rows.push(row);
                }
                for k in 1..spec.params.tail_levels.len() {
                    let t = PairedTrend::new(&ind(k - 1), &ind(k));
                    let mut row = SummaryRow::new(&gp, format!("tail_trend_{k}"));
                    row.n = values.len() as u64;
                    row.mean = t.diff;
                    row.std_err = t.std_err;
                    row.note = if t.nonincreasing(z) { "nonincreasing" } else { "increasing" }.into();
                    out.rows.push(row);
                }
            }
        }
    }
    if !tsv.is_empty() {
        out.trajectory = Some(format!("grid\tn\tW_n\tW_n_over_m_n\tparticles\treturns\tlive\n{tsv}"));
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("grid,label,observable,n,mean,variance,std_err,successes,ci_lo,ci_hi,censored,note\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.grid,
            r.label,
            r.observable,
            r.n,
            r.mean,
            r.variance,
            r.std_err,
            r.successes,
            r.ci_lo,
            r.ci_hi,
            r.censored,
            r.note.replace(',', ";")
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub spec: ExperimentSpec,
    pub spec_hash: String,
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

impl ExperimentOutput {
    /// Share of records stopped by a cap or an error.
    pub fn abort_rate(&self) -> f64 {
        let bad = self.records.iter().filter(|r| !r.is_ok()).count();
        bad as f64 / self.records.len().max(1) as f64
    }

    pub fn audits_pass(&self) -> bool {
        self.summary.audits.iter().all(|a| a.pass)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join("records.jsonl"))?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        fs::write(dir.join("summary.csv"), summary_csv(&self.summary.rows))?;
        if !self.summary.audits.is_empty() {
            fs::write(dir.join("audit.json"), serde_json::to_string_pretty(&self.summary.audits)?)?;
        }
        if let Some(t) = &self.summary.trajectory {
            fs::write(dir.join("trajectory.tsv"), t)?;
        }
        Ok(())
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let hash = spec.hash();
    let jobs: Vec<(GridPoint, u64)> =
        spec.grid().into_iter().flat_map(|gp| (0..gp.replicas).map(move |r| (gp.clone(), r))).collect();
    let records: Vec<RunRecord> =
        with_pool(|| jobs.par_iter().map(|(gp, r)| make_record(spec, &hash, gp, *r)).collect());
    let summary = summarize(spec, &records);
    Ok(ExperimentOutput { spec: spec.clone(), spec_hash: hash, records, summary })
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub records: u64,
    pub checked: u64,
    pub mismatches: Vec<(usize, u64)>,
}

impl VerifyReport {
    pub fn pass(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

/// Deterministic sample of about `fraction` of the records, at least one.
pub fn verify_sample(records: &[RunRecord], fraction: f64) -> Vec<&RunRecord> {
    let per_million = (fraction.clamp(0.0, 1.0) * 1e6) as u64;
    let mut picked: Vec<&RunRecord> = records
        .iter()
        .filter(|r| key_of(&[spec_seed(&r.spec_hash), r.grid as u64, r.replica]) % 1_000_000 < per_million)
        .collect();
    if picked.is_empty() {
        picked.extend(records.first());
    }
    picked
}

/// Re-runs a sample of records against their spec and compares the
/// serialized outcomes byte for byte.
pub fn verify_records(spec: &ExperimentSpec, records: &[RunRecord], fraction: f64) -> Result<VerifyReport> {
    let hash = spec.hash();
    let grid = spec.grid();
    let picked = verify_sample(records, fraction);
    for r in &picked {
        if r.spec_hash != hash {
            return Err(Error::InvalidConfig(format!("record hash {} does not match the experiment spec {hash}", r.spec_hash)));
        }
    }
    let mismatches: Vec<(usize, u64)> = with_pool(|| {
        picked
            .par_iter()
            .filter_map(|r| {
                let gp = grid.get(r.grid)?;
                let again = make_record(spec, &hash, gp, r.replica);
                (again.fingerprint() != r.fingerprint()).then_some((r.grid, r.replica))
            })
            .collect()
    });
    Ok(VerifyReport { records: records.len() as u64, checked: picked.len() as u64, mismatches })
}

/// Verifies a `records.jsonl` against the `spec.json` stored beside it.
pub fn verify_path(records: &Path, fraction: f64) -> Result<VerifyReport> {
    let dir: PathBuf = records.parent().map(Path::to_path_buf).unwrap_or_default();
    let spec = ExperimentSpec::load(&dir.join("spec.json"))?;
    verify_records(&spec, &read_records(records)?, fraction)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BisectSpec {
    pub tree: TreeKind,
    pub return_threshold: u64,
    pub horizon: u64,
    pub theta: f64,
    pub lo: f64,
    pub hi: f64,
    pub tolerance: f64,
    pub replicas: u64,
    pub seed: u64,
    pub depth_cap: u32,
    pub max_active: usize,
}

impl Default for BisectSpec {
    fn default() -> Self {
        BisectSpec {
            tree: TreeKind::Dary { d: 2 },
            return_threshold: 5,
            horizon: 1000,
            theta: 0.5,
            lo: 0.05,
            hi: 5.0,
            tolerance: 0.5,
            replicas: 200,
            seed: 0,
            depth_cap: 60,
            max_active: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyPoint {
    pub lambda: f64,
    pub successes: u64,
    pub decided: u64,
    pub proxy: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BisectResult {
    pub lo: f64,
    pub hi: f64,
    pub estimate: f64,
    pub evaluations: Vec<ProxyPoint>,
}

/// Returns curve, end time and termination of one bisection replica.
type ProxyRun = (Vec<u64>, u64, Termination);

/// Returns curve and end time of each replica at one λ. Runs stop as soon
/// as `R` returns have occurred.
fn proxy_runs(b: &BisectSpec, lambda: f64) -> Result<Vec<ProxyRun>> {
    let cfg = FrogConfig {
        lambda,
        horizon: b.horizon,
        depth_cap: b.depth_cap,
        max_active: b.max_active,
        record_activation_depth: 0,
        stop_at_returns: Some(b.return_threshold),
        ..FrogConfig::default()
    };
    with_pool(|| {
        (0..b.replicas)
            .into_par_iter()
            .map(|r| {
                let seed = key_of(&[b.seed, TAG_REPLICA, r]);
                let tree = make_tree(b.tree.clone(), key_of(&[seed, TAG_TREE]))?;
                let s = run_fm(&tree, &cfg, key_of(&[seed, TAG_SIM]))?;
                Ok((s.root_returns_by_time, s.end_time, s.termination))
            })
            .collect()
    })
}

fn proxy_point(b: &BisectSpec, lambda: f64, runs: &[ProxyRun]) -> ProxyPoint {
    let hit = |r: &ProxyRun| r.0[r.1 as usize] >= b.return_threshold;
    let capped = |r: &ProxyRun| {
        matches!(r.2, Termination::PopulationCapped | Termination::VertexCapped)
    };
    let successes = runs.iter().filter(|r| hit(r)).count() as u64;
    // a run stopped by a cap before reaching R is undecided and left out
    let decided = runs.iter().filter(|r| hit(r) || !capped(r)).count() as u64;
    let (ci_lo, ci_hi) = wilson(successes, decided, 3.0);
    ProxyPoint { lambda, successes, decided, proxy: successes as f64 / decided.max(1) as f64, ci_lo, ci_hi }
}

/// Shared-seed runs must have nondecreasing return counts in λ on every
/// replica, compared through the last tick both runs reached.
fn check_monotone(
    lower: (f64, &[ProxyRun]),
    upper: (f64, &[ProxyRun]),
) -> Result<()> {
    for (r, (a, b)) in lower.1.iter().zip(upper.1).enumerate() {
        let t = a.1.min(b.1) as usize;
        if a.0[t] > b.0[t] {
            return Err(Error::NonMonotone(format!(
                "replica {r}: {} returns by tick {t} at lambda {} but {} at lambda {}",
                a.0[t], lower.0, b.0[t], upper.0
            )));
        }
    }
    Ok(())
}

/// Bisection for the smallest λ with `P(returns >= R by H) >= θ`.
pub fn bisect_lambda_star(b: &BisectSpec) -> Result<BisectResult> {
    if !(b.lo <= b.hi && b.lo >= 0.0 && b.tolerance > 0.0 && (0.0..=1.0).contains(&b.theta)) {
        return Err(Error::InvalidConfig("need 0 <= lo <= hi, tolerance > 0 and theta in [0, 1]".into()));
    }
    if b.lo == b.hi {
        return Ok(BisectResult { lo: b.lo, hi: b.hi, estimate: b.lo, evaluations: Vec::new() });
    }
    let mut evals: Vec<(f64, Vec<ProxyRun>)> = Vec::new();
    let eval = |lambda: f64, evals: &mut Vec<(f64, Vec<ProxyRun>)>| -> Result<ProxyPoint> {
        let runs = proxy_runs(b, lambda)?;
        let pos = evals.partition_point(|e| e.0 < lambda);
        if pos > 0 {
            check_monotone((evals[pos - 1].0, &evals[pos - 1].1), (lambda, &runs))?;
        }
        if pos < evals.len() {
            check_monotone((lambda, &runs), (evals[pos].0, &evals[pos].1))?;
        }
        let p = proxy_point(b, lambda, &runs);
        evals.insert(pos, (lambda, runs));
        Ok(p)
    };
    let mut points = vec![eval(b.lo, &mut evals)?, eval(b.hi, &mut evals)?];
    if points[0].proxy >= b.theta || points[1].proxy < b.theta {
        return Err(Error::InvalidConfig(format!(
            "bounds do not bracket theta: proxy {} at {} and {} at {}",
            points[0].proxy, b.lo, points[1].proxy, b.hi
        )));
    }
    let (mut lo, mut hi) = (b.lo, b.hi);
    while hi - lo > b.tolerance {
        let mid = 0.5 * (lo + hi);
        let p = eval(mid, &mut evals)?;
        if p.proxy >= b.theta {
            hi = mid;
        } else {
            lo = mid;
        }
        points.push(p);
    }
    points.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    for w in points.windows(2) {
        if w[1].ci_hi < w[0].ci_lo {
            return Err(Error::NonMonotone(format!(
                "proxy drops from {} at {} to {} at {}",
                w[0].proxy, w[0].lambda, w[1].proxy, w[1].lambda
            )));
        }
    }
    Ok(BisectResult { lo, hi, estimate: 0.5 * (lo + hi), evaluations: points })
}
