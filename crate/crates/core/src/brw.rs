//! Branching random walks that dominate the frog model, with the weight
//! functions whose expectation contracts by a factor `m < 1` each tick.

use std::collections::HashMap;

use rand::{Rng, RngExt};
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frog::{FrogConfig, SimKeys, SimState, Termination};
use crate::rng::{key_of, stream, StreamRng, TAG_BIRTH, TAG_BIRTH_FROG, TAG_SIM};
use crate::treegen::{LazyTree, NodeId, TreeHandle, TreeKind, DEFAULT_VERTEX_CAP, ROOT};
use crate::walks::DEFAULT_DEPTH_CAP;

pub const MAX_HAT_N: u32 = 12;
const RECOMPUTE_EVERY: u64 = 32;
const DRIFT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case")]
pub enum ScheduleVariant {
    Regular { k: u32, eta_mean: f64 },
    Hat { lambda: f64, n: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub variant: ScheduleVariant,
    pub alpha: f64,
    pub m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Largest `Eη` for which the regular schedule contracts.
pub fn regular_threshold(k: u32) -> f64 {
    let k = k as f64;
    (k - 1.0) * (k - 1.0) / (4.0 * k)
}

pub fn hat_admissible(lambda: f64, n: u32) -> bool {
    let n = n as f64;
    n * n / (4.0 * (n + 1.0)) > lambda
}

/// Smallest `N` with `N² / (4(N+1)) > λ`.
pub fn hat_min_n(lambda: f64) -> u32 {
    (1..).find(|&n| hat_admissible(lambda, n)).expect("finite for finite lambda")
}

pub fn make_schedule(variant: ScheduleVariant) -> Result<WeightSchedule> {
    match variant {
        ScheduleVariant::Regular { k, eta_mean } => {
            if k < 2 {
                return Err(Error::Schedule(format!("k = {k} must be at least 2")));
            }
            if !(eta_mean.is_finite() && eta_mean >= 0.0) {
                return Err(Error::Schedule("eta_mean must be finite and nonnegative".into()));
            }
            let alpha = ((eta_mean + 1.0) * k as f64).powf(-0.5);
            let m = 2.0 / (alpha * (k as f64 + 1.0));
            let thr = regular_threshold(k);
            let warning = (eta_mean >= thr)
                .then(|| format!("eta_mean {eta_mean} is not below (k-1)^2/(4k) = {thr}; m = {m} does not contract"));
            debug_assert!(warning.is_some() || m < 1.0);
            Ok(WeightSchedule { variant, alpha, m, warning })
        }
        ScheduleVariant::Hat { lambda, n } => {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(Error::Schedule("lambda must be finite and nonnegative".into()));
            }
            if n < 1 || !hat_admissible(lambda, n) {
                return Err(Error::Schedule(format!(
                    "N = {n} violates N^2/(4(N+1)) > lambda = {lambda}; smallest valid N is {}",
                    hat_min_n(lambda)
                )));
            }
            let alpha = ((lambda + 1.0) * (n as f64 + 1.0)).powf(-0.5);
            let m = (2.0 / 5f64.sqrt()).max(2.0 / (alpha * (n as f64 + 2.0)));
            debug_assert!(m < 1.0);
            Ok(WeightSchedule { variant, alpha, m, warning: None })
        }
    }
}

impl WeightSchedule {
    pub fn log_w(&self, j: u32) -> f64 {
        match self.variant {
            ScheduleVariant::Regular { .. } => j as f64 * self.alpha.ln(),
            ScheduleVariant::Hat { n, .. } => {
                let top = j.min(n - 1);
                let lf: f64 = (3..=top + 2).map(|i| (i as f64).ln()).sum();
                -0.5 * lf + j.saturating_sub(n - 1) as f64 * self.alpha.ln()
            }
        }
    }

    pub fn w(&self, j: u32) -> f64 {
        self.log_w(j).exp()
    }

    /// `ln(w(j+1) / w(j))`.
    fn log_up(&self, j: u32) -> f64 {
        match self.variant {
            ScheduleVariant::Hat { n, .. } if j + 1 < n => -0.5 * ((j + 3) as f64).ln(),
            _ => self.alpha.ln(),
        }
    }

    /// `ln(w(j-1) / w(j))` for `j >= 1`.
    fn log_down(&self, j: u32) -> f64 {
        match self.variant {
            ScheduleVariant::Hat { n, .. } if j < n => 0.5 * ((j + 2) as f64).ln(),
            _ => -self.alpha.ln(),
        }
    }

    /// Mean births on an away step that lands at depth `j`.
    pub fn birth_mean(&self, j: u32) -> f64 {
        match self.variant {
            ScheduleVariant::Regular { eta_mean, .. } => eta_mean,
            ScheduleVariant::Hat { lambda, n } if j >= n => lambda,
            ScheduleVariant::Hat { .. } => 0.0,
        }
    }

    fn births_at(&self, j: u32) -> bool {
        self.birth_mean(j) > 0.0 || matches!(self.variant, ScheduleVariant::Regular { .. })
    }

    /// Expected next-tick weight of a particle at depth `j` with `children`
    /// children, including its newborns, divided by `w(j)`. On the hat tree
    /// the child count is `j + 2` and `children` is ignored.
    pub fn contribution_ratio(&self, j: u32, children: u32) -> f64 {
        let c = match self.variant {
            ScheduleVariant::Hat { .. } => j + 2,
            ScheduleVariant::Regular { .. } => children,
        } as f64;
        let up = (1.0 + self.birth_mean(j + 1)) * self.log_up(j).exp();
        if j == 0 {
            return up;
        }
        (self.log_down(j).exp() + c * up) / (c + 1.0)
    }
}

pub fn expected_contribution(schedule: &WeightSchedule, j: u32, children: u32) -> f64 {
    schedule.w(j) * schedule.contribution_ratio(j, children)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionCheck {
    pub worst_ratio: f64,
    pub worst_depth: u32,
    pub worst_children: u32,
    pub m: f64,
    pub pass: bool,
}

/// Evaluates `contribution_ratio <= m + 1e-12` at every depth and, for the
/// regular schedule, every admissible child count up to `max_j`.
pub fn contraction_check(schedule: &WeightSchedule, max_j: u32) -> ContractionCheck {
    let mut out = ContractionCheck { worst_ratio: 0.0, worst_depth: 0, worst_children: 0, m: schedule.m, pass: true };
    let child_range = match schedule.variant {
        ScheduleVariant::Regular { k, .. } => k..=max_j.max(k),
        ScheduleVariant::Hat { .. } => 0..=0,
    };
    for j in 0..=max_j {
        for c in child_range.clone() {
            let r = schedule.contribution_ratio(j, c);
            if r > out.worst_ratio {
                out.worst_ratio = r;
                out.worst_depth = j;
                out.worst_children = c;
            }
            if j == 0 {
                break;
            }
        }
    }
    out.pass = out.worst_ratio <= schedule.m + 1e-12;
    out
}

/// Law of the number of births per away step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum BirthLaw {
    Poisson { mean: f64 },
    /// `weights[i]` is proportional to the probability of `i` births.
    Pmf { weights: Vec<f64> },
}

impl BirthLaw {
    pub fn validate(&self) -> Result<()> {
        match self {
            BirthLaw::Poisson { mean } if mean.is_finite() && *mean >= 0.0 => Ok(()),
            BirthLaw::Pmf { weights }
                if !weights.is_empty()
                    && weights.iter().all(|w| w.is_finite() && *w >= 0.0)
                    && weights.iter().sum::<f64>() > 0.0 =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidDistribution(format!("invalid birth law {self:?}"))),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            BirthLaw::Poisson { mean } => *mean,
            BirthLaw::Pmf { weights } => {
                let s: f64 = weights.iter().sum();
                weights.iter().enumerate().map(|(i, w)| i as f64 * w).sum::<f64>() / s
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.sample_sum(1, rng)
    }

    /// Total births over `n` independent away steps.
    pub fn sample_sum<R: Rng + ?Sized>(&self, n: u64, rng: &mut R) -> u64 {
        match self {
            BirthLaw::Poisson { mean } => poisson(mean * n as f64, rng),
            BirthLaw::Pmf { weights } => {
                let s: f64 = weights.iter().sum();
                (0..n)
                    .map(|_| {
                        let mut u = rng.random::<f64>() * s;
                        for (i, w) in weights.iter().enumerate() {
                            if u < *w {
                                return i as u64;
                            }
                            u -= w;
                        }
                        weights.iter().rposition(|w| *w > 0.0).expect("positive mass") as u64
                    })
                    .sum()
            }
        }
    }
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrwCaps {
    pub horizon: u64,
    pub depth_cap: u32,
    pub max_particles: u64,
    pub vertex_cap: usize,
}

impl Default for BrwCaps {
    fn default() -> Self {
        BrwCaps { horizon: 200, depth_cap: DEFAULT_DEPTH_CAP, max_particles: 10_000_000, vertex_cap: DEFAULT_VERTEX_CAP }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrwRow {
    pub n: u64,
    pub w: f64,
    pub particles: u64,
    /// Cumulative root returns through tick `n`.
    pub returns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrwTrajectory {
    pub rows: Vec<BrwRow>,
    pub termination: Termination,
    pub retired_at_cap: u64,
}

impl BrwTrajectory {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("n\tW_n\tparticles\treturns\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{:e}\t{}\t{}\n", r.n, r.w, r.particles, r.returns));
        }
        s
    }
}

fn check_births(schedule: &WeightSchedule, births: &BirthLaw) -> Result<()> {
    births.validate()?;
    let want = match schedule.variant {
        ScheduleVariant::Regular { eta_mean, .. } => eta_mean,
        ScheduleVariant::Hat { lambda, .. } => lambda,
    };
    if (births.mean() - want).abs() > 1e-9 * (1.0 + want) {
        return Err(Error::Schedule(format!("birth law mean {} differs from the schedule's {want}", births.mean())));
    }
    Ok(())
}

fn verdict(particles: u64, n: u64, caps: &BrwCaps) -> Option<Termination> {
    if particles > caps.max_particles {
        Some(Termination::PopulationCapped)
    } else if particles == 0 {
        Some(Termination::Extinct)
    } else if n >= caps.horizon {
        Some(Termination::HorizonReached)
    } else {
        None
    }
}

/// Runs the branching walk. Trees whose child counts depend only on depth
/// use per-depth counts; other trees track every particle.
pub fn run_brw(
    tree: &TreeHandle,
    schedule: &WeightSchedule,
    births: &BirthLaw,
    caps: &BrwCaps,
    seed: u64,
) -> Result<BrwTrajectory> {
    check_births(schedule, births)?;
    match (tree.kind(), schedule.variant) {
        (TreeKind::Dary { d }, ScheduleVariant::Regular { k, .. }) if k <= *d => {
            let d = *d;
            DepthProfileBrw::new(schedule, births, caps, seed, move |_| d, false)?.run()
        }
        (TreeKind::Hat, ScheduleVariant::Hat { .. }) => {
            DepthProfileBrw::new(schedule, births, caps, seed, |j| j + 2, true)?.run()
        }
        (_, ScheduleVariant::Hat { .. }) => Err(Error::Schedule("the hat schedule needs the hat tree".into())),
        (kind, ScheduleVariant::Regular { k, .. }) => {
            if kind.min_children_from(0).is_none_or(|c| c < k) {
                return Err(Error::Hypothesis(format!("tree does not have at least k = {k} children everywhere")));
            }
            let mut s = ParticleBrw::new(tree, schedule, births, caps, seed)?;
            s.run()?;
            Ok(s.trajectory())
        }
    }
}

/// Branching walk on a tree whose child count is a function of depth.
pub struct DepthProfileBrw<'s, F: Fn(u32) -> u32> {
    schedule: &'s WeightSchedule,
    births: &'s BirthLaw,
    caps: BrwCaps,
    children: F,
    counts: Vec<u64>,
    rng: StreamRng,
    rows: Vec<BrwRow>,
    returns: u64,
    retired: u64,
}

impl<'s, F: Fn(u32) -> u32> DepthProfileBrw<'s, F> {
    /// With `hat_init`, levels `1..N` start with Poisson(λ) particles per
    /// vertex, which on the hat tree is Poisson(λ (j+1)!) at level `j`.
    pub fn new(
        schedule: &'s WeightSchedule,
        births: &'s BirthLaw,
        caps: &BrwCaps,
        seed: u64,
        children: F,
        hat_init: bool,
    ) -> Result<Self> {
        let mut rng = stream(key_of(&[seed, TAG_SIM]));
        let mut counts = vec![0u64; caps.depth_cap as usize];
        counts[0] = 1;
        if hat_init {
            let ScheduleVariant::Hat { lambda, n } = schedule.variant else {
                return Err(Error::Schedule("hat initialization needs the hat schedule".into()));
            };
            if n > MAX_HAT_N {
                return Err(Error::InvalidConfig(format!("N = {n} exceeds the cap {MAX_HAT_N} on pre-placed levels")));
            }
            let mut width = 1.0f64;
            for j in 1..n.min(caps.depth_cap) {
                width *= (j + 1) as f64;
                counts[j as usize] = poisson(lambda * width, &mut rng);
            }
        }
        let mut s = DepthProfileBrw {
            schedule,
            births,
            caps: *caps,
            children,
            counts,
            rng,
            rows: Vec::new(),
            returns: 0,
            retired: 0,
        };
        s.record(0);
        Ok(s)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    fn record(&mut self, n: u64) {
        let w = self.counts.iter().enumerate().filter(|c| *c.1 > 0).map(|(j, &c)| c as f64 * self.schedule.w(j as u32)).sum();
        self.rows.push(BrwRow { n, w, particles: self.counts.iter().sum(), returns: self.returns });
    }

    pub fn step(&mut self) -> Option<Termination> {
        let n = self.rows.len() as u64;
        let cap = self.caps.depth_cap as usize;
        let mut next = vec![0u64; cap];
        for j in 0..cap {
            let c = self.counts[j];
            if c == 0 {
                continue;
            }
            let down = if j == 0 {
                0
            } else {
                let k = (self.children)(j as u32) as f64;
                Binomial::new(c, 1.0 / (k + 1.0)).expect("valid p").sample(&mut self.rng)
            };
            let up = c - down;
            if down > 0 {
                next[j - 1] += down;
                if j == 1 {
                    self.returns += down;
                }
            }
            if up > 0 {
                let born = if self.schedule.births_at(j as u32 + 1) { self.births.sample_sum(up, &mut self.rng) } else { 0 };
                if j + 1 >= cap {
                    self.retired += up + born;
                } else {
                    next[j + 1] += up + born;
                }
            }
        }
        self.counts = next;
        self.record(n);
        let last = self.rows.last().expect("recorded");
        verdict(last.particles, n, &self.caps)
    }

    pub fn run(mut self) -> Result<BrwTrajectory> {
        let termination = match verdict(self.rows[0].particles, 0, &self.caps) {
            Some(t) => t,
            None => loop {
                if let Some(t) = self.step() {
                    break t;
                }
            },
        };
        Ok(BrwTrajectory { rows: self.rows, termination, retired_at_cap: self.retired })
    }
}

struct Particle {
    pos: NodeId,
    rng: StreamRng,
}

/// Particle-level branching walk on an arbitrary tree. The initial particle
/// and the first births at each vertex reuse the frog model's streams, so a
/// frog model run with the same seed is a sub-population of this one.
pub struct ParticleBrw<'s> {
    pub tree: LazyTree,
    schedule: &'s WeightSchedule,
    births: &'s BirthLaw,
    caps: BrwCaps,
    keys: SimKeys,
    particles: Vec<Particle>,
    away_landings: HashMap<NodeId, u32>,
    w: f64,
    returns_by_time: Vec<u64>,
    rows: Vec<BrwRow>,
    retired: u64,
    termination: Option<Termination>,
}

impl<'s> ParticleBrw<'s> {
    pub fn new(
        tree: &TreeHandle,
        schedule: &'s WeightSchedule,
        births: &'s BirthLaw,
        caps: &BrwCaps,
        seed: u64,
    ) -> Result<Self> {
        check_births(schedule, births)?;
        let keys = SimKeys::new(seed);
        let lazy = tree.lazy(caps.vertex_cap);
        let root_key = lazy.node(ROOT).key();
        let mut s = ParticleBrw {
            tree: lazy,
            schedule,
            births,
            caps: *caps,
            keys,
            particles: vec![Particle { pos: ROOT, rng: keys.frog_stream(root_key, 0) }],
            away_landings: HashMap::new(),
            w: schedule.w(0),
            returns_by_time: vec![0],
            rows: Vec::new(),
            retired: 0,
            termination: None,
        };
        s.rows.push(BrwRow { n: 0, w: s.w, particles: 1, returns: 0 });
        Ok(s)
    }

    pub fn depths(&self) -> Vec<u32> {
        self.particles.iter().map(|p| self.tree.depth(p.pos)).collect()
    }

    pub fn weight(&self) -> f64 {
        self.w
    }

    fn exact_weight(&self) -> f64 {
        self.particles.iter().map(|p| self.schedule.w(self.tree.depth(p.pos))).sum()
    }

    fn spawn_births(&mut self, v: NodeId) {
        let k = {
            let e = self.away_landings.entry(v).or_insert(0);
            *e += 1;
            *e - 1
        };
        let vkey = self.tree.node(v).key();
        let mean = self.schedule.birth_mean(self.tree.depth(v));
        let first_poisson = matches!(self.births, BirthLaw::Poisson { .. });
        let streams: Vec<StreamRng> = if k == 0 && first_poisson {
            (0..self.keys.sleeper_count(vkey, mean)).map(|i| self.keys.frog_stream(vkey, i)).collect()
        } else {
            if mean <= 0.0 {
                return;
            }
            let mut rng = stream(key_of(&[self.keys.seed, TAG_BIRTH, vkey, k as u64]));
            let n = self.births.sample(&mut rng);
            (0..n).map(|i| stream(key_of(&[self.keys.seed, TAG_BIRTH_FROG, vkey, k as u64, i]))).collect()
        };
        self.w += streams.len() as f64 * self.schedule.w(self.tree.depth(v));
        self.particles.extend(streams.into_iter().map(|rng| Particle { pos: v, rng }));
    }

    pub fn step(&mut self) -> Result<Option<Termination>> {
        if self.termination.is_some() {
            return Ok(self.termination);
        }
        let t = self.rows.len() as u64;
        let mut landed: Vec<NodeId> = Vec::new();
        let mut returns = *self.returns_by_time.last().expect("nonempty");
        let (mut i, mut end) = (0, self.particles.len());
        while i < end {
            let p = &mut self.particles[i];
            let from = p.pos;
            let r = p.rng.random_range(0..self.tree.degree(from));
            let w = match self.tree.neighbor(from, r) {
                Ok(w) => w,
                Err(_) => {
                    self.termination = Some(Termination::VertexCapped);
                    return Ok(self.termination);
                }
            };
            p.pos = w;
            let (dw, df) = (self.tree.depth(w), self.tree.depth(from));
            self.w += self.schedule.w(dw) - self.schedule.w(df);
            if w == ROOT {
                returns += 1;
            }
            if dw >= self.caps.depth_cap {
                self.w -= self.schedule.w(dw);
                self.retired += 1;
                end -= 1;
                self.particles.swap(i, end);
                self.particles.swap_remove(end);
                continue;
            }
            if r < self.tree.child_count(from) {
                landed.push(w);
            }
            i += 1;
        }
        for v in landed {
            self.spawn_births(v);
        }
        self.returns_by_time.push(returns);
        if t.is_multiple_of(RECOMPUTE_EVERY) {
            let exact = self.exact_weight();
            if (self.w - exact).abs() > DRIFT_TOL * exact.max(f64::MIN_POSITIVE) && exact > 0.0 {
                return Err(Error::Unstable(format!("weight drift {} vs {exact} at tick {t}", self.w)));
            }
            self.w = exact;
        }
        if self.particles.is_empty() {
            self.w = 0.0;
        }
        self.rows.push(BrwRow { n: t, w: self.w, particles: self.particles.len() as u64, returns });
        self.termination = verdict(self.particles.len() as u64, t, &self.caps);
        Ok(self.termination)
    }

    pub fn run(&mut self) -> Result<Termination> {
        loop {
            if let Some(t) = self.step()? {
                return Ok(t);
            }
        }
    }

    pub fn trajectory(&self) -> BrwTrajectory {
        BrwTrajectory {
            rows: self.rows.clone(),
            termination: self.termination.unwrap_or(Termination::HorizonReached),
            retired_at_cap: self.retired,
        }
    }

    /// Cumulative root returns, entry `t` covering ticks `1..=t`.
    pub fn returns_by_time(&self) -> &[u64] {
        &self.returns_by_time
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceOutcome {
    pub brw_returns: u64,
    pub fm_returns: u64,
    /// Tick through which both runs are compared.
    pub compared_through: u64,
    /// Whether either run stopped on a cap before the horizon.
    pub censored: bool,
}

impl DominanceOutcome {
    pub fn holds(&self) -> bool {
        self.brw_returns >= self.fm_returns
    }
}

/// Runs the frog model and the dominating branching walk with births
/// Poisson(λ) on shared streams and compares root returns up to the last
/// tick both runs reached.
pub fn dominance_check_brw_fm(tree: &TreeHandle, lambda: f64, seed: u64, caps: &BrwCaps) -> Result<DominanceOutcome> {
    let k = tree.kind().min_children_from(0).unwrap_or(2).max(2);
    let schedule = make_schedule(ScheduleVariant::Regular { k, eta_mean: lambda })?;
    let births = BirthLaw::Poisson { mean: lambda };
    let mut brw = ParticleBrw::new(tree, &schedule, &births, caps, seed)?;
    let bt = brw.run()?;
    let cfg = FrogConfig {
        lambda,
        horizon: caps.horizon,
        depth_cap: caps.depth_cap,
        max_active: caps.max_particles as usize,
        vertex_cap: caps.vertex_cap,
        ..FrogConfig::default()
    };
    let mut fm = SimState::new(tree, &cfg, seed, false)?;
    let ft = fm.run();
    let fs = fm.stats();
    let through = (brw.returns_by_time().len() as u64 - 1).min(fs.end_time);
    let capped = |t: Termination| matches!(t, Termination::PopulationCapped | Termination::VertexCapped);
    Ok(DominanceOutcome {
        brw_returns: brw.returns_by_time()[through as usize],
        fm_returns: fs.returns_by(through),
        compared_through: through,
        censored: capped(bt) || capped(ft),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{median, MeanVar};
    use crate::treegen::{make_tree, OffspringDistribution};
    use proptest::prelude::*;

    fn regular(k: u32, eta_mean: f64) -> WeightSchedule {
        make_schedule(ScheduleVariant::Regular { k, eta_mean }).unwrap()
    }

    #[test]
    fn regular_schedule_arithmetic() {
        let s = regular(2, 0.125);
        assert!((s.alpha - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.m - 1.0).abs() < 1e-12);
        assert!(s.warning.is_some());
        let s = regular(2, 0.1);
        assert!((s.alpha - 2.2f64.powf(-0.5)).abs() < 1e-15);
        assert!((s.alpha - 0.674200).abs() < 1e-6);
        // 2 sqrt(2.2) / 3
        assert!((s.m - 0.988826).abs() < 1e-6, "{}", s.m);
        assert!(s.warning.is_none());
    }

    #[test]
    fn hat_minimal_n() {
        assert!(!hat_admissible(1.0, 4) && hat_admissible(1.0, 5));
        assert_eq!(hat_min_n(1.0), 5);
        assert!(matches!(make_schedule(ScheduleVariant::Hat { lambda: 1.0, n: 4 }), Err(Error::Schedule(_))));
        let s = make_schedule(ScheduleVariant::Hat { lambda: 1.0, n: 5 }).unwrap();
        assert!(s.m < 1.0);
    }

    #[test]
    fn hat_weights_closed_form() {
        let s = make_schedule(ScheduleVariant::Hat { lambda: 1.0, n: 5 }).unwrap();
        let fact = |n: u32| (1..=n).map(|i| i as f64).product::<f64>();
        for j in 0..5 {
            assert!((s.w(j) - (fact(j + 2) / 2.0).powf(-0.5)).abs() < 1e-14);
        }
        for j in 5..9 {
            let want = (fact(6) / 2.0).powf(-0.5) * s.alpha.powi(j as i32 - 4);
            assert!((s.w(j) / want - 1.0).abs() < 1e-12);
        }
        for j in 0..40 {
            assert!(s.w(j + 1) < s.w(j));
        }
        assert!((s.w(1) / s.w(0) - 3f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn root_and_interior_contributions() {
        for (k, eta) in [(2, 0.1), (3, 0.2), (5, 0.05)] {
            let s = regular(k, eta);
            let want = 1.0 / (s.alpha * k as f64);
            assert!((expected_contribution(&s, 0, k) - want).abs() < 1e-14);
        }
        let s = regular(2, 0.1);
        let want = s.w(5) * ((1.0 / 3.0) / s.alpha + (2.0 / 3.0) * 1.1 * s.alpha);
        assert!((expected_contribution(&s, 5, 2) - want).abs() < 1e-15);
        assert!(s.contribution_ratio(5, 2) <= s.m + 1e-12);
    }

    #[test]
    fn contraction_holds_below_threshold() {
        for k in [2, 3, 5] {
            for eta in [0.05, 0.1, regular_threshold(k) - 1e-6] {
                let c = contraction_check(&regular(k, eta), 200);
                assert!(c.pass, "k={k} eta={eta}: {c:?}");
            }
        }
        let c = contraction_check(&make_schedule(ScheduleVariant::Hat { lambda: 1.0, n: 5 }).unwrap(), 1000);
        assert!(c.pass, "{c:?}");
        let above = contraction_check(&regular(2, 0.3), 10);
        assert!(above.pass && above.m > 1.0);
    }

    #[test]
    fn single_particle_without_births() {
        let s = regular(2, 0.0);
        let births = BirthLaw::Poisson { mean: 0.0 };
        let caps = BrwCaps { horizon: 300, ..Default::default() };
        let t = make_tree(TreeKind::gw(OffspringDistribution::two_point(2, 3, 0.5).unwrap()), 3).unwrap();
        let mut b = ParticleBrw::new(&t, &s, &births, &caps, 5).unwrap();
        loop {
            let d = b.depths();
            if d.is_empty() {
                break;
            }
            assert_eq!(d.len(), 1);
            assert!((b.weight() - s.alpha.powi(d[0] as i32)).abs() <= 1e-12 * b.weight());
            if b.step().unwrap().is_some() {
                break;
            }
        }
        let tr = run_brw(&make_tree(TreeKind::Dary { d: 2 }, 0).unwrap(), &s, &births, &caps, 1).unwrap();
        for r in &tr.rows {
            let d = r.w.ln() / s.alpha.ln();
            assert!(r.particles == 0 || (d - d.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn empirical_supermartingale_on_dary2() {
        let s = regular(2, 0.1);
        let births = BirthLaw::Poisson { mean: 0.1 };
        let tree = make_tree(TreeKind::Dary { d: 2 }, 0).unwrap();
        let caps = BrwCaps::default();
        let runs: Vec<BrwTrajectory> = (0..300).map(|r| run_brw(&tree, &s, &births, &caps, r).unwrap()).collect();
        for n in 0..200usize {
            let d: MeanVar = runs
                .iter()
                .filter(|t| t.rows.len() > n + 1)
                .map(|t| t.rows[n + 1].w - s.m * t.rows[n].w)
                .collect();
            if d.n >= 30 {
                assert!(d.mean <= 3.0 * d.std_err(), "n={n}: {d:?}");
            }
        }
        let last: Vec<f64> = runs.iter().map(|t| t.rows.get(200).map_or(0.0, |r| r.w)).collect();
        assert!(median(&last) < 0.1);
    }

    #[test]
    fn hat_profile_starts_with_placed_particles() {
        let s = make_schedule(ScheduleVariant::Hat { lambda: 1.0, n: 5 }).unwrap();
        let births = BirthLaw::Poisson { mean: 1.0 };
        let tree = make_tree(TreeKind::Hat, 0).unwrap();
        let tr = run_brw(&tree, &s, &births, &BrwCaps { horizon: 50, ..Default::default() }, 2).unwrap();
        // levels 1..4 hold 2 + 6 + 24 + 120 vertices
        let p0 = tr.rows[0].particles as f64;
        assert!((p0 - 153.0).abs() < 6.0 * 152f64.sqrt(), "{p0}");
        let wrong = run_brw(&make_tree(TreeKind::Dary { d: 2 }, 0).unwrap(), &s, &births, &BrwCaps::default(), 0);
        assert!(matches!(wrong, Err(Error::Schedule(_))));
    }

    #[test]
    fn lambda_zero_brw_is_the_frog_model() {
        let t = make_tree(TreeKind::Dary { d: 2 }, 0).unwrap();
        for seed in 0..50 {
            let o = dominance_check_brw_fm(&t, 0.0, seed, &BrwCaps { horizon: 300, ..Default::default() }).unwrap();
            assert_eq!(o.brw_returns, o.fm_returns);
        }
    }

    #[test]
    fn dominance_on_dary2() {
        let t = make_tree(TreeKind::Dary { d: 2 }, 0).unwrap();
        let caps = BrwCaps { horizon: 100, ..Default::default() };
        for seed in 0..300 {
            let o = dominance_check_brw_fm(&t, 0.1, seed, &caps).unwrap();
            assert!(o.holds(), "seed {seed}: {o:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn dominance_on_sampled_trees(seed in any::<u64>(), lambda in 0.0f64..0.15) {
            let t = make_tree(TreeKind::gw(OffspringDistribution::two_point(2, 3, 0.5).unwrap()), seed).unwrap();
            let o = dominance_check_brw_fm(&t, lambda, seed ^ 1, &BrwCaps { horizon: 60, ..Default::default() }).unwrap();
            prop_assert!(o.holds(), "{:?}", o);
        }

        #[test]
        fn regular_ratio_bounded_by_m(k in 2u32..8, frac in 0.0f64..0.999, c_extra in 0u32..500, j in 0u32..1000) {
            let s = regular(k, frac * regular_threshold(k));
            prop_assert!(s.contribution_ratio(j, k + c_extra) <= s.m + 1e-12);
        }
    }
}
