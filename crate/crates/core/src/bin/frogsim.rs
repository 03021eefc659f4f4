use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use frogsim_core::harness::{
    bisect_lambda_star, run_experiment, verify_path, AuditKind, BisectSpec, Caps, Experiment, ExperimentSpec, Params,
};
use frogsim_core::treegen::{OffspringDistribution, TreeKind};

const EXIT_AUDIT: u8 = 2;
const EXIT_ABORTS: u8 = 3;

#[derive(Parser)]
#[command(name = "frogsim", version, about = "Frog model and branching walk experiments on trees")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a TOML (or JSON) spec file.
    Run {
        spec: PathBuf,
        /// Output directory; defaults to `runs/<first 12 hex digits of the experiment spec hash>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the certified lemma audits and print the audit JSON.
    AuditLemmas {
        /// Spec file overriding the default audit ensemble.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        replicas: u64,
        #[arg(long, default_value_t = 100_000)]
        rn_replicas: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Bisect for the smallest λ whose return proxy reaches θ.
    Bisect {
        /// TOML file with the bisection settings; flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Tree kind as JSON, for example '{"kind":"dary","d":2}'.
        #[arg(long)]
        tree: Option<String>,
        #[arg(long = "returns")]
        return_threshold: Option<u64>,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        replicas: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_active: Option<usize>,
    },
    /// Re-run a sample of the records and compare them byte for byte.
    Verify {
        records: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
    },
}

fn fail(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("frogsim: {e}");
    ExitCode::FAILURE
}

fn run_spec(spec: &ExperimentSpec, out: Option<PathBuf>) -> ExitCode {
    let output = match run_experiment(spec) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let dir = out.unwrap_or_else(|| Path::new("runs").join(&output.spec_hash[..12]));
    if let Err(e) = output.write(&dir) {
        return fail(e);
    }
    println!("wrote {} records to {}", output.records.len(), dir.display());
    if !output.summary.audits.is_empty() {
        println!("{}", serde_json::to_string_pretty(&output.summary.audits).expect("serializable"));
    }
    let rate = output.abort_rate();
    if rate > spec.caps.max_abort_rate {
        eprintln!("frogsim: cap-abort rate {rate:.3} exceeds {}", spec.caps.max_abort_rate);
        return ExitCode::from(EXIT_ABORTS);
    }
    if !output.audits_pass() {
        eprintln!("frogsim: audit failure");
        return ExitCode::from(EXIT_AUDIT);
    }
    ExitCode::SUCCESS
}

fn audit_spec(replicas: u64, rn_replicas: u64, seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        experiment: Experiment::LemmaAudits,
        tree: TreeKind::gw(OffspringDistribution::two_point(2, 3, 0.5).expect("valid law")),
        replicas,
        master_seed: seed,
        caps: Caps::default(),
        params: Params {
            level: 5,
            rn_replicas,
            audits: vec![AuditKind::B1, AuditKind::A1, AuditKind::C1, AuditKind::LevelOne],
            ..Params::default()
        },
        ..ExperimentSpec::default()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { spec, out } => match ExperimentSpec::load(&spec) {
            Ok(s) => run_spec(&s, out),
            Err(e) => fail(e),
        },
        Cmd::AuditLemmas { spec, out, replicas, rn_replicas, seed } => {
            let s = match spec {
                Some(p) => match ExperimentSpec::load(&p) {
                    Ok(s) if s.experiment == Experiment::LemmaAudits => s,
                    Ok(_) => return fail("audit-lemmas needs experiment = \"lemma_audits\""),
                    Err(e) => return fail(e),
                },
                None => audit_spec(replicas, rn_replicas, seed),
            };
            run_spec(&s, out)
        }
        Cmd::Bisect { spec, tree, return_threshold, horizon, theta, lo, hi, tolerance, replicas, seed, max_active } => {
            let mut b = match spec {
                Some(p) => match std::fs::read_to_string(&p).map_err(|e| e.to_string()).and_then(|t| {
                    toml::from_str::<BisectSpec>(&t).map_err(|e| e.to_string())
                }) {
                    Ok(b) => b,
                    Err(e) => return fail(e),
                },
                None => BisectSpec::default(),
            };
            if let Some(t) = tree {
                match serde_json::from_str(&t) {
                    Ok(t) => b.tree = t,
                    Err(e) => return fail(format!("--tree: {e}")),
                }
            }
            b.return_threshold = return_threshold.unwrap_or(b.return_threshold);
            b.horizon = horizon.unwrap_or(b.horizon);
            b.theta = theta.unwrap_or(b.theta);
            b.lo = lo.unwrap_or(b.lo);
            b.hi = hi.unwrap_or(b.hi);
            b.tolerance = tolerance.unwrap_or(b.tolerance);
            b.replicas = replicas.unwrap_or(b.replicas);
            b.seed = seed.unwrap_or(b.seed);
            b.max_active = max_active.unwrap_or(b.max_active);
            match bisect_lambda_star(&b) {
                Ok(r) => {
                    println!("{}", serde_json::to_string_pretty(&r).expect("serializable"));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Cmd::Verify { records, fraction } => match verify_path(&records, fraction) {
            Ok(rep) => {
                println!("{}", serde_json::to_string_pretty(&rep).expect("serializable"));
                if rep.pass() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(EXIT_AUDIT)
                }
            }
            Err(e) => fail(e),
        },
    }
}
