//! The `diffctl` command-line tool.
//!
//! Subcommands map one-to-one onto functions here so that tests can drive
//! them without spawning processes. A run directory holds everything needed
//! to inspect or continue an experiment:
//!
//! ```text
//! config.json     resolved configuration (defaults filled, seed applied)
//! forward/        forward trace: manifest.json, initial.csv, snapshots/
//! history.csv     epoch,cost,final_kl
//! timing.csv      epoch,seconds
//! policy_init.json, policy.json, optimizer.json
//! metrics.json    written by `eval`
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use diffctl::divergence::{moment_diff, wasserstein2_exact};
use diffctl::forward::{simulate_forward, uniformity_chi_square, DriftSpec, ForwardConfig, ForwardTrace};
use diffctl::policy::{AdamState, MlpPolicy};
use diffctl::reverse::{evaluate, EpochRecord, TrainHistory, Trainer};
use diffctl::rng::{derive_seed, Purpose};
use diffctl::systems::chow_rashevsky_rank;
use diffctl::Ensemble;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub mod config;

pub use config::{RunConfig, Seeds};

/// Largest ensemble on which `eval` computes the exact W2 distance.
pub const W2_MAX_PARTICLES: usize = 512;

/// Bins of the per-coordinate uniformity test printed by `forward`.
pub const UNIFORMITY_BINS: usize = 10;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input files (exit status 2).
    Usage(String),
    /// Failure while running, or a threshold not met (exit status 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "diffctl", version, about = "Diffusion-model feedback control of driftless control-affine systems")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the forward noising process and store its snapshots.
    Forward(RunArgs),
    /// Train a feedback policy (runs the forward process first if needed).
    Train(TrainArgs),
    /// Evaluate a trained policy on fresh samples.
    Eval(EvalArgs),
    /// Rank of the Lie algebra generated by the input fields at a point.
    Rank(RankArgs),
    /// Run a grid-based verification case of the exact density tracker.
    VerifyPde(PdeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; defaults to the config's `out` field.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Policy checkpoint; defaults to `policy.json` in the run directory.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Where `metrics.json` goes.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the evaluation samples (the master seed is not changed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    pub system: String,
    /// Comma-separated coordinates, e.g. `0,0,0`.
    #[arg(allow_hyphen_values = true)]
    pub point: String,
    pub depth: usize,
}

#[derive(Debug, Args)]
pub struct PdeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Where `report.json` and field dumps go.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Forward(a) => {
            let cfg = load_with_seed(&a.config, a.seed)?;
            let out = out_dir(a.out, &cfg)?;
            let s = forward_cmd(&cfg, &out)?;
            print!("{s}");
        }
        Command::Train(a) => {
            let cfg = load_with_seed(&a.run.config, a.run.seed)?;
            let out = out_dir(a.run.out, &cfg)?;
            let h = train_cmd(&cfg, &out, a.resume, a.stop_after, |r| {
                println!("epoch {:>5}  cost {:.6e}  final_kl {:.6e}  {:.2}s", r.epoch, r.cost, r.final_kl, r.seconds)
            })?;
            if let Some(r) = h.records.last() {
                println!("final cost {:.6e}, final KL {:.6e}", r.cost, r.final_kl);
            }
        }
        Command::Eval(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            if a.seed.is_some() {
                cfg.eval.seed = a.seed;
            }
            let policy_path = match (&a.policy, out_dir(None, &cfg)) {
                (Some(p), _) => p.clone(),
                (None, Ok(dir)) => dir.join("policy.json"),
                (None, Err(_)) => return Err(CliError::Usage("--policy is required".into())),
            };
            let policy = load_policy(&policy_path)?;
            let m = eval_cmd(&cfg, &policy)?;
            let text = serde_json::to_string_pretty(&m).map_err(runtime)? + "\n";
            if let Some(dir) = &a.out {
                fs::create_dir_all(dir).map_err(runtime)?;
                write_atomic(&dir.join("metrics.json"), text.as_bytes())?;
            }
            print!("{text}");
            if let Some(max) = cfg.eval.max_final_kl {
                if !(m.final_kl <= max) {
                    return Err(CliError::Runtime(format!("final KL {:.6e} exceeds {max:e}", m.final_kl)));
                }
            }
        }
        Command::Rank(a) => println!("{}", rank_cmd(&a.system, &a.point, a.depth)?),
        Command::VerifyPde(a) => {
            let report = verify_pde_cmd(&a.config, a.out.as_deref())?;
            for c in &report.checks {
                println!(
                    "{} {}: {:.6e} {} {:e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.relation,
                    c.threshold
                );
            }
            if !report.passed {
                return Err(CliError::Runtime(format!("case {} failed", report.name)));
            }
        }
    }
    Ok(())
}

fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Usage("no run directory: pass --out or set `out` in the config".into()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path)).map_err(|e| {
        CliError::Runtime(format!("cannot write {}: {e}", path.display()))
    })
}

pub fn load_policy(path: &Path) -> Result<MlpPolicy, CliError> {
    MlpPolicy::load(path).map_err(|e| CliError::Usage(format!("cannot load policy {}: {e}", path.display())))
}

/// Samples of the target density the forward process starts from.
pub fn target_samples(cfg: &RunConfig) -> Result<Ensemble, CliError> {
    cfg.target.sample(cfg.particles, cfg.seeds().target).map_err(usage)
}

fn forward_config(cfg: &RunConfig) -> ForwardConfig {
    ForwardConfig {
        drift: cfg.forward.drift,
        sigma: cfg.forward.sigma,
        dt: cfg.forward.dt,
        domain: cfg.domain.clone(),
        seed: cfg.seeds().forward,
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<ForwardTrace, CliError> {
    let target = target_samples(cfg)?;
    let f = forward_config(cfg);
    simulate_forward(&target, f.drift, f.sigma, &f.domain, f.dt, &cfg.grid()?, f.seed).map_err(runtime)
}

#[derive(Debug, Clone, Serialize)]
pub struct ForwardSummary {
    pub horizon: f64,
    pub particles: usize,
    /// Per-coordinate variance of the final snapshot.
    pub final_variance: Vec<f64>,
    /// Per-coordinate uniformity test `(statistic, p-value)`, reported for a
    /// driftless process on a bounded box.
    pub uniformity: Option<Vec<(f64, f64)>>,
}

impl fmt::Display for ForwardSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "forward: {} particles to T = {}", self.particles, self.horizon)?;
        for (k, v) in self.final_variance.iter().enumerate() {
            write!(f, "  x{k}: variance {v:.4}")?;
            if let Some(u) = &self.uniformity {
                write!(f, ", chi-square {:.2} (p = {:.3})", u[k].0, u[k].1)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn summarize_forward(cfg: &RunConfig, trace: &ForwardTrace) -> ForwardSummary {
    let last = trace.final_snapshot();
    let uniformity = (cfg.forward.drift == DriftSpec::Zero && cfg.domain.fully_bounded()).then(|| {
        let chi = ChiSquared::new((UNIFORMITY_BINS - 1) as f64).expect("positive degrees of freedom");
        (0..last.dim())
            .map(|k| {
                let s = uniformity_chi_square(last, k, cfg.domain.lower()[k], cfg.domain.upper()[k], UNIFORMITY_BINS);
                (s, chi.sf(s))
            })
            .collect()
    });
    ForwardSummary { horizon: cfg.horizon, particles: last.len(), final_variance: last.variance(), uniformity }
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    write_atomic(&out.join("config.json"), cfg.to_json().as_bytes())
}

pub fn forward_cmd(cfg: &RunConfig, out: &Path) -> Result<ForwardSummary, CliError> {
    write_config(cfg, out)?;
    let trace = simulate(cfg)?;
    trace.write_dir(&out.join("forward")).map_err(runtime)?;
    Ok(summarize_forward(cfg, &trace))
}

/// The stored forward trace if it matches `cfg`, otherwise a fresh one
/// (which is then stored).
fn forward_for(cfg: &RunConfig, out: &Path) -> Result<ForwardTrace, CliError> {
    let dir = out.join("forward");
    if dir.join("manifest.json").exists() {
        let trace = ForwardTrace::read_dir(&dir).map_err(usage)?;
        let grid = cfg.grid()?;
        let matches = *trace.config() == forward_config(cfg)
            && trace.grid() == &grid
            && trace.initial().len() == cfg.particles
            && trace.initial().as_slice() == target_samples(cfg)?.as_slice();
        if !matches {
            return Err(CliError::Usage(format!(
                "forward trace in {} was produced with other settings; use a fresh run directory",
                dir.display()
            )));
        }
        return Ok(trace);
    }
    let trace = simulate(cfg)?;
    trace.write_dir(&dir).map_err(runtime)?;
    Ok(trace)
}

fn read_timing(path: &Path, history: &mut TrainHistory) -> Result<(), CliError> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    for line in text.lines().skip(1) {
        let mut it = line.split(',');
        let (Some(e), Some(s)) = (it.next(), it.next()) else { continue };
        if let (Ok(e), Ok(s)) = (e.trim().parse::<usize>(), s.trim().parse::<f64>()) {
            if let Some(r) = history.records.get_mut(e) {
                r.seconds = s;
            }
        }
    }
    Ok(())
}

fn checkpoint(out: &Path, policy: &MlpPolicy, adam: &AdamState, history: &TrainHistory) -> Result<(), CliError> {
    let mut buf = Vec::new();
    history.write_csv(&mut buf).map_err(runtime)?;
    write_atomic(&out.join("history.csv"), &buf)?;
    buf.clear();
    history.write_timing_csv(&mut buf).map_err(runtime)?;
    write_atomic(&out.join("timing.csv"), &buf)?;
    write_atomic(&out.join("policy.json"), policy.to_json().as_bytes())?;
    let opt = serde_json::to_string(adam).map_err(runtime)?;
    write_atomic(&out.join("optimizer.json"), opt.as_bytes())
}

/// Trains (or continues training) in run directory `out`, checkpointing
/// after every epoch. `stop_after` ends the run early at that many epochs.
pub fn train_cmd(
    cfg: &RunConfig,
    out: &Path,
    resume: bool,
    stop_after: Option<usize>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory, CliError> {
    let sys = cfg.system()?;
    let tcfg = cfg.train_config();
    let mut trainer_parts = None;
    if resume {
        let echo = RunConfig::load(&out.join("config.json"))?;
        if echo != *cfg {
            return Err(CliError::Usage(format!("{} differs from the configuration given", out.join("config.json").display())));
        }
        let policy = load_policy(&out.join("policy.json"))?;
        let adam: AdamState = fs::read(out.join("optimizer.json"))
            .map_err(usage)
            .and_then(|b| serde_json::from_slice(&b).map_err(usage))
            .map_err(|e| CliError::Usage(format!("cannot load optimizer state: {e}")))?;
        let file = fs::File::open(out.join("history.csv")).map_err(usage)?;
        let mut history = TrainHistory::read_csv(file).map_err(usage)?;
        read_timing(&out.join("timing.csv"), &mut history)?;
        trainer_parts = Some((policy, adam, history));
    } else {
        write_config(cfg, out)?;
    }
    let fwd = forward_for(cfg, out)?;
    let mut trainer = match trainer_parts {
        Some((p, a, h)) => Trainer::resume(&tcfg, sys.as_ref(), &fwd, p, a, h).map_err(usage)?,
        None => {
            let p0 = cfg.initial_policy()?;
            write_atomic(&out.join("policy_init.json"), p0.to_json().as_bytes())?;
            Trainer::new(&tcfg, sys.as_ref(), &fwd, p0).map_err(usage)?
        }
    };
    let limit = stop_after.unwrap_or(usize::MAX);
    while !trainer.is_done() && trainer.epoch() < limit {
        let rec = trainer
            .step()
            .map_err(|e| CliError::Runtime(format!("training failed in epoch {}: {e}", trainer.epoch())))?;
        checkpoint(out, trainer.policy(), trainer.adam(), trainer.history())?;
        on_epoch(&rec);
    }
    let (_, _, history) = trainer.into_parts();
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub final_kl: f64,
    /// Exact W2 between final and target samples, when both are small.
    pub w2: Option<f64>,
    pub mean_diff: f64,
    pub second_moment_diff: f64,
    pub particles: usize,
    pub seed: u64,
}

/// Rolls `policy` out on fresh samples and compares with fresh target
/// samples of the same size.
pub fn eval_cmd(cfg: &RunConfig, policy: &MlpPolicy) -> Result<Metrics, CliError> {
    let expected = cfg.layer_sizes()?;
    if policy.layer_sizes() != expected.as_slice() {
        return Err(CliError::Usage(format!(
            "policy has layers {:?} but the configuration needs {:?}",
            policy.layer_sizes(),
            expected
        )));
    }
    let sys = cfg.system()?;
    let ecfg = cfg.eval_config();
    let target = cfg
        .target
        .sample(ecfg.particles, derive_seed(ecfg.seed, Purpose::Sample, 1))
        .map_err(usage)?;
    let ev = evaluate(policy, sys.as_ref(), &target, &cfg.initial, &ecfg).map_err(runtime)?;
    let fin = &ev.final_ensemble;
    let w2 = if fin.len() <= W2_MAX_PARTICLES {
        Some(wasserstein2_exact(fin, &target).map_err(runtime)?)
    } else {
        None
    };
    Ok(Metrics {
        final_kl: ev.final_kl,
        w2,
        mean_diff: moment_diff(fin, &target, 1).map_err(runtime)?,
        second_moment_diff: moment_diff(fin, &target, 2).map_err(runtime)?,
        particles: fin.len(),
        seed: ecfg.seed,
    })
}

pub fn rank_cmd(system: &str, point: &str, depth: usize) -> Result<usize, CliError> {
    let sys = diffctl::systems::by_name(system).ok_or_else(|| CliError::Usage(format!("unknown system {system:?}")))?;
    let x = point
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("bad point {point:?}: {e}")))?;
    chow_rashevsky_rank(&sys, &x, depth).map_err(usage)
}

pub fn verify_pde_cmd(config: &Path, out: Option<&Path>) -> Result<diffctl_pde::VerifyReport, CliError> {
    use diffctl_pde::Error as E;
    let text = fs::read_to_string(config)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", config.display())))?;
    let cfg = diffctl_pde::PdeConfig::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", config.display())))?;
    let report = diffctl_pde::run_case(&cfg, out).map_err(|e| match e {
        E::Invalid(_) | E::Dimension { .. } | E::Unstable { .. } => usage(e),
        other => runtime(other),
    })?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(runtime)?;
        let text = serde_json::to_string_pretty(&report).map_err(runtime)? + "\n";
        write_atomic(&dir.join("report.json"), text.as_bytes())?;
    }
    Ok(report)
}
