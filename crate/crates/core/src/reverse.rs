//! The reverse process: the control system driven by the learned feedback,
//! rolled out with explicit Euler, the tracking cost against the forward
//! trace, its exact discrete adjoint, and the training loop.
//!
//! A rollout stores every integration step for gradient replay, which takes
//! `M·(T/dt + 1)·d·8` bytes.

use std::io::{Read, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::kl_blob;
use crate::ensemble::Ensemble;
use crate::error::{check_dim, Error, Result};
use crate::forward::ForwardTrace;
use crate::kernel::KernelConfig;
use crate::policy::{adam_step, AdamConfig, AdamState, MlpPolicy};
use crate::rng::{derive_seed, Purpose};
use crate::sampling::InitialDistribution;
use crate::systems::ControlAffine;
use crate::timegrid::TimeGrid;

/// Particles per adjoint work unit. Unit gradients are summed in a fixed
/// order, so the result does not depend on the thread count.
const ADJOINT_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ReverseTrace {
    dim: usize,
    particles: usize,
    dt: f64,
    steps: usize,
    grid: TimeGrid,
    snap_steps: Vec<usize>,
    /// `[particle][step][coord]`.
    states: Vec<f64>,
}

impl ReverseTrace {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.particles
    }

    pub fn is_empty(&self) -> bool {
        self.particles == 0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        self.grid.instants()
    }

    /// Integration step index of each measurement instant.
    pub fn snapshot_steps(&self) -> &[usize] {
        &self.snap_steps
    }

    /// State of particle `i` after `k` Euler steps.
    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * (self.steps + 1) + k) * self.dim;
        &self.states[off..off + self.dim]
    }

    fn at_step(&self, k: usize) -> Ensemble {
        let states = (0..self.particles).flat_map(|i| self.state(i, k).iter().copied()).collect();
        Ensemble::from_raw(self.dim, states, k as f64 * self.dt)
    }

    pub fn initial(&self) -> Ensemble {
        self.at_step(0)
    }

    /// Ensemble at measurement instant `k`.
    pub fn snapshot(&self, k: usize) -> Ensemble {
        self.at_step(self.snap_steps[k]).with_time(self.grid.instants()[k])
    }

    pub fn snapshots(&self) -> Vec<Ensemble> {
        (0..self.grid.len()).map(|k| self.snapshot(k)).collect()
    }

    pub fn final_ensemble(&self) -> Ensemble {
        self.at_step(self.steps).with_time(self.grid.horizon())
    }
}

fn check_shapes(init_dim: usize, sys: &dyn ControlAffine, p: &MlpPolicy) -> Result<()> {
    check_dim(sys.state_dim(), init_dim)?;
    check_dim(sys.state_dim(), p.state_dim())?;
    check_dim(sys.input_dim(), p.output_dim())
}

/// Explicit Euler rollout `x ← x + dt·G(x)·π(t/T, x)` of every particle.
pub fn rollout(init: &Ensemble, sys: &dyn ControlAffine, p: &MlpPolicy, dt: f64, grid: &TimeGrid) -> Result<ReverseTrace> {
    check_shapes(init.dim(), sys, p)?;
    let (steps, snap_steps) = grid.step_indices(dt)?;
    let (d, m) = (sys.state_dim(), sys.input_dim());
    let horizon = grid.horizon();

    let paths: Vec<Result<Vec<f64>>> = init
        .particles()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map_init(
            || (p.workspace(), vec![0.0; d * m], vec![0.0; m]),
            |(ws, g, u), x0| {
                let mut path = Vec::with_capacity((steps + 1) * d);
                path.extend_from_slice(x0);
                for k in 0..steps {
                    let base = k * d;
                    let s = k as f64 * dt / horizon;
                    p.forward(s, &path[base..base + d], ws, u);
                    sys.fields(&path[base..base + d], g);
                    for r in 0..d {
                        let v: f64 = (0..m).map(|i| g[r * m + i] * u[i]).sum();
                        let next = path[base + r] + dt * v;
                        if !next.is_finite() {
                            return Err(Error::NonFinite { what: "reverse particle", step: k + 1 });
                        }
                        path.push(next);
                    }
                }
                Ok(path)
            },
        )
        .collect();
    let mut states = Vec::with_capacity(init.len() * (steps + 1) * d);
    for path in paths {
        states.extend(path?);
    }
    Ok(ReverseTrace { dim: d, particles: init.len(), dt, steps, grid: grid.clone(), snap_steps, states })
}

/// Forward ensembles paired with the reverse instants, `t_i ↔ T - t_i`.
fn paired_targets<'a>(rev: &ReverseTrace, fwd: &'a ForwardTrace) -> Result<Vec<&'a Ensemble>> {
    let (rg, fg) = (rev.grid(), fwd.grid());
    let tol = 1e-9 * rg.horizon();
    let same = rg.len() == fg.len()
        && (rg.horizon() - fg.horizon()).abs() <= tol
        && rg.instants().iter().zip(fg.instants()).all(|(a, b)| (a - b).abs() <= tol);
    if !same {
        return Err(Error::invalid(format!(
            "measurement instants differ: reverse {:?} (T={}), forward {:?} (T={})",
            rg.instants(),
            rg.horizon(),
            fg.instants(),
            fg.horizon()
        )));
    }
    check_dim(fwd.initial().dim(), rev.dim())?;
    rg.instants()
        .iter()
        .map(|&t| {
            fwd.at(rg.horizon() - t)
                .ok_or_else(|| Error::invalid(format!("forward trace has no ensemble at {}", rg.horizon() - t)))
        })
        .collect()
}

/// Per-instant blob-KL terms `KL(p^c_{t_i} | p^f_{T - t_i})`.
pub fn cost_terms(rev: &ReverseTrace, fwd: &ForwardTrace, kernel: &KernelConfig) -> Result<Vec<f64>> {
    let targets = paired_targets(rev, fwd)?;
    targets
        .iter()
        .enumerate()
        .map(|(k, r)| Ok(kl_blob(&rev.snapshot(k), r, kernel, false)?.value))
        .collect()
}

/// Mean of the per-instant blob-KL terms.
pub fn cost(rev: &ReverseTrace, fwd: &ForwardTrace, kernel: &KernelConfig) -> Result<f64> {
    let terms = cost_terms(rev, fwd, kernel)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostGrad {
    pub cost: f64,
    pub terms: Vec<f64>,
    /// `∂cost/∂θ`, laid out like [`MlpPolicy::params`].
    pub grad: Vec<f64>,
}

impl CostGrad {
    /// The term at the last instant `T`, i.e. against the target samples.
    pub fn final_kl(&self) -> f64 {
        *self.terms.last().expect("at least one instant")
    }
}

/// Cost and its exact discrete adjoint gradient with respect to the policy
/// parameters. `rev` must come from [`rollout`] with the same `sys` and `p`.
pub fn cost_and_grad(
    rev: &ReverseTrace,
    fwd: &ForwardTrace,
    sys: &dyn ControlAffine,
    p: &MlpPolicy,
    kernel: &KernelConfig,
) -> Result<CostGrad> {
    check_shapes(rev.dim(), sys, p)?;
    let targets = paired_targets(rev, fwd)?;
    let n = targets.len() as f64;
    let mut terms = Vec::with_capacity(targets.len());
    let mut snap_grads = Vec::with_capacity(targets.len());
    for (k, r) in targets.iter().enumerate() {
        let rep = kl_blob(&rev.snapshot(k), r, kernel, true)?;
        terms.push(rep.value);
        snap_grads.push(rep.per_particle_grad.expect("requested").into_iter().map(|g| g / n).collect::<Vec<_>>());
    }
    let cost = terms.iter().sum::<f64>() / n;

    let (d, m, steps, dt) = (rev.dim, sys.input_dim(), rev.steps, rev.dt);
    let horizon = rev.grid.horizon();
    let mut snap_at = vec![None; steps + 1];
    for (k, &s) in rev.snap_steps.iter().enumerate() {
        snap_at[s] = Some(k);
    }
    let n_params = p.num_params();
    let n_chunks = rev.particles.div_ceil(ADJOINT_CHUNK);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut ws = p.workspace();
            let (mut g, mut jac) = (vec![0.0; d * m], vec![0.0; m * d * d]);
            let (mut u, mut ubar, mut gx) = (vec![0.0; m], vec![0.0; m], vec![0.0; d]);
            let (mut lam, mut next) = (vec![0.0; d], vec![0.0; d]);
            let mut grad = vec![0.0; n_params];
            let end = ((c + 1) * ADJOINT_CHUNK).min(rev.particles);
            for a in c * ADJOINT_CHUNK..end {
                lam.fill(0.0);
                for k in (1..=steps).rev() {
                    if let Some(i) = snap_at[k] {
                        for (l, sg) in lam.iter_mut().zip(&snap_grads[i][a * d..(a + 1) * d]) {
                            *l += sg;
                        }
                    }
                    // Pull λ back through x_k = x_{k-1} + dt·G(x_{k-1})·π(s, x_{k-1}).
                    let x = rev.state(a, k - 1);
                    p.forward((k - 1) as f64 * dt / horizon, x, &mut ws, &mut u);
                    sys.fields(x, &mut g);
                    sys.field_jacobians(x, &mut jac);
                    for i in 0..m {
                        ubar[i] = dt * (0..d).map(|r| g[r * m + i] * lam[r]).sum::<f64>();
                    }
                    p.backward(&ubar, &mut ws, &mut gx, &mut grad);
                    for col in 0..d {
                        let mut acc = 0.0;
                        for i in 0..m {
                            let blk = &jac[i * d * d..(i + 1) * d * d];
                            acc += u[i] * (0..d).map(|r| blk[r * d + col] * lam[r]).sum::<f64>();
                        }
                        next[col] = lam[col] + gx[col] + dt * acc;
                    }
                    std::mem::swap(&mut lam, &mut next);
                }
            }
            grad
        })
        .collect();
    let mut grad = vec![0.0; n_params];
    for part in &partials {
        for (g, v) in grad.iter_mut().zip(part) {
            *g += v;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { what: "cost gradient", step: steps });
    }
    Ok(CostGrad { cost, terms, grad })
}

pub fn cost_grad(
    rev: &ReverseTrace,
    fwd: &ForwardTrace,
    sys: &dyn ControlAffine,
    p: &MlpPolicy,
    kernel: &KernelConfig,
) -> Result<Vec<f64>> {
    Ok(cost_and_grad(rev, fwd, sys, p, kernel)?.grad)
}

/// Training hyperparameters. `horizon` and `measurements` must agree with
/// the forward trace the policy is trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub particles: usize,
    pub dt: f64,
    pub horizon: f64,
    pub measurements: usize,
    pub bandwidth: f64,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub initial: InitialDistribution,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.particles == 0 || self.measurements == 0 {
            return Err(Error::invalid("epochs, particles and measurements must be at least 1"));
        }
        for (name, v) in [("dt", self.dt), ("horizon", self.horizon), ("bandwidth", self.bandwidth)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        self.adam.validate()
    }

    pub fn kernel(&self) -> Result<KernelConfig> {
        KernelConfig::new(self.bandwidth)
    }

    /// Seed of the initial samples drawn in `epoch`.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        derive_seed(self.seed, Purpose::Epoch, epoch as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Cost before this epoch's update.
    pub cost: f64,
    /// KL of the final reverse ensemble against the target samples.
    pub final_kl: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost).collect()
    }

    pub fn final_kls(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.final_kl).collect()
    }

    /// `epoch,cost,final_kl`, which is reproducible run to run.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "cost", "final_kl"])?;
        for r in &self.records {
            wr.write_record([r.epoch.to_string(), format!("{:?}", r.cost), format!("{:?}", r.final_kl)])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// `epoch,seconds`.
    pub fn write_timing_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "seconds"])?;
        for r in &self.records {
            wr.write_record([r.epoch.to_string(), format!("{:.6}", r.seconds)])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a history written by [`write_csv`](Self::write_csv); timings
    /// are read as zero.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row?;
            let field = |i: usize| row.get(i).ok_or_else(|| Error::invalid("short history row"));
            let parse = |i: usize| -> Result<f64> {
                field(i)?.trim().parse().map_err(|e| Error::invalid(format!("bad history value: {e}")))
            };
            let epoch = field(0)?.trim().parse().map_err(|e| Error::invalid(format!("bad epoch: {e}")))?;
            if epoch != records.len() {
                return Err(Error::invalid(format!("history epochs out of order at {epoch}")));
            }
            records.push(EpochRecord { epoch, cost: parse(1)?, final_kl: parse(2)?, seconds: 0.0 });
        }
        Ok(TrainHistory { records })
    }
}

/// Resumable training state: policy, optimizer and the history so far.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    sys: &'a dyn ControlAffine,
    fwd: &'a ForwardTrace,
    kernel: KernelConfig,
    policy: MlpPolicy,
    adam: AdamState,
    history: TrainHistory,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, sys: &'a dyn ControlAffine, fwd: &'a ForwardTrace, p0: MlpPolicy) -> Result<Self> {
        let adam = AdamState::new(p0.num_params(), cfg.adam);
        Self::resume(cfg, sys, fwd, p0, adam, TrainHistory::default())
    }

    pub fn resume(
        cfg: &'a TrainConfig,
        sys: &'a dyn ControlAffine,
        fwd: &'a ForwardTrace,
        policy: MlpPolicy,
        adam: AdamState,
        history: TrainHistory,
    ) -> Result<Self> {
        cfg.validate()?;
        check_shapes(cfg.initial.dim(), sys, &policy)?;
        if (cfg.horizon - fwd.grid().horizon()).abs() > 1e-9 * cfg.horizon || cfg.measurements != fwd.grid().len() {
            return Err(Error::invalid(format!(
                "config asks for T={} with {} instants but the forward trace has T={} with {}",
                cfg.horizon,
                cfg.measurements,
                fwd.grid().horizon(),
                fwd.grid().len()
            )));
        }
        fwd.grid().step_indices(cfg.dt)?;
        check_dim(policy.num_params(), adam.m.len())?;
        if adam.step as usize != history.len() || history.len() > cfg.epochs {
            return Err(Error::invalid(format!(
                "optimizer has taken {} steps but the history has {} of {} epochs",
                adam.step,
                history.len(),
                cfg.epochs
            )));
        }
        let kernel = cfg.kernel()?;
        Ok(Trainer { cfg, sys, fwd, kernel, policy, adam, history })
    }

    pub fn epoch(&self) -> usize {
        self.history.len()
    }

    pub fn is_done(&self) -> bool {
        self.epoch() >= self.cfg.epochs
    }

    pub fn policy(&self) -> &MlpPolicy {
        &self.policy
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    /// One epoch: sample, roll out, evaluate cost and gradient, Adam update.
    pub fn step(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.epoch();
        let init = self.cfg.initial.sample(self.cfg.particles, self.cfg.epoch_seed(epoch))?;
        let rev = rollout(&init, self.sys, &self.policy, self.cfg.dt, self.fwd.grid())?;
        let cg = cost_and_grad(&rev, self.fwd, self.sys, &self.policy, &self.kernel)
            .map_err(|e| at_epoch(e, epoch))?;
        if !cg.cost.is_finite() {
            return Err(Error::NonFinite { what: "training cost", step: epoch });
        }
        adam_step(self.policy.params_mut(), &cg.grad, &mut self.adam)?;
        let rec = EpochRecord { epoch, cost: cg.cost, final_kl: cg.final_kl(), seconds: started.elapsed().as_secs_f64() };
        self.history.records.push(rec);
        Ok(rec)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord, &MlpPolicy)) -> Result<()> {
        while !self.is_done() {
            let rec = self.step()?;
            on_epoch(&rec, &self.policy);
        }
        Ok(())
    }

    pub fn into_parts(self) -> (MlpPolicy, AdamState, TrainHistory) {
        (self.policy, self.adam, self.history)
    }
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step: epoch },
        other => other,
    }
}

pub fn train(
    cfg: &TrainConfig,
    sys: &dyn ControlAffine,
    fwd: &ForwardTrace,
    p0: MlpPolicy,
) -> Result<(MlpPolicy, TrainHistory)> {
    let mut t = Trainer::new(cfg, sys, fwd, p0)?;
    t.run(|_, _| {})?;
    let (p, _, h) = t.into_parts();
    Ok((p, h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub particles: usize,
    pub dt: f64,
    pub horizon: f64,
    pub bandwidth: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub final_kl: f64,
    pub final_ensemble: Ensemble,
}

/// Rolls out fresh initial samples and compares the final ensemble with
/// samples of the target density.
pub fn evaluate(
    p: &MlpPolicy,
    sys: &dyn ControlAffine,
    target: &Ensemble,
    initial: &InitialDistribution,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if cfg.particles == 0 {
        return Err(Error::invalid("evaluation needs at least one particle"));
    }
    let kernel = KernelConfig::new(cfg.bandwidth)?;
    let init = initial.sample(cfg.particles, cfg.seed)?;
    let grid = TimeGrid::uniform(cfg.horizon, 1)?;
    let rev = rollout(&init, sys, p, cfg.dt, &grid)?;
    let final_ensemble = rev.final_ensemble();
    let final_kl = kl_blob(&final_ensemble, target, &kernel, false)?.value;
    Ok(Evaluation { final_kl, final_ensemble })
}
