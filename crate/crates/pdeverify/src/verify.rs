//! Configured verification cases with pass/fail thresholds.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use diffctl::systems::{by_name, InputField, VectorField};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Boundary, Grid, TargetDensity};
use crate::operator::{assemble_sub_laplacian, FacePolicy, SubLaplacian};
use crate::solve::{spectral_gap, CgOptions, SpectralReport};
use crate::tracking::{exact_tracking_run_observed, TrackingReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeConfig {
    pub name: String,
    /// Built-in system whose input fields define `𝒜`.
    pub system: String,
    pub cells: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub boundary: Vec<Boundary>,
    pub target: TargetDensity,
    pub dt: f64,
    pub steps: usize,
    #[serde(default)]
    pub face_policy: FacePolicy,
    #[serde(default)]
    pub solver: CgOptions,
    /// Second run on a grid refined `factor` times with `dt / dt_divisor`.
    #[serde(default)]
    pub refinement: Option<Refinement>,
    /// Lanczos steps for the spectral estimate of `𝒜` on the base grid.
    #[serde(default)]
    pub spectral_steps: Option<usize>,
    /// Write density CSVs every this many reverse steps.
    #[serde(default)]
    pub dump_every: Option<usize>,
    #[serde(default)]
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Refinement {
    pub factor: usize,
    pub dt_divisor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Bound on the base run's max-in-time relative `L²` error.
    pub max_relative_error: Option<f64>,
    /// Required coarse/fine error ratio under refinement.
    pub min_refinement_gain: Option<f64>,
    pub max_poisson_residual: f64,
    /// Bound on `|φ - p^f|` modulo constants.
    pub max_potential_deviation: Option<f64>,
    /// `λ₂` must exceed this.
    pub min_spectral_gap: Option<f64>,
    pub max_kernel_residual: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            max_relative_error: None,
            min_refinement_gain: None,
            max_poisson_residual: 1e-8,
            max_potential_deviation: None,
            min_spectral_gap: None,
            max_kernel_residual: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `"<="`, `">="` or `">"`.
    pub relation: &'static str,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: &str, value: f64, relation: &'static str, threshold: f64) -> Self {
        let passed = match relation {
            "<=" => value <= threshold,
            ">=" => value >= threshold,
            _ => value > threshold,
        };
        Check { name: name.into(), value, relation, threshold, passed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub name: String,
    pub system: String,
    pub runs: Vec<TrackingReport>,
    pub refinement_gain: Option<f64>,
    pub spectral: Option<SpectralReport>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl PdeConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PdeConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        Grid::new(self.cells.clone(), self.lower.clone(), self.upper.clone(), self.boundary.clone())
    }

    /// `(grid, dt, steps)` for every run, base run first.
    pub fn runs(&self) -> Result<Vec<(Arc<Grid>, f64, usize)>> {
        let base = self.grid()?;
        let mut out = vec![(base.clone(), self.dt, self.steps)];
        if let Some(r) = self.refinement {
            out.push((base.refined(r.factor)?, self.dt / r.dt_divisor as f64, self.steps * r.dt_divisor));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let sys = by_name(&self.system).ok_or_else(|| Error::invalid(format!("unknown system {:?}", self.system)))?;
        if sys.state_dim() != self.cells.len() {
            return Err(Error::invalid(format!(
                "system {} has {} states but the grid has {} axes",
                self.system,
                sys.state_dim(),
                self.cells.len()
            )));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if let Some(r) = self.refinement {
            if r.factor < 2 || r.dt_divisor < 1 {
                return Err(Error::invalid("refinement needs factor ≥ 2 and dt_divisor ≥ 1"));
            }
        }
        if self.dump_every == Some(0) {
            return Err(Error::invalid("dump_every must be at least 1"));
        }
        for (grid, dt, _) in self.runs()? {
            let bound = grid.heat_stability_bound();
            if !(dt > 0.0 && dt <= bound) {
                return Err(Error::Unstable { dt, bound });
            }
        }
        Ok(())
    }
}

fn operator(system: &str, grid: &Arc<Grid>, policy: FacePolicy) -> Result<SubLaplacian> {
    let sys = by_name(system).ok_or_else(|| Error::invalid(format!("unknown system {system:?}")))?;
    let fields: Vec<InputField> =
        (0..sys.input_dim()).map(|i| InputField::new(sys.clone(), i)).collect::<diffctl::Result<_>>()?;
    let refs: Vec<&dyn VectorField> = fields.iter().map(|f| f as &dyn VectorField).collect();
    assemble_sub_laplacian(grid, &refs, policy)
}

/// Runs every configured run and evaluates the thresholds. Density dumps go
/// to `out_dir/fields` when `dump_every` is set and a directory is given.
pub fn run_case(cfg: &PdeConfig, out_dir: Option<&Path>) -> Result<VerifyReport> {
    cfg.validate()?;
    let mut runs = Vec::new();
    let mut spectral = None;
    for (r, (grid, dt, steps)) in cfg.runs()?.into_iter().enumerate() {
        let op = operator(&cfg.system, &grid, cfg.face_policy)?;
        if r == 0 {
            if let Some(steps) = cfg.spectral_steps {
                spectral = Some(spectral_gap(op.operator(), steps)?);
            }
        }
        let target = cfg.target.sample(&grid)?;
        let dump_dir = match (cfg.dump_every, out_dir) {
            (Some(_), Some(d)) => {
                let d = d.join("fields");
                fs::create_dir_all(&d)?;
                Some(d)
            }
            _ => None,
        };
        let every = cfg.dump_every.unwrap_or(usize::MAX);
        let rep = exact_tracking_run_observed(&target, &op, dt, steps, &cfg.solver, |k, pc, pf| {
            if let Some(d) = &dump_dir {
                if k % every == 0 || k == steps {
                    pc.write_csv(fs::File::create(d.join(format!("run{r}_step{k:05}_controlled.csv")))?)?;
                    pf.write_csv(fs::File::create(d.join(format!("run{r}_step{k:05}_reference.csv")))?)?;
                }
            }
            Ok(())
        })?;
        runs.push(rep);
    }

    let th = &cfg.thresholds;
    let base = &runs[0];
    let mut checks = Vec::new();
    let worst_residual = runs.iter().map(|r| r.max_poisson_residual).fold(0.0, f64::max);
    checks.push(Check::new("poisson_residual", worst_residual, "<=", th.max_poisson_residual));
    if let Some(t) = th.max_relative_error {
        checks.push(Check::new("relative_error", base.max_relative_error, "<=", t));
    }
    if let Some(t) = th.max_potential_deviation {
        let worst = runs.iter().map(|r| r.potential_deviation).fold(0.0, f64::max);
        checks.push(Check::new("potential_deviation", worst, "<=", t));
    }
    let refinement_gain = runs.get(1).map(|fine| base.max_relative_error / fine.max_relative_error);
    if let Some(t) = th.min_refinement_gain {
        let gain = refinement_gain.ok_or_else(|| Error::invalid("a refinement threshold needs a refinement run"))?;
        checks.push(Check::new("refinement_gain", gain, ">=", t));
    }
    if th.min_spectral_gap.is_some() || th.max_kernel_residual.is_some() {
        let s = spectral.ok_or_else(|| Error::invalid("spectral thresholds need spectral_steps"))?;
        if let Some(t) = th.min_spectral_gap {
            checks.push(Check::new("spectral_gap", s.lambda2, ">", t));
        }
        if let Some(t) = th.max_kernel_residual {
            checks.push(Check::new("kernel_residual", s.kernel_residual, "<=", t));
        }
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        name: cfg.name.clone(),
        system: cfg.system.clone(),
        runs,
        refinement_gain,
        spectral,
        checks,
        passed,
    })
}
