//! The forward noising process `dX = V(X) dt + σ dW + dZ`, simulated by
//! Euler–Maruyama with coordinatewise mirror reflection realizing the
//! confinement term `Z` (zero flux at the faces of the box).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{BoxDomain, Ensemble};
use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Purpose};
use crate::timegrid::TimeGrid;

/// Drift of the forward process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    Zero,
    /// `V(x) = -k x`.
    Linear { k: f64 },
}

impl DriftSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DriftSpec::Zero => Ok(()),
            DriftSpec::Linear { k } if k.is_finite() && k > 0.0 => Ok(()),
            DriftSpec::Linear { k } => Err(Error::invalid(format!("linear drift needs k > 0, got {k}"))),
        }
    }

    #[inline]
    fn apply(&self, x: f64) -> f64 {
        match *self {
            DriftSpec::Zero => 0.0,
            DriftSpec::Linear { k } => -k * x,
        }
    }
}

/// Folds a coordinate into `[lo, hi]` by repeated mirroring at the faces.
#[inline]
pub fn reflect_coord(x: f64, lo: f64, hi: f64) -> f64 {
    if (lo..=hi).contains(&x) {
        return x;
    }
    let w = hi - lo;
    let mut y = (x - lo).rem_euclid(2.0 * w);
    if y > w {
        y = 2.0 * w - y;
    }
    (lo + y).clamp(lo, hi)
}

pub fn reflect_in_place(x: &mut [f64], domain: &BoxDomain) {
    for (k, v) in x.iter_mut().enumerate() {
        if domain.is_bounded(k) {
            *v = reflect_coord(*v, domain.lower()[k], domain.upper()[k]);
        }
    }
}

pub fn reflect(x: &[f64], domain: &BoxDomain) -> Result<Vec<f64>> {
    check_dim(domain.dim(), x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot reflect a non-finite point"));
    }
    let mut y = x.to_vec();
    reflect_in_place(&mut y, domain);
    Ok(y)
}

/// Parameters a forward trace was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    pub drift: DriftSpec,
    pub sigma: f64,
    pub dt: f64,
    pub domain: BoxDomain,
    pub seed: u64,
}

/// Ensemble snapshots of the forward process at the measurement instants,
/// plus the initial (target) ensemble at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    grid: TimeGrid,
    initial: Ensemble,
    snapshots: Vec<Ensemble>,
    config: ForwardConfig,
}

impl ForwardTrace {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        self.grid.instants()
    }

    pub fn initial(&self) -> &Ensemble {
        &self.initial
    }

    pub fn snapshots(&self) -> &[Ensemble] {
        &self.snapshots
    }

    pub fn config(&self) -> &ForwardConfig {
        &self.config
    }

    pub fn final_snapshot(&self) -> &Ensemble {
        self.snapshots.last().expect("trace has at least one snapshot")
    }

    /// The ensemble at time `t`: the initial ensemble for `t = 0`, otherwise
    /// the snapshot at the matching instant.
    pub fn at(&self, t: f64) -> Option<&Ensemble> {
        if let Some(k) = self.grid.position(t) {
            return Some(&self.snapshots[k]);
        }
        (t.abs() <= 1e-12 * self.grid.horizon().max(1.0)).then_some(&self.initial)
    }

    /// Writes `manifest.json`, `initial.csv` and `snapshots/snap_<k>.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let snap_dir = dir.join("snapshots");
        fs::create_dir_all(&snap_dir)?;
        self.initial.write_csv(fs::File::create(dir.join("initial.csv"))?)?;
        for (k, s) in self.snapshots.iter().enumerate() {
            s.write_csv(fs::File::create(snap_dir.join(format!("snap_{k:04}.csv")))?)?;
        }
        let manifest = Manifest {
            times: self.grid.instants().to_vec(),
            horizon: self.grid.horizon(),
            particles: self.initial.len(),
            dim: self.initial.dim(),
            config: self.config.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let grid = TimeGrid::new(manifest.horizon, manifest.times)?;
        let initial = Ensemble::read_csv(fs::File::open(dir.join("initial.csv"))?, 0.0)?;
        let snapshots = grid
            .instants()
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let f = fs::File::open(dir.join("snapshots").join(format!("snap_{k:04}.csv")))?;
                Ensemble::read_csv(f, t)
            })
            .collect::<Result<Vec<_>>>()?;
        for s in std::iter::once(&initial).chain(&snapshots) {
            check_dim(manifest.dim, s.dim())?;
            check_dim(manifest.particles, s.len())?;
        }
        Ok(ForwardTrace { grid, initial, snapshots, config: manifest.config })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    times: Vec<f64>,
    horizon: f64,
    particles: usize,
    dim: usize,
    #[serde(flatten)]
    config: ForwardConfig,
}

/// Runs the forward process from `init` and records the grid instants.
///
/// Particle `i` draws its noise from its own stream, so the result does not
/// depend on the number of threads.
pub fn simulate_forward(
    init: &Ensemble,
    drift: DriftSpec,
    sigma: f64,
    domain: &BoxDomain,
    dt: f64,
    grid: &TimeGrid,
    seed: u64,
) -> Result<ForwardTrace> {
    drift.validate()?;
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("noise scale must be non-negative, got {sigma}")));
    }
    let d = init.dim();
    check_dim(domain.dim(), d)?;
    if let Some(i) = init.particles().position(|p| !domain.contains(p)) {
        return Err(Error::invalid(format!("initial particle {i} lies outside the domain")));
    }
    let (steps, snap_steps) = grid.step_indices(dt)?;
    let n_snap = snap_steps.len();
    let noise = sigma * dt.sqrt();

    let records: Vec<Vec<f64>> = init
        .particles()
        .collect::<Vec<_>>()
        .into_par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = rng::stream(seed, Purpose::ForwardNoise, i as u64);
            let mut x = x0.to_vec();
            let mut rec = Vec::with_capacity(n_snap * d);
            let mut next = 0;
            while next < n_snap && snap_steps[next] == 0 {
                rec.extend_from_slice(&x);
                next += 1;
            }
            for step in 1..=steps {
                for v in x.iter_mut() {
                    let xi: f64 = rng.sample(StandardNormal);
                    *v += drift.apply(*v) * dt + noise * xi;
                }
                reflect_in_place(&mut x, domain);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { what: "forward particle", step });
                }
                while next < n_snap && snap_steps[next] == step {
                    rec.extend_from_slice(&x);
                    next += 1;
                }
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;

    let snapshots = grid
        .instants()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let states = records.iter().flat_map(|r| r[k * d..(k + 1) * d].iter().copied()).collect();
            Ensemble::from_raw(d, states, t)
        })
        .collect();
    Ok(ForwardTrace {
        grid: grid.clone(),
        initial: init.clone().with_time(0.0),
        snapshots,
        config: ForwardConfig { drift, sigma, dt, domain: domain.clone(), seed },
    })
}

/// Pearson chi-square statistic of coordinate `k` against the uniform law on
/// `[lo, hi]` with `bins` equal bins.
pub fn uniformity_chi_square(e: &Ensemble, k: usize, lo: f64, hi: f64, bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for p in e.particles() {
        let b = (((p[k] - lo) / (hi - lo)) * bins as f64).floor() as isize;
        counts[b.clamp(0, bins as isize - 1) as usize] += 1;
    }
    let expected = e.len() as f64 / bins as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}
