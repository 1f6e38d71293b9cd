//! Seeded i.i.d. samplers for target and initial densities.
//!
//! Particle `i` always draws from stream `i`, so an ensemble of size `n` is a
//! prefix of the ensemble of size `n' > n` drawn with the same seed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{BoxDomain, Ensemble};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Isotropic Gaussian `N(mean, c·I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    /// Covariance scale `c`.
    pub scale: f64,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, scale: f64) -> Result<Self> {
        let spec = GaussianSpec { mean, scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() {
            return Err(Error::invalid("Gaussian mean must have dimension at least 1"));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("Gaussian mean must be finite"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::invalid(format!("covariance scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_count(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    Ok(())
}

pub fn sample_gaussian(spec: &GaussianSpec, m: usize, seed: u64) -> Result<Ensemble> {
    spec.validate()?;
    check_count(m)?;
    let sd = spec.scale.sqrt();
    let mut states = Vec::with_capacity(m * spec.dim());
    for i in 0..m {
        let mut rng = rng::stream(seed, Purpose::Sample, i as u64);
        for mu in &spec.mean {
            let z: f64 = rng.sample(StandardNormal);
            states.push(mu + sd * z);
        }
    }
    Ensemble::new(spec.dim(), states, 0.0)
}

pub fn sample_uniform(domain: &BoxDomain, m: usize, seed: u64) -> Result<Ensemble> {
    check_count(m)?;
    if !domain.fully_bounded() {
        return Err(Error::invalid("uniform sampling needs every coordinate bounded"));
    }
    let mut states = Vec::with_capacity(m * domain.dim());
    for i in 0..m {
        let mut rng = rng::stream(seed, Purpose::Sample, i as u64);
        for k in 0..domain.dim() {
            let (lo, hi) = (domain.lower()[k], domain.upper()[k]);
            let u: f64 = rng.random();
            states.push(lo + (hi - lo) * u);
        }
    }
    Ensemble::new(domain.dim(), states, 0.0)
}

/// Where the reverse process starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDistribution {
    Uniform { domain: BoxDomain },
    Gaussian { mean: Vec<f64>, scale: f64 },
}

impl InitialDistribution {
    pub fn dim(&self) -> usize {
        match self {
            InitialDistribution::Uniform { domain } => domain.dim(),
            InitialDistribution::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn sample(&self, m: usize, seed: u64) -> Result<Ensemble> {
        match self {
            InitialDistribution::Uniform { domain } => sample_uniform(domain, m, seed),
            InitialDistribution::Gaussian { mean, scale } => {
                sample_gaussian(&GaussianSpec { mean: mean.clone(), scale: *scale }, m, seed)
            }
        }
    }
}
