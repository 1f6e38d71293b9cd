//! Experiment configuration files.
//!
//! One JSON document describes a whole experiment: the system, the forward
//! noising process, training and evaluation. Unknown keys are rejected.
//! Every random stream is derived from the single master `seed`.

use std::path::{Path, PathBuf};

use diffctl::forward::DriftSpec;
use diffctl::policy::{AdamConfig, MlpPolicy};
use diffctl::reverse::{EvalConfig, TrainConfig};
use diffctl::rng::{derive_seed, Purpose};
use diffctl::systems::{by_name, System};
use diffctl::{BoxDomain, InitialDistribution, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub system: String,
    pub seed: u64,
    pub horizon: f64,
    /// Number of measurement instants `N`.
    pub measurements: usize,
    /// Ensemble size `M`, shared by the forward and the reverse process.
    pub particles: usize,
    /// Confinement box of the forward process; `null` bounds are open.
    pub domain: BoxDomain,
    pub target: InitialDistribution,
    pub initial: InitialDistribution,
    pub forward: ForwardSection,
    pub train: TrainSection,
    pub policy: PolicySection,
    pub eval: EvalSection,
    /// Run directory used when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardSection {
    pub drift: DriftSpec,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub dt: f64,
}

fn default_sigma() -> f64 {
    std::f64::consts::SQRT_2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub dt: f64,
    /// Kernel bandwidth; defaults to 0.2 × the mean half-width of the box.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub particles: usize,
    /// Seed of the evaluation samples; derived from the master seed if absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// `eval` exits with status 1 when the final KL exceeds this.
    #[serde(default)]
    pub max_final_kl: Option<f64>,
}

/// Seeds of the independent random consumers of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub target: u64,
    pub forward: u64,
    pub init: u64,
    pub train: u64,
    pub eval: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Fills defaults and checks consistency.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        let usage = |e: diffctl::Error| CliError::Usage(e.to_string());
        let sys = self.system()?;
        let d = sys.state_dim();
        let dims = [
            ("domain", self.domain.dim()),
            ("target", self.target.dim()),
            ("initial", self.initial.dim()),
        ];
        for (what, got) in dims {
            if got != d {
                return Err(CliError::Usage(format!("{what} has dimension {got}, system {} has {d}", self.system)));
            }
        }
        if self.particles == 0 || self.measurements == 0 || self.eval.particles == 0 {
            return Err(CliError::Usage("particles, measurements and eval.particles must be at least 1".into()));
        }
        if self.policy.hidden.contains(&0) {
            return Err(CliError::Usage("hidden layer widths must be positive".into()));
        }
        if !(self.forward.sigma.is_finite() && self.forward.sigma >= 0.0) {
            return Err(CliError::Usage(format!("forward.sigma must be non-negative, got {}", self.forward.sigma)));
        }
        self.forward.drift.validate().map_err(usage)?;
        if self.train.bandwidth.is_none() {
            let w = self.domain.mean_half_width().ok_or_else(|| {
                CliError::Usage("train.bandwidth is required when the domain has no bounded axis".into())
            })?;
            self.train.bandwidth = Some(0.2 * w);
        }
        let grid = self.grid()?;
        grid.step_indices(self.forward.dt).map_err(usage)?;
        self.train_config().validate().map_err(usage)?;
        grid.step_indices(self.train.dt).map_err(usage)?;
        if let Some(k) = self.eval.max_final_kl {
            if !k.is_finite() {
                return Err(CliError::Usage("eval.max_final_kl must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn system(&self) -> Result<System, CliError> {
        by_name(&self.system).ok_or_else(|| CliError::Usage(format!("unknown system {:?}", self.system)))
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::uniform(self.horizon, self.measurements).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn bandwidth(&self) -> f64 {
        self.train.bandwidth.expect("resolved config has a bandwidth")
    }

    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            target: derive_seed(s, Purpose::Sample, 0),
            forward: derive_seed(s, Purpose::ForwardNoise, 0),
            init: derive_seed(s, Purpose::Init, 0),
            train: derive_seed(s, Purpose::Epoch, 0),
            eval: self.eval.seed.unwrap_or_else(|| derive_seed(s, Purpose::Sample, 1)),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            particles: self.particles,
            dt: self.train.dt,
            horizon: self.horizon,
            measurements: self.measurements,
            bandwidth: self.train.bandwidth.unwrap_or(f64::NAN),
            seed: self.seeds().train,
            adam: self.train.adam,
            initial: self.initial.clone(),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            particles: self.eval.particles,
            dt: self.train.dt,
            horizon: self.horizon,
            bandwidth: self.bandwidth(),
            seed: self.seeds().eval,
        }
    }

    pub fn layer_sizes(&self) -> Result<Vec<usize>, CliError> {
        let sys = self.system()?;
        let mut sizes = vec![sys.state_dim() + 1];
        sizes.extend_from_slice(&self.policy.hidden);
        sizes.push(sys.input_dim());
        Ok(sizes)
    }

    pub fn initial_policy(&self) -> Result<MlpPolicy, CliError> {
        let sys = self.system()?;
        MlpPolicy::for_system(sys.state_dim(), sys.input_dim(), &self.policy.hidden, self.seeds().init)
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "name": "t", "system": "single_integrator_2", "seed": 1, "horizon": 1.0,
        "measurements": 4, "particles": 10,
        "domain": {"lower": [-1, -1], "upper": [1, 1]},
        "target": {"kind": "gaussian", "mean": [0, 0], "scale": 0.1},
        "initial": {"kind": "uniform", "domain": {"lower": [-1, -1], "upper": [1, 1]}},
        "forward": {"drift": {"kind": "zero"}, "dt": 0.05},
        "train": {"epochs": 2, "dt": 0.05},
        "policy": {"hidden": [4]},
        "eval": {"particles": 20}
    }"#;

    #[test]
    fn defaults_are_filled() {
        let cfg = RunConfig::from_json(BASE).unwrap();
        assert!((cfg.bandwidth() - 0.2).abs() < 1e-15);
        assert_eq!(cfg.forward.sigma, std::f64::consts::SQRT_2);
        assert_eq!(cfg.train.adam, AdamConfig::default());
        assert_eq!(cfg.layer_sizes().unwrap(), vec![3, 4, 2]);
        let echo = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(echo, cfg);

        let partial = BASE.replace("\"epochs\": 2,", "\"epochs\": 2, \"adam\": {\"lr\": 0.01},");
        let adam = RunConfig::from_json(&partial).unwrap().train.adam;
        assert_eq!(adam, AdamConfig { lr: 0.01, ..AdamConfig::default() });
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            BASE.replace("\"epochs\": 2", "\"epochs\": 0"),
            BASE.replace("\"seed\": 1", "\"seed\": 1, \"sede\": 2"),
            BASE.replace("single_integrator_2", "unicycle"),
            BASE.replace("\"dt\": 0.05}", "\"dt\": 0.07}"),
            BASE.replace("\"hidden\": [4]", "\"hidden\": [0]"),
            BASE.replace("\"upper\": [1, 1]}", "\"upper\": [null, null]}").replace("\"lower\": [-1, -1]", "\"lower\": [null, null]"),
        ];
        for (i, text) in bad.iter().enumerate() {
            assert!(RunConfig::from_json(text).is_err(), "case {i} accepted");
        }
    }

    #[test]
    fn seeds_are_distinct() {
        let s = RunConfig::from_json(BASE).unwrap().seeds();
        let all = [s.target, s.forward, s.init, s.train, s.eval];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
