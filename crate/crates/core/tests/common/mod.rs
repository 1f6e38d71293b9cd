#![allow(dead_code)]

use diffctl::forward::{simulate_forward, DriftSpec, ForwardTrace};
use diffctl::policy::MlpPolicy;
use diffctl::rng::{stream, Purpose};
use diffctl::systems::ControlAffine;
use diffctl::{BoxDomain, Ensemble, GaussianSpec, InitialDistribution, TimeGrid};
use rand::Rng;

/// Glorot weights plus a random offset on every parameter, so biases are
/// exercised too.
pub fn random_policy(d: usize, m: usize, hidden: &[usize], seed: u64) -> MlpPolicy {
    let mut p = MlpPolicy::for_system(d, m, hidden, seed).unwrap();
    let mut rng = stream(seed, Purpose::Init, 7);
    for v in p.params_mut() {
        *v += rng.random_range(-0.4..0.4);
    }
    p
}

/// OU forward trace of a Gaussian cloud, unconfined.
pub fn ou_forward(mean: Vec<f64>, m: usize, grid: &TimeGrid, dt: f64, seed: u64) -> ForwardTrace {
    let d = mean.len();
    let target = diffctl::sampling::sample_gaussian(&GaussianSpec::new(mean, 0.3).unwrap(), m, seed).unwrap();
    simulate_forward(&target, DriftSpec::Linear { k: 1.0 }, 2f64.sqrt(), &BoxDomain::unbounded(d), dt, grid, seed + 1)
        .unwrap()
}

pub fn standard_initial(d: usize) -> InitialDistribution {
    InitialDistribution::Gaussian { mean: vec![0.0; d], scale: 1.0 }
}

pub fn sample(d: usize, m: usize, seed: u64) -> Ensemble {
    standard_initial(d).sample(m, seed).unwrap()
}

pub fn cost_of(
    p: &MlpPolicy,
    init: &Ensemble,
    sys: &dyn ControlAffine,
    fwd: &ForwardTrace,
    dt: f64,
    bw: f64,
) -> f64 {
    let rev = diffctl::reverse::rollout(init, sys, p, dt, fwd.grid()).unwrap();
    diffctl::reverse::cost(&rev, fwd, &diffctl::KernelConfig::new(bw).unwrap()).unwrap()
}

/// Central finite differences of the cost over every parameter.
pub fn fd_gradient(
    p: &MlpPolicy,
    init: &Ensemble,
    sys: &dyn ControlAffine,
    fwd: &ForwardTrace,
    dt: f64,
    bw: f64,
    h: f64,
) -> Vec<f64> {
    (0..p.num_params())
        .map(|k| {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.params_mut()[k] += h;
            pm.params_mut()[k] -= h;
            (cost_of(&pp, init, sys, fwd, dt, bw) - cost_of(&pm, init, sys, fwd, dt, bw)) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    max_abs(&diff) / max_abs(b).max(1e-300)
}
