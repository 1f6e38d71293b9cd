//! Feedforward feedback law `u = π(t, x)` with hand-written reverse-mode
//! differentiation, and the Adam optimizer.
//!
//! The network input is `(t/T, x)`. Hidden layers use `tanh`; the output
//! layer is affine. Parameters are one flat vector, layer by layer, each
//! layer storing its `n_out×n_in` weights row-major followed by `n_out`
//! biases.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    /// Post-activation values per layer, `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl MlpPolicy {
    /// Zero weights and biases.
    pub fn zeros(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {layer_sizes:?}")));
        }
        let params = vec![0.0; param_count(&layer_sizes)];
        Ok(MlpPolicy { layer_sizes, params })
    }

    /// Glorot-uniform weights and zero biases.
    pub fn glorot(layer_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes)?;
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let mut off = 0;
        for w in p.layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            for v in &mut p.params[off..off + n_in * n_out] {
                *v = rng.random_range(-limit..limit);
            }
            off += (n_in + 1) * n_out;
        }
        Ok(p)
    }

    /// Network for a `d`-state, `m`-input system with the given hidden widths.
    pub fn for_system(state_dim: usize, input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = vec![state_dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(input_dim);
        Self::glorot(sizes, seed)
    }

    pub fn from_params(layer_sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes)?;
        check_dim(p.params.len(), params.len())?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("policy parameters must be finite"));
        }
        p.params = params;
        Ok(p)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// State dimension `d` (the input is `d + 1` wide).
    pub fn state_dim(&self) -> usize {
        self.layer_sizes[0] - 1
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            acts: self.layer_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }

    /// Forward pass into `u`. `s` is normalized time `t/T`.
    pub fn forward(&self, s: f64, x: &[f64], ws: &mut Workspace, u: &mut [f64]) {
        debug_assert_eq!(x.len(), self.state_dim());
        ws.acts[0][0] = s;
        ws.acts[0][1..].copy_from_slice(x);
        let n_layers = self.layer_sizes.len() - 1;
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (w, b) = self.params[off..off + (n_in + 1) * n_out].split_at(n_in * n_out);
            let (prev, next) = ws.acts.split_at_mut(l + 1);
            let (a_in, a_out) = (&prev[l], &mut next[0]);
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(a_in.iter()).map(|(p, q)| p * q).sum::<f64>();
                a_out[o] = if l + 1 < n_layers { z.tanh() } else { z };
            }
            off += (n_in + 1) * n_out;
        }
        u.copy_from_slice(&ws.acts[n_layers]);
    }

    /// Backward pass for the cotangent `ubar`, using activations left in
    /// `ws` by the preceding [`forward`](Self::forward) call. Writes
    /// `ubarᵀ ∂u/∂x` into `grad_x` and adds `ubarᵀ ∂u/∂θ` into `grad_theta`.
    pub fn backward(&self, ubar: &[f64], ws: &mut Workspace, grad_x: &mut [f64], grad_theta: &mut [f64]) {
        let n_layers = self.layer_sizes.len() - 1;
        let Workspace { acts, delta, delta_prev } = ws;
        delta.clear();
        delta.extend_from_slice(ubar);
        let mut off = self.params.len();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            off -= (n_in + 1) * n_out;
            let w = &self.params[off..off + n_in * n_out];
            let (gw, gb) = grad_theta[off..off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
            let a_in = &acts[l];
            delta_prev.clear();
            delta_prev.resize(n_in, 0.0);
            for o in 0..n_out {
                let dz = delta[o];
                if dz == 0.0 {
                    continue;
                }
                gb[o] += dz;
                let row = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for k in 0..n_in {
                    grow[k] += dz * a_in[k];
                    delta_prev[k] += dz * row[k];
                }
            }
            if l > 0 {
                // through tanh of layer l's output
                for (dp, a) in delta_prev.iter_mut().zip(a_in.iter()) {
                    *dp *= 1.0 - a * a;
                }
            }
            std::mem::swap(delta, delta_prev);
        }
        grad_x.copy_from_slice(&delta[1..]);
    }

    pub fn eval(&self, s: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.state_dim(), x.len())?;
        let mut ws = self.workspace();
        let mut u = vec![0.0; self.output_dim()];
        self.forward(s, x, &mut ws, &mut u);
        Ok(u)
    }

    /// `(ubarᵀ ∂u/∂x, ubarᵀ ∂u/∂θ)` at normalized time `s`.
    pub fn vjp(&self, s: f64, x: &[f64], ubar: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.state_dim(), x.len())?;
        check_dim(self.output_dim(), ubar.len())?;
        let mut ws = self.workspace();
        let mut u = vec![0.0; self.output_dim()];
        self.forward(s, x, &mut ws, &mut u);
        let mut gx = vec![0.0; x.len()];
        let mut gt = vec![0.0; self.num_params()];
        self.backward(ubar, &mut ws, &mut gx, &mut gt);
        Ok((gx, gt))
    }

    /// JSON checkpoint `{layer_sizes, activation, params}` with parameters
    /// printed to 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut s = String::with_capacity(24 * self.params.len() + 64);
        s.push_str("{\"layer_sizes\":");
        s.push_str(&serde_json::to_string(&self.layer_sizes).expect("usize list serializes"));
        s.push_str(",\"activation\":\"tanh\",\"params\":[");
        for (i, v) in self.params.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{v:.16e}").expect("writing to a String cannot fail");
        }
        s.push_str("]}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.activation != "tanh" {
            return Err(Error::invalid(format!("unsupported activation {:?}", ck.activation)));
        }
        Self::from_params(ck.layer_sizes, ck.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    layer_sizes: Vec<usize>,
    activation: String,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lr.is_finite();
        if !ok {
            return Err(Error::invalid(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves both
/// `theta` and `state` untouched.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    check_dim(theta.len(), grad.len())?;
    check_dim(theta.len(), state.m.len())?;
    check_dim(theta.len(), state.v.len())?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::invalid(format!("non-finite gradient component {i}")));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..theta.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        theta[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpPolicy::zeros(vec![3, 8, 8, 2]).unwrap();
        assert_eq!(p.num_params(), 4 * 8 + 9 * 8 + 9 * 2);
        assert_eq!(p.eval(0.3, &[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
        let (gx, _) = p.vjp(0.3, &[1.0, -2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(gx, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_layer_selects_coordinates() {
        // input (s, x1, x2, x3) -> (x3, x1)
        let w = vec![0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let params = [w, vec![0.0, 0.0]].concat();
        let p = MlpPolicy::from_params(vec![4, 2], params).unwrap();
        assert_eq!(p.eval(0.9, &[1.5, -2.0, 7.0]).unwrap(), vec![7.0, 1.5]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(MlpPolicy::zeros(vec![3]).is_err());
        assert!(MlpPolicy::zeros(vec![3, 0, 2]).is_err());
        let p = MlpPolicy::zeros(vec![3, 2]).unwrap();
        assert!(p.eval(0.0, &[1.0]).is_err());
        assert!(p.vjp(0.0, &[1.0, 2.0], &[1.0]).is_err());
        assert!(MlpPolicy::from_params(vec![3, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let p = MlpPolicy::glorot(vec![3, 5, 2], 1).unwrap();
        let (gx, gt) = p.vjp(0.5, &[0.2, 0.1], &[0.0, 0.0]).unwrap();
        assert!(gx.iter().chain(&gt).all(|&g| g == 0.0));
    }

    /// Randomizes biases too, so every parameter has a nonzero effect.
    fn random_net(sizes: Vec<usize>, seed: u64) -> MlpPolicy {
        let mut p = MlpPolicy::glorot(sizes, seed).unwrap();
        let mut rng = rng::stream(seed, Purpose::Init, 99);
        for v in p.params_mut() {
            *v += rand::Rng::random_range(&mut rng, -0.3..0.3);
        }
        p
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let den = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
        num / den.max(1e-12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn vjp_matches_finite_differences(
            seed in 0u64..10_000,
            hidden in proptest::collection::vec(1usize..6, 0..3),
            s in 0.0f64..1.0,
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            ubar in proptest::collection::vec(-1.0f64..1.0, 2),
        ) {
            let sizes = [vec![4], hidden, vec![2]].concat();
            let p = random_net(sizes, seed);
            let (gx, gt) = p.vjp(s, &x, &ubar).unwrap();
            let f = |q: &MlpPolicy, x: &[f64]| -> f64 {
                q.eval(s, x).unwrap().iter().zip(&ubar).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            let fd_x: Vec<f64> = (0..3).map(|k| {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[k] += h;
                xm[k] -= h;
                (f(&p, &xp) - f(&p, &xm)) / (2.0 * h)
            }).collect();
            let fd_t: Vec<f64> = (0..p.num_params()).map(|k| {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.params_mut()[k] += h;
                pm.params_mut()[k] -= h;
                (f(&pp, &x) - f(&pm, &x)) / (2.0 * h)
            }).collect();
            prop_assert!(rel_err(&gx, &fd_x) <= 1e-6, "x: {:?} vs {:?}", gx, fd_x);
            prop_assert!(rel_err(&gt, &fd_t) <= 1e-6);
        }

        #[test]
        fn checkpoint_round_trip_is_lossless(seed in 0u64..10_000) {
            let p = random_net(vec![3, 7, 4, 2], seed);
            let back = MlpPolicy::from_json(&p.to_json()).unwrap();
            prop_assert_eq!(back.params(), p.params());
            prop_assert_eq!(back.layer_sizes(), p.layer_sizes());
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(MlpPolicy::from_json("{\"layer_sizes\":[2,1],").is_err());
        assert!(MlpPolicy::from_json(r#"{"layer_sizes":[2,1],"activation":"relu","params":[0,0,0]}"#).is_err());
        assert!(MlpPolicy::from_json(r#"{"layer_sizes":[2,1],"activation":"tanh","params":[0,0]}"#).is_err());
        assert!(MlpPolicy::from_json(r#"{"layer_sizes":[2,1],"activation":"tanh","params":[0,0,0],"x":1}"#).is_err());
    }

    #[test]
    fn adam_examples() {
        let mut theta = vec![0.5, -1.0];
        let mut st = AdamState::new(2, AdamConfig::default());
        adam_step(&mut theta, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(theta, vec![0.5, -1.0]);

        let mut theta = vec![0.0];
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut st = AdamState::new(1, cfg);
        adam_step(&mut theta, &[1.0], &mut st).unwrap();
        assert!((theta[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);

        let (mut t1, mut t2) = (vec![0.3, 0.2], vec![0.3, 0.2]);
        let (mut s1, mut s2) = (AdamState::new(2, cfg), AdamState::new(2, cfg));
        for _ in 0..3 {
            adam_step(&mut t1, &[0.7, -0.1], &mut s1).unwrap();
            adam_step(&mut t2, &[0.7, -0.1], &mut s2).unwrap();
        }
        assert_eq!((t1, s1), (t2, s2));
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut theta = vec![1.0, 2.0];
        let mut st = AdamState::new(2, AdamConfig::default());
        assert!(adam_step(&mut theta, &[0.1, f64::NAN], &mut st).is_err());
        assert_eq!(theta, vec![1.0, 2.0]);
        assert_eq!(st.step, 0);
    }
}
