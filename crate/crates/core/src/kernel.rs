//! Gaussian smoothing kernel `K_δ(r) = (2πδ²)^(-d/2) exp(-|r|²/(2δ²))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    bandwidth: f64,
}

impl KernelConfig {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::invalid(format!("kernel bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KernelConfig { bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Exponent `-|r|²/(2δ²)` of the unnormalized kernel.
    #[inline]
    pub(crate) fn log_unnormalized(&self, sq_dist: f64) -> f64 {
        -0.5 * sq_dist / (self.bandwidth * self.bandwidth)
    }

    /// `ln (2πδ²)^(-d/2)`.
    pub fn log_normalizer(&self, dim: usize) -> f64 {
        -0.5 * dim as f64 * (2.0 * std::f64::consts::PI * self.bandwidth * self.bandwidth).ln()
    }

    pub fn eval(&self, r: &[f64]) -> Result<f64> {
        if r.is_empty() {
            return Err(Error::invalid("kernel argument must have dimension at least 1"));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("kernel argument must be finite"));
        }
        let sq: f64 = r.iter().map(|v| v * v).sum();
        Ok((self.log_normalizer(r.len()) + self.log_unnormalized(sq)).exp())
    }
}
