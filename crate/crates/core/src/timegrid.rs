use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measurement instants `0 <= t_1 < ... < t_N = T` over a horizon `T`.
///
/// The reverse process at `t_i` is compared with the forward process at
/// `T - t_i`, so the grid must be closed under that reflection (with `t = 0`
/// standing for the forward initial ensemble).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    instants: Vec<f64>,
}

const TIME_TOL: f64 = 1e-12;

impl TimeGrid {
    /// `n` equally spaced instants `T/n, 2T/n, ..., T`.
    pub fn uniform(horizon: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("time grid needs at least one instant"));
        }
        let instants = (1..=n).map(|i| horizon * i as f64 / n as f64).collect();
        Self::new(horizon, instants)
    }

    pub fn new(horizon: f64, instants: Vec<f64>) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if instants.is_empty() {
            return Err(Error::invalid("time grid needs at least one instant"));
        }
        if instants.windows(2).any(|w| !(w[0] < w[1])) || instants[0] < 0.0 {
            return Err(Error::invalid("measurement instants must be ascending and non-negative"));
        }
        let last = *instants.last().unwrap();
        if (last - horizon).abs() > TIME_TOL * horizon.max(1.0) {
            return Err(Error::invalid("last measurement instant must equal the horizon"));
        }
        let grid = TimeGrid { horizon, instants };
        for &t in &grid.instants {
            let mirror = horizon - t;
            if mirror > TIME_TOL * horizon.max(1.0) && grid.position(mirror).is_none() {
                return Err(Error::invalid(format!(
                    "instant {t} has no mirrored instant {mirror} in the grid"
                )));
            }
        }
        Ok(grid)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn instants(&self) -> &[f64] {
        &self.instants
    }

    pub fn len(&self) -> usize {
        self.instants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instants.is_empty()
    }

    /// Index of the instant equal to `t`, if any.
    pub fn position(&self, t: f64) -> Option<usize> {
        let tol = TIME_TOL * self.horizon.max(1.0);
        self.instants.iter().position(|&s| (s - t).abs() <= tol)
    }

    /// Integration step count and the step index of every instant for step
    /// size `dt`. Fails unless every instant is an integer multiple of `dt`.
    pub fn step_indices(&self, dt: f64) -> Result<(usize, Vec<usize>)> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        let tol = TIME_TOL * self.horizon.max(1.0);
        let to_step = |t: f64| -> Result<usize> {
            let k = (t / dt).round();
            if (k * dt - t).abs() > tol.max(1e-9 * dt) {
                return Err(Error::invalid(format!("instant {t} is not a multiple of dt = {dt}")));
            }
            Ok(k as usize)
        };
        let steps = to_step(self.horizon)?;
        let idx = self.instants.iter().map(|&t| to_step(t)).collect::<Result<Vec<_>>>()?;
        Ok((steps, idx))
    }
}
