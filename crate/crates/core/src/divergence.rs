//! Sample-based discrepancies between particle ensembles.
//!
//! The main estimator is the kernel-regularized ("blob") KL divergence
//!
//! ```text
//! KL(Q|R) ≈ (1/M) Σ_i log( (1/M) Σ_j K_δ(x_i - x_j) / (1/M') Σ_j K_δ(x_i - y_j) )
//! ```
//!
//! with `x ∈ Q` (`M` particles) and `y ∈ R` (`M'` particles). Kernel sums
//! are evaluated in log-sum-exp form so that distant clouds do not underflow.

use rayon::prelude::*;

use crate::ensemble::Ensemble;
use crate::error::{check_dim, Error, Result};
use crate::kernel::KernelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobKlReport {
    pub value: f64,
    /// `∂value/∂x_i` for every particle of `Q`, row-major `M×d`.
    pub per_particle_grad: Option<Vec<f64>>,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Fills `out` with `exp(e_j - max)` for the log-kernels `e_j` between `x`
/// and the cloud, and returns `(max, Σ out)`.
fn shifted_kernels(x: &[f64], cloud: &Ensemble, cfg: &KernelConfig, out: &mut Vec<f64>) -> (f64, f64) {
    out.clear();
    let mut max = f64::NEG_INFINITY;
    for y in cloud.particles() {
        let e = cfg.log_unnormalized(sq_dist(x, y));
        max = max.max(e);
        out.push(e);
    }
    let mut s = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    (max, s)
}

struct Row {
    log_own: f64,
    log_ref: f64,
    own_sum: f64,
    /// Shifted own kernels, kept only when a gradient is wanted.
    own: Vec<f64>,
    /// Contribution of the reference cloud to `∂/∂x_a`, unscaled.
    ref_grad: Vec<f64>,
}

pub fn kl_blob(q: &Ensemble, r: &Ensemble, cfg: &KernelConfig, with_grad: bool) -> Result<BlobKlReport> {
    check_dim(q.dim(), r.dim())?;
    let m = q.len();
    let d = q.dim();
    let inv_bw2 = 1.0 / (cfg.bandwidth() * cfg.bandwidth());
    let (ln_m, ln_mr) = ((m as f64).ln(), (r.len() as f64).ln());
    let rows: Vec<Row> = (0..m)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(m.max(r.len())),
            |buf, a| {
                let xa = q.particle(a);
                let (max_r, s_r) = shifted_kernels(xa, r, cfg, buf);
                let mut ref_grad = Vec::new();
                if with_grad {
                    ref_grad = vec![0.0; d];
                    for (y, &k) in r.particles().zip(buf.iter()) {
                        let v = k / s_r;
                        for c in 0..d {
                            ref_grad[c] += v * (xa[c] - y[c]) * inv_bw2;
                        }
                    }
                }
                let (max_q, s_q) = shifted_kernels(xa, q, cfg, buf);
                Row {
                    log_own: max_q + s_q.ln() - ln_m,
                    log_ref: max_r + s_r.ln() - ln_mr,
                    own_sum: s_q,
                    own: if with_grad { buf.clone() } else { Vec::new() },
                    ref_grad,
                }
            },
        )
        .collect();
    // Sequential sum keeps the value independent of the thread count.
    let value = rows.iter().map(|w| w.log_own - w.log_ref).sum::<f64>() / m as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { what: "blob KL", step: 0 });
    }
    if !with_grad {
        return Ok(BlobKlReport { value, per_particle_grad: None });
    }

    // The log-kernel is symmetric, so row j's shifted entry for a gives
    // exp(e_aj - log_own_j - ln M) without another exponential.
    let grad: Vec<f64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|a| {
            let xa = q.particle(a);
            let ra = &rows[a];
            let mut g = ra.ref_grad.clone();
            for (j, xj) in q.particles().enumerate() {
                let w = ra.own[j] / ra.own_sum + rows[j].own[a] / rows[j].own_sum;
                for c in 0..d {
                    g[c] -= w * (xa[c] - xj[c]) * inv_bw2;
                }
            }
            g.into_iter().map(move |v| v / m as f64)
        })
        .collect();
    Ok(BlobKlReport { value, per_particle_grad: Some(grad) })
}

/// Exact 2-Wasserstein distance between equal-size empirical measures, via
/// an `O(M³)` assignment solve.
pub fn wasserstein2_exact(p: &Ensemble, q: &Ensemble) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "exact W2 needs equal particle counts, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let n = p.len();
    let cost: Vec<f64> = p.particles().flat_map(|a| q.particles().map(move |b| sq_dist(a, b))).collect();
    let assignment = min_cost_assignment(n, &cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total.max(0.0) / n as f64).sqrt())
}

/// Hungarian algorithm with row/column potentials (shortest augmenting
/// paths). `cost` is row-major `n×n`; returns the column assigned to each row.
pub fn min_cost_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based internals; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Euclidean (Frobenius) norm of the difference of the empirical raw moments
/// of order 1 (mean vector) or 2 (matrix `E[x xᵀ]`).
pub fn moment_diff(p: &Ensemble, q: &Ensemble, order: u32) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let d = p.dim();
    let raw = |e: &Ensemble| -> Vec<f64> {
        let n = e.len() as f64;
        match order {
            1 => e.mean(),
            _ => {
                let mut s = vec![0.0; d * d];
                for x in e.particles() {
                    for a in 0..d {
                        for b in 0..d {
                            s[a * d + b] += x[a] * x[b];
                        }
                    }
                }
                s.iter().map(|v| v / n).collect()
            }
        }
    };
    if !(order == 1 || order == 2) {
        return Err(Error::invalid(format!("moment order must be 1 or 2, got {order}")));
    }
    Ok(raw(p).iter().zip(raw(q)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}
