//! Solvers for `𝒜` on the mean-zero subspace, the orthogonal complement of
//! its kernel `span{1}`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::grid::GridField;
use crate::operator::SubLaplacian;
use crate::sparse::SparseOperator;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgOptions {
    /// Target `|Aφ - f| / |f|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions { tol: 1e-10, max_iter: 20_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CgReport {
    pub iterations: usize,
    /// True residual `|Aφ - f| / |f|` of the returned solution.
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Jacobi-preconditioned conjugate gradients for `Aφ = f` with `Σφ = 0`,
/// where `A` is symmetric with kernel `span{1}`. The mean of `f` is
/// discarded, and the preconditioned residual is projected back onto the
/// mean-zero subspace every iteration.
pub fn cg_zero_mean(a: &SparseOperator, f: &[f64], x0: Option<&[f64]>, opts: &CgOptions) -> Result<(Vec<f64>, CgReport)> {
    let n = a.rows();
    check_len(n, f.len())?;
    let mut f = f.to_vec();
    remove_mean(&mut f);
    let f = &f[..];
    let fnorm = dot(f, f).sqrt();
    if fnorm == 0.0 {
        return Ok((vec![0.0; n], CgReport { iterations: 0, relative_residual: 0.0 }));
    }
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut x = match x0 {
        Some(x0) => {
            check_len(n, x0.len())?;
            let mut x = x0.to_vec();
            remove_mean(&mut x);
            x
        }
        None => vec![0.0; n],
    };
    let mut ax = vec![0.0; n];
    a.apply(&x, &mut ax);
    let mut r: Vec<f64> = f.iter().zip(&ax).map(|(f, a)| f - a).collect();
    let precondition = |r: &[f64], z: &mut [f64]| {
        for ((z, r), d) in z.iter_mut().zip(r).zip(&inv_diag) {
            *z = r * d;
        }
        remove_mean(z);
    };
    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    while dot(&r, &r).sqrt() > opts.tol * fnorm && iterations < opts.max_iter {
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
    }
    remove_mean(&mut x);
    a.apply(&x, &mut ax);
    let res = ax.iter().zip(f).map(|(a, f)| (a - f) * (a - f)).sum::<f64>().sqrt() / fnorm;
    let report = CgReport { iterations, relative_residual: res };
    if !(res <= opts.tol.max(1e-14) * 10.0) {
        return Err(Error::NoConvergence { iterations, residual: res });
    }
    Ok((x, report))
}

/// Solves `𝒜φ = f` for the zero-mean `φ`. `f` must have zero grid mean up
/// to `1e-10` (relative to its largest entry); the mean is then removed.
pub fn solve_poisson_zero_mean(
    op: &SubLaplacian,
    f: &GridField,
    x0: Option<&GridField>,
    opts: &CgOptions,
) -> Result<(GridField, CgReport)> {
    check_len(op.grid().len(), f.values().len())?;
    let scale = f.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if f.mean().abs() > 1e-10 * scale.max(1.0) {
        return Err(Error::invalid(format!("right-hand side has mean {:e}", f.mean())));
    }
    let (phi, rep) = cg_zero_mean(op.operator(), f.values(), x0.map(|x| x.values()), opts)?;
    Ok((GridField::from_raw(op.grid().clone(), phi), rep))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralReport {
    /// Smallest eigenvalue on the mean-zero subspace.
    pub lambda2: f64,
    pub lambda_max: f64,
    /// `|𝒜·1|_∞`.
    pub kernel_residual: f64,
    pub lanczos_steps: usize,
}

/// Largest eigenvalue of a symmetric map restricted to the mean-zero
/// subspace, by Lanczos with full reorthogonalization.
fn lanczos_top(n: usize, steps: usize, mut op: impl FnMut(&[f64], &mut [f64]) -> Result<()>) -> Result<f64> {
    let steps = steps.min(n - 1).max(1);
    // deterministic, generic start vector
    let mut v: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.5).collect();
    remove_mean(&mut v);
    let nv = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let mut basis = vec![v];
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut w = vec![0.0; n];
    for k in 0..steps {
        op(&basis[k], &mut w)?;
        remove_mean(&mut w);
        let a = dot(&w, &basis[k]);
        alpha.push(a);
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(x, q)| *x -= c * q);
            }
        }
        remove_mean(&mut w);
        let b = dot(&w, &w).sqrt();
        if b < 1e-13 * a.abs().max(1e-300) || k + 1 == steps {
            break;
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    let m = alpha.len();
    let t = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i == j + 1 {
            beta[j]
        } else if j == i + 1 {
            beta[i]
        } else {
            0.0
        }
    });
    Ok(SymmetricEigen::new(t).eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// `λ₂` by Lanczos on `𝒜⁻¹` (inner CG solves) and `λ_max` by Lanczos on
/// `𝒜`, both on the mean-zero subspace.
pub fn spectral_gap(a: &SparseOperator, steps: usize) -> Result<SpectralReport> {
    let n = a.rows();
    if n < 3 {
        return Err(Error::invalid("operator too small for a spectral estimate"));
    }
    let ones = vec![1.0; n];
    let kernel_residual = a.mul(&ones)?.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let lambda_max = lanczos_top(n, steps, |x, y| {
        a.apply(x, y);
        Ok(())
    })?;
    let inner = CgOptions { tol: 1e-10, max_iter: 20 * n };
    let inv_top = lanczos_top(n, steps, |x, y| {
        let (s, _) = cg_zero_mean(a, x, None, &inner)?;
        y.copy_from_slice(&s);
        Ok(())
    })?;
    Ok(SpectralReport { lambda2: 1.0 / inv_top, lambda_max, kernel_residual, lanczos_steps: steps })
}
