//! Driftless control-affine systems `ẋ = Σ_i g_i(x) u_i`, Lie brackets and
//! the bracket-generating (Chow–Rashevsky) rank test.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};

/// A driftless control-affine system with analytic field Jacobians.
///
/// `fields` writes the `d×m` matrix `G(x)` row-major (`g[r*m + i]` is
/// component `r` of `g_i`). `field_jacobians` writes `m` blocks of `d×d`
/// row-major Jacobians, `jac[i*d*d + r*d + c] = ∂g_i^r/∂x_c`.
pub trait ControlAffine: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn fields(&self, x: &[f64], g: &mut [f64]);
    fn field_jacobians(&self, x: &[f64], jac: &mut [f64]);
}

pub type System = Arc<dyn ControlAffine>;

#[derive(Debug, Clone)]
pub struct SingleIntegrator {
    dim: usize,
    name: String,
}

impl SingleIntegrator {
    pub fn new(dim: usize) -> Self {
        SingleIntegrator { dim, name: format!("single_integrator_{dim}") }
    }
}

impl ControlAffine for SingleIntegrator {
    fn name(&self) -> &str {
        &self.name
    }
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn fields(&self, _x: &[f64], g: &mut [f64]) {
        g.fill(0.0);
        for k in 0..self.dim {
            g[k * self.dim + k] = 1.0;
        }
    }
    fn field_jacobians(&self, _x: &[f64], jac: &mut [f64]) {
        jac.fill(0.0);
    }
}

/// `ẋ1 = u1, ẋ2 = u2, ẋ3 = x2 u1, ẋ4 = x3 u1, ẋ5 = x4 u1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Chained5d;

impl ControlAffine for Chained5d {
    fn name(&self) -> &str {
        "chained_5d"
    }
    fn state_dim(&self) -> usize {
        5
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn fields(&self, x: &[f64], g: &mut [f64]) {
        // g1 = (1, 0, x2, x3, x4), g2 = e2
        g.copy_from_slice(&[1.0, 0.0, 0.0, 1.0, x[1], 0.0, x[2], 0.0, x[3], 0.0]);
    }
    fn field_jacobians(&self, _x: &[f64], jac: &mut [f64]) {
        jac.fill(0.0);
        jac[2 * 5 + 1] = 1.0;
        jac[3 * 5 + 2] = 1.0;
        jac[4 * 5 + 3] = 1.0;
    }
}

/// `ẋ1 = u1 cos x3, ẋ2 = u1 sin x3, ẋ3 = u2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unicycle;

impl ControlAffine for Unicycle {
    fn name(&self) -> &str {
        "unicycle"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn fields(&self, x: &[f64], g: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        g.copy_from_slice(&[c, 0.0, s, 0.0, 0.0, 1.0]);
    }
    fn field_jacobians(&self, x: &[f64], jac: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        jac.fill(0.0);
        jac[2] = -s;
        jac[3 + 2] = c;
    }
}

/// Built-in systems by name: `single_integrator_<d>`, `chained_5d`,
/// `unicycle`.
pub fn by_name(name: &str) -> Option<System> {
    match name {
        "chained_5d" => Some(Arc::new(Chained5d)),
        "unicycle" => Some(Arc::new(Unicycle)),
        _ => {
            let d: usize = name.strip_prefix("single_integrator_")?.parse().ok()?;
            (d >= 1).then(|| Arc::new(SingleIntegrator::new(d)) as System)
        }
    }
}

/// Σ_i g_i(x) u_i.
pub fn drift_eval(sys: &dyn ControlAffine, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let (d, m) = (sys.state_dim(), sys.input_dim());
    check_dim(d, x.len())?;
    check_dim(m, u.len())?;
    let mut g = vec![0.0; d * m];
    sys.fields(x, &mut g);
    Ok((0..d).map(|r| (0..m).map(|i| g[r * m + i] * u[i]).sum()).collect())
}

/// Largest relative discrepancy between the analytic field Jacobians and
/// central finite differences of the fields at `x`.
pub fn jacobian_fd_error(sys: &dyn ControlAffine, x: &[f64]) -> f64 {
    let (d, m) = (sys.state_dim(), sys.input_dim());
    let mut jac = vec![0.0; m * d * d];
    sys.field_jacobians(x, &mut jac);
    let mut gp = vec![0.0; d * m];
    let mut gm = vec![0.0; d * m];
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for c in 0..d {
        let h = 1e-6 * (1.0 + x[c].abs());
        xp[c] = x[c] + h;
        sys.fields(&xp, &mut gp);
        xp[c] = x[c] - h;
        sys.fields(&xp, &mut gm);
        xp[c] = x[c];
        for i in 0..m {
            for r in 0..d {
                let fd = (gp[r * m + i] - gm[r * m + i]) / (2.0 * h);
                let an = jac[i * d * d + r * d + c];
                let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1.0);
                worst = worst.max(err);
            }
        }
    }
    worst
}

/// A smooth vector field on `R^d` that can report its Jacobian.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// Row-major `d×d` Jacobian.
    fn jacobian(&self, x: &[f64], out: &mut [f64]);
}

/// Column `i` of a control system, i.e. the field `g_i`.
pub struct InputField {
    sys: System,
    index: usize,
}

impl InputField {
    pub fn new(sys: System, index: usize) -> Result<Self> {
        if index >= sys.input_dim() {
            return Err(Error::invalid(format!("system has no input {index}")));
        }
        Ok(InputField { sys, index })
    }
}

impl VectorField for InputField {
    fn dim(&self) -> usize {
        self.sys.state_dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let (d, m) = (self.sys.state_dim(), self.sys.input_dim());
        let mut g = vec![0.0; d * m];
        self.sys.fields(x, &mut g);
        for r in 0..d {
            out[r] = g[r * m + self.index];
        }
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let (d, m) = (self.sys.state_dim(), self.sys.input_dim());
        let mut jac = vec![0.0; m * d * d];
        self.sys.field_jacobians(x, &mut jac);
        out.copy_from_slice(&jac[self.index * d * d..(self.index + 1) * d * d]);
    }
}

/// `[f, g](x) = J_g(x) f(x) - J_f(x) g(x)`, i.e.
/// `[f,g]^i = Σ_j f^j ∂_j g^i - g^j ∂_j f^i`.
pub fn lie_bracket(f: &dyn VectorField, g: &dyn VectorField, x: &[f64]) -> Result<Vec<f64>> {
    let d = f.dim();
    check_dim(d, g.dim())?;
    check_dim(d, x.len())?;
    let (mut fv, mut gv) = (vec![0.0; d], vec![0.0; d]);
    let (mut jf, mut jg) = (vec![0.0; d * d], vec![0.0; d * d]);
    f.eval(x, &mut fv);
    g.eval(x, &mut gv);
    f.jacobian(x, &mut jf);
    g.jacobian(x, &mut jg);
    Ok((0..d)
        .map(|i| (0..d).map(|j| jg[i * d + j] * fv[j] - jf[i * d + j] * gv[j]).sum())
        .collect())
}

/// The bracket of two fields as a field in its own right. Its Jacobian is
/// taken by central differences of bracket values.
pub struct Bracket {
    f: Arc<dyn VectorField>,
    g: Arc<dyn VectorField>,
}

impl Bracket {
    pub fn new(f: Arc<dyn VectorField>, g: Arc<dyn VectorField>) -> Result<Self> {
        check_dim(f.dim(), g.dim())?;
        Ok(Bracket { f, g })
    }
}

impl VectorField for Bracket {
    fn dim(&self) -> usize {
        self.f.dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let v = lie_bracket(self.f.as_ref(), self.g.as_ref(), x).expect("dimensions checked at construction");
        out.copy_from_slice(&v);
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let (mut vp, mut vm) = (vec![0.0; d], vec![0.0; d]);
        let mut xp = x.to_vec();
        for c in 0..d {
            let h = 1e-5 * (1.0 + x[c].abs());
            xp[c] = x[c] + h;
            self.eval(&xp, &mut vp);
            xp[c] = x[c] - h;
            self.eval(&xp, &mut vm);
            xp[c] = x[c];
            for r in 0..d {
                out[r * d + c] = (vp[r] - vm[r]) / (2.0 * h);
            }
        }
    }
}

/// Singular values below this fraction of the largest count as zero.
pub const RANK_RTOL: f64 = 1e-8;

/// Numerical rank of `V^0 ∪ ... ∪ V^depth` at `x`, where `V^0` are the input
/// fields and `V^k` holds the brackets `[g, h]` of an input field `g` with
/// a field `h` from `V^(k-1)`.
pub fn chow_rashevsky_rank(sys: &System, x: &[f64], depth: usize) -> Result<usize> {
    let d = sys.state_dim();
    check_dim(d, x.len())?;
    let generators: Vec<Arc<dyn VectorField>> = (0..sys.input_dim())
        .map(|i| InputField::new(sys.clone(), i).map(|f| Arc::new(f) as Arc<dyn VectorField>))
        .collect::<Result<_>>()?;
    let mut all: Vec<Arc<dyn VectorField>> = generators.clone();
    let mut level = generators.clone();
    for _ in 0..depth {
        let mut next = Vec::with_capacity(generators.len() * level.len());
        for g in &generators {
            for h in &level {
                next.push(Arc::new(Bracket::new(g.clone(), h.clone())?) as Arc<dyn VectorField>);
            }
        }
        all.extend(next.iter().cloned());
        level = next;
    }
    let mut cols = Vec::with_capacity(all.len() * d);
    let mut v = vec![0.0; d];
    for f in &all {
        f.eval(x, &mut v);
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { what: "bracket field", step: 0 });
        }
        cols.extend_from_slice(&v);
    }
    Ok(numerical_rank(&DMatrix::from_column_slice(d, all.len(), &cols)))
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * max).count()
}
