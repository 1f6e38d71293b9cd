//! Cell-centered tensor grids, scalar fields on them, and the explicit heat
//! flow with zero-flux or periodic faces.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    ZeroFlux,
    Periodic,
}

/// Box `∏ [lower_j, upper_j]` split into `cells_j` equal cells per axis.
/// Linear cell indices are row-major, the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    cells: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    boundary: Vec<Boundary>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
}

impl Grid {
    pub fn new(cells: Vec<usize>, lower: Vec<f64>, upper: Vec<f64>, boundary: Vec<Boundary>) -> Result<Arc<Self>> {
        let k = cells.len();
        if !(2..=3).contains(&k) {
            return Err(Error::invalid(format!("grids are 2-D or 3-D, got {k} axes")));
        }
        check_len(k, lower.len())?;
        check_len(k, upper.len())?;
        check_len(k, boundary.len())?;
        for j in 0..k {
            let min = if boundary[j] == Boundary::Periodic { 3 } else { 2 };
            if cells[j] < min {
                return Err(Error::invalid(format!("axis {j} needs at least {min} cells")));
            }
            if !(lower[j].is_finite() && upper[j].is_finite() && lower[j] < upper[j]) {
                return Err(Error::invalid(format!("axis {j} has bad extent [{}, {}]", lower[j], upper[j])));
            }
        }
        let spacing = (0..k).map(|j| (upper[j] - lower[j]) / cells[j] as f64).collect();
        let mut strides = vec![1; k];
        for j in (0..k - 1).rev() {
            strides[j] = strides[j + 1] * cells[j + 1];
        }
        Ok(Arc::new(Grid { cells, lower, upper, boundary, spacing, strides }))
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn boundary(&self) -> &[Boundary] {
        &self.boundary
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Position of cell `c` along `axis`.
    #[inline]
    pub fn coord(&self, c: usize, axis: usize) -> usize {
        (c / self.strides[axis]) % self.cells[axis]
    }

    pub fn center(&self, c: usize, out: &mut [f64]) {
        for j in 0..self.dim() {
            out[j] = self.lower[j] + (self.coord(c, j) as f64 + 0.5) * self.spacing[j];
        }
    }

    /// Neighbor of `c` one cell up `axis`, wrapping on periodic axes. `None`
    /// across a zero-flux face.
    #[inline]
    pub fn up(&self, c: usize, axis: usize) -> Option<usize> {
        let i = self.coord(c, axis);
        if i + 1 < self.cells[axis] {
            Some(c + self.strides[axis])
        } else if self.boundary[axis] == Boundary::Periodic {
            Some(c + self.strides[axis] - self.cells[axis] * self.strides[axis])
        } else {
            None
        }
    }

    #[inline]
    pub fn down(&self, c: usize, axis: usize) -> Option<usize> {
        let i = self.coord(c, axis);
        if i > 0 {
            Some(c - self.strides[axis])
        } else if self.boundary[axis] == Boundary::Periodic {
            Some(c + (self.cells[axis] - 1) * self.strides[axis])
        } else {
            None
        }
    }

    /// Largest stable step of explicit heat stepping, `1 / (2 Σ 1/h_j²)`.
    pub fn heat_stability_bound(&self) -> f64 {
        0.5 / self.spacing.iter().map(|h| 1.0 / (h * h)).sum::<f64>()
    }

    /// The same box with every axis refined `factor` times.
    pub fn refined(&self, factor: usize) -> Result<Arc<Self>> {
        Grid::new(
            self.cells.iter().map(|n| n * factor).collect(),
            self.lower.clone(),
            self.upper.clone(),
            self.boundary.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        check_len(grid.len(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid values must be finite"));
        }
        Ok(GridField { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        GridField { grid, values: vec![0.0; n] }
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|c| {
                grid.center(c, &mut x);
                f(&x)
            })
            .collect();
        Self::new(grid, values)
    }

    pub(crate) fn from_raw(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        GridField { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `Σ values · cell volume`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Scaled to unit mass.
    pub fn normalized(&self) -> Result<Self> {
        let m = self.mass();
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::invalid(format!("cannot normalize a field of mass {m}")));
        }
        Ok(GridField { grid: self.grid.clone(), values: self.values.iter().map(|v| v / m).collect() })
    }

    /// Checks the density invariants: non-negative with unit mass.
    pub fn check_density(&self) -> Result<()> {
        if self.min() < 0.0 {
            return Err(Error::invalid(format!("density has negative value {}", self.min())));
        }
        if (self.mass() - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("density has mass {}", self.mass())));
        }
        Ok(())
    }

    /// Discrete `L²` norm `(Σ v² · cell volume)^½`.
    pub fn l2_norm(&self) -> f64 {
        l2(&self.values, self.grid.cell_volume())
    }

    pub fn l2_distance(&self, other: &GridField) -> f64 {
        let d: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        l2(&d, self.grid.cell_volume())
    }

    /// CSV with one row per cell: center coordinates then the value.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let k = self.grid.dim();
        let mut header: Vec<String> = (1..=k).map(|j| format!("x{j}")).collect();
        header.push("value".into());
        wr.write_record(&header)?;
        let mut x = vec![0.0; k];
        for (c, v) in self.values.iter().enumerate() {
            self.grid.center(c, &mut x);
            wr.write_record(x.iter().chain(std::iter::once(v)).map(|v| format!("{v:?}")))?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn l2(v: &[f64], vol: f64) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() * vol).sqrt()
}

/// Finite-volume Laplacian: face fluxes `(p_up - p)/h` summed per cell, no
/// flux through zero-flux faces.
pub fn laplacian_values(grid: &Grid, p: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for j in 0..grid.dim() {
        let ih2 = 1.0 / (grid.spacing[j] * grid.spacing[j]);
        for c in 0..grid.len() {
            if let Some(u) = grid.up(c, j) {
                let flux = (p[u] - p[c]) * ih2;
                out[c] += flux;
                out[u] -= flux;
            }
        }
    }
}

pub fn laplacian(p: &GridField) -> GridField {
    let mut out = vec![0.0; p.values.len()];
    laplacian_values(&p.grid, &p.values, &mut out);
    GridField::from_raw(p.grid.clone(), out)
}

/// One explicit Euler step of `∂_t p = Δp`.
pub fn heat_step(p: &GridField, dt: f64) -> Result<GridField> {
    let bound = p.grid.heat_stability_bound();
    if !(dt > 0.0 && dt <= bound) {
        return Err(Error::Unstable { dt, bound });
    }
    let mut lap = laplacian(p);
    for (l, v) in lap.values.iter_mut().zip(&p.values) {
        *l = v + dt * *l;
    }
    Ok(lap)
}

/// Smooth positive target densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetDensity {
    /// `floor + ∏_j b_j(x_j)`, normalized: Gaussian factors on zero-flux
    /// axes, von Mises factors on periodic axes.
    Bump { center: Vec<f64>, width: Vec<f64>, floor: f64 },
}

impl TargetDensity {
    pub fn sample(&self, grid: &Arc<Grid>) -> Result<GridField> {
        let TargetDensity::Bump { center, width, floor } = self;
        check_len(grid.dim(), center.len())?;
        check_len(grid.dim(), width.len())?;
        if !(*floor > 0.0) || width.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("bump needs a positive floor and positive widths"));
        }
        let g = grid.clone();
        let raw = GridField::from_fn(grid.clone(), |x| {
            let bump: f64 = (0..x.len())
                .map(|j| match g.boundary()[j] {
                    Boundary::ZeroFlux => (-(x[j] - center[j]).powi(2) / (2.0 * width[j] * width[j])).exp(),
                    Boundary::Periodic => {
                        let period = g.upper()[j] - g.lower()[j];
                        let kappa = (period / (2.0 * std::f64::consts::PI * width[j])).powi(2);
                        (kappa * ((2.0 * std::f64::consts::PI * (x[j] - center[j]) / period).cos() - 1.0)).exp()
                    }
                })
                .product();
            floor + bump
        })?;
        raw.normalized()
    }
}
