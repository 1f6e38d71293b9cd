//! Discretization of the input fields `Y_i = g_i·∇` and the sub-Laplacian
//! `𝒜 = Σ_i Y_i* Y_i` on a grid.
//!
//! A field that only ever points along one grid axis is differenced across
//! cell faces, `(Y φ)_f = g^j(f) (φ_up - φ)/h_j`, one row per face that can
//! carry flux. For coordinate fields this makes `𝒜` the usual compact
//! Neumann Laplacian. Other fields are differenced at cell centers with
//! central differences and mirror ghost cells at zero-flux faces. Either
//! way `𝒜 = Σ DᵢᵀDᵢ` is a Gram matrix, so symmetry, positive
//! semidefiniteness and `𝒜·1 = 0` hold exactly.

use std::sync::Arc;

use diffctl::systems::VectorField;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid::{Boundary, Grid};
use crate::sparse::SparseOperator;

/// What to do with a field that crosses a zero-flux face.
///
/// The continuous theory asks the boundary to be non-characteristic for
/// the fields, which has no direct grid counterpart. `Strict` stands in for
/// it by rejecting any field with a normal component at a zero-flux face;
/// `Natural` accepts such fields and lets the discretization impose zero
/// normal flux.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FacePolicy {
    Strict,
    #[default]
    Natural,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stencil {
    /// One row per flux-carrying face on the `+` side of cell
    /// `face_cells[r]`; `coeff[r]` is the field component at that face.
    Faces { axis: usize, face_cells: Vec<usize>, coeff: Vec<f64> },
    /// One row per cell; `values` holds the field at every center,
    /// row-major `cells × dim`.
    Cells { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteField {
    pub d: SparseOperator,
    pub stencil: Stencil,
}

#[derive(Debug, Clone)]
pub struct SubLaplacian {
    grid: Arc<Grid>,
    a: SparseOperator,
    fields: Vec<DiscreteField>,
}

impl SubLaplacian {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn operator(&self) -> &SparseOperator {
        &self.a
    }

    pub fn fields(&self) -> &[DiscreteField] {
        &self.fields
    }

    /// Exact face fluxes `Σ_i g_i (Y_i φ)` through every `+` face, per axis
    /// and indexed by the lower cell; zero across zero-flux faces. With
    /// these, `-div_h(flux) = 𝒜φ` holds identically.
    pub fn face_fluxes(&self, phi: &[f64]) -> Vec<Vec<f64>> {
        let g = &self.grid;
        let (n, k) = (g.len(), g.dim());
        let mut flux = vec![vec![0.0; n]; k];
        for f in &self.fields {
            let w = f.d.mul(phi).expect("potential lives on the grid");
            match &f.stencil {
                Stencil::Faces { axis, face_cells, coeff } => {
                    for ((&c, &gc), wr) in face_cells.iter().zip(coeff).zip(&w) {
                        flux[*axis][c] += gc * wr;
                    }
                }
                Stencil::Cells { values } => {
                    for j in 0..k {
                        for c in 0..n {
                            if let Some(u) = g.up(c, j) {
                                flux[j][c] += 0.5 * (values[c * k + j] * w[c] + values[u * k + j] * w[u]);
                            }
                        }
                    }
                }
            }
        }
        flux
    }
}

/// Axis the field points along everywhere, if any.
fn single_axis(values: &[f64], k: usize) -> Option<usize> {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-14 * scale.max(1e-300);
    let active: Vec<usize> = (0..k).filter(|&j| values.chunks_exact(k).any(|v| v[j].abs() > tol)).collect();
    match active.as_slice() {
        [j] => Some(*j),
        _ => None,
    }
}

fn check_faces(grid: &Grid, field: &dyn VectorField, index: usize) -> Result<()> {
    let k = grid.dim();
    let (mut x, mut v) = (vec![0.0; k], vec![0.0; k]);
    for c in 0..grid.len() {
        for j in 0..k {
            if grid.boundary()[j] != Boundary::ZeroFlux {
                continue;
            }
            let i = grid.coord(c, j);
            let faces = [(i == 0, grid.lower()[j]), (i + 1 == grid.cells()[j], grid.upper()[j])];
            for (on_face, pos) in faces {
                if !on_face {
                    continue;
                }
                grid.center(c, &mut x);
                x[j] = pos;
                field.eval(&x, &mut v);
                if v[j].abs() > 1e-12 {
                    return Err(Error::invalid(format!(
                        "field {index} has normal component {} at the zero-flux face x{} = {pos}",
                        v[j],
                        j + 1
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn assemble_sub_laplacian(grid: &Arc<Grid>, fields: &[&dyn VectorField], policy: FacePolicy) -> Result<SubLaplacian> {
    if fields.is_empty() {
        return Err(Error::invalid("need at least one field"));
    }
    let (n, k) = (grid.len(), grid.dim());
    let mut out = Vec::with_capacity(fields.len());
    for (idx, field) in fields.iter().enumerate() {
        check_len(k, field.dim())?;
        if policy == FacePolicy::Strict {
            check_faces(grid, *field, idx)?;
        }
        let mut values = vec![0.0; n * k];
        let mut x = vec![0.0; k];
        for c in 0..n {
            grid.center(c, &mut x);
            field.eval(&x, &mut values[c * k..(c + 1) * k]);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("field {idx} is not finite on the grid")));
        }
        let df = match single_axis(&values, k) {
            Some(axis) => face_rows(grid, *field, axis),
            None => cell_rows(grid, values),
        };
        out.push(df);
    }
    let blocks: Vec<SparseOperator> = out.iter().map(|f| f.d.clone()).collect();
    let a = SparseOperator::gram_sum(&blocks);
    Ok(SubLaplacian { grid: grid.clone(), a, fields: out })
}

fn face_rows(grid: &Grid, field: &dyn VectorField, axis: usize) -> DiscreteField {
    let k = grid.dim();
    let h = grid.spacing()[axis];
    let (mut x, mut v) = (vec![0.0; k], vec![0.0; k]);
    let (mut face_cells, mut coeff, mut t) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..grid.len() {
        let Some(u) = grid.up(c, axis) else { continue };
        grid.center(c, &mut x);
        x[axis] += 0.5 * h;
        field.eval(&x, &mut v);
        let r = face_cells.len();
        t.push((r, c, -v[axis] / h));
        t.push((r, u, v[axis] / h));
        face_cells.push(c);
        coeff.push(v[axis]);
    }
    let d = SparseOperator::from_triplets(face_cells.len(), grid.len(), t, false);
    DiscreteField { d, stencil: Stencil::Faces { axis, face_cells, coeff } }
}

fn cell_rows(grid: &Grid, values: Vec<f64>) -> DiscreteField {
    let (n, k) = (grid.len(), grid.dim());
    let mut t = Vec::with_capacity(2 * n * k);
    for c in 0..n {
        for j in 0..k {
            let gj = values[c * k + j];
            if gj == 0.0 {
                continue;
            }
            let s = gj / (2.0 * grid.spacing()[j]);
            // a missing neighbor is a mirror ghost equal to the cell itself
            t.push((c, grid.up(c, j).unwrap_or(c), s));
            t.push((c, grid.down(c, j).unwrap_or(c), -s));
        }
    }
    let d = SparseOperator::from_triplets(n, n, t, false);
    DiscreteField { d, stencil: Stencil::Cells { values } }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffctl::systems::{by_name, InputField};

    fn system_fields(name: &str) -> Vec<InputField> {
        let sys = by_name(name).unwrap();
        (0..sys.input_dim()).map(|i| InputField::new(sys.clone(), i).unwrap()).collect()
    }

    fn refs(f: &[InputField]) -> Vec<&dyn VectorField> {
        f.iter().map(|f| f as &dyn VectorField).collect()
    }

    fn unicycle_grid(n: usize) -> Arc<Grid> {
        Grid::new(
            vec![n, n, n],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 1.0, 2.0 * std::f64::consts::PI],
            vec![Boundary::ZeroFlux, Boundary::ZeroFlux, Boundary::Periodic],
        )
        .unwrap()
    }

    #[test]
    fn coordinate_fields_give_the_neumann_laplacian() {
        let g = Grid::new(vec![5, 4], vec![0.0, 0.0], vec![1.0, 2.0], vec![Boundary::ZeroFlux; 2]).unwrap();
        let f = system_fields("single_integrator_2");
        let s = assemble_sub_laplacian(&g, &refs(&f), FacePolicy::Natural).unwrap();
        let a = s.operator();
        assert!(matches!(s.fields()[0].stencil, Stencil::Faces { axis: 0, .. }));
        let mut lap = vec![0.0; g.len()];
        for c in 0..g.len() {
            let mut e = vec![0.0; g.len()];
            e[c] = 1.0;
            crate::grid::laplacian_values(&g, &e, &mut lap);
            for r in 0..g.len() {
                assert!((a.get(r, c) + lap[r]).abs() < 1e-12, "entry ({r}, {c})");
            }
        }
    }

    #[test]
    fn strict_policy_rejects_normal_components() {
        let g = unicycle_grid(4);
        let f = system_fields("unicycle");
        assert!(assemble_sub_laplacian(&g, &refs(&f), FacePolicy::Strict).is_err());
        // The θ field is tangential to the (x, y) faces.
        assert!(assemble_sub_laplacian(&g, &[&f[1] as &dyn VectorField], FacePolicy::Strict).is_ok());
        assert!(assemble_sub_laplacian(&g, &refs(&f), FacePolicy::Natural).is_ok());
    }

    #[test]
    fn unicycle_operator_structure() {
        let g = unicycle_grid(6);
        let f = system_fields("unicycle");
        let s = assemble_sub_laplacian(&g, &refs(&f), FacePolicy::Natural).unwrap();
        let a = s.operator();
        assert!(a.is_symmetric());
        assert!(a.asymmetry() < 1e-12);
        let ones = vec![1.0; g.len()];
        assert!(a.mul(&ones).unwrap().iter().all(|v| v.abs() < 1e-10));
        let ev = a.to_dense().symmetric_eigenvalues();
        let mut ev: Vec<f64> = ev.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!(ev[0].abs() < 1e-9 && ev[1] > 1e-6, "{:?}", &ev[..3]);
    }

    #[test]
    fn fluxes_reproduce_the_operator() {
        let g = unicycle_grid(5);
        let f = system_fields("unicycle");
        let s = assemble_sub_laplacian(&g, &refs(&f), FacePolicy::Natural).unwrap();
        let phi: Vec<f64> = (0..g.len()).map(|c| ((c * 37) % 11) as f64 * 0.1 - 0.4).collect();
        let ap = s.operator().mul(&phi).unwrap();
        let flux = s.face_fluxes(&phi);
        for c in 0..g.len() {
            let mut div = 0.0;
            for j in 0..3 {
                let h = g.spacing()[j];
                div += flux[j][c] / h;
                if let Some(dn) = g.down(c, j) {
                    div -= flux[j][dn] / h;
                }
            }
            assert!((ap[c] + div).abs() < 1e-10 * (1.0 + ap[c].abs()), "cell {c}: {} vs {}", ap[c], -div);
        }
    }
}
