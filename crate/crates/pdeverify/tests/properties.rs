use std::sync::Arc;

use diffctl::systems::{by_name, InputField, VectorField};
use diffctl_pde::{
    assemble_sub_laplacian, heat_step, solve_poisson_zero_mean, Boundary, CgOptions, FacePolicy, Grid, GridField,
    SubLaplacian,
};
use proptest::prelude::*;

fn grid_for(system: &str, n: usize) -> Arc<Grid> {
    if system == "unicycle" {
        Grid::new(
            vec![n, n, n],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 1.0, 2.0 * std::f64::consts::PI],
            vec![Boundary::ZeroFlux, Boundary::ZeroFlux, Boundary::Periodic],
        )
        .unwrap()
    } else {
        Grid::new(vec![n, n + 1], vec![-1.0, 0.0], vec![1.0, 1.0], vec![Boundary::ZeroFlux; 2]).unwrap()
    }
}

fn op(system: &str, grid: &Arc<Grid>) -> SubLaplacian {
    let sys = by_name(system).unwrap();
    let f: Vec<InputField> = (0..sys.input_dim()).map(|i| InputField::new(sys.clone(), i).unwrap()).collect();
    let r: Vec<&dyn VectorField> = f.iter().map(|f| f as &dyn VectorField).collect();
    assemble_sub_laplacian(grid, &r, FacePolicy::Natural).unwrap()
}

fn zero_mean(mut v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn quadratic_form_is_non_negative(v in proptest::collection::vec(-1.0f64..1.0, 6 * 6 * 6)) {
        let g = grid_for("unicycle", 6);
        let a = op("unicycle", &g);
        prop_assert!(a.operator().quad_form(&v) >= -1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn manufactured_solutions_are_recovered(
        system in prop_oneof![Just("unicycle"), Just("single_integrator_2")],
        raw in proptest::collection::vec(-1.0f64..1.0, 7 * 7 * 7),
        shift in -5.0f64..5.0,
    ) {
        let g = grid_for(system, 7);
        let a = op(system, &g);
        let psi = zero_mean(raw[..g.len()].to_vec());
        let f = GridField::new(g.clone(), a.operator().mul(&psi).unwrap()).unwrap();
        let opts = CgOptions { tol: 1e-12, max_iter: 50_000 };
        let (phi, rep) = solve_poisson_zero_mean(&a, &f, None, &opts).unwrap();
        prop_assert!(rep.relative_residual <= 1e-8);
        let err = phi.values().iter().zip(&psi).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = psi.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-7 * norm, "relative error {}", err / norm);

        // A constant added to f and projected away does not change φ.
        let shifted = zero_mean(f.values().iter().map(|v| v + shift).collect());
        let (phi2, _) = solve_poisson_zero_mean(&a, &GridField::new(g.clone(), shifted).unwrap(), None, &opts).unwrap();
        let diff = phi.values().iter().zip(phi2.values()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(diff <= 1e-9 * (1.0 + norm));
    }

    #[test]
    fn heat_flow_conserves_mass_and_positivity(raw in proptest::collection::vec(0.01f64..2.0, 12 * 13)) {
        let g = grid_for("single_integrator_2", 12);
        let mut p = GridField::new(g.clone(), raw).unwrap().normalized().unwrap();
        let dt = g.heat_stability_bound();
        for _ in 0..200 {
            p = heat_step(&p, dt).unwrap();
        }
        prop_assert!((p.mass() - 1.0).abs() < 1e-12);
        prop_assert!(p.min() > 0.0);
    }
}
