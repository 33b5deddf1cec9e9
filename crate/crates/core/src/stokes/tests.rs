use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mesh::{DomainSpec, FlowlineMesh, LateralBc};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn desk_model(nx: usize, nz: usize) -> StokesModel {
    let mesh = FlowlineMesh::new(DomainSpec::desk_default(), nx, nz, 2).unwrap();
    StokesModel::new(Arc::new(mesh), PhysicsParams::default()).unwrap()
}

fn desk_beta(model: &StokesModel) -> Vec<f64> {
    model
        .mesh()
        .basal_coords()
        .iter()
        .map(|c| 1.0 - 2.0 * (-((c[0] - 55.0) / 10.0).powi(2)).exp())
        .collect()
}

#[test]
fn hydrostatic_slab_is_at_rest() {
    let spec = DomainSpec::slab(20.0, 0.0, 1.0, LateralBc::NoSlip, LateralBc::NoSlip);
    let mesh = FlowlineMesh::new(spec, 8, 3, 2).unwrap();
    let model = StokesModel::new(Arc::new(mesh), PhysicsParams::default()).unwrap();
    let beta = vec![0.0; model.mesh().basal_dof_count()];
    let x0 = model.hydrostatic_guess().unwrap();
    let r = model.residual(&x0, &beta).unwrap();
    let scale = model.physics().body_force();
    assert!(norm(&r) < 1e-10 * scale, "residual {}", norm(&r));
    let sol = model.solve_forward(&beta, &NewtonConfig::default(), None).unwrap();
    assert!(sol.record.newton_steps() <= 1);
    let u = model.state(&sol.x).u;
    assert!(u.iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn jacobian_is_symmetric_and_matches_finite_differences() {
    let model = desk_model(6, 2);
    let beta = desk_beta(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = model.n_unknowns();
    let mut x = model.hydrostatic_guess().unwrap();
    for v in x[..model.dofs().n_velocity()].iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    let k = model.jacobian(&x, &beta).unwrap();
    assert!(k.asymmetry() < 1e-12 * k.max_abs(), "asymmetry {}", k.asymmetry());
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kd = k.apply(&d);
    let h = 1e-6;
    let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + h * b).collect();
    let xm: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - h * b).collect();
    let rp = model.residual(&xp, &beta).unwrap();
    let rm = model.residual(&xm, &beta).unwrap();
    let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    let err: Vec<f64> = fd.iter().zip(&kd).map(|(a, b)| a - b).collect();
    assert!(norm(&err) < 1e-6 * norm(&kd), "rel err {}", norm(&err) / norm(&kd));
}

#[test]
fn newtonian_problem_needs_one_step() {
    let mesh = FlowlineMesh::new(DomainSpec::desk_default(), 8, 2, 2).unwrap();
    let mut physics = PhysicsParams::default();
    physics.rheology.n = 1.0;
    physics.rheology.a = 0.5;
    let model = StokesModel::new(Arc::new(mesh), physics).unwrap();
    let beta = desk_beta(&model);
    let cfg = NewtonConfig {
        picard_steps: 0,
        ..Default::default()
    };
    let sol = model.solve_forward(&beta, &cfg, None).unwrap();
    assert_eq!(sol.record.newton_steps(), 1);

    let zero = vec![0.0; model.n_unknowns()];
    let r0 = model.residual(&zero, &beta).unwrap();
    let k = model.jacobian(&zero, &beta).unwrap();
    let neg: Vec<f64> = r0.iter().map(|v| -v).collect();
    let direct = model.factorize(&k).unwrap().solve(&neg).unwrap();
    let diff: Vec<f64> = direct.iter().zip(&sol.x).map(|(a, b)| a - b).collect();
    assert!(norm(&diff) < 1e-10 * norm(&direct));
}

#[test]
fn desk_problem_converges_with_mass_conservation() {
    let model = desk_model(16, 4);
    let beta = desk_beta(&model);
    let sol = model.solve_forward(&beta, &NewtonConfig::default(), None).unwrap();
    let hist = sol.record.residual_history();
    eprintln!("{hist:?}");
    let u = model.state(&sol.x).u;
    let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(umax > 1e-3 && umax < 1e3, "umax {umax}");
    for (div, cell) in model.cell_divergence(&sol.x).iter().zip(model.mesh().cells()) {
        assert!(div.abs() < 1e-10 * cell.area * umax);
    }
}

#[test]
fn krylov_and_direct_agree() {
    let model = desk_model(8, 2);
    let beta = desk_beta(&model);
    let direct = model.solve_forward(&beta, &NewtonConfig::default(), None).unwrap();
    let cfg = NewtonConfig {
        linear_solver: LinearSolverKind::Krylov,
        ..Default::default()
    };
    let kry = model.solve_forward(&beta, &cfg, None).unwrap();
    let diff: Vec<f64> = direct.x.iter().zip(&kry.x).map(|(a, b)| a - b).collect();
    assert!(norm(&diff) < 1e-7 * norm(&direct.x));
    assert!(kry.record.iterations.iter().all(|it| it.linear_iters >= 1));
}

/// Stream-function flow `psi = (1 - cos(pi x)) sin^2(z)` on a unit slab:
/// divergence free, at rest on the left wall, impermeable at the bed.
pub(crate) fn mms_fields() -> (
    impl Fn([f64; 2]) -> [f64; 2],
    impl Fn([f64; 2]) -> [[f64; 2]; 2],
    impl Fn([f64; 2]) -> f64,
) {
    use std::f64::consts::PI;
    let vel = |x: [f64; 2]| {
        let (a, b) = (1.0 - (PI * x[0]).cos(), (2.0 * x[1]).sin());
        [a * b, -PI * (PI * x[0]).sin() * x[1].sin().powi(2)]
    };
    let grad = |x: [f64; 2]| {
        let (s, c) = ((PI * x[0]).sin(), (PI * x[0]).cos());
        [
            [PI * s * (2.0 * x[1]).sin(), 2.0 * (1.0 - c) * (2.0 * x[1]).cos()],
            [-PI * PI * c * x[1].sin().powi(2), -PI * s * (2.0 * x[1]).sin()],
        ]
    };
    let pres = |x: [f64; 2]| (PI * x[0]).cos() * (1.0 + x[1]);
    (vel, grad, pres)
}

fn mms_error(n: usize) -> (f64, f64) {
    let spec = DomainSpec::slab(1.0, 0.0, 1.0, LateralBc::NoSlip, LateralBc::TractionFree);
    let mesh = Arc::new(FlowlineMesh::new(spec, n, n, 2).unwrap());
    let mut physics = PhysicsParams::default();
    physics.g = 0.0;
    physics.rheology.a = 1.0;
    let (vel, grad, pres) = mms_fields();
    let plain = StokesModel::new(Arc::clone(&mesh), physics).unwrap();
    let beta = vec![0.0; mesh.basal_dof_count()];
    let load = plain.manufactured_load(&beta, &vel, &grad, &pres);
    let model = StokesModel::new(mesh, physics).unwrap().with_load(load).unwrap();
    let sol = model.solve_forward(&beta, &NewtonConfig::default(), None).unwrap();
    let err = model.velocity_l2_error(&sol.x, &vel, 5).unwrap();
    let div = model.cell_divergence(&sol.x);
    let max_div = div.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    (err, max_div)
}

#[test]
fn manufactured_solution_converges_at_third_order() {
    let errs: Vec<(f64, f64)> = [2, 4, 8].iter().map(|&n| mms_error(n)).collect();
    for w in errs.windows(2) {
        let order = (w[0].0 / w[1].0).log2();
        assert!(order >= 2.5, "observed order {order:.3}, errors {errs:?}");
    }
    assert!(errs.iter().all(|e| e.1 < 1e-10), "divergence {errs:?}");
}
