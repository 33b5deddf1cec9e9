//! Convergence of the Q2 velocity on a manufactured Stokes solution.
//!
//! The load is built from a divergence-free velocity and a smooth pressure; the
//! L2 velocity error should fall by about 8x per halving of the mesh size.

use std::f64::consts::PI;
use std::sync::Arc;

use flowline_uq::mesh::{DomainSpec, FlowlineMesh, LateralBc};
use flowline_uq::stokes::{NewtonConfig, PhysicsParams, StokesModel};

fn velocity(x: [f64; 2]) -> [f64; 2] {
    let (a, b) = (1.0 - (PI * x[0]).cos(), (2.0 * x[1]).sin());
    [a * b, -PI * (PI * x[0]).sin() * x[1].sin().powi(2)]
}

fn gradient(x: [f64; 2]) -> [[f64; 2]; 2] {
    let (s, c) = ((PI * x[0]).sin(), (PI * x[0]).cos());
    [
        [PI * s * (2.0 * x[1]).sin(), 2.0 * (1.0 - c) * (2.0 * x[1]).cos()],
        [-PI * PI * c * x[1].sin().powi(2), -PI * s * (2.0 * x[1]).sin()],
    ]
}

fn pressure(x: [f64; 2]) -> f64 {
    (PI * x[0]).cos() * (1.0 + x[1])
}

fn main() -> flowline_uq::Result<()> {
    let mut physics = PhysicsParams::default();
    physics.g = 0.0;
    physics.rheology.a = 1.0;
    let mut prev: Option<f64> = None;
    println!("{:>4} {:>12} {:>6}", "n", "L2 error", "order");
    for n in [2, 4, 8, 16] {
        let spec = DomainSpec::slab(1.0, 0.0, 1.0, LateralBc::NoSlip, LateralBc::TractionFree);
        let mesh = Arc::new(FlowlineMesh::new(spec, n, n, 2)?);
        let beta = vec![0.0; mesh.basal_dof_count()];
        let load = StokesModel::new(Arc::clone(&mesh), physics)?.manufactured_load(&beta, velocity, gradient, pressure);
        let model = StokesModel::new(mesh, physics)?.with_load(load)?;
        let sol = model.solve_forward(&beta, &NewtonConfig::default(), None)?;
        let e = model.velocity_l2_error(&sol.x, velocity, 5)?;
        let order = prev.map_or(String::from("-"), |p| format!("{:.2}", (p / e).log2()));
        println!("{n:>4} {e:>12.4e} {order:>6}");
        prev = Some(e);
    }
    Ok(())
}
