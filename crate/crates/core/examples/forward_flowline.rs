//! Nonlinear Stokes solve on the default flowline with the synthetic basal field.
//!
//! ```text
//! cargo run --release --example forward_flowline
//! ```

use std::sync::Arc;

use flowline_uq::config::TruthConfig;
use flowline_uq::mesh::{BoundaryTag, DomainSpec, FlowlineMesh};
use flowline_uq::prediction::{eval_qoi, QoiSpec};
use flowline_uq::stokes::{NewtonConfig, PhysicsParams, StokesModel};

fn main() -> flowline_uq::Result<()> {
    let mesh = Arc::new(FlowlineMesh::new(DomainSpec::desk_default(), 32, 8, 2)?);
    let model = StokesModel::new(Arc::clone(&mesh), PhysicsParams::default())?;
    let truth = TruthConfig::default();
    let beta: Vec<f64> = mesh.basal_coords().iter().map(|c| truth.eval(c[0])).collect();

    let sol = model.solve_forward(&beta, &NewtonConfig::default(), None)?;
    println!("Newton residuals:");
    for (i, r) in sol.record.residual_history().iter().enumerate() {
        println!("  {i:2}  {r:.3e}");
    }

    let state = model.state(&sol.x);
    let mut top: Vec<usize> = mesh.boundary_nodes(BoundaryTag::Top);
    top.sort_by(|a, b| mesh.coords()[*a][0].total_cmp(&mesh.coords()[*b][0]));
    println!("\nsurface velocity (km/a):");
    for &n in top.iter().step_by(8) {
        let [x, z] = mesh.coords()[n];
        println!("  x = {x:6.2} km  z = {z:.3} km  ux = {:9.5}  uz = {:9.5}", state.u[2 * n], state.u[2 * n + 1]);
    }
    let q = eval_qoi(&state, &QoiSpec::outflow(), &mesh)?;
    println!("\noutflow through the cliff: {q:.4}");
    Ok(())
}
