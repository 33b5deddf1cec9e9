//! Deterministic Tikhonov inversions over a short gamma range and the L-curve corner.

use flowline_uq::config::RunConfig;
use flowline_uq::inversion::lcurve_corner;
use flowline_uq::pipeline::Pipeline;

fn main() -> flowline_uq::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.mesh.nx = 16;
    cfg.mesh.nz = 4;
    cfg.lcurve.gamma_min = 1e-3;
    cfg.lcurve.gamma_max = 1e2;
    cfg.lcurve.count = 6;
    let dir = std::env::temp_dir().join("flowline_lcurve");
    let mut pipe = Pipeline::new(cfg, Some(dir), None)?;
    pipe.synth()?;
    let rows = pipe.lcurve()?;
    println!("{:>10} {:>12} {:>12} {:>6}", "gamma", "misfit", "seminorm", "newton");
    for r in &rows {
        match &r.error {
            None => println!("{:>10.2e} {:>12.5e} {:>12.5e} {:>6}", r.gamma, r.misfit, r.seminorm(), r.newton_iters),
            Some(e) => println!("{:>10.2e} failed: {e}", r.gamma),
        }
    }
    if let Some(i) = lcurve_corner(&rows) {
        println!("corner at gamma = {:.2e}", rows[i].gamma);
    }
    Ok(())
}
