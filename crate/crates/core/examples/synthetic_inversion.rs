//! Synthetic data, then the MAP point by inexact Newton-CG with continuation.

use flowline_uq::config::RunConfig;
use flowline_uq::pipeline::Pipeline;

fn main() -> flowline_uq::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.mesh.nx = 16;
    cfg.mesh.nz = 4;
    let dir = std::env::temp_dir().join("flowline_synthetic_inversion");
    let mut pipe = Pipeline::new(cfg, Some(dir.clone()), None)?;
    let data = pipe.synth()?;
    let map = pipe.invert()?;

    println!("{:>3} {:>4} {:>10} {:>12} {:>12} {:>4} {:>6}", "it", "stg", "gamma", "|g|", "J", "cg", "alpha");
    for (i, it) in map.record.iterations.iter().enumerate() {
        println!(
            "{i:>3} {:>4} {:>10.2e} {:>12.4e} {:>12.6e} {:>4} {:>6.3}",
            it.stage, it.gamma, it.grad_norm, it.total, it.cg_iters, it.step_length
        );
    }
    let rec = &map.record;
    println!(
        "\ngradient reduced by {:.2e} in {} Newton / {} CG iterations",
        rec.final_grad_norm / rec.reference_grad_norm,
        rec.newton_iters,
        rec.cg_iters
    );
    let err = (&map.beta - &data.beta_true).amax();
    println!("max |beta_map - beta_true| = {err:.3}; artifacts in {}", dir.display());
    Ok(())
}
