//! Posterior uncertainty of the ice flux through the cliff, and the basal
//! direction that most influences it.

use flowline_uq::config::RunConfig;
use flowline_uq::pipeline::Pipeline;

fn main() -> flowline_uq::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.mesh.nx = 16;
    cfg.mesh.nz = 4;
    let dir = std::env::temp_dir().join("flowline_prediction");
    let mut pipe = Pipeline::new(cfg, Some(dir), None)?;
    pipe.synth()?;
    pipe.invert()?;
    pipe.spectrum()?;
    let reports = pipe.predict()?;
    let xs = pipe.mesh.basal_coords();
    for r in &reports {
        println!(
            "{}: q = {:.4}, sigma_post = {:.3e}, sigma_prior = {:.3e} ({:.1e} reduction)",
            r.tag,
            r.q_map,
            r.sigma_post,
            r.sigma_prior,
            r.sigma_prior / r.sigma_post
        );
        let peak = r.direction.iamax();
        println!("  influential direction peaks at x = {:.1} km", xs[peak][0]);
    }
    Ok(())
}
