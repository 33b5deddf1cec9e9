//! Randomized generalized eigenproblem at the MAP point and the low-rank posterior.

use flowline_uq::config::RunConfig;
use flowline_uq::lowrank::LowRankPosterior;
use flowline_uq::pipeline::Pipeline;

fn main() -> flowline_uq::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.mesh.nx = 16;
    cfg.mesh.nz = 4;
    let dir = std::env::temp_dir().join("flowline_spectrum");
    let mut pipe = Pipeline::new(cfg, Some(dir), None)?;
    pipe.synth()?;
    pipe.invert()?;
    let post = pipe.spectrum()?;

    println!("Hessian: {:?}; retained rank {} of {}", post.mode, post.rank(), post.len());
    for (i, l) in post.eigvals.iter().enumerate() {
        println!("  lambda_{:<2} = {l:.4e}", i + 1);
    }
    println!("truncation bound {:.3e}", LowRankPosterior::truncation_bound(&post.discarded));

    let prior_var = post.prior.pointwise_variance();
    let post_var = post.pointwise_variance()?;
    let xs = pipe.mesh.basal_coords();
    println!("\n{:>8} {:>12} {:>12}", "x (km)", "prior std", "post std");
    for i in (0..post.len()).step_by(4) {
        println!("{:>8.2} {:>12.4e} {:>12.4e}", xs[i][0], prior_var[i].sqrt(), post_var[i].sqrt());
    }
    Ok(())
}
