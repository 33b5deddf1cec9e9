//! Adjoint gradient and Hessian actions against finite differences.

use flowline_uq::adjoint::HessianMode;
use flowline_uq::config::RunConfig;
use flowline_uq::pipeline::Pipeline;
use nalgebra::DVector;

fn main() -> flowline_uq::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.mesh.nx = 16;
    cfg.mesh.nz = 4;
    let dir = std::env::temp_dir().join("flowline_gradient_check");
    let mut pipe = Pipeline::new(cfg, Some(dir), None)?;
    let data = pipe.synth()?;
    let problem = pipe.bayesian_problem()?;

    let beta = data.beta_true.add_scalar(0.3);
    let ctx = problem.gradient_context(&beta, None, None)?;
    let n = beta.len();
    let h = 1e-4;
    println!("{:>4} {:>14} {:>14} {:>10}", "dir", "adjoint", "central FD", "rel err");
    for k in 0..4 {
        let dir = DVector::from_fn(n, |i, _| ((k + 1) as f64 * 0.7 * i as f64).sin());
        let g = ctx.gradient.dot(&dir);
        let (jp, _) = problem.eval_cost(&(&beta + &dir * h), None)?;
        let (jm, _) = problem.eval_cost(&(&beta - &dir * h), None)?;
        let fd = (jp.total - jm.total) / (2.0 * h);
        println!("{k:>4} {g:>14.6e} {fd:>14.6e} {:>10.2e}", (g - fd).abs() / fd.abs());
    }

    let a = DVector::from_fn(n, |i, _| (0.3 * i as f64).cos());
    let b = DVector::from_fn(n, |i, _| (0.5 * i as f64).sin());
    for mode in [HessianMode::Full, HessianMode::GaussNewton] {
        let ha = problem.hessian_action(&ctx, &a, mode)?;
        let hb = problem.hessian_action(&ctx, &b, mode)?;
        let (x, y) = (b.dot(&ha), a.dot(&hb));
        println!("{mode:?} Hessian symmetry: {:.2e}", (x - y).abs() / x.abs().max(y.abs()));
    }
    Ok(())
}
