//! Draws from the elliptic basal prior and compares sample and exact variances.

use std::sync::Arc;

use flowline_uq::mesh::{DomainSpec, FlowlineMesh};
use flowline_uq::prior::{PriorModel, PriorParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> flowline_uq::Result<()> {
    let mesh = Arc::new(FlowlineMesh::new(DomainSpec::desk_default(), 32, 2, 2)?);
    let params = PriorParams {
        gamma: 1.0,
        delta: 0.05,
        ..PriorParams::bayesian_default()
    };
    let prior = PriorModel::new(&mesh, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let count = 4000;
    let draws: Vec<_> = (0..count).map(|_| prior.sample_fluctuation(&mut rng)).collect();
    let exact = prior.pointwise_variance();
    let xs = mesh.basal_coords();
    println!("{:>8} {:>12} {:>12}", "x (km)", "exact var", "sample var");
    for i in (0..prior.len()).step_by(8) {
        let s = draws.iter().map(|d| d[i] * d[i]).sum::<f64>() / count as f64;
        println!("{:>8.2} {:>12.4e} {:>12.4e}", xs[i][0], exact[i], s);
    }
    Ok(())
}
