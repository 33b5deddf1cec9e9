//! Outflow mass flux, its parameter gradient and linearized prediction uncertainty.

use std::fmt::Write as _;
use std::sync::atomic::Ordering;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::adjoint::{GradientContext, HessianMode, InverseProblem};
use crate::error::{Error, Result};
use crate::fields::fmt17;
use crate::inversion::steihaug_pcg;
use crate::lowrank::LowRankPosterior;
use crate::mesh::{BoundaryTag, Facet, FlowlineMesh};
use crate::stokes::{StokesModel, StokesState};

fn default_density() -> f64 {
    0.91
}

fn default_unit_factor() -> f64 {
    1.0
}

/// Flux `Q = c rho int_{Gamma_o} u.n ds` through a portion of the boundary.
///
/// `Gamma_o` collects the facets carrying `boundary` whose midpoints fall in the
/// optional coordinate windows. The default density 0.91 Gt/km^3 gives fluxes in
/// Gt/a per km of breadth; `unit_factor` (`c`) rescales the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QoiSpec {
    pub tag: String,
    pub boundary: BoundaryTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_range: Option<[f64; 2]>,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default = "default_unit_factor")]
    pub unit_factor: f64,
}

impl QoiSpec {
    pub fn new(tag: &str, boundary: BoundaryTag) -> Self {
        Self {
            tag: tag.to_string(),
            boundary,
            x_range: None,
            z_range: None,
            density: default_density(),
            unit_factor: default_unit_factor(),
        }
    }

    /// Whole terminus flux, the default prediction.
    pub fn outflow() -> Self {
        Self::new("outflow", BoundaryTag::Right)
    }

    fn contains(range: Option<[f64; 2]>, v: f64) -> bool {
        range.is_none_or(|[a, b]| v >= a && v <= b)
    }

    pub fn facets<'m>(&self, mesh: &'m FlowlineMesh) -> Result<Vec<&'m Facet>> {
        if !(self.density.is_finite() && self.unit_factor.is_finite()) {
            return Err(Error::NonFinite("flux density or unit factor"));
        }
        let sel: Vec<&Facet> = mesh
            .facets_tagged(self.boundary)
            .filter(|f| {
                let n = f.qp.len() as f64;
                let mx = f.qp.iter().map(|q| q.x[0]).sum::<f64>() / n;
                let mz = f.qp.iter().map(|q| q.x[1]).sum::<f64>() / n;
                Self::contains(self.x_range, mx) && Self::contains(self.z_range, mz)
            })
            .collect();
        if sel.is_empty() {
            return Err(Error::InvalidArgument(format!("flux '{}' selects no boundary facets", self.tag)));
        }
        Ok(sel)
    }

    /// Nodal dual vector `q` with `Q(u) = q . u` for interleaved nodal velocity `u`.
    pub fn functional(&self, mesh: &FlowlineMesh) -> Result<Vec<f64>> {
        let mut q = vec![0.0; 2 * mesh.velocity_node_count()];
        let c = self.density * self.unit_factor;
        for f in self.facets(mesh)? {
            for p in &f.qp {
                for (a, &node) in f.nodes.iter().enumerate() {
                    let w = c * p.jxw * p.phi[a];
                    q[2 * node] += w * p.normal[0];
                    q[2 * node + 1] += w * p.normal[1];
                }
            }
        }
        Ok(q)
    }

    /// Boundary length of `Gamma_o`.
    pub fn measure(&self, mesh: &FlowlineMesh) -> Result<f64> {
        Ok(self.facets(mesh)?.iter().flat_map(|f| f.qp.iter()).map(|p| p.jxw).sum())
    }
}

/// `Q` for a full nodal velocity field.
pub fn eval_qoi(state: &StokesState, spec: &QoiSpec, mesh: &FlowlineMesh) -> Result<f64> {
    let q = spec.functional(mesh)?;
    if state.u.len() != q.len() {
        return Err(Error::InvalidArgument("state does not match mesh".into()));
    }
    Ok(q.iter().zip(&state.u).map(|(a, b)| a * b).sum())
}

/// `Q` at reduced unknowns `x` of `model`.
pub fn eval_qoi_reduced(model: &StokesModel, x: &[f64], spec: &QoiSpec) -> Result<f64> {
    eval_qoi(&model.state(x), spec, model.mesh())
}

/// Gradient of `Q` with respect to `beta` at a converged forward state: one adjoint
/// solve with the flux as source, then the misfit-free gradient expression.
/// Returns the dual vector and the nodal adjoint velocity.
pub fn prediction_gradient(problem: &InverseProblem, context: &GradientContext, spec: &QoiSpec) -> Result<(DVector<f64>, Vec<f64>)> {
    let model = &problem.model;
    let dofs = model.dofs();
    let q = spec.functional(model.mesh())?;
    let mut rhs = vec![0.0; model.n_unknowns()];
    dofs.restrict_velocity(&q, &mut rhs[..dofs.n_velocity()]);
    rhs.iter_mut().for_each(|v| *v = -*v);
    let lam = context.forward.solve(&rhs)?;
    problem.counters.adjoint_solves.fetch_add(1, Ordering::Relaxed);
    let v = dofs.expand_velocity(&lam);
    let f = problem.gradient_from_adjoint(&context.beta, &context.u, &v, false);
    Ok((f, v))
}

/// Posterior and prior standard deviations of the linearized prediction.
pub fn prediction_variance(f: &DVector<f64>, post: &LowRankPosterior) -> Result<(f64, f64)> {
    let prior_var = f.dot(&post.prior.covariance_apply(f));
    let post_var = f.dot(&post.covariance_apply(f));
    let scale = prior_var.abs().max(f64::MIN_POSITIVE);
    for (what, v) in [("posterior", post_var), ("prior", prior_var)] {
        if v < -1e-12 * scale {
            return Err(Error::Consistency(format!("negative {what} prediction variance {v:.3e}")));
        }
    }
    Ok((post_var.max(0.0).sqrt(), prior_var.max(0.0).sqrt()))
}

/// Influential direction `Sigma^-1/2 H^-1 F*` with `Sigma^2 = F H^-1 F*`, where
/// `H^-1` is the low-rank posterior covariance. Returns the direction and `Sigma^2`.
pub fn ifp_direction(f: &DVector<f64>, post: &LowRankPosterior) -> Result<(DVector<f64>, f64)> {
    if f.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidArgument("zero prediction gradient has no influential direction".into()));
    }
    let hf = post.covariance_apply(f);
    let sigma2 = f.dot(&hf);
    if !(sigma2 > 0.0) {
        return Err(Error::Consistency(format!("prediction variance {sigma2:.3e} is not positive")));
    }
    let sigma = sigma2.sqrt();
    Ok((hf / sigma.sqrt(), sigma2))
}

/// Cross-check of `H^-1 F*` by preconditioned CG on the full Hessian at the MAP point.
pub fn hessian_solve_cg(
    problem: &InverseProblem,
    context: &GradientContext,
    f: &DVector<f64>,
    rtol: f64,
    max_iters: usize,
) -> Result<(DVector<f64>, usize)> {
    let prior = &problem.prior;
    let neg = -f;
    let out = steihaug_pcg(
        |d| problem.hessian_action(context, d, HessianMode::Full),
        &neg,
        |r| prior.covariance_apply(r),
        |r| prior.dual_norm(r),
        rtol,
        max_iters,
    )?;
    if out.negative_curvature || !out.converged {
        return Err(Error::Optimization(format!(
            "Hessian solve stopped after {} iterations at relative residual {:.3e}",
            out.iterations, out.relative_residual
        )));
    }
    Ok((out.step, out.iterations))
}

#[derive(Debug, Clone)]
pub struct PredictionReport {
    pub tag: String,
    pub q_map: f64,
    pub sigma_post: f64,
    pub sigma_prior: f64,
    pub sigma2: f64,
    pub gradient: DVector<f64>,
    pub direction: DVector<f64>,
}

/// Full prediction analysis for one flux at the MAP point.
pub fn predict(problem: &InverseProblem, context: &GradientContext, post: &LowRankPosterior, spec: &QoiSpec) -> Result<PredictionReport> {
    let q_map = eval_qoi(&problem.model.state(&context.forward.x), spec, problem.model.mesh())?;
    let (gradient, _) = prediction_gradient(problem, context, spec)?;
    let (sigma_post, sigma_prior) = prediction_variance(&gradient, post)?;
    let (direction, sigma2) = if gradient.iter().all(|v| *v == 0.0) {
        (DVector::zeros(gradient.len()), 0.0)
    } else {
        ifp_direction(&gradient, post)?
    };
    Ok(PredictionReport {
        tag: spec.tag.clone(),
        q_map,
        sigma_post,
        sigma_prior,
        sigma2,
        gradient,
        direction,
    })
}

pub fn prediction_csv(reports: &[PredictionReport]) -> String {
    let mut s = String::from("qoi_tag,q_map,sigma_post,sigma_prior,Sigma2\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.tag,
            fmt17(r.q_map),
            fmt17(r.sigma_post),
            fmt17(r.sigma_prior),
            fmt17(r.sigma2)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::mesh::{DomainSpec, LateralBc};
    use crate::stokes::PhysicsParams;

    fn slab() -> StokesModel {
        let spec = DomainSpec::slab(4.0, 0.0, 2.0, LateralBc::NoSlip, LateralBc::TractionFree);
        let mesh = Arc::new(FlowlineMesh::new(spec, 4, 3, 2).unwrap());
        StokesModel::new(mesh, PhysicsParams::default()).unwrap()
    }

    #[test]
    fn uniform_flow_through_vertical_face() {
        let model = slab();
        let mesh = model.mesh();
        let c = 0.3;
        let u: Vec<f64> = (0..mesh.velocity_node_count()).flat_map(|_| [c, 0.0]).collect();
        let state = StokesState { u, p: Vec::new() };
        let q = eval_qoi(&state, &QoiSpec::outflow(), mesh).unwrap();
        assert!((q - 0.91 * c * 2.0).abs() < 1e-13);
        let zero = StokesState {
            u: vec![0.0; 2 * mesh.velocity_node_count()],
            p: Vec::new(),
        };
        assert_eq!(eval_qoi(&zero, &QoiSpec::outflow(), mesh).unwrap(), 0.0);
    }

    #[test]
    fn windows_select_facets() {
        let model = slab();
        let mut spec = QoiSpec::outflow();
        spec.z_range = Some([0.0, 0.9]);
        assert!((spec.measure(model.mesh()).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        spec.z_range = Some([5.0, 6.0]);
        assert!(spec.facets(model.mesh()).is_err());
    }

    #[test]
    fn ifp_rejects_zero_gradient_and_matches_variance() {
        let spec = DomainSpec::slab(4.0, 0.0, 1.0, LateralBc::NoSlip, LateralBc::TractionFree);
        let mesh = FlowlineMesh::new(spec, 6, 1, 2).unwrap();
        let prior = crate::prior::PriorModel::new(&mesh, crate::prior::PriorParams::tikhonov_default(1.0)).unwrap();
        let post = LowRankPosterior::from_prior(DVector::zeros(7), prior).unwrap();
        assert!(ifp_direction(&DVector::zeros(7), &post).is_err());
        assert_eq!(prediction_variance(&DVector::zeros(7), &post).unwrap(), (0.0, 0.0));
        let f = DVector::from_fn(7, |i, _| 1.0 + i as f64);
        let (w, s2) = ifp_direction(&f, &post).unwrap();
        let (sp, sq) = prediction_variance(&f, &post).unwrap();
        assert_eq!(sp, sq);
        assert!((s2 - sp * sp).abs() <= 1e-12 * s2);
        // W is Gamma F scaled by Sigma^-1/2.
        let g = post.prior.covariance_apply(&f);
        assert!((w * s2.sqrt().sqrt() - &g).amax() < 1e-12 * g.amax());
    }
}
