//! Misfit, adjoint gradient and Hessian actions for the basal sliding inverse problem.
//!
//! The derivatives are those of the discrete Lagrangian
//! `L = misfit(x) + R(beta) + lambda^T r(x; beta)`, so gradients and Hessian actions
//! are exact for the discretized cost (up to the Newton tolerance of the forward
//! solve) and the Hessian is symmetric in the Euclidean pairing of dual vectors.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, FlowlineMesh, TraceSpace};
use crate::prior::PriorModel;
use crate::stokes::{ForwardSolution, NewtonConfig, StokesModel};
use crate::trace::{apply_interleaved, BoundaryTrace};

/// How surface misfits are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MisfitMode {
    /// `1 / (|u_obs|^2 + eps)` at each point of the surface.
    Deterministic,
    /// `1 / sigma^2` with the per-observation noise level `sigma`.
    Bayesian,
}

/// Surface velocity observations with their noise model.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub trace: BoundaryTrace,
    /// Interleaved `[ux, uz]` at the surface nodes, km/a.
    pub d_obs: Vec<f64>,
    /// Noise standard deviation per surface node, km/a.
    pub noise_sigma: Vec<f64>,
    pub eps_norm: f64,
    pub mode: MisfitMode,
    /// Surface mass matrix with the pointwise misfit weight.
    weighted_mass: DMatrix<f64>,
}

/// `sigma_i = level * (|d_i|^2 + eps)^{1/2}`.
pub fn relative_noise_sigma(d_obs: &[f64], level: f64, eps: f64) -> Vec<f64> {
    d_obs
        .chunks(2)
        .map(|d| level * (d[0] * d[0] + d[1] * d[1] + eps).sqrt())
        .collect()
}

impl ObservationSet {
    pub fn new(mesh: &FlowlineMesh, d_obs: Vec<f64>, noise_sigma: Vec<f64>, eps_norm: f64, mode: MisfitMode) -> Result<Self> {
        let trace = BoundaryTrace::new(mesh, BoundaryTag::Top, 2)?;
        if d_obs.len() != trace.len() || noise_sigma.len() != trace.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "observation length {} / noise length {} do not match {} surface nodes",
                d_obs.len(),
                noise_sigma.len(),
                trace.nodes.len()
            )));
        }
        if !(eps_norm > 0.0) {
            return Err(Error::InvalidArgument("eps_norm must be positive".into()));
        }
        if mode == MisfitMode::Bayesian && noise_sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("noise standard deviations must be positive".into()));
        }
        if d_obs.iter().chain(&noise_sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observations"));
        }
        let weighted_mass = mesh.assemble_weighted_boundary_mass(BoundaryTag::Top, TraceSpace::Velocity, |f, iq| {
            let q = &f.qp[iq];
            match mode {
                MisfitMode::Deterministic => {
                    let mut u = [0.0; 2];
                    for (a, &t) in f.trace.iter().enumerate() {
                        u[0] += q.phi[a] * d_obs[2 * t];
                        u[1] += q.phi[a] * d_obs[2 * t + 1];
                    }
                    1.0 / (u[0] * u[0] + u[1] * u[1] + eps_norm)
                }
                MisfitMode::Bayesian => {
                    let s: f64 = f.trace.iter().enumerate().map(|(a, &t)| q.phi[a] * noise_sigma[t]).sum();
                    1.0 / (s * s)
                }
            }
        })?;
        Ok(Self {
            trace,
            d_obs,
            noise_sigma,
            eps_norm,
            mode,
            weighted_mass,
        })
    }

    /// Copy with the misfit weight multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut o = self.clone();
        o.weighted_mass *= s;
        o
    }

    pub fn len(&self) -> usize {
        self.d_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_obs.is_empty()
    }

    pub fn weighted_mass(&self) -> &DMatrix<f64> {
        &self.weighted_mass
    }

    /// Surface trace of a full nodal velocity field.
    pub fn observe(&self, u_full: &[f64]) -> Result<Vec<f64>> {
        self.trace.restrict(u_full)
    }

    pub fn misfit(&self, u_full: &[f64]) -> Result<f64> {
        let r: Vec<f64> = self.observe(u_full)?.iter().zip(&self.d_obs).map(|(a, b)| a - b).collect();
        let wr = apply_interleaved(&self.weighted_mass, &r, 2);
        Ok(0.5 * r.iter().zip(&wr).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Full nodal dual vector of `d misfit / d u`.
    pub fn misfit_gradient(&self, u_full: &[f64]) -> Result<Vec<f64>> {
        let r: Vec<f64> = self.observe(u_full)?.iter().zip(&self.d_obs).map(|(a, b)| a - b).collect();
        self.trace.extend_by_zero(&apply_interleaved(&self.weighted_mass, &r, 2))
    }

    /// Full nodal dual vector of the misfit second derivative applied to `du`.
    pub fn weight_apply(&self, du_full: &[f64]) -> Result<Vec<f64>> {
        let r = self.observe(du_full)?;
        self.trace.extend_by_zero(&apply_interleaved(&self.weighted_mass, &r, 2))
    }

    /// Noise draw with covariance `W^-1` (the inverse weighted mass), per component.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let n = self.trace.nodes.len();
        let chol = self
            .weighted_mass
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("surface weighted mass".into()))?;
        let lt = chol.l().transpose();
        let mut out = vec![0.0; 2 * n];
        for c in 0..2 {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e = lt.solve_upper_triangular(&z).expect("nonsingular factor");
            for i in 0..n {
                out[2 * i + c] = e[i];
            }
        }
        Ok(out)
    }

    /// Replaces the data, keeping the noise model and weights.
    pub fn with_data(&self, d_obs: Vec<f64>) -> Result<Self> {
        if d_obs.len() != self.d_obs.len() {
            return Err(Error::InvalidArgument("observation length mismatch".into()));
        }
        let mut o = self.clone();
        o.d_obs = d_obs;
        Ok(o)
    }
}

/// Hessian variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMode {
    #[default]
    Full,
    GaussNewton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub misfit: f64,
    pub reg: f64,
    pub total: f64,
}

/// Counts of Stokes solves performed through an [`InverseProblem`].
#[derive(Debug, Default)]
pub struct SolveCounters {
    pub forward_solves: AtomicUsize,
    pub forward_newton_steps: AtomicUsize,
    pub residual_evaluations: AtomicUsize,
    pub adjoint_solves: AtomicUsize,
    pub incremental_solves: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SolveCounts {
    pub forward_solves: usize,
    pub forward_newton_steps: usize,
    pub residual_evaluations: usize,
    pub adjoint_solves: usize,
    pub incremental_solves: usize,
}

impl SolveCounts {
    /// Linear(ized) Stokes solves: Newton corrections, adjoints and incremental solves.
    pub fn linearized_solves(&self) -> usize {
        self.forward_newton_steps + self.adjoint_solves + self.incremental_solves
    }

    pub fn since(&self, earlier: &SolveCounts) -> SolveCounts {
        SolveCounts {
            forward_solves: self.forward_solves - earlier.forward_solves,
            forward_newton_steps: self.forward_newton_steps - earlier.forward_newton_steps,
            residual_evaluations: self.residual_evaluations - earlier.residual_evaluations,
            adjoint_solves: self.adjoint_solves - earlier.adjoint_solves,
            incremental_solves: self.incremental_solves - earlier.incremental_solves,
        }
    }
}

impl SolveCounters {
    pub fn snapshot(&self) -> SolveCounts {
        SolveCounts {
            forward_solves: self.forward_solves.load(Ordering::Relaxed),
            forward_newton_steps: self.forward_newton_steps.load(Ordering::Relaxed),
            residual_evaluations: self.residual_evaluations.load(Ordering::Relaxed),
            adjoint_solves: self.adjoint_solves.load(Ordering::Relaxed),
            incremental_solves: self.incremental_solves.load(Ordering::Relaxed),
        }
    }
}

/// Forward model, data and prior bundled with solve bookkeeping.
#[derive(Debug)]
pub struct InverseProblem {
    pub model: Arc<StokesModel>,
    pub obs: ObservationSet,
    pub prior: PriorModel,
    pub newton: NewtonConfig,
    /// Shared with problems derived through [`InverseProblem::with_prior`].
    pub counters: Arc<SolveCounters>,
}

/// Forward state and adjoint at one parameter value.
#[derive(Debug, Clone)]
pub struct GradientContext {
    pub beta: DVector<f64>,
    pub forward: ForwardSolution,
    /// Full nodal forward velocity.
    pub u: Vec<f64>,
    /// Reduced adjoint unknowns.
    pub adjoint: Vec<f64>,
    /// Full nodal adjoint velocity.
    pub v: Vec<f64>,
    pub cost: CostBreakdown,
    /// Gradient dual vector (misfit plus regularization).
    pub gradient: DVector<f64>,
}

impl GradientContext {
    /// Misfit part of the gradient.
    pub fn misfit_gradient(&self, problem: &InverseProblem) -> DVector<f64> {
        &self.gradient - problem.prior.reg_gradient(&self.beta)
    }
}

impl InverseProblem {
    pub fn new(model: Arc<StokesModel>, obs: ObservationSet, prior: PriorModel, newton: NewtonConfig) -> Result<Self> {
        if prior.len() != model.mesh().basal_dof_count() {
            return Err(Error::InvalidArgument("prior and mesh basal spaces differ".into()));
        }
        newton.validate()?;
        Ok(Self {
            model,
            obs,
            prior,
            newton,
            counters: Arc::new(SolveCounters::default()),
        })
    }

    /// Same model and data under another prior; solve counts accumulate in `self`.
    pub fn with_prior(&self, prior: PriorModel) -> Result<Self> {
        let mut p = Self::new(Arc::clone(&self.model), self.obs.clone(), prior, self.newton)?;
        p.counters = Arc::clone(&self.counters);
        Ok(p)
    }

    pub fn counts(&self) -> SolveCounts {
        self.counters.snapshot()
    }

    pub fn solve_forward(&self, beta: &DVector<f64>, warm: Option<&[f64]>) -> Result<ForwardSolution> {
        let out = self.model.solve_forward(beta.as_slice(), &self.newton, warm);
        self.counters.forward_solves.fetch_add(1, Ordering::Relaxed);
        match &out {
            Ok(sol) => {
                self.counters
                    .forward_newton_steps
                    .fetch_add(sol.record.newton_steps(), Ordering::Relaxed);
                self.counters
                    .residual_evaluations
                    .fetch_add(sol.record.residual_evaluations, Ordering::Relaxed);
            }
            Err(Error::NonConvergence(rec)) => {
                self.counters.forward_newton_steps.fetch_add(rec.newton_steps(), Ordering::Relaxed);
            }
            Err(_) => {}
        }
        out
    }

    pub fn cost_at(&self, beta: &DVector<f64>, forward: &ForwardSolution) -> Result<CostBreakdown> {
        let u = self.model.dofs().expand_velocity(&forward.x);
        let misfit = self.obs.misfit(&u)?;
        let reg = self.prior.reg_value(beta);
        Ok(CostBreakdown {
            misfit,
            reg,
            total: misfit + reg,
        })
    }

    /// Cost after a forward solve.
    pub fn eval_cost(&self, beta: &DVector<f64>, warm: Option<&[f64]>) -> Result<(CostBreakdown, ForwardSolution)> {
        let fwd = self.solve_forward(beta, warm)?;
        Ok((self.cost_at(beta, &fwd)?, fwd))
    }

    /// Solves `K lambda = -d misfit / dx` with the converged forward operator.
    pub fn solve_adjoint(&self, forward: &ForwardSolution) -> Result<Vec<f64>> {
        let u = self.model.dofs().expand_velocity(&forward.x);
        let g = self.obs.misfit_gradient(&u)?;
        let mut rhs = vec![0.0; self.model.n_unknowns()];
        self.model
            .dofs()
            .restrict_velocity(&g, &mut rhs[..self.model.dofs().n_velocity()]);
        rhs.iter_mut().for_each(|v| *v = -*v);
        self.counters.adjoint_solves.fetch_add(1, Ordering::Relaxed);
        forward.solve(&rhs)
    }

    /// Gradient dual vector `int hat_j exp(beta) Tu.Tv + Gamma_prior^-1 (beta - beta0)`.
    pub fn gradient_from_adjoint(&self, beta: &DVector<f64>, u: &[f64], v: &[f64], with_reg: bool) -> DVector<f64> {
        let g = self.model.basal_pairing(beta.as_slice(), None, u, v);
        if with_reg {
            g + self.prior.reg_gradient(beta)
        } else {
            g
        }
    }

    /// Cost, adjoint and gradient at `beta`, reusing `forward` when supplied.
    pub fn gradient_context(&self, beta: &DVector<f64>, forward: Option<ForwardSolution>, warm: Option<&[f64]>) -> Result<GradientContext> {
        let forward = match forward {
            Some(f) => f,
            None => self.solve_forward(beta, warm)?,
        };
        let cost = self.cost_at(beta, &forward)?;
        let adjoint = self.solve_adjoint(&forward)?;
        let dofs = self.model.dofs();
        let u = dofs.expand_velocity(&forward.x);
        let v = dofs.expand_velocity(&adjoint);
        let gradient = self.gradient_from_adjoint(beta, &u, &v, true);
        Ok(GradientContext {
            beta: beta.clone(),
            forward,
            u,
            adjoint,
            v,
            cost,
            gradient,
        })
    }

    pub fn eval_gradient(&self, beta: &DVector<f64>) -> Result<(CostBreakdown, DVector<f64>)> {
        let ctx = self.gradient_context(beta, None, None)?;
        Ok((ctx.cost, ctx.gradient))
    }

    /// Misfit-Hessian action (no prior term) via one incremental forward and one
    /// incremental adjoint solve.
    pub fn misfit_hessian_action(&self, ctx: &GradientContext, dir: &DVector<f64>, mode: HessianMode) -> Result<DVector<f64>> {
        let n_b = self.prior.len();
        if dir.len() != n_b {
            return Err(Error::InvalidArgument("direction length mismatch".into()));
        }
        if dir.iter().all(|v| *v == 0.0) {
            return Ok(DVector::zeros(n_b));
        }
        let model = &self.model;
        let dofs = model.dofs();
        let nv = dofs.n_velocity();
        let beta = ctx.beta.as_slice();

        // Incremental forward: K x_hat = -int dir exp(beta) Tu.Tw.
        let mut rhs = model.robin_source(beta, dir.as_slice(), &ctx.u);
        rhs.iter_mut().for_each(|v| *v = -*v);
        let x_hat = ctx.forward.solve(&rhs)?;
        let u_hat = dofs.expand_velocity(&x_hat);

        // Incremental adjoint.
        let w = self.obs.weight_apply(&u_hat)?;
        let mut rhs = vec![0.0; model.n_unknowns()];
        dofs.restrict_velocity(&w, &mut rhs[..nv]);
        if mode == HessianMode::Full {
            let second = model.viscous_second_variation(&ctx.u, &ctx.v, &u_hat);
            let cross = model.robin_source(beta, dir.as_slice(), &ctx.v);
            for ((r, a), b) in rhs.iter_mut().zip(&second).zip(&cross) {
                *r += a + b;
            }
        }
        rhs.iter_mut().for_each(|v| *v = -*v);
        let lam_hat = ctx.forward.solve(&rhs)?;
        let v_hat = dofs.expand_velocity(&lam_hat);
        self.counters.incremental_solves.fetch_add(2, Ordering::Relaxed);

        let mut h = model.basal_pairing(beta, None, &ctx.u, &v_hat);
        if mode == HessianMode::Full {
            h += model.basal_pairing(beta, Some(dir.as_slice()), &ctx.u, &ctx.v);
            h += model.basal_pairing(beta, None, &u_hat, &ctx.v);
        }
        Ok(h)
    }

    /// Full Hessian action: misfit part plus the prior precision.
    pub fn hessian_action(&self, ctx: &GradientContext, dir: &DVector<f64>, mode: HessianMode) -> Result<DVector<f64>> {
        Ok(self.misfit_hessian_action(ctx, dir, mode)? + self.prior.precision_apply(dir))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mesh::DomainSpec;
    use crate::prior::PriorParams;
    use crate::stokes::PhysicsParams;

    fn truth(mesh: &FlowlineMesh) -> DVector<f64> {
        DVector::from_iterator(
            mesh.basal_dof_count(),
            mesh.basal_coords()
                .iter()
                .map(|c| 1.0 - 2.0 * (-((c[0] - 55.0) / 10.0).powi(2)).exp()),
        )
    }

    fn problem(nx: usize, nz: usize, mode: MisfitMode) -> InverseProblem {
        let mesh = Arc::new(FlowlineMesh::new(DomainSpec::desk_default(), nx, nz, 2).unwrap());
        let model = Arc::new(StokesModel::new(Arc::clone(&mesh), PhysicsParams::default()).unwrap());
        let bt = truth(&mesh);
        let sol = model.solve_forward(bt.as_slice(), &NewtonConfig::default(), None).unwrap();
        let u = model.dofs().expand_velocity(&sol.x);
        let trace = BoundaryTrace::new(&mesh, BoundaryTag::Top, 2).unwrap();
        let d = trace.restrict(&u).unwrap();
        let sigma = relative_noise_sigma(&d, 0.1, 1e-9);
        let obs = ObservationSet::new(&mesh, d, sigma, 1e-9, mode).unwrap();
        let prior = PriorModel::new(&mesh, PriorParams { gamma: 1.0, delta: 0.1, kappa: 1.0, beta0: 0.5 }).unwrap();
        InverseProblem::new(model, obs, prior, NewtonConfig::default()).unwrap()
    }

    fn random_dir(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn perfect_fit_gives_zero_adjoint_and_misfit() {
        let p = problem(8, 2, MisfitMode::Bayesian);
        let bt = truth(p.model.mesh());
        let ctx = p.gradient_context(&bt, None, None).unwrap();
        assert!(ctx.cost.misfit < 1e-18);
        assert!(ctx.v.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = problem(8, 2, MisfitMode::Bayesian);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let beta = truth(p.model.mesh()).add_scalar(0.3) + random_dir(p.prior.len(), &mut rng) * 0.2;
        let ctx = p.gradient_context(&beta, None, None).unwrap();
        let h = 1e-5 * beta.amax().max(1.0);
        for _ in 0..4 {
            let d = random_dir(p.prior.len(), &mut rng);
            let jp = p.eval_cost(&(&beta + &d * h), Some(&ctx.forward.x)).unwrap().0.total;
            let jm = p.eval_cost(&(&beta - &d * h), Some(&ctx.forward.x)).unwrap().0.total;
            let fd = (jp - jm) / (2.0 * h);
            let an = ctx.gradient.dot(&d);
            assert!((fd - an).abs() < 1e-5 * an.abs(), "fd {fd} adjoint {an}");
        }
    }

    #[test]
    fn hessian_is_symmetric_and_matches_gradient_differences() {
        let p = problem(8, 2, MisfitMode::Deterministic);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = p.prior.len();
        let beta = truth(p.model.mesh()).add_scalar(0.5) + random_dir(n, &mut rng) * 0.3;
        let ctx = p.gradient_context(&beta, None, None).unwrap();
        for mode in [HessianMode::Full, HessianMode::GaussNewton] {
            for _ in 0..5 {
                let (a, b) = (random_dir(n, &mut rng), random_dir(n, &mut rng));
                let ha = p.hessian_action(&ctx, &a, mode).unwrap();
                let hb = p.hessian_action(&ctx, &b, mode).unwrap();
                let (x, y) = (ha.dot(&b), hb.dot(&a));
                assert!((x - y).abs() < 1e-8 * x.abs().max(y.abs()), "{mode:?}: {x} vs {y}");
            }
        }
        let d = random_dir(n, &mut rng);
        let hd = p.hessian_action(&ctx, &d, HessianMode::Full).unwrap();
        let h = 1e-4;
        let gp = p.gradient_context(&(&beta + &d * h), None, Some(&ctx.forward.x)).unwrap().gradient;
        let gm = p.gradient_context(&(&beta - &d * h), None, Some(&ctx.forward.x)).unwrap().gradient;
        let fd = (gp - gm) / (2.0 * h);
        assert!((&fd - &hd).norm() < 1e-4 * hd.norm(), "rel {}", (&fd - &hd).norm() / hd.norm());
    }

    #[test]
    fn expected_bayesian_misfit_is_half_the_data_count() {
        let p = problem(8, 2, MisfitMode::Bayesian);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let clean = p.obs.d_obs.clone();
        let n_draws = 100;
        let mut total = 0.0;
        for _ in 0..n_draws {
            let e = p.obs.sample_noise(&mut rng).unwrap();
            let noisy: Vec<f64> = clean.iter().zip(&e).map(|(a, b)| a + b).collect();
            let o = p.obs.with_data(noisy).unwrap();
            let r: Vec<f64> = clean.iter().zip(&o.d_obs).map(|(a, b)| a - b).collect();
            let wr = apply_interleaved(o.weighted_mass(), &r, 2);
            total += 0.5 * r.iter().zip(&wr).map(|(a, b)| a * b).sum::<f64>();
        }
        let mean = total / n_draws as f64;
        let half_m = clean.len() as f64 / 2.0;
        assert!((mean - half_m).abs() < 0.2 * half_m, "mean misfit {mean} vs {half_m}");
    }
}
