//! Inexact Newton-CG for the regularized / MAP problem, and L-curve scans.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::adjoint::{CostBreakdown, GradientContext, HessianMode, InverseProblem, SolveCounts};
use crate::error::{Error, Result};
use crate::fields::fmt17;
use crate::stokes::ForwardSolution;

/// When to use the Gauss-Newton rather than the full Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianPolicy {
    Full,
    GaussNewton,
    /// Gauss-Newton until the gradient has dropped by `full_switch`, then full.
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationConfig {
    pub enabled: bool,
    /// First stage uses `start_factor * gamma`.
    pub start_factor: f64,
    /// Division factor between stages.
    pub factor: f64,
    /// Relative gradient reduction that ends an intermediate stage.
    pub stage_tol: f64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            start_factor: 100.0,
            factor: 10.0,
            stage_tol: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonCgConfig {
    pub grad_reduction_target: f64,
    pub max_newton: usize,
    pub max_cg_per_newton: usize,
    /// Eisenstat-Walker Choice 2: `eta = ew_gamma (|g_k| / |g_{k-1}|)^ew_alpha`.
    pub ew_gamma: f64,
    pub ew_alpha: f64,
    pub ew_floor: f64,
    pub ew_cap: f64,
    pub armijo_c1: f64,
    pub shrink: f64,
    pub min_alpha: f64,
    /// Relative accuracy of cost evaluations. When the predicted decrease of a
    /// step falls below it, sufficient decrease is judged on the gradient norm.
    pub cost_resolution: f64,
    pub hessian: HessianPolicy,
    pub full_switch: f64,
    pub continuation: ContinuationConfig,
}

impl Default for NewtonCgConfig {
    fn default() -> Self {
        Self {
            grad_reduction_target: 1e-5,
            max_newton: 60,
            max_cg_per_newton: 200,
            ew_gamma: 0.9,
            ew_alpha: 2.0,
            ew_floor: 1e-6,
            ew_cap: 0.5,
            armijo_c1: 1e-4,
            shrink: 0.5,
            min_alpha: 1e-8,
            cost_resolution: 1e-10,
            hessian: HessianPolicy::Adaptive,
            full_switch: 1e-2,
            continuation: ContinuationConfig::default(),
        }
    }
}

impl NewtonCgConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.continuation;
        let ok = self.grad_reduction_target > 0.0
            && self.grad_reduction_target < 1.0
            && self.max_newton > 0
            && self.max_cg_per_newton > 0
            && self.ew_gamma > 0.0
            && self.ew_gamma <= 1.0
            && self.ew_alpha > 1.0
            && self.ew_floor > 0.0
            && self.ew_cap < 1.0
            && self.ew_floor <= self.ew_cap
            && self.armijo_c1 > 0.0
            && self.armijo_c1 < 0.5
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.min_alpha > 0.0
            && self.cost_resolution >= 0.0
            && self.full_switch > 0.0
            && self.full_switch <= 1.0
            && c.start_factor >= 1.0
            && c.factor > 1.0
            && c.stage_tol > 0.0
            && c.stage_tol < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid Newton-CG configuration {self:?}")))
        }
    }
}

/// Outcome of a (truncated) preconditioned CG solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub step: DVector<f64>,
    pub iterations: usize,
    pub negative_curvature: bool,
    pub converged: bool,
    /// Final preconditioned residual norm relative to the gradient's.
    pub relative_residual: f64,
}

/// Steihaug-truncated PCG for `H p = -g`, stopping once `norm(H p + g) <= tol norm(g)`.
pub fn steihaug_pcg(
    mut hessian: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    grad: &DVector<f64>,
    precond: impl Fn(&DVector<f64>) -> DVector<f64>,
    norm: impl Fn(&DVector<f64>) -> f64,
    tol: f64,
    max_iters: usize,
) -> Result<CgOutcome> {
    let n = grad.len();
    let mut p = DVector::zeros(n);
    let mut r = -grad;
    let mut z = precond(&r);
    let mut rz = r.dot(&z);
    let r0 = norm(&r);
    if r0 == 0.0 {
        return Ok(CgOutcome {
            step: p,
            iterations: 0,
            negative_curvature: false,
            converged: true,
            relative_residual: 0.0,
        });
    }
    let mut d = z.clone();
    let mut it = 0;
    while it < max_iters {
        let hd = hessian(&d)?;
        it += 1;
        let curv = d.dot(&hd);
        if curv <= 0.0 {
            if it == 1 {
                p = z.clone();
            }
            return Ok(CgOutcome {
                step: p,
                iterations: it,
                negative_curvature: true,
                converged: false,
                relative_residual: norm(&r) / r0,
            });
        }
        let alpha = rz / curv;
        p.axpy(alpha, &d, 1.0);
        r.axpy(-alpha, &hd, 1.0);
        z = precond(&r);
        let rz_new = r.dot(&z);
        let rel = norm(&r) / r0;
        if rel <= tol {
            return Ok(CgOutcome {
                step: p,
                iterations: it,
                negative_curvature: false,
                converged: true,
                relative_residual: rel,
            });
        }
        let b = rz_new / rz;
        rz = rz_new;
        d = &z + &d * b;
    }
    Ok(CgOutcome {
        step: p,
        iterations: it,
        negative_curvature: false,
        converged: false,
        relative_residual: norm(&r) / r0,
    })
}

/// Backtracking until `J(beta + alpha p) <= J(beta) + c1 alpha <g, p>`.
///
/// `cost(alpha)` returns `None` when the trial point cannot be evaluated (treated as
/// a rejection). Returns the accepted step and the number of trials.
pub fn armijo_linesearch(
    mut cost: impl FnMut(f64) -> Option<f64>,
    j0: f64,
    slope: f64,
    c1: f64,
    shrink: f64,
    min_alpha: f64,
) -> Result<(f64, usize)> {
    if !(slope < 0.0) {
        return Err(Error::InvalidArgument(format!("line search needs a descent direction, slope {slope}")));
    }
    let mut alpha = 1.0;
    let mut trials = 0;
    while alpha >= min_alpha {
        trials += 1;
        if let Some(j) = cost(alpha) {
            if j <= j0 + c1 * alpha * slope {
                return Ok((alpha, trials));
            }
        }
        alpha *= shrink;
    }
    Err(Error::LineSearch(format!("no sufficient decrease down to step {min_alpha:e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub stage: usize,
    pub gamma: f64,
    /// Gradient norm before the step.
    pub grad_norm: f64,
    pub misfit: f64,
    pub reg: f64,
    pub total: f64,
    pub cg_iters: usize,
    pub step_length: f64,
    pub forcing: f64,
    pub full_hessian: bool,
    pub negative_curvature: bool,
    /// Accepted on the gradient-norm test because the predicted decrease was
    /// below the cost resolution.
    pub roundoff_step: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InversionRecord {
    pub iterations: Vec<IterationLog>,
    pub reference_grad_norm: f64,
    pub final_grad_norm: f64,
    pub final_cost: Option<(f64, f64, f64)>,
    pub newton_iters: usize,
    pub cg_iters: usize,
    pub line_search_trials: usize,
    /// Nonlinear forward solves outside the line search.
    pub forward_solves: usize,
    pub adjoint_solves: usize,
    pub incremental_solves: usize,
    /// Linearized solves inside the nonlinear forward solves.
    pub forward_newton_steps: usize,
    pub converged: bool,
}

impl InversionRecord {
    /// `forward solves + adjoint solves + 2 * CG iterations + line-search evaluations`.
    pub fn stokes_solves(&self) -> usize {
        self.forward_solves + self.adjoint_solves + 2 * self.cg_iters + self.line_search_trials
    }

    /// Linear(ized) Stokes solves: forward Newton corrections, adjoints, incremental solves.
    pub fn linearized_solves(&self) -> usize {
        self.forward_newton_steps + self.adjoint_solves + self.incremental_solves
    }

    pub fn average_cg(&self) -> f64 {
        if self.newton_iters == 0 {
            0.0
        } else {
            self.cg_iters as f64 / self.newton_iters as f64
        }
    }

    fn absorb(&mut self, counts: &SolveCounts, trials: usize) {
        self.forward_solves += counts.forward_solves - trials;
        self.adjoint_solves += counts.adjoint_solves;
        self.incremental_solves += counts.incremental_solves;
        self.forward_newton_steps += counts.forward_newton_steps;
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("converged", self.converged.to_string());
        kv("newton_iters", self.newton_iters.to_string());
        kv("cg_iters", self.cg_iters.to_string());
        kv("line_search_trials", self.line_search_trials.to_string());
        kv("forward_solves", self.forward_solves.to_string());
        kv("adjoint_solves", self.adjoint_solves.to_string());
        kv("incremental_solves", self.incremental_solves.to_string());
        kv("forward_newton_steps", self.forward_newton_steps.to_string());
        kv("stokes_solves", self.stokes_solves().to_string());
        kv("linearized_stokes_solves", self.linearized_solves().to_string());
        kv("reference_grad_norm", fmt17(self.reference_grad_norm));
        kv("final_grad_norm", fmt17(self.final_grad_norm));
        kv(
            "grad_reduction",
            fmt17(if self.reference_grad_norm > 0.0 {
                self.final_grad_norm / self.reference_grad_norm
            } else {
                0.0
            }),
        );
        if let Some((m, r, t)) = self.final_cost {
            kv("misfit", fmt17(m));
            kv("reg", fmt17(r));
            kv("total", fmt17(t));
        }
        for (i, it) in self.iterations.iter().enumerate() {
            kv(
                &format!("iter.{i}"),
                format!(
                    "stage={} gamma={} grad_norm={} total={} cg={} alpha={} forcing={} full={} neg_curv={} roundoff={}",
                    it.stage,
                    fmt17(it.gamma),
                    fmt17(it.grad_norm),
                    fmt17(it.total),
                    it.cg_iters,
                    fmt17(it.step_length),
                    fmt17(it.forcing),
                    it.full_hessian,
                    it.negative_curvature,
                    it.roundoff_step
                ),
            );
        }
        s
    }
}

/// Result of [`invert`].
#[derive(Debug, Clone)]
pub struct InversionOutcome {
    pub beta: DVector<f64>,
    pub record: InversionRecord,
    /// Forward state, adjoint and gradient at the returned point.
    pub context: GradientContext,
}

/// Newton-CG loop at fixed regularization until `|g| <= tol_abs`.
struct StageResult {
    ctx: GradientContext,
    trials: usize,
    converged: bool,
}

fn newton_cg_stage(
    problem: &InverseProblem,
    cfg: &NewtonCgConfig,
    mut ctx: GradientContext,
    tol_abs: f64,
    full_below: f64,
    stage: usize,
    record: &mut InversionRecord,
) -> Result<StageResult> {
    let prior = &problem.prior;
    let mut prev_norm: Option<f64> = None;
    let mut prev_eta = cfg.ew_cap;
    let mut trials_total = 0;
    loop {
        let gnorm = prior.dual_norm(&ctx.gradient);
        record.final_grad_norm = gnorm;
        if gnorm <= tol_abs {
            return Ok(StageResult {
                ctx,
                trials: trials_total,
                converged: true,
            });
        }
        if record.newton_iters >= cfg.max_newton {
            return Ok(StageResult {
                ctx,
                trials: trials_total,
                converged: false,
            });
        }
        // Eisenstat-Walker forcing (Choice 2 with safeguard).
        let eta = match prev_norm {
            None => cfg.ew_cap,
            Some(prev) => {
                let mut e = cfg.ew_gamma * (gnorm / prev).powf(cfg.ew_alpha);
                let guard = cfg.ew_gamma * prev_eta.powf(cfg.ew_alpha);
                if guard > 0.1 {
                    e = e.max(guard);
                }
                e.clamp(cfg.ew_floor, cfg.ew_cap)
            }
        };
        let full = match cfg.hessian {
            HessianPolicy::Full => true,
            HessianPolicy::GaussNewton => false,
            HessianPolicy::Adaptive => gnorm <= full_below,
        };
        let mode = if full {
            HessianMode::Full
        } else {
            HessianMode::GaussNewton
        };
        let cg = steihaug_pcg(
            |d| problem.hessian_action(&ctx, d, mode),
            &ctx.gradient,
            |r| prior.covariance_apply(r),
            |r| prior.dual_norm(r),
            eta,
            cfg.max_cg_per_newton,
        )?;
        record.cg_iters += cg.iterations;
        let slope = ctx.gradient.dot(&cg.step);
        let resolution = cfg.cost_resolution * ctx.cost.total.abs().max(f64::MIN_POSITIVE);

        // Below the cost resolution Armijo cannot distinguish decrease from
        // noise; take the full step if it reduces the gradient norm without a
        // resolvable cost increase.
        if -slope <= resolution {
            let trial = &ctx.beta + &cg.step;
            let next = problem.gradient_context(&trial, None, Some(&ctx.forward.x))?;
            record.line_search_trials += 1;
            trials_total += 1;
            if prior.dual_norm(&next.gradient) < gnorm && next.cost.total <= ctx.cost.total + resolution {
                record.iterations.push(IterationLog {
                    stage,
                    gamma: prior.params.gamma,
                    grad_norm: gnorm,
                    misfit: ctx.cost.misfit,
                    reg: ctx.cost.reg,
                    total: ctx.cost.total,
                    cg_iters: cg.iterations,
                    step_length: 1.0,
                    forcing: eta,
                    full_hessian: full,
                    negative_curvature: cg.negative_curvature,
                    roundoff_step: true,
                });
                record.newton_iters += 1;
                ctx = next;
                prev_norm = Some(gnorm);
                prev_eta = eta;
                continue;
            }
        }

        let mut best: Option<(ForwardSolution, CostBreakdown)> = None;
        let mut trials = 0;
        let ls = armijo_linesearch(
            |alpha| {
                trials += 1;
                let trial = &ctx.beta + &cg.step * alpha;
                match problem.eval_cost(&trial, Some(&ctx.forward.x)) {
                    Ok((c, f)) => {
                        let t = c.total;
                        best = Some((f, c));
                        Some(t)
                    }
                    Err(_) => {
                        best = None;
                        None
                    }
                }
            },
            ctx.cost.total,
            slope,
            cfg.armijo_c1,
            cfg.shrink,
            cfg.min_alpha,
        );
        record.line_search_trials += trials;
        trials_total += trials;
        let (alpha, _) = ls?;
        let (fwd, _) = best.ok_or_else(|| Error::Consistency("accepted step without a forward state".into()))?;
        let beta = &ctx.beta + &cg.step * alpha;
        record.iterations.push(IterationLog {
            stage,
            gamma: prior.params.gamma,
            grad_norm: gnorm,
            misfit: ctx.cost.misfit,
            reg: ctx.cost.reg,
            total: ctx.cost.total,
            cg_iters: cg.iterations,
            step_length: alpha,
            forcing: eta,
            full_hessian: full,
            negative_curvature: cg.negative_curvature,
            roundoff_step: false,
        });
        record.newton_iters += 1;
        ctx = problem.gradient_context(&beta, Some(fwd), None)?;
        prev_norm = Some(gnorm);
        prev_eta = eta;
    }
}

/// Starting point and stopping reference for [`invert`].
#[derive(Debug, Clone)]
pub struct InversionStart {
    pub beta: DVector<f64>,
    /// Point whose gradient norm (at the target regularization) defines the
    /// reduction criterion; defaults to `beta`.
    pub reference: Option<DVector<f64>>,
}

impl InversionStart {
    pub fn at(beta: DVector<f64>) -> Self {
        Self { beta, reference: None }
    }
}

/// Minimizes `misfit + R` with inexact Newton-CG and regularization continuation.
pub fn invert(problem: &InverseProblem, cfg: &NewtonCgConfig, start: &InversionStart) -> Result<InversionOutcome> {
    cfg.validate()?;
    let n = problem.prior.len();
    if start.beta.len() != n {
        return Err(Error::InvalidArgument("initial field length mismatch".into()));
    }
    let mut record = InversionRecord::default();
    let before = problem.counts();

    let reference_point = start.reference.as_ref().unwrap_or(&start.beta);
    let ref_ctx = problem.gradient_context(reference_point, None, None)?;
    let g_ref = problem.prior.dual_norm(&ref_ctx.gradient);
    record.reference_grad_norm = g_ref;
    let tol_abs = cfg.grad_reduction_target * g_ref;
    let full_below = cfg.full_switch * g_ref;

    let target_gamma = problem.prior.params.gamma;
    let mut beta = start.beta.clone();
    let mut warm = Some(ref_ctx.forward.x.clone());
    let mut stage = 0;
    let mut stage_trials = 0;
    let mut ctx = if start.reference.is_none() { Some(ref_ctx) } else { None };

    if cfg.continuation.enabled && cfg.continuation.start_factor > 1.0 {
        let mut gamma = target_gamma * cfg.continuation.start_factor;
        while gamma > target_gamma * (1.0 + 1e-12) {
            let stage_problem = problem.with_prior(problem.prior.with_gamma(gamma)?)?;
            let c0 = stage_problem.gradient_context(&beta, None, warm.as_deref())?;
            let g0 = stage_problem.prior.dual_norm(&c0.gradient);
            let res = newton_cg_stage(
                &stage_problem,
                cfg,
                c0,
                cfg.continuation.stage_tol * g0,
                cfg.full_switch * g0,
                stage,
                &mut record,
            );
            let res = res?;
            stage_trials += res.trials;
            beta = res.ctx.beta.clone();
            warm = Some(res.ctx.forward.x.clone());
            stage += 1;
            gamma /= cfg.continuation.factor;
            ctx = None;
        }
    }

    let c0 = match ctx {
        Some(c) => c,
        None => problem.gradient_context(&beta, None, warm.as_deref())?,
    };
    let res = newton_cg_stage(problem, cfg, c0, tol_abs, full_below, stage, &mut record)?;
    let counts = problem.counts().since(&before);
    record.absorb(&counts, stage_trials + res.trials);
    record.converged = res.converged;
    let c = res.ctx.cost;
    record.final_cost = Some((c.misfit, c.reg, c.total));
    if !res.converged {
        return Err(Error::Optimization(format!(
            "gradient reduced only to {:.3e} of its initial norm after {} Newton iterations",
            record.final_grad_norm / g_ref,
            record.newton_iters
        )));
    }
    Ok(InversionOutcome {
        beta: res.ctx.beta.clone(),
        record,
        context: res.ctx,
    })
}

/// One row of an L-curve.
#[derive(Debug, Clone, PartialEq)]
pub struct LCurvePoint {
    pub gamma: f64,
    pub misfit: f64,
    /// `R(beta)` including the factor `gamma`.
    pub reg: f64,
    pub total: f64,
    pub newton_iters: usize,
    pub cg_iters: usize,
    pub error: Option<String>,
}

impl LCurvePoint {
    /// Regularization seminorm `R / gamma`.
    pub fn seminorm(&self) -> f64 {
        self.reg / self.gamma
    }
}

/// Runs one inversion per `gamma` (largest first), warm-starting each from the
/// previous solution. Failed points are recorded and the scan continues.
pub fn lcurve_scan(problem: &InverseProblem, gammas: &[f64], cfg: &NewtonCgConfig, beta_init: &DVector<f64>) -> Result<Vec<LCurvePoint>> {
    if gammas.is_empty() || gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::InvalidArgument("gamma values must be positive".into()));
    }
    let mut order: Vec<f64> = gammas.to_vec();
    order.sort_by(|a, b| b.total_cmp(a));
    let mut rows = Vec::with_capacity(order.len());
    let mut previous: Option<DVector<f64>> = None;
    for &gamma in &order {
        let p = problem.with_prior(problem.prior.with_gamma(gamma)?)?;
        let (start, point_cfg) = match &previous {
            Some(b) => (
                InversionStart {
                    beta: b.clone(),
                    reference: Some(beta_init.clone()),
                },
                NewtonCgConfig {
                    continuation: ContinuationConfig {
                        enabled: false,
                        ..cfg.continuation
                    },
                    ..*cfg
                },
            ),
            None => (InversionStart::at(beta_init.clone()), *cfg),
        };
        match invert(&p, &point_cfg, &start) {
            Ok(out) => {
                let c = out.context.cost;
                rows.push(LCurvePoint {
                    gamma,
                    misfit: c.misfit,
                    reg: c.reg,
                    total: c.total,
                    newton_iters: out.record.newton_iters,
                    cg_iters: out.record.cg_iters,
                    error: None,
                });
                previous = Some(out.beta);
            }
            Err(e) => rows.push(LCurvePoint {
                gamma,
                misfit: f64::NAN,
                reg: f64::NAN,
                total: f64::NAN,
                newton_iters: 0,
                cg_iters: 0,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(rows)
}

/// Index of the maximum-curvature point of the curve `(log misfit, log seminorm)`
/// parametrized by `log gamma`. Rows may be in any order; the returned index refers
/// to the input slice. Needs at least three finite rows.
pub fn lcurve_corner(rows: &[LCurvePoint]) -> Option<usize> {
    let mut pts: Vec<(usize, f64, f64, f64)> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.error.is_none() && r.misfit > 0.0 && r.reg > 0.0)
        .map(|(i, r)| (i, r.gamma.ln(), r.misfit.ln(), r.seminorm().ln()))
        .collect();
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    if pts.len() < 3 {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for w in pts.windows(3) {
        let (t0, t1, t2) = (w[0].1, w[1].1, w[2].1);
        let (h0, h1) = (t1 - t0, t2 - t1);
        let d1 = |f0: f64, f1: f64, f2: f64| (-h1 / (h0 * (h0 + h1))) * f0 + ((h1 - h0) / (h0 * h1)) * f1 + (h0 / (h1 * (h0 + h1))) * f2;
        let d2 = |f0: f64, f1: f64, f2: f64| 2.0 * (f0 / (h0 * (h0 + h1)) - f1 / (h0 * h1) + f2 / (h1 * (h0 + h1)));
        let (x1, y1) = (d1(w[0].2, w[1].2, w[2].2), d1(w[0].3, w[1].3, w[2].3));
        let (x2, y2) = (d2(w[0].2, w[1].2, w[2].2), d2(w[0].3, w[1].3, w[2].3));
        let denom = (x1 * x1 + y1 * y1).powf(1.5);
        if !(denom > 0.0) {
            continue;
        }
        let kappa = (x1 * y2 - y1 * x2) / denom;
        if best.is_none_or(|(_, k)| kappa > k) {
            best = Some((w[1].0, kappa));
        }
    }
    best.map(|(i, _)| i)
}

/// `lcurve.csv` contents.
pub fn lcurve_csv(rows: &[LCurvePoint]) -> String {
    let mut s = String::from("gamma,misfit,reg,total,newton_iters,cg_iters\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt17(r.gamma),
            fmt17(r.misfit),
            fmt17(r.reg),
            fmt17(r.total),
            r.newton_iters,
            r.cg_iters
        ));
    }
    s
}
