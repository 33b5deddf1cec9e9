//! Globalized Newton iteration for the nonlinear Stokes system.

use serde::{Deserialize, Serialize};

use super::assembly::Linearization;
use super::krylov::{fgmres, BlockPreconditioner};
use super::{Factorization, SaddleMatrix, StokesModel};
use crate::error::{Error, Result};

/// Linear solver used for the Newton corrections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearSolverKind {
    /// Sparse LU of the assembled saddle-point matrix.
    #[default]
    Direct,
    /// Right-preconditioned FGMRES with an upper block-triangular preconditioner.
    Krylov,
}

/// Tolerance rule for inexact Krylov Newton corrections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForcingRule {
    /// Always `krylov_rtol`.
    #[default]
    Fixed,
    /// `0.9 (|r_k| / |r_{k-1}|)^2`, clipped to `[krylov_rtol, 0.1]`.
    EisenstatWalker,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iters: usize,
    /// Newton corrections taken even when the initial guess already meets the
    /// tolerance, so warm-started solves respond to small parameter changes.
    pub min_newton_steps: usize,
    /// Fixed-viscosity iterations taken before switching to Newton.
    pub picard_steps: usize,
    pub linear_solver: LinearSolverKind,
    pub krylov_rtol: f64,
    pub krylov_max_iters: usize,
    pub krylov_restart: usize,
    pub forcing: ForcingRule,
    /// Sufficient-decrease constant for the residual-norm line search.
    pub armijo_c: f64,
    pub shrink: f64,
    pub min_step: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-11,
            abs_tol: 1e-10,
            max_iters: 60,
            min_newton_steps: 1,
            picard_steps: 2,
            linear_solver: LinearSolverKind::Direct,
            krylov_rtol: 1e-12,
            krylov_max_iters: 600,
            krylov_restart: 120,
            forcing: ForcingRule::Fixed,
            armijo_c: 1e-4,
            shrink: 0.5,
            min_step: 1e-6,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rel_tol > 0.0
            && self.abs_tol > 0.0
            && self.max_iters > 0
            && self.min_newton_steps <= self.max_iters
            && self.krylov_rtol > 0.0
            && self.krylov_max_iters > 0
            && self.krylov_restart > 0
            && self.armijo_c > 0.0
            && self.armijo_c < 1.0
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.min_step > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid Newton configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonIterate {
    /// Residual norm after the step.
    pub residual_norm: f64,
    pub step_length: f64,
    pub linear_iters: usize,
    pub picard: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub initial_residual: f64,
    /// Reference norm the relative tolerance is measured against.
    pub reference_residual: f64,
    pub iterations: Vec<NewtonIterate>,
    pub residual_evaluations: usize,
    pub converged: bool,
}

impl ConvergenceRecord {
    pub fn final_residual(&self) -> f64 {
        self.iterations.last().map_or(self.initial_residual, |it| it.residual_norm)
    }

    pub fn newton_steps(&self) -> usize {
        self.iterations.len()
    }

    pub fn residual_history(&self) -> Vec<f64> {
        std::iter::once(self.initial_residual)
            .chain(self.iterations.iter().map(|i| i.residual_norm))
            .collect()
    }
}

/// Converged forward state with the factorized Newton operator at that state.
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub x: Vec<f64>,
    pub beta: Vec<f64>,
    pub record: ConvergenceRecord,
    pub jacobian: SaddleMatrix,
    pub factorization: Factorization,
}

impl ForwardSolution {
    /// Solves `K y = rhs` with the converged Newton operator (symmetric, so this
    /// is also the adjoint operator).
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.factorization.solve(rhs)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl StokesModel {
    /// Solves `r(x; beta) = 0` by a line-searched Newton iteration started from
    /// `initial`, or from the rest state with overburden pressure.
    pub fn solve_forward(&self, beta: &[f64], cfg: &NewtonConfig, initial: Option<&[f64]>) -> Result<ForwardSolution> {
        cfg.validate()?;
        let rest = self.hydrostatic_guess()?;
        let mut x = match initial {
            Some(x0) => {
                if x0.len() != self.n_unknowns() {
                    return Err(Error::InvalidArgument("initial guess length mismatch".into()));
                }
                x0.to_vec()
            }
            None => rest.clone(),
        };
        let mut record = ConvergenceRecord::default();
        let mut r = self.residual(&x, beta)?;
        record.residual_evaluations += 1;
        let mut rn = norm(&r);
        record.initial_residual = rn;
        record.reference_residual = if initial.is_some() {
            record.residual_evaluations += 1;
            norm(&self.residual(&rest, beta)?).max(rn)
        } else {
            rn
        };
        let tol = (cfg.rel_tol * record.reference_residual).max(cfg.abs_tol);
        let mut prev_rn = rn;

        while rn > tol || record.iterations.len() < cfg.min_newton_steps {
            let polishing = rn <= tol;
            if record.iterations.len() >= cfg.max_iters {
                return Err(Error::NonConvergence(Box::new(record)));
            }
            let picard = record.iterations.len() < cfg.picard_steps && initial.is_none();
            let lin = if picard {
                Linearization::Picard
            } else {
                Linearization::Newton
            };
            let k = self.assemble_linearized(&x, beta, lin)?;
            let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
            let (dx, linear_iters) = match cfg.linear_solver {
                LinearSolverKind::Direct => (self.factorize(&k)?.solve(&neg_r)?, 1),
                LinearSolverKind::Krylov => {
                    let rtol = match cfg.forcing {
                        ForcingRule::Fixed => cfg.krylov_rtol,
                        ForcingRule::EisenstatWalker if record.iterations.is_empty() => 0.1,
                        ForcingRule::EisenstatWalker => {
                            (0.9 * (rn / prev_rn).powi(2)).clamp(cfg.krylov_rtol, 0.1)
                        }
                    };
                    let pre = BlockPreconditioner::new(&k, self.schur_diagonal(&x))?;
                    let out = fgmres(
                        |v| k.apply(v),
                        |v| pre.apply(v),
                        &neg_r,
                        rtol,
                        cfg.krylov_max_iters,
                        cfg.krylov_restart,
                    )?;
                    if !out.converged {
                        return Err(Error::LinearSolver(format!(
                            "FGMRES stalled at relative residual {:.3e} after {} iterations",
                            out.relative_residual, out.iterations
                        )));
                    }
                    (out.x, out.iterations)
                }
            };

            // Backtracking on the residual norm (a polishing step is taken in full).
            let mut alpha = 1.0;
            loop {
                if polishing {
                    x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                    r = self.residual(&x, beta)?;
                    record.residual_evaluations += 1;
                    prev_rn = rn;
                    rn = norm(&r);
                    break;
                }
                let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + alpha * b).collect();
                let rt = self.residual(&trial, beta);
                record.residual_evaluations += 1;
                if let Ok(rt) = rt {
                    let tn = norm(&rt);
                    if tn <= (1.0 - cfg.armijo_c * alpha) * rn || (picard && tn < rn) {
                        x = trial;
                        r = rt;
                        prev_rn = rn;
                        rn = tn;
                        break;
                    }
                }
                alpha *= cfg.shrink;
                if alpha < cfg.min_step {
                    if picard {
                        // A poor fixed-viscosity step: fall through to Newton.
                        alpha = 0.0;
                        break;
                    }
                    return Err(Error::LineSearch(format!(
                        "forward Newton step rejected at residual {rn:.3e} (iteration {})",
                        record.iterations.len()
                    )));
                }
            }
            record.iterations.push(NewtonIterate {
                residual_norm: rn,
                step_length: alpha,
                linear_iters,
                picard,
            });
        }
        record.converged = true;
        let jacobian = self.jacobian(&x, beta)?;
        let factorization = self.factorize(&jacobian)?;
        Ok(ForwardSolution {
            x,
            beta: beta.to_vec(),
            record,
            jacobian,
            factorization,
        })
    }
}
