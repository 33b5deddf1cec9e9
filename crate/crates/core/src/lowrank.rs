//! Low-rank Gaussian approximation of the posterior at the MAP point.
//!
//! The dominant generalized eigenpairs of `H_misfit w = lambda Gamma_prior^-1 w`
//! are extracted with a double-pass randomized range finder in the
//! `Gamma_prior^-1` inner product. With `W` normalized so that
//! `W^T Gamma_prior^-1 W = I`, the posterior covariance is
//! `Gamma_post = Gamma_prior - W D W^T`, `D = diag(lambda / (1 + lambda))`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adjoint::{GradientContext, HessianMode, InverseProblem};
use crate::error::{Error, Result};
use crate::fields::fmt17;
use crate::prior::PriorModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GevdConfig {
    /// Largest number of eigenpairs computed.
    pub r_max: usize,
    pub oversample: usize,
    pub power_iters: usize,
    /// Eigenvalues below this are discarded.
    pub threshold: f64,
    /// Hessian used at the MAP point; full mode falls back to Gauss-Newton when
    /// significantly negative Ritz values appear.
    pub mode: HessianMode,
}

impl Default for GevdConfig {
    fn default() -> Self {
        Self {
            r_max: 40,
            oversample: 10,
            power_iters: 1,
            threshold: 0.2,
            mode: HessianMode::Full,
        }
    }
}

impl GevdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_max == 0 || !(self.threshold >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid GEVD configuration {self:?}")));
        }
        Ok(())
    }
}

/// Symmetric linear operator acting on parameter directions.
pub trait ParameterOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Misfit-only Hessian at a fixed linearization point.
pub struct MisfitHessianOperator<'a> {
    pub problem: &'a InverseProblem,
    pub context: &'a GradientContext,
    pub mode: HessianMode,
}

impl ParameterOperator for MisfitHessianOperator<'_> {
    fn dim(&self) -> usize {
        self.problem.prior.len()
    }

    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.problem.misfit_hessian_action(self.context, v, self.mode)
    }
}

/// Explicit matrix, used for oracles and synthetic tests.
pub struct DenseOperator(pub DMatrix<f64>);

impl ParameterOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.0 * v)
    }
}

/// Applies `op` to every column of `x`, spreading columns over `threads` workers.
pub fn apply_columns(op: &dyn ParameterOperator, x: &DMatrix<f64>, threads: usize) -> Result<DMatrix<f64>> {
    let cols: Vec<DVector<f64>> = x.column_iter().map(|c| c.into_owned()).collect();
    let threads = threads.max(1).min(cols.len().max(1));
    let results: Vec<Result<DVector<f64>>> = if threads == 1 {
        cols.iter().map(|c| op.apply(c)).collect()
    } else {
        let chunk = cols.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = cols
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|c| op.apply(c)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("Hessian worker panicked"))
                .collect()
        })
    };
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (j, r) in results.into_iter().enumerate() {
        out.set_column(j, &r?);
    }
    Ok(out)
}

/// Orthonormalizes the columns of `y` in the inner product `<a, b> = a^T B b`
/// (`b_apply` applies `B`), by two passes of modified Gram-Schmidt. Columns that
/// lose all but a `1e-12` fraction of their norm are dropped.
fn b_orthonormalize(y: &DMatrix<f64>, b_apply: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let mut q: Vec<DVector<f64>> = Vec::new();
    let mut bq: Vec<DVector<f64>> = Vec::new();
    for col in y.column_iter() {
        let mut v = col.into_owned();
        let scale = v.dot(&b_apply(&v)).max(0.0).sqrt();
        for _ in 0..2 {
            for (qi, bqi) in q.iter().zip(&bq) {
                let c = bqi.dot(&v);
                v.axpy(-c, qi, 1.0);
            }
        }
        let bv = b_apply(&v);
        let nrm = v.dot(&bv).max(0.0).sqrt();
        if nrm > 1e-12 * scale && nrm > 0.0 {
            q.push(v / nrm);
            bq.push(bv / nrm);
        }
    }
    let n = y.nrows();
    let mut out = DMatrix::zeros(n, q.len());
    for (j, c) in q.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

/// Eigenpairs of a symmetric matrix, sorted by decreasing eigenvalue.
fn sorted_eigen(t: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (t + t.transpose()) * 0.5;
    let n = sym.nrows();
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, order.len());
    for (j, &i) in order.iter().enumerate() {
        vecs.set_column(j, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Result of a randomized generalized eigensolve.
#[derive(Debug, Clone)]
pub struct GevdOutcome {
    /// All Ritz values, descending.
    pub ritz_values: Vec<f64>,
    /// Ritz vectors matching `ritz_values`, `Gamma_prior^-1`-orthonormal.
    pub ritz_vectors: DMatrix<f64>,
    /// Number of leading pairs with `lambda >= threshold`.
    pub rank: usize,
    /// True when even the smallest computed Ritz value passes the threshold.
    pub not_exhausted: bool,
    pub hessian_actions: usize,
}

impl GevdOutcome {
    pub fn eigvals(&self) -> &[f64] {
        &self.ritz_values[..self.rank]
    }

    pub fn eigvecs(&self) -> DMatrix<f64> {
        self.ritz_vectors.columns(0, self.rank).into_owned()
    }
}

/// Randomized double-pass generalized eigensolver for `H w = lambda Gamma_prior^-1 w`.
#[allow(clippy::too_many_arguments)]
pub fn randomized_gevd<R: Rng + ?Sized>(
    h: &dyn ParameterOperator,
    prior: &PriorModel,
    r_max: usize,
    oversample: usize,
    power_iters: usize,
    threshold: f64,
    rng: &mut R,
    threads: usize,
) -> Result<GevdOutcome> {
    let n = h.dim();
    if n != prior.len() {
        return Err(Error::InvalidArgument("operator and prior dimensions differ".into()));
    }
    let k = r_max + oversample;
    if k > n || r_max == 0 {
        return Err(Error::InvalidArgument(format!(
            "r_max + oversample = {k} must lie in 1..={n} (parameter dimension)"
        )));
    }
    let omega = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b_apply = |v: &DVector<f64>| prior.precision_apply(v);
    let cov_cols = |m: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (j, c) in m.column_iter().enumerate() {
            out.set_column(j, &prior.covariance_apply(&c.into_owned()));
        }
        out
    };

    let mut actions = 0;
    let mut y = cov_cols(&apply_columns(h, &omega, threads)?);
    actions += k;
    for _ in 0..power_iters {
        let q = b_orthonormalize(&y, b_apply);
        y = cov_cols(&apply_columns(h, &q, threads)?);
        actions += q.ncols();
    }
    let q = b_orthonormalize(&y, b_apply);
    let hq = apply_columns(h, &q, threads)?;
    actions += q.ncols();
    let t = q.transpose() * hq;
    let (vals, s) = sorted_eigen(&t);
    let w = &q * s;

    let keep = r_max.min(vals.len());
    let ritz_values: Vec<f64> = vals[..keep].to_vec();
    let ritz_vectors = w.columns(0, keep).into_owned();
    let rank = ritz_values.iter().take_while(|&&l| l >= threshold).count();
    Ok(GevdOutcome {
        not_exhausted: rank == keep && keep < n,
        ritz_values,
        ritz_vectors,
        rank,
        hessian_actions: actions,
    })
}

/// Assembles `H` column by column from unit-vector actions.
pub fn assemble_operator(h: &dyn ParameterOperator, threads: usize) -> Result<DMatrix<f64>> {
    let n = h.dim();
    let m = apply_columns(h, &DMatrix::identity(n, n), threads)?;
    Ok((&m + m.transpose()) * 0.5)
}

/// Dense generalized eigensolve `H w = lambda B w` with `W^T B W = I`, descending.
pub fn dense_gevd(h: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("generalized eigenproblem metric is not positive definite".into()))?;
    let l = chol.l();
    let linv_h = l
        .solve_lower_triangular(h)
        .ok_or_else(|| Error::Singular("triangular solve".into()))?;
    let c = l
        .solve_lower_triangular(&linv_h.transpose())
        .ok_or_else(|| Error::Singular("triangular solve".into()))?;
    let (vals, s) = sorted_eigen(&c);
    let w = l
        .transpose()
        .solve_upper_triangular(&s)
        .ok_or_else(|| Error::Singular("triangular solve".into()))?;
    Ok((vals, w))
}

/// `max_i |H w_i - lambda_i B w_i| / |lambda_1|` over the retained pairs (Euclidean norms).
pub fn gevd_residual(h: &dyn ParameterOperator, prior: &PriorModel, vals: &[f64], vecs: &DMatrix<f64>) -> Result<f64> {
    let scale = vals.first().map_or(1.0, |l| l.abs().max(f64::MIN_POSITIVE));
    let mut worst: f64 = 0.0;
    for (i, &l) in vals.iter().enumerate() {
        let w = vecs.column(i).into_owned();
        let r = h.apply(&w)? - prior.precision_apply(&w) * l;
        let bw = prior.precision_apply(&w).norm().max(f64::MIN_POSITIVE);
        worst = worst.max(r.norm() / (bw * scale));
    }
    Ok(worst)
}

/// Low-rank Gaussian posterior `N(beta_map, Gamma_prior - W D W^T)`.
#[derive(Debug, Clone)]
pub struct LowRankPosterior {
    pub beta_map: DVector<f64>,
    pub eigvals: Vec<f64>,
    pub eigvecs: DMatrix<f64>,
    pub prior: PriorModel,
    /// Ritz values computed but not retained, kept for reporting.
    pub discarded: Vec<f64>,
    pub mode: HessianMode,
    pub not_exhausted: bool,
}

impl LowRankPosterior {
    pub fn new(beta_map: DVector<f64>, eigvals: Vec<f64>, eigvecs: DMatrix<f64>, prior: PriorModel) -> Result<Self> {
        if eigvecs.ncols() != eigvals.len() || eigvecs.nrows() != prior.len() || beta_map.len() != prior.len() {
            return Err(Error::InvalidArgument("posterior factor dimensions disagree".into()));
        }
        if eigvals.iter().any(|l| !(*l > -1.0)) {
            return Err(Error::Consistency("posterior eigenvalue at or below -1".into()));
        }
        Ok(Self {
            beta_map,
            eigvals,
            eigvecs,
            prior,
            discarded: Vec::new(),
            mode: HessianMode::GaussNewton,
            not_exhausted: false,
        })
    }

    /// Prior-only posterior (rank zero).
    pub fn from_prior(beta_map: DVector<f64>, prior: PriorModel) -> Result<Self> {
        let n = prior.len();
        Self::new(beta_map, Vec::new(), DMatrix::zeros(n, 0), prior)
    }

    /// Builds the posterior at a converged MAP context.
    pub fn at_map<R: Rng + ?Sized>(
        problem: &InverseProblem,
        context: &GradientContext,
        cfg: &GevdConfig,
        rng: &mut R,
        threads: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = problem.prior.len();
        let r_max = cfg.r_max.min(n.saturating_sub(cfg.oversample)).max(1);
        let oversample = cfg.oversample.min(n - r_max);
        let run = |mode: HessianMode, rng: &mut R| {
            let op = MisfitHessianOperator {
                problem,
                context,
                mode,
            };
            randomized_gevd(&op, &problem.prior, r_max, oversample, cfg.power_iters, cfg.threshold, rng, threads)
        };
        let mut mode = cfg.mode;
        let mut out = run(mode, rng)?;
        let lead = out.ritz_values.first().copied().unwrap_or(0.0).abs();
        if mode == HessianMode::Full && out.ritz_values.iter().any(|&l| l < -1e-8 * lead) {
            mode = HessianMode::GaussNewton;
            out = run(mode, rng)?;
        }
        let mut post = Self::new(context.beta.clone(), out.eigvals().to_vec(), out.eigvecs(), problem.prior.clone())?;
        post.discarded = out.ritz_values[out.rank..].to_vec();
        post.mode = mode;
        post.not_exhausted = out.not_exhausted;
        Ok(post)
    }

    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }

    pub fn len(&self) -> usize {
        self.beta_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta_map.is_empty()
    }

    /// `lambda / (1 + lambda)` for each retained eigenvalue.
    pub fn d_diag(&self) -> DVector<f64> {
        DVector::from_iterator(self.rank(), self.eigvals.iter().map(|l| d_factor(*l)))
    }

    /// `V = Gamma_prior^-1 W`.
    pub fn v_factor(&self) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(self.len(), self.rank());
        for (j, c) in self.eigvecs.column_iter().enumerate() {
            v.set_column(j, &self.prior.precision_apply(&c.into_owned()));
        }
        v
    }

    /// Largest deviation of `W^T Gamma_prior^-1 W` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.eigvecs.transpose() * self.v_factor();
        (g - DMatrix::identity(self.rank(), self.rank())).amax()
    }

    /// `Gamma_post w` for a dual vector `w`.
    pub fn covariance_apply(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut y = self.prior.covariance_apply(w);
        if self.rank() > 0 {
            let c = self.eigvecs.transpose() * w;
            let dc = c.component_mul(&self.d_diag());
            y -= &self.eigvecs * dc;
        }
        y
    }

    pub fn dense_covariance(&self) -> DMatrix<f64> {
        let mut c = self.prior.dense_covariance();
        if self.rank() > 0 {
            let wd = &self.eigvecs * DMatrix::from_diagonal(&self.d_diag());
            c -= wd * self.eigvecs.transpose();
        }
        (&c + c.transpose()) * 0.5
    }

    /// Diagonal of `Gamma_post`.
    pub fn pointwise_variance(&self) -> Result<DVector<f64>> {
        let mut var = self.prior.pointwise_variance();
        let d = self.d_diag();
        for i in 0..self.len() {
            let drop: f64 = (0..self.rank()).map(|j| d[j] * self.eigvecs[(i, j)].powi(2)).sum();
            var[i] -= drop;
            if var[i] < -1e-12 {
                return Err(Error::Consistency(format!("negative posterior variance {:.3e} at node {i}", var[i])));
            }
            if var[i] <= 0.0 {
                var[i] = f64::MIN_POSITIVE;
            }
        }
        Ok(var)
    }

    /// Maps a zero-mean prior draw `y` to a posterior draw.
    pub fn sample_from_prior_draw(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut x = &self.beta_map + y;
        if self.rank() > 0 {
            let c = self.eigvecs.transpose() * self.prior.precision_apply(y);
            let s = DVector::from_iterator(self.rank(), self.eigvals.iter().map(|l| 1.0 - 1.0 / (1.0 + l).sqrt()));
            x -= &self.eigvecs * c.component_mul(&s);
        }
        x
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let y = self.prior.sample_fluctuation(rng);
        self.sample_from_prior_draw(&y)
    }

    /// Operator-norm bound on the truncation error relative to `|Gamma_prior|`.
    pub fn truncation_bound(discarded: &[f64]) -> f64 {
        discarded.iter().filter(|l| **l > 0.0).fold(0.0, |acc, l| acc + d_factor(*l))
    }

    /// `index,lambda` rows for the retained spectrum.
    pub fn spectrum_csv(&self) -> String {
        let mut s = String::from("index,lambda\n");
        for (i, l) in self.eigvals.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i + 1, fmt17(*l));
        }
        s
    }
}

/// `lambda / (1 + lambda)`.
pub fn d_factor(lambda: f64) -> f64 {
    lambda / (1.0 + lambda)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mesh::{DomainSpec, FlowlineMesh, LateralBc};
    use crate::prior::PriorParams;

    fn prior(nx: usize) -> PriorModel {
        let spec = DomainSpec::slab(10.0, 0.0, 1.0, LateralBc::NoSlip, LateralBc::TractionFree);
        let mesh = FlowlineMesh::new(spec, nx, 1, 2).unwrap();
        let params = PriorParams {
            gamma: 1.0,
            delta: 0.5,
            kappa: 1.0,
            beta0: 0.0,
        };
        PriorModel::new(&mesh, params).unwrap()
    }

    /// A symmetric positive semidefinite matrix with decaying spectrum.
    fn spd_like(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let d = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 50.0 * 0.5f64.powi(i as i32)));
        &q * d * q.transpose()
    }

    #[test]
    fn d_factor_spot_values() {
        assert_eq!(d_factor(0.0), 0.0);
        assert_eq!(d_factor(1.0), 0.5);
        assert_eq!(d_factor(3.0), 0.75);
        let s = 1.0 - 1.0 / 2f64.sqrt();
        assert!((2.0 * s - s * s - 0.5).abs() < 1e-15);
    }

    #[test]
    fn proportional_operator_has_flat_spectrum() {
        let p = prior(20);
        let h = DenseOperator(p.dense_precision() * 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = randomized_gevd(&h, &p, 5, 4, 1, 0.2, &mut rng, 1).unwrap();
        for l in &out.ritz_values {
            assert!((l - 3.0).abs() < 1e-9, "{l}");
        }
        let post = LowRankPosterior::new(DVector::zeros(21), out.eigvals().to_vec(), out.eigvecs(), p).unwrap();
        assert!(post.orthonormality_error() < 1e-8);
    }

    #[test]
    fn randomized_matches_dense_on_decaying_spectrum() {
        let p = prior(20);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = spd_like(21, &mut rng);
        let (dense, _) = dense_gevd(&h, &p.dense_precision()).unwrap();
        let op = DenseOperator(h);
        let out = randomized_gevd(&op, &p, 8, 10, 1, 0.2, &mut rng, 2).unwrap();
        for i in 0..5 {
            assert!((out.ritz_values[i] - dense[i]).abs() <= 1e-6 * dense[i], "{i}");
        }
        assert!(gevd_residual(&op, &p, &out.ritz_values[..5], &out.ritz_vectors).unwrap() < 1e-6);
    }

    #[test]
    fn full_rank_posterior_matches_dense_inverse() {
        let p = prior(12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = spd_like(13, &mut rng);
        let (vals, w) = dense_gevd(&h, &p.dense_precision()).unwrap();
        let post = LowRankPosterior::new(DVector::zeros(13), vals, w, p.clone()).unwrap();
        let dense = (&h + p.dense_precision()).try_inverse().unwrap();
        let lr = post.dense_covariance();
        assert!((&lr - &dense).amax() <= 1e-8 * dense.amax());
        let var = post.pointwise_variance().unwrap();
        for i in 0..13 {
            assert!((var[i] - dense[(i, i)]).abs() <= 1e-8 * dense[(i, i)]);
        }
    }

    #[test]
    fn rank_zero_is_prior() {
        let p = prior(10);
        let post = LowRankPosterior::from_prior(DVector::zeros(11), p.clone()).unwrap();
        let w = DVector::from_fn(11, |i, _| (i as f64).sin());
        assert_eq!(post.covariance_apply(&w), p.covariance_apply(&w));
        assert_eq!(post.pointwise_variance().unwrap(), p.pointwise_variance());
        let y = DVector::from_fn(11, |i, _| (i as f64).cos());
        assert_eq!(post.sample_from_prior_draw(&y), y);
    }

    #[test]
    fn sample_factor_reproduces_posterior_covariance() {
        // S = I - W diag(s) W^T Gamma^-1 applied to Gamma_prior gives Gamma_post.
        let p = prior(10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = spd_like(11, &mut rng);
        let (vals, w) = dense_gevd(&h, &p.dense_precision()).unwrap();
        let post = LowRankPosterior::new(DVector::zeros(11), vals[..4].to_vec(), w.columns(0, 4).into_owned(), p.clone()).unwrap();
        let c = p.dense_covariance();
        let mut s = DMatrix::zeros(11, 11);
        for j in 0..11 {
            let e = DVector::from_fn(11, |i, _| if i == j { 1.0 } else { 0.0 });
            s.set_column(j, &post.sample_from_prior_draw(&e));
        }
        let cs = &s * c * s.transpose();
        assert!((cs - post.dense_covariance()).amax() < 1e-10 * post.dense_covariance().amax());
    }
}
