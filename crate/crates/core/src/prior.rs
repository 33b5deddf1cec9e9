//! Elliptic prior / regularization on the basal trace.
//!
//! With `K = gamma S + delta M` assembled on the continuous P1 basal space, the
//! precision is `K` for `kappa = 1/2` and `K M^-1 K` for `kappa = 1`. Everything is
//! dense: the basal space is one-dimensional and small.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, FlowlineMesh, TraceSpace};
use crate::quadrature::QuadratureRule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorParams {
    pub gamma: f64,
    pub delta: f64,
    /// Exponent of the elliptic operator; 0.5 or 1.
    pub kappa: f64,
    /// Constant mean / reference field.
    #[serde(default)]
    pub beta0: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self::bayesian_default()
    }
}

impl PriorParams {
    pub fn bayesian_default() -> Self {
        Self {
            gamma: 10.0,
            delta: 1e-5,
            kappa: 1.0,
            beta0: 0.0,
        }
    }

    pub fn tikhonov_default(gamma: f64) -> Self {
        Self {
            gamma,
            delta: 1e-8,
            kappa: 0.5,
            beta0: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("prior gamma must be positive, got {}", self.gamma)));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::Singular(format!(
                "prior delta must be positive (the Laplacian alone is singular), got {}",
                self.delta
            )));
        }
        if self.kappa != 0.5 && self.kappa != 1.0 {
            return Err(Error::InvalidArgument(format!("kappa must be 0.5 or 1, got {}", self.kappa)));
        }
        if !self.beta0.is_finite() {
            return Err(Error::NonFinite("prior mean"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PriorModel {
    pub params: PriorParams,
    pub beta0: DVector<f64>,
    stiffness: DMatrix<f64>,
    mass: DMatrix<f64>,
    k: DMatrix<f64>,
    k_chol: Cholesky<f64, Dyn>,
    m_chol: Cholesky<f64, Dyn>,
}

/// Laplace-Beltrami stiffness of the P1 basal space along the (curved) bed.
pub fn basal_stiffness(mesh: &FlowlineMesh) -> DMatrix<f64> {
    let n = mesh.basal_dof_count();
    let weights = QuadratureRule::gauss_legendre(mesh.k + 1).weights;
    let mut s = DMatrix::zeros(n, n);
    // hat_0 = (1 - t)/2, hat_1 = (1 + t)/2 on the reference facet.
    let dhat = [-0.5, 0.5];
    for f in mesh.facets_tagged(BoundaryTag::Bottom) {
        let v = f.basal.expect("bottom facet");
        for (q, w) in f.qp.iter().zip(&weights) {
            let ds_dt = q.jxw / w;
            for a in 0..2 {
                for b in 0..2 {
                    s[(v[a], v[b])] += w * dhat[a] * dhat[b] / ds_dt;
                }
            }
        }
    }
    s
}

impl PriorModel {
    pub fn new(mesh: &FlowlineMesh, params: PriorParams) -> Result<Self> {
        let mass = mesh.assemble_boundary_mass(BoundaryTag::Bottom, TraceSpace::Basal)?;
        let stiffness = basal_stiffness(mesh);
        let beta0 = DVector::from_element(mesh.basal_dof_count(), params.beta0);
        Self::from_matrices(stiffness, mass, params, beta0)
    }

    pub fn from_matrices(stiffness: DMatrix<f64>, mass: DMatrix<f64>, params: PriorParams, beta0: DVector<f64>) -> Result<Self> {
        params.validate()?;
        let n = mass.nrows();
        if stiffness.shape() != (n, n) || mass.shape() != (n, n) || beta0.len() != n {
            return Err(Error::InvalidArgument("prior operator shapes differ".into()));
        }
        let k = &stiffness * params.gamma + &mass * params.delta;
        let k_chol = k.clone().cholesky().ok_or_else(|| Error::Singular("prior operator K".into()))?;
        let m_chol = mass.clone().cholesky().ok_or_else(|| Error::Singular("basal mass matrix".into()))?;
        Ok(Self {
            params,
            beta0,
            stiffness,
            mass,
            k,
            k_chol,
            m_chol,
        })
    }

    /// Same operators with another regularization weight (for continuation and scans).
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let params = PriorParams { gamma, ..self.params };
        Self::from_matrices(self.stiffness.clone(), self.mass.clone(), params, self.beta0.clone())
    }

    pub fn len(&self) -> usize {
        self.mass.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }

    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.stiffness
    }

    /// `K = gamma S + delta M`.
    pub fn operator(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn mass_solve(&self, w: &DVector<f64>) -> DVector<f64> {
        self.m_chol.solve(w)
    }

    /// Norm of a dual vector, `sqrt(g^T M^-1 g)`.
    pub fn dual_norm(&self, g: &DVector<f64>) -> f64 {
        g.dot(&self.mass_solve(g)).max(0.0).sqrt()
    }

    /// Precision action `Gamma_prior^-1 v`, returning a dual vector.
    pub fn precision_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let kv = &self.k * v;
        if self.params.kappa == 0.5 {
            kv
        } else {
            &self.k * self.m_chol.solve(&kv)
        }
    }

    /// Covariance action `Gamma_prior w` on a dual vector.
    pub fn covariance_apply(&self, w: &DVector<f64>) -> DVector<f64> {
        let y = self.k_chol.solve(w);
        if self.params.kappa == 0.5 {
            y
        } else {
            self.k_chol.solve(&(&self.mass * y))
        }
    }

    /// `R(beta) = 1/2 (beta - beta0)^T Gamma_prior^-1 (beta - beta0)`.
    pub fn reg_value(&self, beta: &DVector<f64>) -> f64 {
        let d = beta - &self.beta0;
        0.5 * d.dot(&self.precision_apply(&d))
    }

    pub fn reg_gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.precision_apply(&(beta - &self.beta0))
    }

    pub fn dense_precision(&self) -> DMatrix<f64> {
        if self.params.kappa == 0.5 {
            self.k.clone()
        } else {
            &self.k * self.m_chol.solve(&self.k)
        }
    }

    pub fn dense_covariance(&self) -> DMatrix<f64> {
        let kinv = self.k_chol.inverse();
        let c = if self.params.kappa == 0.5 {
            kinv
        } else {
            &kinv * &self.mass * &kinv
        };
        (&c + c.transpose()) * 0.5
    }

    /// Zero-mean draw with covariance `Gamma_prior`.
    pub fn sample_fluctuation<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.len();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        if self.params.kappa == 0.5 {
            // K = L L^T, x = L^-T z.
            let l = self.k_chol.l();
            l.transpose()
                .solve_upper_triangular(&z)
                .expect("Cholesky factor is nonsingular")
        } else {
            let lz = self.m_chol.l() * z;
            self.k_chol.solve(&lz)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        &self.beta0 + self.sample_fluctuation(rng)
    }

    /// Diagonal of `Gamma_prior`.
    pub fn pointwise_variance(&self) -> DVector<f64> {
        let n = self.len();
        DVector::from_fn(n, |i, _| {
            let e = DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 });
            self.covariance_apply(&e)[i]
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mesh::{DomainSpec, LateralBc};

    fn mesh(nx: usize) -> FlowlineMesh {
        let spec = DomainSpec::slab(10.0, 0.0, 1.0, LateralBc::NoSlip, LateralBc::TractionFree);
        FlowlineMesh::new(spec, nx, 1, 2).unwrap()
    }

    fn params(kappa: f64) -> PriorParams {
        PriorParams {
            gamma: 0.7,
            delta: 0.3,
            kappa,
            beta0: 0.25,
        }
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let m = mesh(12);
        let s = basal_stiffness(&m);
        let one = DVector::from_element(s.nrows(), 1.0);
        assert!((s * one).amax() < 1e-13);
    }

    #[test]
    fn reg_gradient_vanishes_at_mean_and_reduces_to_tikhonov() {
        let m = mesh(10);
        for kappa in [0.5, 1.0] {
            let p = PriorModel::new(&m, params(kappa)).unwrap();
            assert!(p.reg_gradient(&p.beta0).amax() == 0.0);
        }
        let p = PriorModel::new(&m, params(0.5)).unwrap();
        let c = 2.0;
        let beta = &p.beta0 + DVector::from_element(p.len(), c);
        let expect = p.mass() * DVector::from_element(p.len(), p.params.delta * c);
        assert!((p.reg_gradient(&beta) - expect).amax() < 1e-13);
    }

    #[test]
    fn kappa_one_matches_dense_composition() {
        let m = mesh(20);
        let p = PriorModel::new(&m, params(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = DVector::from_fn(p.len(), |_, _| rng.random_range(-1.0..1.0));
        let dense = p.operator() * p.mass().clone().try_inverse().unwrap() * p.operator() * &v;
        assert!((p.precision_apply(&v) - &dense).amax() < 1e-10 * dense.amax());
    }

    #[test]
    fn covariance_inverts_precision() {
        let m = mesh(15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kappa in [0.5, 1.0] {
            let p = PriorModel::new(&m, params(kappa)).unwrap();
            for _ in 0..50 {
                let v = DVector::from_fn(p.len(), |_, _| rng.random_range(-1.0..1.0));
                let back = p.covariance_apply(&p.precision_apply(&v));
                assert!((back - &v).norm() < 1e-10 * v.norm());
            }
            let c = p.dense_covariance();
            let eig = c.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() > 0.0);
            let var = p.pointwise_variance();
            for i in 0..p.len() {
                assert!((var[i] - c[(i, i)]).abs() < 1e-10 * c[(i, i)]);
            }
        }
    }

    #[test]
    fn large_delta_limit_scales_with_inverse_mass() {
        let m = mesh(8);
        for kappa in [0.5f64, 1.0] {
            let delta = 1e8;
            let p = PriorModel::new(&m, PriorParams { gamma: 1.0, delta, kappa, beta0: 0.0 }).unwrap();
            let one = DVector::from_element(p.len(), 1.0);
            let w = p.mass() * &one;
            let got = p.covariance_apply(&w);
            let expect = &one * delta.powf(-2.0 * kappa);
            assert!((got - &expect).amax() < 1e-6 * expect.amax());
        }
    }

    #[test]
    fn variance_decreases_with_delta() {
        let m = mesh(10);
        for kappa in [0.5, 1.0] {
            let a = PriorModel::new(&m, params(kappa)).unwrap();
            let b = PriorModel::new(&m, PriorParams { delta: 0.6, ..params(kappa) }).unwrap();
            let (va, vb) = (a.pointwise_variance(), b.pointwise_variance());
            assert!(va.iter().zip(vb.iter()).all(|(x, y)| y < x));
            // Reflection symmetry on a symmetric slab.
            let n = va.len();
            for i in 0..n {
                assert!((va[i] - va[n - 1 - i]).abs() < 1e-10 * va[i]);
            }
        }
    }

    #[test]
    fn zero_delta_is_rejected() {
        let m = mesh(4);
        let err = PriorModel::new(&m, PriorParams { delta: 0.0, ..params(1.0) }).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn samples_are_reproducible_and_match_covariance() {
        let m = mesh(9);
        for kappa in [0.5, 1.0] {
            let p = PriorModel::new(&m, params(kappa)).unwrap();
            let a = p.sample(&mut ChaCha8Rng::seed_from_u64(7));
            let b = p.sample(&mut ChaCha8Rng::seed_from_u64(7));
            assert_eq!(a, b);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let n = p.len();
            let draws = 10_000;
            let mut cov = DMatrix::zeros(n, n);
            let mut mean = DVector::zeros(n);
            for _ in 0..draws {
                let s = p.sample(&mut rng);
                let d = &s - &p.beta0;
                mean += &d;
                cov += &d * d.transpose();
            }
            mean /= draws as f64;
            cov /= draws as f64;
            let exact = p.dense_covariance();
            assert!(mean.norm() < 3.0 * (exact.trace() / draws as f64).sqrt());
            let mut entries: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
            entries.sort_by(|x, y| exact[*y].abs().total_cmp(&exact[*x].abs()));
            for &(i, j) in entries.iter().take(10) {
                assert!((cov[(i, j)] - exact[(i, j)]).abs() < 0.05 * exact[(i, j)].abs());
            }
        }
    }
}
