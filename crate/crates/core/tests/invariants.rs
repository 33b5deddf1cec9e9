use flowline_uq::lowrank::{dense_gevd, d_factor, LowRankPosterior};
use flowline_uq::mesh::{BoundaryTag, DomainSpec, FlowlineMesh, LateralBc};
use flowline_uq::prior::{PriorModel, PriorParams};
use flowline_uq::quadrature::{LagrangeBasis, QuadratureRule};
use flowline_uq::stokes::{GlenRheology, SymTensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn slab_mesh(nx: usize, grading: f64) -> FlowlineMesh {
    let mut spec = DomainSpec::slab(10.0, 0.0, 1.0, LateralBc::NoSlip, LateralBc::TractionFree);
    spec.grading = grading;
    FlowlineMesh::new(spec, nx, 2, 2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn viscosity_is_positive_and_shear_thinning(xx in -1.0f64..1.0, xz in -1.0f64..1.0, s in 1.01f64..10.0) {
        let r = GlenRheology::default();
        let e = SymTensor::new(xx, -xx, xz);
        let eta = r.effective_viscosity(&e);
        prop_assert!(eta > 0.0 && eta.is_finite());
        prop_assert!(r.effective_viscosity(&e.scale(s)) <= eta);
    }

    #[test]
    fn lagrange_basis_is_a_partition_of_unity(order in 1usize..4, t in -1.0f64..1.0) {
        let b = LagrangeBasis::new(order);
        prop_assert!((b.values(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(b.derivatives(t).iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn gauss_rule_integrates_its_exact_degree(n in 1usize..8, c in proptest::collection::vec(-1.0f64..1.0, 16)) {
        let q = QuadratureRule::gauss_legendre(n);
        let deg = q.exact_degree();
        let poly = |x: f64| (0..=deg).map(|k| c[k] * x.powi(k as i32)).sum::<f64>();
        let exact: f64 = (0..=deg).step_by(2).map(|k| 2.0 * c[k] / (k + 1) as f64).sum();
        let approx: f64 = q.points.iter().zip(&q.weights).map(|(x, w)| w * poly(*x)).sum();
        prop_assert!((approx - exact).abs() < 1e-12);
    }

    #[test]
    fn graded_columns_are_increasing_and_cover_the_domain(grading in 0.0f64..0.99, nx in 2usize..24) {
        let mesh = slab_mesh(nx, grading);
        let xs: Vec<f64> = mesh.basal_coords().iter().map(|c| c[0]).collect();
        prop_assert!(xs.windows(2).all(|w| w[1] > w[0]));
        prop_assert!(xs[0].abs() < 1e-12 && (xs[xs.len() - 1] - 10.0).abs() < 1e-12);
        prop_assert!((mesh.boundary_measure(BoundaryTag::Bottom) - 10.0).abs() < 1e-10);
    }

    #[test]
    fn prior_covariance_inverts_precision(gamma in 0.1f64..10.0, delta in 0.01f64..1.0, kappa_one in any::<bool>(), seed in any::<u64>()) {
        let mesh = slab_mesh(6, 0.3);
        let params = PriorParams { gamma, delta, kappa: if kappa_one { 1.0 } else { 0.5 }, beta0: 0.0 };
        let prior = PriorModel::new(&mesh, params).unwrap();
        let v = DVector::from_fn(prior.len(), |i, _| ((i as u64 + 1).wrapping_mul(seed | 1) % 1000) as f64 / 500.0 - 1.0);
        let back = prior.covariance_apply(&prior.precision_apply(&v));
        prop_assert!((&back - &v).amax() <= 1e-9 * v.amax().max(1e-12));
        let p = prior.dense_precision();
        prop_assert!((&p - p.transpose()).amax() <= 1e-12 * p.amax());
    }

    #[test]
    fn low_rank_posterior_never_exceeds_prior(lambdas in proptest::collection::vec(0.0f64..1e4, 1..6), seed in any::<u64>()) {
        let mesh = slab_mesh(6, 0.0);
        let prior = PriorModel::new(&mesh, PriorParams { gamma: 1.0, delta: 0.5, kappa: 1.0, beta0: 0.0 }).unwrap();
        let n = prior.len();
        let b = prior.dense_precision();
        // H = B W diag(lambda) W^T B from a B-orthonormal basis, so the dense GEVD recovers lambda.
        let (_, w) = dense_gevd(&DMatrix::identity(n, n), &b).unwrap();
        let r = lambdas.len();
        let wr = w.columns(0, r).into_owned();
        let bw = &b * &wr;
        let h = &bw * DMatrix::from_diagonal(&DVector::from_vec(lambdas.clone())) * bw.transpose();
        let (vals, vecs) = dense_gevd(&h, &b).unwrap();
        let post = LowRankPosterior::new(DVector::zeros(n), vals[..r].to_vec(), vecs.columns(0, r).into_owned(), prior.clone()).unwrap();
        let v = DVector::from_fn(n, |i, _| (((i as u64 + 3) * (seed % 997 + 1)) % 17) as f64 - 8.0);
        prop_assert!(v.dot(&post.covariance_apply(&v)) <= v.dot(&prior.covariance_apply(&v)) * (1.0 + 1e-10));
        let dense = (&h + &b).try_inverse().unwrap();
        prop_assert!((post.dense_covariance() - &dense).amax() <= 1e-8 * dense.amax());
    }

    #[test]
    fn d_factor_stays_in_unit_interval(lambda in 0.0f64..1e12) {
        let d = d_factor(lambda);
        prop_assert!((0.0..1.0).contains(&d));
    }
}
