use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use speq::equiv::*;
use speq::resolvent::to_complex;
use speq::{Branch, Error, SpectralParameter, C64};

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn zr(x: f64) -> SpectralParameter {
    SpectralParameter::real(x).unwrap()
}

fn zu(re: f64, im: f64) -> SpectralParameter {
    SpectralParameter::upper(re, im).unwrap()
}

/// Root of `c^2 - c(1 + z - gamma) + z = 0` in the domain of `z`.
fn identity_root(gamma: f64, z: SpectralParameter) -> C64 {
    let zv = z.value();
    let b = c(1.0 - gamma, 0.0) + zv;
    let disc = (b * b - zv * 4.0).sqrt();
    let roots = [(b + disc) * 0.5, (b - disc) * 0.5];
    let omega = OmegaDomain::new(z);
    let inside: Vec<C64> = roots.iter().copied().filter(|r| omega.contains(*r)).collect();
    assert_eq!(inside.len(), 1, "roots {roots:?} for gamma {gamma}, z {zv}");
    inside[0]
}

fn solve(model: &CovarianceModel, z: SpectralParameter) -> FixedPointSolution {
    solve_fixed_point(model, z, SolverOptions::default()).unwrap()
}

fn random_orthogonal(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.sample(StandardNormal));
    a.qr().q()
}

#[test]
fn functional_examples() {
    let z = zr(-1.0);
    let zero = CovarianceModel::zero(4, 1.0).unwrap();
    for l in [c(-1.0, 0.0), c(-3.5, 0.0)] {
        assert_eq!(functional_f(&zero, l, z).unwrap(), z.value());
    }
    let id = CovarianceModel::identity(10, 1.0).unwrap();
    let f = functional_f(&id, c(-1.0, 0.0), z).unwrap();
    assert!((f - c(-1.5, 0.0)).norm() < 1e-15);
    assert!(matches!(
        functional_f(&id, c(-0.5, 0.0), z),
        Err(Error::OutsideDomain { .. })
    ));
}

#[test]
fn functional_matches_dense_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = 6;
    let n = 9;
    let eig: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..2.0)).collect();
    let q = random_orthogonal(&mut rng, p);
    let sigma = &q * DMatrix::from_diagonal(&DVector::from_vec(eig.clone())) * q.transpose();
    let model = CovarianceModel::new(eig, p as f64 / n as f64, 0.0).unwrap();
    for (z, l) in [(zr(-0.7), c(-1.3, 0.0)), (zu(0.5, 0.4), c(-0.2, 0.9))] {
        let zv = z.value();
        let gl = (to_complex(&sigma) * (zv / l) - DMatrix::<C64>::identity(p, p) * zv)
            .try_inverse()
            .unwrap();
        let expected = zv + zv / n as f64 * (gl * to_complex(&sigma)).trace();
        let got = functional_f(&model, l, z).unwrap();
        assert!((got - expected).norm() < 1e-12, "{got} vs {expected}");
    }
}

#[test]
fn real_range_of_functional() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let p = rng.random_range(1..20);
        let gamma = rng.random_range(0.05..5.0);
        let eig: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..1.0)).collect();
        let model = CovarianceModel::new(eig, gamma, 0.0).unwrap();
        let z = zr(-rng.random_range(0.05..4.0));
        let l = c(z.value().re - rng.random_range(0.0..10.0), 0.0);
        let f = functional_f(&model, l, z).unwrap().re;
        assert!(f <= z.value().re && f >= z.value().re - gamma * (1.0 + 1e-12));
    }
}

#[test]
fn solver_examples() {
    let id = CovarianceModel::identity(10, 1.0).unwrap();
    let sol = solve(&id, zr(-1.0));
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    assert!((sol.c() - c(-phi, 0.0)).norm() < 1e-10);
    assert!(sol.residual() <= 1e-12 * phi);

    let zero = CovarianceModel::zero(3, 2.0).unwrap();
    assert_eq!(solve(&zero, zr(-2.0)).c(), c(-2.0, 0.0));
    assert_eq!(solve(&zero, zu(1.0, 0.5)).c(), c(1.0, 0.5));

    let sol = solve(&id, zu(0.0, 1.0));
    assert!((sol.c() - c(-0.62481, 1.30024)).norm() < 1e-5);
    assert!((sol.c() - identity_root(1.0, zu(0.0, 1.0))).norm() < 1e-10);
}

#[test]
fn solver_matches_quadratic_root_on_grid() {
    let gammas = [0.1, 0.5, 1.0, 2.0, 4.0];
    let zs = [zr(-0.2), zr(-1.0), zr(-3.0), zu(0.5, 1.0), zu(2.0, 0.5), zu(-1.0, 0.3)];
    for &gamma in &gammas {
        let model = CovarianceModel::identity(5, gamma).unwrap();
        for &z in &zs {
            let sol = solve(&model, z);
            let root = identity_root(gamma, z);
            assert!((sol.c() - root).norm() <= 1e-10 * root.norm(), "{gamma} {:?}", z);
            assert!(OmegaDomain::new(z).contains(sol.c()));
        }
    }
}

#[test]
fn deterministic_equivalent_examples() {
    let z = zr(-1.5);
    let zero = CovarianceModel::zero(3, 1.0).unwrap();
    let g = deterministic_equivalent(&zero, &solve(&zero, z), z).unwrap();
    for d in g.diagonal() {
        assert!((d - (-z.value()).inv()).norm() < 1e-15);
    }

    let z = zr(-1.0);
    let id = CovarianceModel::identity(4, 1.0).unwrap();
    let sol = solve(&id, z);
    let g = deterministic_equivalent(&id, &sol, z).unwrap();
    let expected = 1.0 / (1.0 / 1.618_033_988_749_895 + 1.0);
    for d in g.diagonal() {
        assert!((d - c(expected, 0.0)).norm() < 1e-10);
    }
    assert!((expected - 0.618_033_988_749_895).abs() < 1e-12);

    let other = CovarianceModel::identity(4, 2.0).unwrap();
    assert!(matches!(
        deterministic_equivalent(&other, &sol, z),
        Err(Error::MismatchedSolution)
    ));
    assert!(matches!(
        deterministic_equivalent(&id, &sol, zr(-2.0)),
        Err(Error::MismatchedSolution)
    ));
}

#[test]
fn deterministic_equivalent_in_a_rotated_basis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = 5;
    let q = random_orthogonal(&mut rng, p);
    let eig = DVector::from_fn(p, |_, _| rng.random_range(0.1..2.0));
    let sigma = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let model = CovarianceModel::from_matrix(&sigma, 0.7, 0.0).unwrap();
    let z = zu(0.3, 0.6);
    let sol = solve(&model, z);
    let zv = z.value();
    let direct = (to_complex(&sigma) * (zv / sol.c()) - DMatrix::<C64>::identity(p, p) * zv)
        .try_inverse()
        .unwrap();
    let g = deterministic_equivalent(&model, &sol, z).unwrap();
    assert!((g.matrix() - &direct).norm() < 1e-10);
    let diag = g.standard_diagonal();
    for i in 0..p {
        assert!((diag[i] - direct[(i, i)]).norm() < 1e-10);
    }
}

#[test]
fn equivalent_norm_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let p = rng.random_range(1..15);
        let eig: Vec<f64> = (0..p).map(|_| rng.random_range(0.01..1.0)).collect();
        let model = CovarianceModel::new(eig.clone(), rng.random_range(0.1..4.0), 0.0).unwrap();
        let z = if rng.random::<bool>() {
            zr(-rng.random_range(0.1..3.0))
        } else {
            zu(rng.random_range(-2.0..3.0), rng.random_range(0.1..2.0))
        };
        let sol = solve(&model, z);
        let g = deterministic_equivalent(&model, &sol, z).unwrap();
        assert!(g.spectral_norm() <= z.eta() * (1.0 + 1e-10));
        let zc = z.value() / sol.c();
        let scaled = g.diagonal().iter().fold(0.0_f64, |m, d| m.max((d * zc).norm()));
        assert!(scaled <= z.eta() * (1.0 + 1e-10));
        if z.branch() == Branch::RealNegative {
            let special = g
                .diagonal()
                .iter()
                .zip(model.sigma_eigenvalues())
                .fold(0.0_f64, |m, (d, l)| m.max((d * zc * *l).norm()));
            assert!(special <= 1.0 / (1.0 + z.abs()) + 1e-12);
        }
    }
}

#[test]
fn stieltjes_examples() {
    let z = zr(-1.0);
    let id = CovarianceModel::identity(6, 1.0).unwrap();
    let sol = solve(&id, z);
    let g = g_nu(&id, &sol, z).unwrap();
    assert!((g - c((5f64.sqrt() - 1.0) / 2.0, 0.0)).norm() < 1e-10);
    let gc = g_nu_check(&id, &sol, z).unwrap();
    assert!((gc - g).norm() < 1e-15);
    assert!((gc - sol.g_check()).norm() < 1e-10);

    let zero = CovarianceModel::zero(3, 2.0).unwrap();
    let z2 = zu(0.4, 0.8);
    let sol = solve(&zero, z2);
    assert!((g_nu(&zero, &sol, z2).unwrap() + z2.value().inv()).norm() < 1e-15);
    assert!((g_nu_check(&zero, &sol, z2).unwrap() + z2.value().inv()).norm() < 1e-15);

    // MP with shape 1/4: gamma z g^2 + (z + gamma - 1) g + 1 = 0.
    let gamma = 0.25;
    let m = CovarianceModel::identity(8, gamma).unwrap();
    let sol = solve(&m, z);
    let (a, b) = (gamma * -1.0, -1.0 + gamma - 1.0);
    let disc = (b * b - 4.0 * a).sqrt();
    let root = [(-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)]
        .into_iter()
        .find(|g| *g > 0.0)
        .unwrap();
    assert!((g_nu(&m, &sol, z).unwrap() - c(root, 0.0)).norm() < 1e-10);
}

#[test]
fn companion_transform_matches_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let p = rng.random_range(1..12);
        let eig: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..3.0)).collect();
        let model = CovarianceModel::new(eig, rng.random_range(0.1..5.0), 0.0).unwrap();
        let z = zu(rng.random_range(-2.0..4.0), rng.random_range(0.2..2.0));
        let sol = solve(&model, z);
        let a = g_nu_check(&model, &sol, z).unwrap();
        assert!((a - sol.g_check()).norm() <= 1e-10 * a.norm().max(1.0));
    }
}

#[test]
fn contraction_constant_examples() {
    let m = CovarianceModel::identity(3, 1.0).unwrap();
    assert!((contraction_constant(&m, zr(-1.0)) - 0.25).abs() < 1e-15);
    assert!((contraction_constant(&m, zu(0.0, 1.0)) - 0.5).abs() < 1e-15);
    let tiny = CovarianceModel::identity(3, 1e-9).unwrap();
    assert!(contraction_constant(&tiny, zr(-1.0)) < 1e-8);
    assert!(contraction_constant(&tiny, zu(0.0, 1.0)) < 1e-8);
    assert_eq!(contraction_constant(&CovarianceModel::zero(2, 1.0).unwrap(), zr(-1.0)), 0.0);
}

#[test]
fn semi_metric_examples() {
    assert_eq!(semi_metric(c(0.0, 1.0), c(0.0, 1.0)).unwrap(), 0.0);
    assert!((semi_metric(c(0.0, 1.0), c(0.0, 2.0)).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    assert!((semi_metric(c(1.0, 1.0), c(-1.0, 1.0)).unwrap() - 2.0).abs() < 1e-15);
    assert!(semi_metric(c(0.0, 0.0), c(0.0, 1.0)).is_err());
}

#[test]
fn stability_bound_examples() {
    assert_eq!(stability_gap_bound(0.5, 0.0, 1.0).unwrap(), 2.0);
    assert!((stability_gap_bound(0.25, 1.0, 0.1).unwrap() - 0.2).abs() < 1e-15);
    assert!(matches!(stability_gap_bound(0.5, 1.0, 1.0), Err(Error::Inapplicable(_))));
}

#[test]
fn stability_bound_covers_true_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let eig: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let model = CovarianceModel::new(eig, rng.random_range(0.1..3.0), 0.0).unwrap();
        let z = zu(rng.random_range(-1.0..2.0), rng.random_range(0.5..2.0));
        let sol = solve(&model, z);
        let b = sol.c() + c(rng.random_range(-0.05..0.05), rng.random_range(0.0..0.05));
        if !OmegaDomain::new(z).contains(b) {
            continue;
        }
        let fb = functional_f(&model, b, z).unwrap();
        let delta = semi_metric(b, fb).unwrap();
        let kf = contraction_constant(&model, z);
        if let Ok(bound) = stability_gap_bound(kf, delta, (fb - b).norm()) {
            let gap = (sol.c() - b).norm();
            assert!(gap <= bound * (1.0 + 1e-9), "gap {gap} bound {bound}");
        }
    }
}

#[test]
fn imaginary_part_of_functional() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let p = rng.random_range(1..10);
        let eig: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..1.0)).collect();
        let gamma = rng.random_range(0.1..4.0);
        let model = CovarianceModel::new(eig.clone(), gamma, 0.0).unwrap();
        let z = zu(rng.random_range(-2.0..3.0), rng.random_range(0.1..2.0));
        let zv = z.value();
        let l = c(rng.random_range(-3.0..3.0), zv.im + rng.random_range(0.0..3.0));
        if !OmegaDomain::new(z).contains(l) {
            continue;
        }
        let f = functional_f(&model, l, z).unwrap();
        let frob: f64 = eig
            .iter()
            .map(|&lam| (lam * (zv / l * lam - zv).inv()).norm_sqr())
            .sum();
        let rhs = zv.norm_sqr() * gamma / p as f64 * l.im / l.norm_sqr() * frob;
        let lhs = f.im - zv.im;
        assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1e-300) + 1e-15);
        assert!(f.im >= zv.im && f.im <= zv.im + gamma * z.abs() * z.eta() * (1.0 + 1e-12));
    }
}

fn arb_model() -> impl Strategy<Value = CovarianceModel> {
    (prop::collection::vec(0.0f64..2.0, 1..12), 0.05f64..6.0)
        .prop_map(|(eig, gamma)| CovarianceModel::new(eig, gamma, 0.0).unwrap())
}

fn arb_z() -> impl Strategy<Value = SpectralParameter> {
    prop_oneof![
        (0.05f64..4.0).prop_map(|x| zr(-x)),
        (-3.0f64..5.0, 0.05f64..3.0).prop_map(|(re, im)| zu(re, im)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn picard_iterates_stay_in_domain(model in arb_model(), z in arb_z()) {
        let omega = OmegaDomain::new(z);
        let mut l = z.value();
        for _ in 0..50 {
            l = functional_f(&model, l, z).unwrap();
            prop_assert!(omega.contains(l));
        }
    }

    #[test]
    fn observed_ratio_respects_contraction_constant(model in arb_model(), z in arb_z()) {
        let sol = solve(&model, z);
        prop_assert!(sol.kf_theoretical() < 1.0);
        prop_assert!(!sol.damped());
        prop_assert!(sol.contraction_estimate() <= sol.kf_theoretical() + 0.05,
            "ratio {} vs kF {}", sol.contraction_estimate(), sol.kf_theoretical());
        prop_assert!(OmegaDomain::new(z).contains(sol.c()));
        prop_assert!(sol.residual() <= 1e-12 * sol.c().norm().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn fixed_point_is_unique(model in arb_model(), z in arb_z(), seed in any::<u64>()) {
        let reference = solve(&model, z).c();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zv = z.value();
        for _ in 0..100 {
            let start = match z.branch() {
                Branch::RealNegative => c(zv.re - rng.random_range(0.0..20.0), 0.0),
                Branch::UpperHalf => {
                    // points z + t w with w in the closed cone spanned by 1 (scaled by z) and i
                    let a = rng.random_range(0.0..10.0);
                    let b = rng.random_range(0.0..10.0);
                    let cand = zv * (1.0 + a) + c(0.0, b);
                    if !OmegaDomain::new(z).contains(cand) { continue; }
                    cand
                }
            };
            let sol = solve_fixed_point_from(&model, z, start, SolverOptions::default()).unwrap();
            prop_assert!((sol.c() - reference).norm() <= 1e-9 * reference.norm().max(1.0));
        }
    }
}
