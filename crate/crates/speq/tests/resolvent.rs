use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use speq::resolvent::*;
use speq::Error;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn random_matrix(rng: &mut ChaCha8Rng, p: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, n, |_, _| rng.sample(StandardNormal))
}

fn random_psd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, p, p + 2);
    let k = &a * a.transpose() / (p + 2) as f64;
    (&k + k.transpose()) * 0.5
}

fn random_z(rng: &mut ChaCha8Rng) -> SpectralParameter {
    if rng.random::<bool>() {
        SpectralParameter::real(-rng.random_range(0.1..3.0)).unwrap()
    } else {
        SpectralParameter::upper(rng.random_range(-2.0..3.0), rng.random_range(0.1..2.0)).unwrap()
    }
}

/// Dense complex Gauss-Jordan inverse, independent of the eigen path.
fn dense_inverse(m: &DMatrix<C64>) -> DMatrix<C64> {
    m.clone().try_inverse().expect("invertible")
}

fn shifted(k: &DMatrix<f64>, z: SpectralParameter) -> DMatrix<C64> {
    to_complex(k) - DMatrix::<C64>::identity(k.nrows(), k.nrows()) * z.value()
}

#[test]
fn spectral_parameter_branches() {
    let z = SpectralParameter::real(-2.0).unwrap();
    assert_eq!(z.branch(), Branch::RealNegative);
    assert_eq!(z.eta(), 0.5);
    let z = SpectralParameter::upper(3.0, 0.25).unwrap();
    assert_eq!(z.branch(), Branch::UpperHalf);
    assert_eq!(z.eta(), 4.0);
    assert!(z.eta() * z.abs() >= 1.0);
    for bad in [c(0.0, 0.0), c(1.0, 0.0), c(-1.0, -0.5), c(f64::NAN, 1.0)] {
        assert!(matches!(
            SpectralParameter::new(bad),
            Err(Error::InvalidSpectralParameter { .. })
        ));
    }
}

#[test]
fn data_matrix_rejects_non_finite_and_empty() {
    assert!(DataMatrix::new(DMatrix::zeros(0, 3)).is_err());
    let mut x = DMatrix::zeros(2, 2);
    x[(1, 0)] = f64::INFINITY;
    assert!(matches!(DataMatrix::new(x), Err(Error::NonFinite { row: 1, col: 0 })));
}

#[test]
fn sample_covariance_examples() {
    let x = DataMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]).unwrap();
    assert_eq!(sample_covariance(&x).unwrap(), DMatrix::from_element(2, 2, 1.0));
    let x = DataMatrix::new(DMatrix::identity(2, 2)).unwrap();
    assert_eq!(sample_covariance(&x).unwrap(), DMatrix::identity(2, 2) * 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw = random_matrix(&mut rng, 3, 5);
    let k = sample_covariance(&DataMatrix::new(raw.clone()).unwrap()).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for t in 0..5 {
                s += raw[(i, t)] * raw[(j, t)];
            }
            assert!((k[(i, j)] - s / 5.0).abs() < 1e-12);
        }
    }
}

#[test]
fn resolvent_examples() {
    let z = SpectralParameter::real(-1.0).unwrap();
    let g = resolvent(&DMatrix::identity(2, 2), z).unwrap();
    assert!((g - to_complex(&DMatrix::identity(2, 2)) * c(0.5, 0.0)).norm() < 1e-15);

    let k = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 3.0]));
    let z = SpectralParameter::upper(0.0, 1.0).unwrap();
    let g = resolvent(&k, z).unwrap();
    assert!((g[(0, 0)] - c(0.0, 1.0)).norm() < 1e-15);
    assert!((g[(1, 1)] - c(0.3, 0.1)).norm() < 1e-15);
    assert!(g[(0, 1)].norm() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = random_psd(&mut rng, 4);
    let z = SpectralParameter::real(-0.5).unwrap();
    let g = resolvent(&k, z).unwrap();
    assert!((&g - dense_inverse(&shifted(&k, z))).norm() < 1e-10);
    let id = DMatrix::<C64>::identity(4, 4);
    assert!((shifted(&k, z) * &g - id).norm() < 1e-10);
}

#[test]
fn resolvent_rejects_non_psd_and_asymmetric() {
    let z = SpectralParameter::real(-1.0).unwrap();
    let k = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
    assert!(matches!(resolvent(&k, z), Err(Error::NotPsd(_))));
    let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
    assert!(matches!(resolvent(&k, z), Err(Error::Precondition(_))));
    let k = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-13]));
    let spec = SymmetricSpectrum::decompose(&k).unwrap();
    assert_eq!(spec.eigenvalues(), &[0.0, 1.0]);
}

#[test]
fn eigenvectors_are_orthogonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = random_psd(&mut rng, 12);
    let spec = SymmetricSpectrum::decompose(&k).unwrap();
    let q = spec.eigenvectors();
    assert!((q.transpose() * q - DMatrix::identity(12, 12)).norm() < 1e-10);
    assert!(spec.eigenvalues().windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn co_resolvent_examples() {
    let z = SpectralParameter::real(-1.0).unwrap();
    let x = DataMatrix::new(DMatrix::identity(3, 3) * 3f64.sqrt()).unwrap();
    let g = co_resolvent(&x, z).unwrap();
    assert!((g - DMatrix::<C64>::identity(3, 3) * c(0.5, 0.0)).norm() < 1e-14);

    let x = DataMatrix::from_row_slice(2, 1, &[1.0, 0.0]).unwrap();
    let g = co_resolvent(&x, z).unwrap();
    assert!((g[(0, 0)] - c(0.5, 0.0)).norm() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = random_matrix(&mut rng, 3, 5);
    let x = DataMatrix::new(raw.clone()).unwrap();
    for z in [
        SpectralParameter::real(-0.7).unwrap(),
        SpectralParameter::upper(0.4, 0.3).unwrap(),
    ] {
        let g = resolvent(&sample_covariance(&x).unwrap(), z).unwrap();
        let gc = co_resolvent(&x, z).unwrap();
        let xc = to_complex(&raw);
        let lhs = xc.transpose() * g * &xc * c(0.2, 0.0);
        let rhs = DMatrix::<C64>::identity(5, 5) + gc * z.value();
        assert!((lhs - rhs).norm() < 1e-10);
    }
}

#[test]
fn loo_resolvent_examples() {
    let z = SpectralParameter::upper(0.2, 0.5).unwrap();
    let x = DataMatrix::from_row_slice(2, 1, &[1.0, 2.0]).unwrap();
    let g = loo_resolvent(&x, 0, z).unwrap();
    let expected = DMatrix::<C64>::identity(2, 2) * (-z.value()).inv();
    assert!((g - expected).norm() < 1e-15);
    assert!(matches!(
        loo_resolvent(&x, 1, z),
        Err(Error::IndexOutOfRange { index: 1, n: 1 })
    ));

    let x = DataMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.5, -2.0, -2.0, 0.3]).unwrap();
    let a = loo_resolvent(&x, 0, z).unwrap();
    let b = loo_resolvent(&x, 1, z).unwrap();
    assert!((a - b).norm() < 1e-14);
}

#[test]
fn loo_identities_examples() {
    let z = SpectralParameter::real(-1.0).unwrap();
    let x = DataMatrix::new(DMatrix::zeros(3, 4)).unwrap();
    let r = check_loo_identities(&x, 2, z).unwrap();
    assert_eq!(r.max_residual(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = DataMatrix::new(random_matrix(&mut rng, 5, 8)).unwrap();
    let r = check_loo_identities(&x, 3, SpectralParameter::upper(0.3, 0.7).unwrap()).unwrap();
    assert!(r.max_residual() <= 1e-9, "{r:?}");
    let r = check_loo_identities(&x, 0, z).unwrap();
    assert!(r.max_residual() <= 1e-9, "{r:?}");
}

#[test]
fn leave_one_out_identities_by_hand() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let raw = random_matrix(&mut rng, 3, 4);
    let x = DataMatrix::new(raw.clone()).unwrap();
    let z = SpectralParameter::upper(-0.4, 0.6).unwrap();
    let zv = z.value();
    let n = 4.0;
    let k = &raw * raw.transpose() / n;
    let col = raw.column(1).into_owned();
    let k_loo = &k - &col * col.transpose() / n;
    let g = dense_inverse(&shifted(&k, z));
    let g_loo = dense_inverse(&shifted(&k_loo, z));
    let kc = raw.transpose() * &raw / n;
    let gc = dense_inverse(&shifted(&kc, z));
    let xc = to_complex_vector(&col);

    assert!((loo_resolvent(&x, 1, z).unwrap() - &g_loo).norm() < 1e-10);
    let q = xc.dot(&(&g * &xc)) / n;
    assert!((q - (c(1.0, 0.0) + zv * gc[(1, 1)])).norm() < 1e-10);
    let q_loo = xc.dot(&(&g_loo * &xc)) / n;
    assert!((q - (c(1.0, 0.0) - (c(1.0, 0.0) + q_loo).inv())).norm() < 1e-10);
    let gx_loo = &g_loo * &xc;
    let rank_one = &g_loo + (&gx_loo * gx_loo.transpose()) * (zv / n * gc[(1, 1)]);
    assert!((&g - rank_one).norm() < 1e-10);
    assert!((&g * &xc + gx_loo * (zv * gc[(1, 1)])).norm() < 1e-10);
}

#[test]
fn sherman_morrison_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let minv = DMatrix::from_fn(3, 3, |_, _| c(rng.sample(StandardNormal), rng.sample(StandardNormal)));
    let zero = DVector::zeros(3);
    let v = DVector::from_fn(3, |_, _| c(1.0, 0.5));
    assert_eq!(sherman_morrison_update(&minv, &zero, &v).unwrap(), minv);

    let id = DMatrix::<C64>::identity(3, 3);
    let mut e1 = DVector::zeros(3);
    e1[0] = c(1.0, 0.0);
    let out = sherman_morrison_update(&id, &e1, &e1).unwrap();
    let mut expected = id.clone();
    expected[(0, 0)] = c(0.5, 0.0);
    assert!((out - expected).norm() < 1e-15);

    let m = DMatrix::from_fn(4, 4, |i, j| {
        c(rng.sample::<f64, _>(StandardNormal) + if i == j { 3.0 } else { 0.0 }, rng.sample(StandardNormal))
    });
    let u = DVector::from_fn(4, |_, _| c(rng.sample(StandardNormal), rng.sample(StandardNormal)));
    let v = DVector::from_fn(4, |_, _| c(rng.sample(StandardNormal), rng.sample(StandardNormal)));
    let updated = sherman_morrison_update(&dense_inverse(&m), &u, &v).unwrap();
    let direct = dense_inverse(&(&m + &u * v.transpose()));
    assert!((&updated - &direct).norm() < 1e-10);
    let prod = (&m + &u * v.transpose()) * updated;
    assert!((prod - DMatrix::<C64>::identity(4, 4)).norm() < 1e-10);

    let mut minus_e1 = e1.clone();
    minus_e1[0] = c(-1.0, 0.0);
    assert!(matches!(
        sherman_morrison_update(&id, &e1, &minus_e1),
        Err(Error::SingularUpdate(_))
    ));
}

#[test]
fn vesd_transform_examples() {
    let z = SpectralParameter::real(-1.0).unwrap();
    let u = DVector::from_vec(vec![0.6, 0.8]);
    let v = vesd_transform(&DMatrix::identity(2, 2), &u, z).unwrap();
    assert!((v - c(0.5, 0.0)).norm() < 1e-15);
    let k = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 3.0]));
    let e2 = DVector::from_vec(vec![0.0, 1.0]);
    assert!((vesd_transform(&k, &e2, z).unwrap() - c(0.25, 0.0)).norm() < 1e-15);
    let bad = DVector::from_vec(vec![1.0, 1.0]);
    assert!(matches!(vesd_transform(&k, &bad, z), Err(Error::Precondition(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let k = random_psd(&mut rng, 6);
    let u = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
    let z = SpectralParameter::upper(0.5, 0.2).unwrap();
    let eig = nalgebra::SymmetricEigen::new(k.clone());
    let mut expected = c(0.0, 0.0);
    for i in 0..6 {
        let overlap = eig.eigenvectors.column(i).dot(&u);
        expected += (c(eig.eigenvalues[i], 0.0) - z.value()).inv() * (overlap * overlap);
    }
    let got = vesd_transform(&k, &u, z).unwrap();
    assert!((got - expected).norm() < 1e-10);
    assert!(got.im >= 0.0);
}

#[test]
fn spectra_of_gram_and_covariance_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (p, n) in [(3, 7), (7, 3), (5, 5)] {
        let x = DataMatrix::new(random_matrix(&mut rng, p, n)).unwrap();
        let a = SymmetricSpectrum::eigenvalues_of(&sample_covariance(&x).unwrap()).unwrap();
        let b = SymmetricSpectrum::eigenvalues_of(&co_covariance(&x).unwrap()).unwrap();
        let (long, short) = if a.len() > b.len() { (&a, &b) } else { (&b, &a) };
        let pad = long.len() - short.len();
        assert!(long[..pad].iter().all(|&v| v == 0.0));
        for (u, v) in long[pad..].iter().zip(short.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn empirical_bounds_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let p = rng.random_range(2..8);
        let n = rng.random_range(2..8);
        let raw = random_matrix(&mut rng, p, n);
        let x = DataMatrix::new(raw.clone()).unwrap();
        let z = random_z(&mut rng);
        let g = resolvent(&sample_covariance(&x).unwrap(), z).unwrap();
        assert!(spectral_norm(&g) <= z.eta() * (1.0 + 1e-12));
        let gx = &g * to_complex(&raw);
        let bound = (2.0 * n as f64).sqrt() * z.eta() * z.abs().sqrt();
        assert!(spectral_norm(&gx) <= bound * (1.0 + 1e-12));
    }
}

#[test]
fn imaginary_part_identities_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let k = random_psd(&mut rng, 5);
        let z = SpectralParameter::upper(rng.random_range(-2.0..3.0), rng.random_range(0.05..2.0)).unwrap();
        let r = imaginary_part_identities(&k, z).unwrap();
        assert!(r.im_resolvent < 1e-10 && r.im_z_resolvent < 1e-10, "{r:?}");
        assert!(r.min_eig_im_resolvent >= -1e-10 && r.min_eig_im_z_resolvent >= -1e-10, "{r:?}");
    }
}

#[test]
fn resolvent_is_lipschitz_in_the_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let p = rng.random_range(2..7);
        let n = rng.random_range(2..9);
        let raw = random_matrix(&mut rng, p, n);
        let h = random_matrix(&mut rng, p, n);
        let h = &h / h.norm();
        let z = random_z(&mut rng);
        let g1 = resolvent(&sample_covariance(&DataMatrix::new(raw.clone()).unwrap()).unwrap(), z).unwrap();
        let g2 = resolvent(&sample_covariance(&DataMatrix::new(&raw + &h).unwrap()).unwrap(), z).unwrap();
        let bound = (n as f64).powf(-0.5) * 2f64.powf(1.5) * z.eta().powi(2) * z.abs().sqrt();
        assert!((g1 - g2).norm() <= bound * (1.0 + 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loo_identities_hold_for_random_data(
        seed in any::<u64>(),
        p in 1usize..7,
        n in 1usize..8,
        upper in any::<bool>(),
        re in -3.0f64..3.0,
        im in 0.05f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DataMatrix::new(random_matrix(&mut rng, p, n)).unwrap();
        let z = if upper {
            SpectralParameter::upper(re, im).unwrap()
        } else {
            SpectralParameter::real(-im).unwrap()
        };
        let col = (seed as usize) % n;
        let r = check_loo_identities(&x, col, z).unwrap();
        prop_assert!(r.max_residual() <= 1e-9, "{:?}", r);
    }

    #[test]
    fn vesd_imaginary_part_is_nonnegative(seed in any::<u64>(), re in -3.0f64..3.0, im in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = random_psd(&mut rng, 4);
        let u = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        let v = vesd_transform(&k, &u, SpectralParameter::upper(re, im).unwrap()).unwrap();
        prop_assert!(v.im >= 0.0);
    }
}
