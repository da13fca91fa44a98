use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use speq::resolvent::{sample_covariance, spectral_norm, DataMatrix, SymmetricSpectrum};
use speq::sim::*;
use speq::{SpectralParameter, C64};

fn config(dist: ColumnDistribution, n: usize, seed: u64, replicas: usize) -> RunConfig {
    RunConfig::new(n, dist, seed, replicas).unwrap()
}

fn random_rotation(p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    a.qr().q()
}

#[test]
fn zero_covariance_gives_the_zero_matrix() {
    let x = sample_matrix(&config(ColumnDistribution::gaussian(vec![0.0; 4]).unwrap(), 6, 1, 1), 0);
    assert!(x.entries().iter().all(|v| *v == 0.0));
}

fn covariance_error(p: usize, n: usize, seed: u64) -> f64 {
    let dist = ColumnDistribution::gaussian(vec![1.0; p]).unwrap();
    let cfg = RunConfig::with_gamma_bound(n, dist, seed, 1, 1e4).unwrap();
    let k = sample_covariance(&sample_matrix(&cfg, 0)).unwrap();
    let err = k - DMatrix::<f64>::identity(p, p);
    SymmetricSpectrum::eigenvalues_of(&(&err * &err)).unwrap().last().unwrap().sqrt()
}

#[test]
fn gaussian_sample_covariance_concentrates() {
    // the spectral-norm error sits at the edge 2 sqrt(gamma) + gamma
    let gamma = 200.0 / 10_000.0;
    let edge = 2.0 * f64::sqrt(gamma) + gamma;
    let err = covariance_error(200, 10_000, 7);
    assert!((err - edge).abs() < 0.03, "{err} vs {edge}");
    let err = covariance_error(10, 10_000, 7);
    assert!(err < 0.1, "{err}");
}

#[test]
fn sampling_is_deterministic_across_thread_counts() {
    let dist = ColumnDistribution::lipschitz(vec![1.0, 0.5, 2.0], Nonlinearity::Tanh)
        .unwrap()
        .with_basis(random_rotation(3, 4))
        .unwrap();
    let cfg = config(dist, 40, 11, 2);
    let a = sample_matrix(&cfg, 1);
    let b = sample_matrix(&cfg, 1);
    assert_eq!(a, b);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = single.install(|| sample_matrix(&cfg, 1));
    assert_eq!(a.entries().as_slice(), c.entries().as_slice());
    assert_ne!(a, sample_matrix(&cfg, 0));
    assert_ne!(a, sample_matrix(&config(cfg.distribution().clone(), 40, 12, 2), 1));
}

#[test]
fn column_streams_are_distinct() {
    let draw = |s, r, c| column_rng(s, r, c).random::<u64>();
    assert_eq!(draw(1, 2, 3), draw(1, 2, 3));
    assert_ne!(draw(1, 2, 3), draw(1, 3, 2));
    assert_ne!(draw(1, 0, 0), draw(2, 0, 0));
}

#[test]
fn empirical_g_examples() {
    let z = SpectralParameter::upper(0.3, 0.7).unwrap();
    let zero = DataMatrix::new(DMatrix::zeros(3, 5)).unwrap();
    assert!((empirical_g(&zero, z).unwrap() + z.value().inv()).norm() < 1e-14);

    let n = 4;
    let x = DataMatrix::new(DMatrix::identity(n, n) * (n as f64).sqrt()).unwrap();
    let expected = (C64::new(1.0, 0.0) - z.value()).inv();
    assert!((empirical_g(&x, z).unwrap() - expected).norm() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = DataMatrix::new(DMatrix::from_fn(6, 9, |_, _| rng.random_range(-1.0..1.0))).unwrap();
    let mu = empirical_measure(&x).unwrap();
    assert!((empirical_g(&x, z).unwrap() - mu.stieltjes(z)).norm() < 1e-10);
    let direct = speq::resolvent::resolvent(&sample_covariance(&x).unwrap(), z).unwrap().trace() / 6.0;
    assert!((empirical_g(&x, z).unwrap() - direct).norm() < 1e-10);
}

#[test]
fn spectral_norm_check_examples() {
    let zero = spectral_norm_check(&config(ColumnDistribution::gaussian(vec![0.0; 10]).unwrap(), 20, 1, 3)).unwrap();
    assert!(zero.norms.iter().all(|v| *v == 0.0));
    assert!(zero.passed);

    let cfg = config(ColumnDistribution::gaussian(vec![1.0; 200]).unwrap(), 400, 3, 4);
    let report = spectral_norm_check(&cfg).unwrap();
    assert!(report.passed);
    assert!((report.bound - ((1.0 + 0.5_f64.sqrt()).powi(2) + 1.0)).abs() < 1e-12);
    assert!((report.max - 2.914).abs() < 0.3, "{}", report.max);
    assert_eq!(report, spectral_norm_check(&cfg).unwrap());
}

#[test]
fn edge_slack_grows_below_two_hundred() {
    assert_eq!(edge_slack(200), 1.0);
    assert_eq!(edge_slack(1000), 1.0);
    assert!(edge_slack(25) > 3.9 && edge_slack(25) < 4.1);
}

fn check_population(dist: &ColumnDistribution, seed: u64) {
    let p = dist.p();
    let m = 100_000;
    let cols: Vec<DVector<f64>> = (0..m).map(|j| dist.sample_column(&mut column_rng(seed, 0, j))).collect();
    let sigma = dist.population_covariance();
    for i in 0..p {
        for j in i..p {
            let prods: Vec<f64> = cols.iter().map(|c| c[i] * c[j]).collect();
            let mean = prods.iter().sum::<f64>() / m as f64;
            let var = prods.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            let se = (var / m as f64).sqrt();
            assert!(
                (mean - sigma[(i, j)]).abs() <= 3.0 * se + 1e-12,
                "{:?} ({i},{j}): {mean} vs {}",
                dist.kind(),
                sigma[(i, j)]
            );
        }
    }
}

#[test]
fn population_covariance_matches_samples() {
    let eig = vec![2.0, 1.0, 0.5];
    check_population(&ColumnDistribution::gaussian(eig.clone()).unwrap().with_mean_norm(0.5).unwrap(), 1);
    check_population(
        &ColumnDistribution::rademacher(eig.clone()).unwrap().with_basis(random_rotation(3, 8)).unwrap(),
        2,
    );
    check_population(&ColumnDistribution::lipschitz(eig.clone(), Nonlinearity::Tanh).unwrap(), 3);
    check_population(
        &ColumnDistribution::lipschitz(eig, Nonlinearity::SoftThreshold { threshold: 0.5 }).unwrap(),
        4,
    );
}

#[test]
fn lipschitz_features_keep_unit_scale() {
    let d = ColumnDistribution::lipschitz(vec![1.0; 4], Nonlinearity::Tanh).unwrap();
    let sigma = d.population_covariance();
    for i in 0..4 {
        assert!((sigma[(i, i)] - 1.0).abs() < 1e-9);
    }
    let model = d.covariance_model(0.5).unwrap();
    assert!((model.sigma_spectral_norm() - 1.0).abs() < 1e-9);
    assert!((gaussian_expectation(|t| t * t) - 1.0).abs() < 1e-10);
}

#[test]
fn concentration_probe_accepts_the_built_in_families() {
    for d in [
        ColumnDistribution::gaussian(vec![1.0; 20]).unwrap(),
        ColumnDistribution::rademacher(vec![1.0; 20]).unwrap(),
        ColumnDistribution::lipschitz(vec![1.0; 20], Nonlinearity::Tanh).unwrap(),
    ] {
        let probe = concentration_probe(&d, 4000, 5);
        assert!(probe.passed, "{:?}: {probe:?}", d.kind());
        assert!(probe.diameter <= 2.0);
    }
}

#[test]
fn config_file_parsing() {
    let text = "# white data\np = 8\nn = 16\nseed = 42\nreplicas = 3\ndist.kind = rademacher\ndist.sigma.eigenvalues = 2\ndist.mean_norm = 0.5\n";
    let cfg = RunConfig::from_key_values(text).unwrap();
    assert_eq!((cfg.p(), cfg.n(), cfg.seed(), cfg.replicas()), (8, 16, 42, 3));
    assert_eq!(cfg.distribution().kind(), DistKind::RademacherLinear);
    assert_eq!(cfg.gamma(), 0.5);
    assert_eq!(cfg.covariance_model().unwrap().sigma_spectral_norm(), 2.25);
    assert_eq!(cfg.distribution().mean_norm(), 0.5);

    let bad = [
        "p = 8\nn = 16\nbogus = 1\n",
        "p = 8\n",
        "p = 8\nn = 16\np = 9\n",
        "p = 8\nn = 16\ndist.kind = cauchy\n",
        "p = 8\nn = 16\ndist.sigma.eigenvalues = 1,2\n",
        "p = 1\nn = 1000\n",
        "p 8\n",
    ];
    for text in bad {
        assert!(RunConfig::from_key_values(text).is_err(), "{text:?}");
    }

    let cfg = RunConfig::from_key_values("p = 4\nn = 4\ndist.kind = lipschitz\ndist.nonlinearity = soft:0.3\n").unwrap();
    assert_eq!(cfg.distribution().nonlinearity(), Some(Nonlinearity::SoftThreshold { threshold: 0.3 }));
}

#[test]
fn matrix_dump_round_trip() {
    let cfg = config(ColumnDistribution::gaussian(vec![1.0; 5]).unwrap(), 7, 9, 1);
    let x = sample_matrix(&cfg, 0);
    let mut buf = Vec::new();
    write_matrix_dump(&x, &mut buf).unwrap();
    assert_eq!(buf.len(), 16 + 8 * 35);
    assert_eq!(&buf[..8], b"SPEQMAT1");
    assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 5);
    assert_eq!(f64::from_le_bytes(buf[24..32].try_into().unwrap()), x.entries()[(0, 1)]);
    assert_eq!(read_matrix_dump(buf.as_slice()).unwrap(), x);
    buf[0] = b'X';
    assert!(read_matrix_dump(buf.as_slice()).is_err());
}

#[test]
fn resolvent_of_sample_respects_the_eta_bound() {
    let cfg = config(ColumnDistribution::gaussian(vec![1.0; 30]).unwrap(), 60, 5, 1);
    let k = sample_covariance(&sample_matrix(&cfg, 0)).unwrap();
    let z = SpectralParameter::upper(1.0, 0.2).unwrap();
    let g = speq::resolvent::resolvent(&k, z).unwrap();
    assert!(spectral_norm(&g) <= z.eta() * (1.0 + 1e-12));
}
