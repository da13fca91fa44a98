//! Seeded generation of data matrices with i.i.d. concentrated columns.
//!
//! Column `j` of replica `r` is drawn from its own ChaCha stream keyed by
//! the run seed, so matrices do not depend on thread scheduling.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::equiv::CovarianceModel;
use crate::error::{Error, Result};
use crate::measure::AtomicMeasure;
use crate::resolvent::{sample_covariance, DataMatrix, SpectralParameter, SymmetricSpectrum, C64};

/// RNG for one column of one replica.
pub fn column_rng(seed: u64, replica: usize, column: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((replica as u64) << 32) | (column as u64 & 0xffff_ffff));
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DistKind {
    GaussianLinear,
    RademacherLinear,
    LipschitzGaussianFeature,
}

impl DistKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "GaussianLinear" => Ok(Self::GaussianLinear),
            "rademacher" | "RademacherLinear" => Ok(Self::RademacherLinear),
            "lipschitz" | "LipschitzGaussianFeature" => Ok(Self::LipschitzGaussianFeature),
            _ => Err(Error::Config(format!("unknown distribution kind {s:?}"))),
        }
    }
}

/// Entrywise odd 1-Lipschitz map, normalized to unit variance on N(0, 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Nonlinearity {
    Tanh,
    SoftThreshold { threshold: f64 },
}

impl Nonlinearity {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "tanh" {
            return Ok(Self::Tanh);
        }
        if let Some(rest) = s.strip_prefix("soft:") {
            let threshold: f64 = rest
                .parse()
                .map_err(|_| Error::Config(format!("bad soft-threshold level {rest:?}")))?;
            if !(threshold >= 0.0) || !threshold.is_finite() {
                return Err(Error::Config("soft-threshold level must be nonnegative".into()));
            }
            return Ok(Self::SoftThreshold { threshold });
        }
        Err(Error::Config(format!("unknown nonlinearity {s:?}")))
    }

    pub fn raw(&self, t: f64) -> f64 {
        match *self {
            Self::Tanh => t.tanh(),
            Self::SoftThreshold { threshold } => t.signum() * (t.abs() - threshold).max(0.0),
        }
    }

    /// `sqrt(E[phi(scale g)^2])` for standard normal `g`.
    pub fn rms(&self, scale: f64) -> f64 {
        gaussian_expectation(|t| self.raw(scale * t).powi(2)).sqrt()
    }

    pub fn normalizer(&self) -> f64 {
        self.rms(1.0)
    }
}

/// `E[f(g)]` for standard normal `g` by composite Simpson on `[-12, 12]`.
pub fn gaussian_expectation<F: Fn(f64) -> f64>(f: F) -> f64 {
    let m = 24_000;
    let (a, b) = (-12.0, 12.0);
    let h = (b - a) / m as f64;
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    let g = |t: f64| f(t) * (-0.5 * t * t).exp() / norm;
    let mut acc = g(a) + g(b);
    for i in 1..m {
        let t = a + i as f64 * h;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(t);
    }
    acc * h / 3.0
}

/// Law of one column: `mean + S w` (linear kinds) or `mean + phi(S g) / kappa`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnDistribution {
    kind: DistKind,
    /// Eigenvalues of `S^2`.
    sigma_eigenvalues: Vec<f64>,
    /// `S` itself when it is not diagonal.
    sigma_sqrt: Option<DMatrix<f64>>,
    basis: Option<DMatrix<f64>>,
    mean: DVector<f64>,
    mean_norm: f64,
    nonlinearity: Option<Nonlinearity>,
    kappa: f64,
}

impl ColumnDistribution {
    /// Diagonal `S = diag(sqrt(sigma_eigenvalues))`, zero mean.
    pub fn new(kind: DistKind, sigma_eigenvalues: Vec<f64>) -> Result<Self> {
        if sigma_eigenvalues.is_empty() {
            return Err(Error::Size("distribution dimension is zero".into()));
        }
        if sigma_eigenvalues.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("covariance eigenvalues must be nonnegative".into()));
        }
        let p = sigma_eigenvalues.len();
        let nonlinearity = (kind == DistKind::LipschitzGaussianFeature).then_some(Nonlinearity::Tanh);
        Ok(Self {
            kind,
            sigma_eigenvalues,
            sigma_sqrt: None,
            basis: None,
            mean: DVector::zeros(p),
            mean_norm: 0.0,
            kappa: nonlinearity.map_or(1.0, |phi| phi.normalizer()),
            nonlinearity,
        })
    }

    pub fn gaussian(sigma_eigenvalues: Vec<f64>) -> Result<Self> {
        Self::new(DistKind::GaussianLinear, sigma_eigenvalues)
    }

    pub fn rademacher(sigma_eigenvalues: Vec<f64>) -> Result<Self> {
        Self::new(DistKind::RademacherLinear, sigma_eigenvalues)
    }

    pub fn lipschitz(sigma_eigenvalues: Vec<f64>, nonlinearity: Nonlinearity) -> Result<Self> {
        let mut d = Self::new(DistKind::LipschitzGaussianFeature, sigma_eigenvalues)?;
        d.nonlinearity = Some(nonlinearity);
        d.kappa = nonlinearity.normalizer();
        if !(d.kappa > 0.0) {
            return Err(Error::Config("nonlinearity vanishes on N(0, 1)".into()));
        }
        Ok(d)
    }

    /// Rotates `S` into the orthogonal basis `q`: `S = Q diag(sqrt(lambda)) Q^T`.
    pub fn with_basis(mut self, q: DMatrix<f64>) -> Result<Self> {
        let p = self.p();
        if q.nrows() != p || q.ncols() != p {
            return Err(Error::Size(format!("basis must be {p}x{p}")));
        }
        let orth = (q.transpose() * &q - DMatrix::identity(p, p)).amax();
        if orth > 1e-10 {
            return Err(Error::Config(format!("basis is not orthogonal (error {orth:e})")));
        }
        let roots = DVector::from_iterator(p, self.sigma_eigenvalues.iter().map(|v| v.sqrt()));
        self.sigma_sqrt = Some(&q * DMatrix::from_diagonal(&roots) * q.transpose());
        self.basis = Some(q);
        Ok(self)
    }

    /// Mean `mean_norm * e_1`.
    pub fn with_mean_norm(self, mean_norm: f64) -> Result<Self> {
        let mut mean = DVector::zeros(self.p());
        mean[0] = mean_norm;
        self.with_mean(mean, mean_norm)
    }

    pub fn with_mean(mut self, mean: DVector<f64>, mean_norm: f64) -> Result<Self> {
        if mean.len() != self.p() {
            return Err(Error::Size("mean has the wrong length".into()));
        }
        if !(mean_norm >= 0.0) || mean.norm() > mean_norm * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "mean norm {} exceeds the declared bound {mean_norm}",
                mean.norm()
            )));
        }
        self.mean = mean;
        self.mean_norm = mean_norm;
        Ok(self)
    }

    pub fn p(&self) -> usize {
        self.sigma_eigenvalues.len()
    }

    pub fn kind(&self) -> DistKind {
        self.kind
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn mean_norm(&self) -> f64 {
        self.mean_norm
    }

    pub fn nonlinearity(&self) -> Option<Nonlinearity> {
        self.nonlinearity
    }

    /// `||S||^2`, the largest eigenvalue of the linear part.
    pub fn linear_spectral_norm(&self) -> f64 {
        self.sigma_eigenvalues.iter().fold(0.0, |m, &v| m.max(v))
    }

    /// Zero mean and a diagonal linear part: coordinates are independent,
    /// sign-symmetric and exchangeable within equal variances.
    pub fn coordinate_symmetric(&self) -> bool {
        self.sigma_sqrt.is_none() && self.mean.iter().all(|m| *m == 0.0)
    }

    /// `E ||x||^4` when it has a closed form.
    pub fn fourth_moment_norm(&self) -> Option<f64> {
        let c = match &self.sigma_sqrt {
            Some(s) => s * s.transpose(),
            None => DMatrix::from_diagonal(&DVector::from_column_slice(&self.sigma_eigenvalues)),
        };
        let tr = c.trace();
        let tr2 = c.norm_squared();
        let m = &self.mean;
        match self.kind {
            DistKind::GaussianLinear => {
                let mm = m.norm_squared();
                let mcm = (m.transpose() * &c * m)[(0, 0)];
                Some((tr + mm).powi(2) + 2.0 * tr2 + 4.0 * mcm)
            }
            DistKind::RademacherLinear if m.iter().all(|v| *v == 0.0) => {
                let diag: f64 = c.diagonal().iter().map(|v| v * v).sum();
                Some(tr * tr + 2.0 * tr2 - 2.0 * diag)
            }
            DistKind::LipschitzGaussianFeature if self.coordinate_symmetric() => {
                let phi = self.nonlinearity?;
                let k2 = self.kappa.powi(2);
                let (m2, m4): (Vec<f64>, Vec<f64>) = self
                    .sigma_eigenvalues
                    .iter()
                    .map(|&v| {
                        let s = v.sqrt();
                        (
                            phi.rms(s).powi(2) / k2,
                            gaussian_expectation(|t| phi.raw(s * t).powi(4)) / (k2 * k2),
                        )
                    })
                    .unzip();
                let sum2: f64 = m2.iter().sum();
                let sq2: f64 = m2.iter().map(|v| v * v).sum();
                Some(m4.iter().sum::<f64>() + sum2 * sum2 - sq2)
            }
            _ => None,
        }
    }

    fn driver<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let p = self.p();
        match self.kind {
            DistKind::RademacherLinear => {
                DVector::from_fn(p, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
            }
            _ => DVector::from_fn(p, |_, _| rng.sample(StandardNormal)),
        }
    }

    fn linear(&self, w: DVector<f64>) -> DVector<f64> {
        match &self.sigma_sqrt {
            Some(s) => s * w,
            None => DVector::from_fn(self.p(), |i, _| self.sigma_eigenvalues[i].sqrt() * w[i]),
        }
    }

    pub fn sample_column<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let mut x = self.linear(self.driver(rng));
        if let Some(phi) = self.nonlinearity.filter(|_| self.kind == DistKind::LipschitzGaussianFeature) {
            let kappa = self.kappa;
            x.apply(|t| *t = phi.raw(*t) / kappa);
        }
        x + &self.mean
    }

    /// `E[x x^T]`; exact for the linear kinds and for diagonal Lipschitz
    /// features, estimated from `10^5` columns otherwise.
    pub fn population_covariance(&self) -> DMatrix<f64> {
        let p = self.p();
        let centred = match (self.kind, self.nonlinearity, &self.sigma_sqrt) {
            (DistKind::LipschitzGaussianFeature, Some(phi), None) => {
                let kappa2 = self.kappa.powi(2);
                DMatrix::from_diagonal(&DVector::from_iterator(
                    p,
                    self.sigma_eigenvalues
                        .iter()
                        .map(|&v| phi.rms(v.sqrt()).powi(2) / kappa2),
                ))
            }
            (DistKind::LipschitzGaussianFeature, Some(_), Some(_)) => {
                let zero_mean = Self {
                    mean: DVector::zeros(p),
                    ..self.clone()
                };
                let samples = 100_000;
                let cols: Vec<DVector<f64>> = (0..samples)
                    .into_par_iter()
                    .map(|j| zero_mean.sample_column(&mut column_rng(0x5eed_c0de, u32::MAX as usize, j)))
                    .collect();
                let mut acc = DMatrix::zeros(p, p);
                for c in &cols {
                    acc.ger(1.0, c, c, 1.0);
                }
                acc / samples as f64
            }
            _ => match &self.sigma_sqrt {
                Some(s) => s * s.transpose(),
                None => DMatrix::from_diagonal(&DVector::from_column_slice(&self.sigma_eigenvalues)),
            },
        };
        centred + &self.mean * self.mean.transpose()
    }

    /// The covariance model seen by the fixed-point solver at ratio `gamma`.
    pub fn covariance_model(&self, gamma: f64) -> Result<CovarianceModel> {
        let sigma = self.population_covariance();
        let diagonal = (0..self.p()).all(|i| (0..self.p()).all(|j| i == j || sigma[(i, j)] == 0.0));
        let descending = (1..self.p()).all(|i| sigma[(i, i)] <= sigma[(i - 1, i - 1)]);
        if diagonal && descending {
            CovarianceModel::new(sigma.diagonal().iter().copied().collect(), gamma, self.mean_norm)
        } else {
            CovarianceModel::from_matrix(&sigma, gamma, self.mean_norm)
        }
    }
}

/// Covariance spectrum specification, independent of the dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum SigmaSpec {
    Identity,
    Zero,
    Scalar(f64),
    /// Half the eigenvalues at `low`, half at `high`.
    TwoLevel { low: f64, high: f64 },
    Explicit(Vec<f64>),
}

impl SigmaSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "identity" => return Ok(Self::Identity),
            "zero" => return Ok(Self::Zero),
            _ => {}
        }
        let values: Vec<f64> = s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad eigenvalue {v:?}")))
            })
            .collect::<Result<_>>()?;
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("eigenvalues must be finite and nonnegative".into()));
        }
        Ok(match values.as_slice() {
            [v] => Self::Scalar(*v),
            _ => Self::Explicit(values),
        })
    }

    pub fn eigenvalues(&self, p: usize) -> Result<Vec<f64>> {
        Ok(match self {
            Self::Identity => vec![1.0; p],
            Self::Zero => vec![0.0; p],
            Self::Scalar(v) => vec![*v; p],
            Self::TwoLevel { low, high } => (0..p).map(|i| if i < p / 2 { *high } else { *low }).collect(),
            Self::Explicit(v) => {
                if v.len() != p {
                    return Err(Error::Config(format!(
                        "{} eigenvalues given for p = {p}",
                        v.len()
                    )));
                }
                v.clone()
            }
        })
    }
}

/// A distribution family parametrized by dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionSpec {
    pub kind: DistKind,
    pub sigma: SigmaSpec,
    pub mean_norm: f64,
    pub nonlinearity: Option<Nonlinearity>,
}

impl DistributionSpec {
    pub fn new(kind: DistKind, sigma: SigmaSpec) -> Self {
        Self {
            kind,
            sigma,
            mean_norm: 0.0,
            nonlinearity: None,
        }
    }

    pub fn build(&self, p: usize) -> Result<ColumnDistribution> {
        let eig = self.sigma.eigenvalues(p)?;
        let mut d = match (self.kind, self.nonlinearity) {
            (DistKind::LipschitzGaussianFeature, Some(phi)) => ColumnDistribution::lipschitz(eig, phi)?,
            (kind, _) => ColumnDistribution::new(kind, eig)?,
        };
        if self.mean_norm > 0.0 {
            d = d.with_mean_norm(self.mean_norm)?;
        }
        Ok(d)
    }
}

pub const DEFAULT_GAMMA_BOUND: f64 = 64.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    p: usize,
    n: usize,
    distribution: ColumnDistribution,
    seed: u64,
    replicas: usize,
}

impl RunConfig {
    pub fn new(n: usize, distribution: ColumnDistribution, seed: u64, replicas: usize) -> Result<Self> {
        Self::with_gamma_bound(n, distribution, seed, replicas, DEFAULT_GAMMA_BOUND)
    }

    /// Requires `1/bound <= p/n <= bound`.
    pub fn with_gamma_bound(
        n: usize,
        distribution: ColumnDistribution,
        seed: u64,
        replicas: usize,
        bound: f64,
    ) -> Result<Self> {
        let p = distribution.p();
        if n == 0 || replicas == 0 {
            return Err(Error::Config("n and replicas must be positive".into()));
        }
        if n > u32::MAX as usize || replicas > u32::MAX as usize {
            return Err(Error::Config("n and replicas must fit in 32 bits".into()));
        }
        let gamma = p as f64 / n as f64;
        if gamma > bound || gamma < 1.0 / bound {
            return Err(Error::Config(format!(
                "gamma = p/n = {gamma} outside [1/{bound}, {bound}]"
            )));
        }
        Ok(Self {
            p,
            n,
            distribution,
            seed,
            replicas,
        })
    }

    /// Parses the flat `key = value` format.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut p = None;
        let mut n = None;
        let mut seed = 0_u64;
        let mut replicas = 1_usize;
        let mut spec = DistributionSpec::new(DistKind::GaussianLinear, SigmaSpec::Identity);
        for (key, value) in parse_key_values(text)? {
            match key.as_str() {
                "p" => p = Some(parse_int(&key, &value)?),
                "n" => n = Some(parse_int(&key, &value)?),
                "seed" => seed = parse_int(&key, &value)? as u64,
                "replicas" => replicas = parse_int(&key, &value)?,
                "dist.kind" => spec.kind = DistKind::parse(&value)?,
                "dist.sigma.eigenvalues" => spec.sigma = SigmaSpec::parse(&value)?,
                "dist.mean_norm" => spec.mean_norm = parse_float(&key, &value)?,
                "dist.nonlinearity" => spec.nonlinearity = Some(Nonlinearity::parse(&value)?),
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        let p = p.ok_or_else(|| Error::Config("missing key \"p\"".into()))?;
        let n = n.ok_or_else(|| Error::Config("missing key \"n\"".into()))?;
        if p == 0 {
            return Err(Error::Config("p must be positive".into()));
        }
        Self::new(n, spec.build(p)?, seed, replicas)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.p as f64 / self.n as f64
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replicas(&self) -> usize {
        self.replicas
    }

    pub fn distribution(&self) -> &ColumnDistribution {
        &self.distribution
    }

    pub fn covariance_model(&self) -> Result<CovarianceModel> {
        self.distribution.covariance_model(self.gamma())
    }
}

/// Ordered `key = value` pairs; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("duplicate key {key:?}")));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn parse_int(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a nonnegative integer, got {value:?}")))
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Config(format!("{key}: expected a number, got {value:?}")))
}

/// One realization of the `p x n` data matrix.
pub fn sample_matrix(config: &RunConfig, replica: usize) -> DataMatrix {
    let (p, n) = (config.p, config.n);
    let cols: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            config
                .distribution
                .sample_column(&mut column_rng(config.seed, replica, j))
        })
        .collect();
    let x = DMatrix::from_fn(p, n, |i, j| cols[j][i]);
    DataMatrix::new(x).expect("sampled entries are finite")
}

/// `(1/p) Tr (K - zI)^{-1}` through the eigenvalues of `K`.
pub fn empirical_g(x: &DataMatrix, z: SpectralParameter) -> Result<C64> {
    let eig = SymmetricSpectrum::eigenvalues_of(&sample_covariance(x)?)?;
    Ok(stieltjes_of_eigenvalues(&eig, z))
}

pub fn stieltjes_of_eigenvalues(eigenvalues: &[f64], z: SpectralParameter) -> C64 {
    let z = z.value();
    eigenvalues
        .iter()
        .map(|&l| (C64::new(l, 0.0) - z).inv())
        .sum::<C64>()
        / eigenvalues.len() as f64
}

pub fn empirical_measure(x: &DataMatrix) -> Result<AtomicMeasure> {
    AtomicMeasure::from_eigenvalues(&SymmetricSpectrum::eigenvalues_of(&sample_covariance(x)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralNormReport {
    pub norms: Vec<f64>,
    pub max: f64,
    pub bound: f64,
    pub slack: f64,
    pub passed: bool,
}

/// Slack added to the edge `(1 + sqrt(gamma))^2 ||Sigma||`: 1 for `p >= 200`,
/// growing like `p^{-2/3}` (edge fluctuation scale) below.
pub fn edge_slack(p: usize) -> f64 {
    if p >= 200 {
        1.0
    } else {
        (200.0 / p as f64).powf(2.0 / 3.0)
    }
}

pub fn spectral_norm_check(config: &RunConfig) -> Result<SpectralNormReport> {
    let norms: Vec<f64> = (0..config.replicas)
        .into_par_iter()
        .map(|r| {
            let k = sample_covariance(&sample_matrix(config, r))?;
            Ok(SymmetricSpectrum::eigenvalues_of(&k)?
                .last()
                .copied()
                .unwrap_or(0.0))
        })
        .collect::<Result<_>>()?;
    let model = config.covariance_model()?;
    let slack = edge_slack(config.p);
    let bound = (1.0 + config.gamma().sqrt()).powi(2) * model.sigma_spectral_norm() + slack;
    let max = norms.iter().fold(0.0_f64, |m, &v| m.max(v));
    Ok(SpectralNormReport {
        passed: max <= bound,
        norms,
        max,
        bound,
        slack,
    })
}

/// Outcome of the heuristic Gaussian-tail probe on two 1-Lipschitz observables.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConcentrationProbe {
    /// Largest fitted standard deviation of the observables.
    pub diameter: f64,
    /// Largest excess of an empirical tail frequency over its envelope.
    pub tail_excess: f64,
    pub passed: bool,
}

pub fn concentration_probe(dist: &ColumnDistribution, samples: usize, seed: u64) -> ConcentrationProbe {
    let p = dist.p();
    let w = DVector::from_element(p, 1.0 / (p as f64).sqrt());
    let obs: Vec<(f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|j| {
            let x = dist.sample_column(&mut column_rng(seed, 0, j)) - dist.mean();
            (x.dot(&w), x.norm())
        })
        .collect();
    let mut diameter = 0.0_f64;
    let mut tail_excess = f64::NEG_INFINITY;
    for values in [
        obs.iter().map(|o| o.0).collect::<Vec<_>>(),
        obs.iter().map(|o| o.1).collect::<Vec<_>>(),
    ] {
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        diameter = diameter.max(sd);
        if sd == 0.0 {
            tail_excess = tail_excess.max(0.0);
            continue;
        }
        for k in 1..=4 {
            let t = k as f64 * sd;
            let freq = values.iter().filter(|v| (*v - mean).abs() >= t).count() as f64 / m;
            let envelope = 2.0 * (-0.5 * (k * k) as f64).exp();
            let noise = 3.0 * (envelope * (1.0 - envelope.min(1.0)) / m).sqrt();
            tail_excess = tail_excess.max(freq - envelope - noise);
        }
    }
    let scale = dist.linear_spectral_norm().sqrt().max(1.0);
    let passed = diameter <= 2.0 * scale && tail_excess <= 0.0;
    if !passed {
        log::warn!(
            "concentration probe: diameter {diameter:.3}, tail excess {tail_excess:.3e} exceed the Gaussian envelope"
        );
    }
    ConcentrationProbe {
        diameter,
        tail_excess,
        passed,
    }
}

pub const MATRIX_MAGIC: &[u8; 8] = b"SPEQMAT1";

/// Magic, `p` and `n` as little-endian `u32`, then row-major `f64` entries.
pub fn write_matrix_dump<W: Write>(x: &DataMatrix, mut writer: W) -> Result<()> {
    let (p, n) = (x.p(), x.n());
    let p32 = u32::try_from(p).map_err(|_| Error::Size(format!("p = {p} exceeds 32 bits")))?;
    let n32 = u32::try_from(n).map_err(|_| Error::Size(format!("n = {n} exceeds 32 bits")))?;
    writer.write_all(MATRIX_MAGIC)?;
    writer.write_all(&p32.to_le_bytes())?;
    writer.write_all(&n32.to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 * p * n);
    for i in 0..p {
        for j in 0..n {
            buf.extend_from_slice(&x.entries()[(i, j)].to_le_bytes());
        }
    }
    writer.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix_dump<R: Read>(mut reader: R) -> Result<DataMatrix> {
    let mut header = [0_u8; 16];
    reader.read_exact(&mut header)?;
    if &header[..8] != MATRIX_MAGIC {
        return Err(Error::Config("not a SPEQMAT1 matrix dump".into()));
    }
    let p = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut data = vec![0_u8; 8 * p * n];
    reader.read_exact(&mut data)?;
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DataMatrix::from_row_slice(p, n, &values)
}
