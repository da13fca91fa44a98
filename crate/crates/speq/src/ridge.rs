//! Kernel ridge regression, random-features regression and the effective
//! ridge at which the two agree on average.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::equiv::{self, CovarianceModel, SolverOptions};
use crate::error::{Error, Result};
use crate::resolvent::{SpectralParameter, SymmetricSpectrum};
use crate::sim::{column_rng, gaussian_expectation};
use crate::tolerance;

/// Training kernel, labels, ridge and feature count.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelProblem {
    kernel: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    labels: DVector<f64>,
    lambda: f64,
    features: usize,
}

impl KernelProblem {
    pub fn new(kernel: DMatrix<f64>, labels: DVector<f64>, lambda: f64, features: usize) -> Result<Self> {
        let n = kernel.nrows();
        if n == 0 || kernel.ncols() != n || labels.len() != n {
            return Err(Error::Size(format!(
                "kernel {}x{} and {} labels do not match",
                kernel.nrows(),
                kernel.ncols(),
                labels.len()
            )));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::NonPositive("lambda"));
        }
        if features == 0 {
            return Err(Error::NonPositive("feature count"));
        }
        let mut eigenvalues = SymmetricSpectrum::eigenvalues_of(&kernel)?;
        eigenvalues.reverse();
        let smallest = *eigenvalues.last().unwrap();
        if !(smallest > 0.0) {
            return Err(Error::Precondition(format!(
                "kernel matrix must be positive definite, smallest eigenvalue {smallest:e}"
            )));
        }
        Ok(Self {
            kernel,
            eigenvalues,
            labels,
            lambda,
            features,
        })
    }

    /// Problem posed directly in the kernel eigenbasis.
    pub fn from_eigenvalues(d: &[f64], labels: DVector<f64>, lambda: f64, features: usize) -> Result<Self> {
        let kernel = DMatrix::from_diagonal(&DVector::from_column_slice(d));
        Self::new(kernel, labels, lambda, features)
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    /// Descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn samples(&self) -> usize {
        self.kernel.nrows()
    }

    /// `N / P`.
    pub fn gamma(&self) -> f64 {
        self.samples() as f64 / self.features as f64
    }

    /// `(K_X + ridge I)^{-1} Y`.
    pub fn krr_weights(&self, ridge: f64) -> Result<DVector<f64>> {
        if !(ridge > 0.0) {
            return Err(Error::NonPositive("ridge"));
        }
        let n = self.samples();
        let chol = spd_factor(&self.kernel + DMatrix::identity(n, n) * ridge)?;
        Ok(chol.solve(&self.labels))
    }
}

fn spd_factor(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Solve("matrix is not positive definite".into()))
}

/// `k(x, .)^T (K_X + ridge I)^{-1} Y`.
pub fn krr_predict(problem: &KernelProblem, kernel_row: &DVector<f64>, ridge: f64) -> Result<f64> {
    if kernel_row.len() != problem.samples() {
        return Err(Error::Size("kernel row has the wrong length".into()));
    }
    Ok(kernel_row.dot(&problem.krr_weights(ridge)?))
}

fn check_rf_inputs(features: &DMatrix<f64>, phi_x: &DVector<f64>, labels: &DVector<f64>, lambda: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositive("lambda"));
    }
    if features.nrows() != labels.len() || features.ncols() != phi_x.len() {
        return Err(Error::Size(format!(
            "feature matrix {}x{} against {} labels and {} features at x",
            features.nrows(),
            features.ncols(),
            labels.len(),
            phi_x.len()
        )));
    }
    Ok(())
}

/// `P^{-1/2} phi_x^T F^T (F F^T + lambda I_N)^{-1} Y` for the scaled feature
/// matrix `F` (`N x P`) and the raw features `phi_x` of the query point.
pub fn rf_predict(features: &DMatrix<f64>, phi_x: &DVector<f64>, labels: &DVector<f64>, lambda: f64) -> Result<f64> {
    check_rf_inputs(features, phi_x, labels, lambda)?;
    let n = features.nrows();
    let gram = features * features.transpose() + DMatrix::identity(n, n) * lambda;
    let alpha = spd_factor(gram)?.solve(labels);
    let p = features.ncols() as f64;
    Ok(phi_x.dot(&(features.transpose() * alpha)) / p.sqrt())
}

/// The same predictor through `(F^T F + lambda I_P)^{-1} F^T Y`.
pub fn rf_predict_primal(
    features: &DMatrix<f64>,
    phi_x: &DVector<f64>,
    labels: &DVector<f64>,
    lambda: f64,
) -> Result<f64> {
    check_rf_inputs(features, phi_x, labels, lambda)?;
    let p = features.ncols();
    let gram = features.transpose() * features + DMatrix::identity(p, p) * lambda;
    let beta = spd_factor(gram)?.solve(&(features.transpose() * labels));
    Ok(phi_x.dot(&beta) / (p as f64).sqrt())
}

/// `max |I - lambda (F F^T + lambda I)^{-1} - F F^T (F F^T + lambda I)^{-1}|`.
pub fn ridge_identity_residual(features: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let n = features.nrows();
    let ff = features * features.transpose();
    let inv = spd_factor(&ff + DMatrix::identity(n, n) * lambda)?.inverse();
    let lhs = DMatrix::identity(n, n) - &inv * lambda;
    let rhs = &ff * &inv;
    Ok((lhs - rhs).amax())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EffectiveRidge {
    pub lambda: f64,
    pub lambda_tilde: f64,
    /// `|lambda + (t/P) sum d/(t+d) - t| / t` at the returned root.
    pub residual: f64,
    pub iterations: usize,
    /// `1 / g(-lambda)` for the transform of the feature-side spectrum.
    pub fixed_point: f64,
}

/// Root of `t = lambda + (t/P) sum_i d_i/(t + d_i)` by Newton with a
/// bisection fallback on `[lambda, lambda + sum d / P]`, cross-checked
/// against `1 / g(-lambda)` of the feature-side measure from the fixed
/// point at `z = -lambda`, `gamma = N/P`.
pub fn effective_ridge(d: &[f64], samples: usize, features: usize, lambda: f64) -> Result<EffectiveRidge> {
    if d.is_empty() || d.len() != samples {
        return Err(Error::Size(format!("{} eigenvalues for N = {samples}", d.len())));
    }
    if features == 0 {
        return Err(Error::NonPositive("feature count"));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::NonPositive("lambda"));
    }
    if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Precondition("kernel eigenvalues must be positive".into()));
    }
    let p = features as f64;
    let h = |t: f64| lambda + t / p * d.iter().map(|v| v / (t + v)).sum::<f64>() - t;
    let dh = |t: f64| d.iter().map(|v| (v / (t + v)).powi(2)).sum::<f64>() / p - 1.0;
    let (mut lo, mut hi) = (lambda, lambda + d.iter().sum::<f64>() / p);
    let mut t = 0.5 * (lo + hi);
    let mut iterations = 0;
    for _ in 0..200 {
        iterations += 1;
        let v = h(t);
        if v > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let slope = dh(t);
        let mut next = t - v / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        let step = (next - t).abs();
        t = next;
        if step <= 1e-15 * t || hi - lo <= 1e-15 * t {
            break;
        }
    }
    let residual = h(t).abs() / t;

    let model = CovarianceModel::new(d.to_vec(), samples as f64 / p, 0.0)?;
    let z = SpectralParameter::real(-lambda)?;
    let sol = equiv::solve_fixed_point(&model, z, SolverOptions::default())?;
    // g(-lambda) = -1/c for the feature-side measure
    let fixed_point = -sol.c().re;
    let rel = (fixed_point - t).abs() / t;
    if rel > tolerance::RIDGE_AGREEMENT {
        return Err(Error::Consistency(format!(
            "effective ridge {t} disagrees with the fixed point {fixed_point} ({rel:e} relative)"
        )));
    }
    Ok(EffectiveRidge {
        lambda,
        lambda_tilde: t,
        residual,
        iterations,
        fixed_point,
    })
}

/// Law of the whitened entries of the feature draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FeatureSampler {
    Gaussian,
    /// `tanh(g)` rescaled to unit variance.
    LipschitzGaussian,
}

impl FeatureSampler {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "lipschitz" => Ok(Self::LipschitzGaussian),
            _ => Err(Error::Config(format!("unknown feature sampler {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::LipschitzGaussian => "lipschitz",
        }
    }
}

/// Query points given by their kernel against the training set and themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPoints {
    /// `T x N`
    pub cross: DMatrix<f64>,
    /// `T x T`
    pub gram: DMatrix<f64>,
    /// Training indices when the queries are training inputs.
    pub indices: Option<Vec<usize>>,
}

impl QueryPoints {
    pub fn training(problem: &KernelProblem, indices: &[usize]) -> Result<Self> {
        let n = problem.samples();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, n });
        }
        let k = problem.kernel();
        Ok(Self {
            cross: DMatrix::from_fn(indices.len(), n, |r, c| k[(indices[r], c)]),
            gram: DMatrix::from_fn(indices.len(), indices.len(), |r, c| k[(indices[r], indices[c])]),
            indices: Some(indices.to_vec()),
        })
    }

    pub fn len(&self) -> usize {
        self.cross.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The `count` training inputs where the two ridges disagree most.
pub fn most_sensitive_points(problem: &KernelProblem, lambda_tilde: f64, count: usize) -> Result<Vec<usize>> {
    let a = problem.kernel() * problem.krr_weights(problem.lambda())?;
    let b = problem.kernel() * problem.krr_weights(lambda_tilde)?;
    let mut order: Vec<usize> = (0..problem.samples()).collect();
    order.sort_by(|&i, &j| (b[j] - a[j]).abs().total_cmp(&(b[i] - a[i]).abs()).then(i.cmp(&j)));
    order.truncate(count);
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DebiasPoint {
    pub index: Option<usize>,
    pub krr_lambda: f64,
    pub krr_lambda_tilde: f64,
    pub rf_mean: f64,
    pub rf_stderr: f64,
    pub gap_tilde: f64,
    pub gap_naive: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DebiasReport {
    pub lambda: f64,
    pub lambda_tilde: f64,
    pub sampler: FeatureSampler,
    pub replicas: usize,
    /// Largest gap to the effective-ridge predictor over the queries.
    pub gap_tilde: f64,
    /// Largest gap to the plain-ridge predictor over the queries.
    pub gap_naive: f64,
    pub wins: usize,
    pub max_identity_residual: f64,
    pub per_x: Vec<DebiasPoint>,
}

impl DebiasReport {
    pub fn all_win(&self) -> bool {
        self.wins == self.per_x.len()
    }
}

const TANH_SEED: u64 = 0x7a4b;

fn tanh_normalizer() -> f64 {
    gaussian_expectation(|t| t.tanh().powi(2)).sqrt()
}

/// Averages the random-features predictor over `replicas` draws of `P`
/// features with covariance equal to the joint kernel of training and
/// query points.
pub fn debias_experiment(
    problem: &KernelProblem,
    sampler: FeatureSampler,
    queries: &QueryPoints,
    replicas: usize,
    seed: u64,
) -> Result<DebiasReport> {
    let n = problem.samples();
    let t = queries.len();
    if queries.cross.ncols() != n || queries.gram.nrows() != t || queries.gram.ncols() != t {
        return Err(Error::Size("query kernels do not match the problem".into()));
    }
    if replicas < 2 {
        return Err(Error::Config("at least two replicas are needed".into()));
    }
    let ridge = effective_ridge(problem.eigenvalues(), n, problem.features(), problem.lambda())?;
    let lambda = problem.lambda();
    let lt = ridge.lambda_tilde;

    let joint = DMatrix::from_fn(n + t, n + t, |r, c| match (r < n, c < n) {
        (true, true) => problem.kernel()[(r, c)],
        (false, true) => queries.cross[(r - n, c)],
        (true, false) => queries.cross[(c - n, r)],
        (false, false) => queries.gram[(r - n, c - n)],
    });
    let spec = SymmetricSpectrum::decompose(&joint)?;
    let q = spec.eigenvectors();
    let factor = DMatrix::from_fn(n + t, n + t, |r, c| q[(r, c)] * spec.eigenvalues()[c].sqrt());

    let p = problem.features();
    let kappa = tanh_normalizer();
    let labels = problem.labels();
    let rows: Vec<(Vec<f64>, f64)> = (0..replicas)
        .into_par_iter()
        .map(|rep| {
            let mut w = DMatrix::<f64>::zeros(n + t, p);
            for j in 0..p {
                let mut rng = column_rng(seed ^ TANH_SEED, rep, j);
                for i in 0..n + t {
                    let g: f64 = rng.sample(StandardNormal);
                    w[(i, j)] = match sampler {
                        FeatureSampler::Gaussian => g,
                        FeatureSampler::LipschitzGaussian => g.tanh() / kappa,
                    };
                }
            }
            let phi = &factor * w;
            let f = phi.rows(0, n) / (p as f64).sqrt();
            let gram = &f * f.transpose() + DMatrix::identity(n, n) * lambda;
            let alpha = spd_factor(gram)?.solve(labels);
            let beta = f.transpose() * alpha;
            let preds: Vec<f64> = (0..t)
                .map(|k| phi.row(n + k).transpose().dot(&beta) / (p as f64).sqrt())
                .collect();
            let residual = if rep == 0 {
                ridge_identity_residual(&f.into_owned(), lambda)?
            } else {
                0.0
            };
            Ok((preds, residual))
        })
        .collect::<Result<_>>()?;

    let a = &queries.cross * problem.krr_weights(lambda)?;
    let b = &queries.cross * problem.krr_weights(lt)?;
    let m = replicas as f64;
    let mut per_x = Vec::with_capacity(t);
    for k in 0..t {
        let vals: Vec<f64> = rows.iter().map(|r| r.0[k]).collect();
        let mean = vals.iter().sum::<f64>() / m;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        per_x.push(DebiasPoint {
            index: queries.indices.as_ref().map(|ix| ix[k]),
            krr_lambda: a[k],
            krr_lambda_tilde: b[k],
            rf_mean: mean,
            rf_stderr: sd / m.sqrt(),
            gap_tilde: (mean - b[k]).abs(),
            gap_naive: (mean - a[k]).abs(),
        });
    }
    Ok(DebiasReport {
        lambda,
        lambda_tilde: lt,
        sampler,
        replicas,
        gap_tilde: per_x.iter().map(|x| x.gap_tilde).fold(0.0, f64::max),
        gap_naive: per_x.iter().map(|x| x.gap_naive).fold(0.0, f64::max),
        wins: per_x.iter().filter(|x| x.gap_tilde < x.gap_naive).count(),
        max_identity_residual: rows.iter().map(|r| r.1).fold(0.0, f64::max),
        per_x,
    })
}

/// `exp(-||x - y|| / bandwidth)` on the rows of `points`.
pub fn laplace_kernel(points: &DMatrix<f64>, bandwidth: f64) -> DMatrix<f64> {
    let n = points.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let d = (points.row(i) - points.row(j)).norm();
        (-d / bandwidth).exp()
    })
}

/// Regression task on `N` uniform points of `[-1, 1]^dim` with labels
/// `sin(3 x_0) + cos(2 x_last)` plus unit Gaussian noise, under a Laplace
/// kernel of the given bandwidth.
pub fn laplace_regression_problem(
    samples: usize,
    dim: usize,
    bandwidth: f64,
    lambda: f64,
    features: usize,
    seed: u64,
) -> Result<KernelProblem> {
    if dim == 0 || samples == 0 {
        return Err(Error::Size("empty design".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::NonPositive("bandwidth"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = DMatrix::<f64>::from_fn(samples, dim, |_, _| rng.random_range(-1.0..1.0));
    let labels = DVector::from_fn(samples, |i, _| {
        let noise: f64 = rng.sample(StandardNormal);
        (3.0 * points[(i, 0)]).sin() + (2.0 * points[(i, dim - 1)]).cos() + noise
    });
    KernelProblem::new(laplace_kernel(&points, bandwidth), labels, lambda, features)
}
