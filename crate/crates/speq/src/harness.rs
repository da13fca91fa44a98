//! Monte Carlo sweeps over `n` comparing sample resolvents with their
//! deterministic equivalents.
//!
//! Every sweep derives the data for size `n` from the sweep seed and `n`
//! alone, runs replicas in parallel, and reduces in replica order, so a
//! report is a pure function of its inputs.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::equiv::{self, CovarianceModel, FixedPointSolution, OmegaDomain, SolverOptions};
use crate::error::{Error, Result};
use crate::freeconv::{self, FreeConvOptions, FreeConvolutionResult};
use crate::measure::{kolmogorov_distance, AtomicMeasure, CdfFunction};
use crate::resolvent::{
    co_covariance, sample_covariance, Branch, DataMatrix, SpectralParameter, SymmetricSpectrum, C64,
};
use crate::sim::{sample_matrix, DistKind, DistributionSpec, RunConfig, SigmaSpec};
use crate::tolerance;

pub const MIN_REPLICAS: usize = 8;
pub const MIN_SLOPE_POINTS: usize = 4;

/// A family of run configurations at fixed aspect ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    ns: Vec<usize>,
    gamma: f64,
    distribution: DistributionSpec,
    seed: u64,
    replicas: usize,
}

impl SweepSpec {
    pub fn new(
        ns: Vec<usize>,
        gamma: f64,
        distribution: DistributionSpec,
        seed: u64,
        replicas: usize,
    ) -> Result<Self> {
        if ns.is_empty() || ns.windows(2).any(|w| w[1] <= w[0]) || ns[0] == 0 {
            return Err(Error::Config("n values must be positive and strictly ascending".into()));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::NonPositive("gamma"));
        }
        if replicas < MIN_REPLICAS {
            return Err(Error::Config(format!(
                "{replicas} replicas given, at least {MIN_REPLICAS} required"
            )));
        }
        Ok(Self {
            ns,
            gamma,
            distribution,
            seed,
            replicas,
        })
    }

    /// Gaussian columns with `Sigma = I` at `gamma = 1/2`, `n = 64, 128, ...` up to `n_max`.
    pub fn gaussian_mp(n_max: usize, seed: u64, replicas: usize) -> Result<Self> {
        let ns: Vec<usize> = std::iter::successors(Some(64_usize), |n| Some(n * 2))
            .take_while(|n| *n <= n_max)
            .collect();
        Self::new(
            ns,
            0.5,
            DistributionSpec::new(DistKind::GaussianLinear, SigmaSpec::Identity),
            seed,
            replicas,
        )
    }

    pub fn ns(&self) -> &[usize] {
        &self.ns
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replicas(&self) -> usize {
        self.replicas
    }

    pub fn distribution(&self) -> &DistributionSpec {
        &self.distribution
    }

    pub fn with_distribution(&self, distribution: DistributionSpec) -> Self {
        Self {
            distribution,
            ..self.clone()
        }
    }

    pub fn with_ns(&self, ns: Vec<usize>) -> Result<Self> {
        Self::new(ns, self.gamma, self.distribution.clone(), self.seed, self.replicas)
    }

    /// `p = round(gamma n)`; the seed is mixed with `n` so sizes are independent.
    pub fn config(&self, n: usize) -> Result<RunConfig> {
        let p = ((self.gamma * n as f64).round() as usize).max(1);
        let seed = self.seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        RunConfig::new(n, self.distribution.build(p)?, seed, self.replicas)
    }
}

/// Rejects `z` outside the region where the resolvent gap bound is valid for `n_min`.
pub fn check_validity_region(z: SpectralParameter, n_min: usize) -> Result<()> {
    let n = n_min as f64;
    match z.branch() {
        Branch::RealNegative => {
            let lhs = z.abs().powi(-7);
            if lhs > 10.0 * n {
                return Err(Error::ValidityRegion(format!(
                    "|z|^-7 = {lhs:.4e} exceeds 10 n_min = {}",
                    10.0 * n
                )));
            }
        }
        Branch::UpperHalf => {
            let lhs = z.value().im.powi(-16) * z.abs().powi(7);
            if lhs > n / 10.0 {
                return Err(Error::ValidityRegion(format!(
                    "Im(z)^-16 |z|^7 = {lhs:.4e} exceeds n_min/10 = {}",
                    n / 10.0
                )));
            }
        }
    }
    Ok(())
}

/// One CSV row `name,n,value,stderr,bound,ratio`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub name: String,
    pub n: usize,
    pub value: f64,
    pub stderr: f64,
    pub bound: f64,
    pub ratio: f64,
}

impl SweepPoint {
    fn new(name: &str, n: usize, value: f64, stderr: f64, bound: f64) -> Self {
        Self {
            name: name.to_string(),
            n,
            value,
            stderr,
            bound,
            ratio: if bound > 0.0 { value / bound } else { f64::NAN },
        }
    }
}

/// Least-squares fit of `log value` against `log n`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Half-width of the 95% confidence interval on the slope.
    pub half_width: f64,
    pub residuals: Vec<f64>,
}

impl SlopeFit {
    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.slope >= lo && self.slope <= hi
    }
}

pub fn fit_log_log(ns: &[usize], values: &[f64]) -> Result<SlopeFit> {
    if ns.len() != values.len() || ns.len() < MIN_SLOPE_POINTS {
        return Err(Error::Precondition(format!(
            "slope fit needs at least {MIN_SLOPE_POINTS} points, got {}",
            ns.len().min(values.len())
        )));
    }
    if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Precondition("slope fit needs positive finite values".into()));
    }
    let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x.iter().zip(&y).map(|(a, b)| b - intercept - slope * a).collect();
    let dof = m - 2.0;
    let s2 = residuals.iter().map(|r| r * r).sum::<f64>() / dof;
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::Precondition(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(SlopeFit {
        slope,
        intercept,
        half_width: t * (s2 / sxx).sqrt(),
        residuals,
    })
}

/// Per-`n` statistics of one quantity, with a log-log fit when defined.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub name: String,
    pub points: Vec<SweepPoint>,
    pub fit: Option<SlopeFit>,
}

impl SweepResult {
    fn from_points(name: &str, points: Vec<SweepPoint>) -> Self {
        let ns: Vec<usize> = points.iter().map(|p| p.n).collect();
        let values: Vec<f64> = points.iter().map(|p| p.value).collect();
        Self {
            name: name.to_string(),
            fit: fit_log_log(&ns, &values).ok(),
            points,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    pub fn value_at(&self, n: usize) -> Option<f64> {
        self.points.iter().find(|p| p.n == n).map(|p| p.value)
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn solve(model: &CovarianceModel, z: SpectralParameter) -> Result<FixedPointSolution> {
    equiv::solve_fixed_point(model, z, SolverOptions::default())
}

fn mean_c(values: &[C64]) -> C64 {
    values.iter().sum::<C64>() / values.len() as f64
}

fn variance_c(values: &[C64]) -> f64 {
    let m = mean_c(values);
    values.iter().map(|v| (v - m).norm_sqr()).sum::<f64>() / (values.len() - 1) as f64
}

/// Mean-zero per-replica covariates `(1/p) tr K - E`, `(1/p) tr K^2 - E`.
fn control_covariates(config: &RunConfig) -> Option<(f64, f64)> {
    let dist = config.distribution();
    let (p, n) = (config.p() as f64, config.n() as f64);
    let m = dist.population_covariance();
    let e1 = m.trace() / p;
    let e2 = dist
        .fourth_moment_norm()
        .map(|q| q / (p * n) + (n - 1.0) / (p * n) * m.norm_squared());
    e2.map(|e2| (e1, e2))
}

/// Samples shifted by the fitted multiple of mean-zero covariates. Falls
/// back to the raw samples when the regression is not identifiable.
fn control_variate_adjust(samples: &[C64], covariates: &[[f64; 2]]) -> Vec<C64> {
    let r = samples.len();
    let k = 2;
    if r < k + 3 {
        return samples.to_vec();
    }
    let tbar: [f64; 2] = [0, 1].map(|j| covariates.iter().map(|t| t[j]).sum::<f64>() / r as f64);
    let t = DMatrix::from_fn(r, k, |i, j| covariates[i][j] - tbar[j]);
    let scale = t.column_iter().map(|c| c.norm()).collect::<Vec<_>>();
    if scale.iter().any(|s| !(*s > 0.0)) {
        return samples.to_vec();
    }
    let sbar = mean_c(samples);
    let gram = t.transpose() * &t;
    let Some(inv) = gram.try_inverse() else {
        return samples.to_vec();
    };
    let yr = DVector::from_fn(r, |i, _| samples[i].re - sbar.re);
    let yi = DVector::from_fn(r, |i, _| samples[i].im - sbar.im);
    let br = &inv * (t.transpose() * yr);
    let bi = &inv * (t.transpose() * yi);
    samples
        .iter()
        .zip(covariates)
        .map(|(s, c)| {
            let shift_re: f64 = (0..k).map(|j| br[j] * c[j]).sum();
            let shift_im: f64 = (0..k).map(|j| bi[j] * c[j]).sum();
            s - C64::new(shift_re, shift_im)
        })
        .collect()
}

struct ReplicaResolvent {
    diagonal: Vec<C64>,
    full: Option<DMatrix<C64>>,
    trace: C64,
    covariates: [f64; 2],
}

fn replica_resolvent(
    config: &RunConfig,
    replica: usize,
    z: SpectralParameter,
    full: bool,
    centre: Option<(f64, f64)>,
) -> Result<ReplicaResolvent> {
    let k = sample_covariance(&sample_matrix(config, replica))?;
    let spec = SymmetricSpectrum::decompose(&k)?;
    let view = spec.at(z);
    let p = config.p() as f64;
    let (e1, e2) = centre.unwrap_or((0.0, 0.0));
    let eig = spec.eigenvalues();
    Ok(ReplicaResolvent {
        diagonal: view.diagonal(),
        full: full.then(|| view.matrix()),
        trace: view.normalized_trace(),
        covariates: [
            eig.iter().sum::<f64>() / p - e1,
            eig.iter().map(|l| l * l).sum::<f64>() / p - e2,
        ],
    })
}

/// Coordinate groups of equal population variance.
fn variance_groups(config: &RunConfig) -> Vec<Vec<usize>> {
    let m = config.distribution().population_covariance();
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for i in 0..config.p() {
        let v = m[(i, i)];
        match groups
            .iter_mut()
            .find(|g| (g.0 - v).abs() <= tolerance::ATOM_MERGE * v.abs().max(1.0))
        {
            Some(g) => g.1.push(i),
            None => groups.push((v, vec![i])),
        }
    }
    groups.into_iter().map(|g| g.1).collect()
}

/// Frobenius gaps between the Monte Carlo mean resolvent and `G(z)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolventGapReport {
    pub z: [f64; 2],
    /// Gap of the symmetry-reduced estimator (or the raw one when the
    /// distribution has no coordinate symmetry).
    pub gap: SweepResult,
    /// Gap of the plain entrywise average of the sampled resolvents.
    pub raw_gap: SweepResult,
    pub symmetry_reduced: bool,
}

impl ResolventGapReport {
    pub fn rows(&self) -> Vec<SweepPoint> {
        self.gap.points.iter().chain(&self.raw_gap.points).cloned().collect()
    }
}

/// `|| E_hat[G_K(z)] - G(z) ||_F` across the sweep, with bound `1/sqrt(n)`.
///
/// For zero-mean distributions with a diagonal linear part the expectation
/// is diagonal and constant on equal-variance coordinates, so the diagonal
/// is averaged over those groups and corrected with trace control
/// variates. The stderr column is half the gap between the two replica
/// halves.
pub fn mean_resolvent_gap(sweep: &SweepSpec, z: SpectralParameter) -> Result<ResolventGapReport> {
    check_validity_region(z, sweep.ns[0])?;
    let mut reduced_points = Vec::new();
    let mut raw_points = Vec::new();
    let mut symmetric = true;
    for &n in &sweep.ns {
        let config = sweep.config(n)?;
        let model = config.covariance_model()?;
        let sol = solve(&model, z)?;
        let g = equiv::deterministic_equivalent(&model, &sol, z)?.matrix();
        let centre = control_covariates(&config);
        let reps: Vec<ReplicaResolvent> = (0..config.replicas())
            .into_par_iter()
            .map(|r| replica_resolvent(&config, r, z, true, centre))
            .collect::<Result<_>>()?;
        let bound = 1.0 / (n as f64).sqrt();

        let half = reps.len() / 2;
        let mean_full = |rs: &[ReplicaResolvent]| {
            let mut acc = DMatrix::from_element(config.p(), config.p(), C64::new(0.0, 0.0));
            for r in rs {
                acc += r.full.as_ref().expect("full resolvent requested");
            }
            acc.map(|v| v / rs.len() as f64)
        };
        let raw = (mean_full(&reps) - &g).norm();
        let raw_err = (mean_full(&reps[..half]) - mean_full(&reps[half..reps.len() - reps.len() % 2])).norm() / 2.0;
        raw_points.push(SweepPoint::new("gap_raw", n, raw, raw_err, bound));

        if !config.distribution().coordinate_symmetric() {
            symmetric = false;
            reduced_points.push(SweepPoint::new("gap", n, raw, raw_err, bound));
            continue;
        }
        let groups = variance_groups(&config);
        let covariates: Vec<[f64; 2]> = reps.iter().map(|r| r.covariates).collect();
        let mut estimate = vec![C64::new(0.0, 0.0); config.p()];
        let mut halves_gap = 0.0;
        for idx in &groups {
            let samples: Vec<C64> = reps
                .iter()
                .map(|r| idx.iter().map(|&i| r.diagonal[i]).sum::<C64>() / idx.len() as f64)
                .collect();
            let adjusted = if centre.is_some() {
                control_variate_adjust(&samples, &covariates)
            } else {
                samples
            };
            let value = mean_c(&adjusted);
            let a = mean_c(&adjusted[..half]);
            let b = mean_c(&adjusted[half..adjusted.len() - adjusted.len() % 2]);
            halves_gap += idx.len() as f64 * (a - b).norm_sqr();
            for &i in idx {
                estimate[i] = value;
            }
        }
        let mut gap2 = 0.0;
        for r in 0..config.p() {
            for c in 0..config.p() {
                let e = if r == c { estimate[r] } else { C64::new(0.0, 0.0) };
                gap2 += (e - g[(r, c)]).norm_sqr();
            }
        }
        reduced_points.push(SweepPoint::new("gap", n, gap2.sqrt(), halves_gap.sqrt() / 2.0, bound));
    }
    Ok(ResolventGapReport {
        z: [z.value().re, z.value().im],
        gap: SweepResult::from_points("gap", reduced_points),
        raw_gap: SweepResult::from_points("gap_raw", raw_points),
        symmetry_reduced: symmetric,
    })
}

/// Replica quantiles `(10%, 50%, 90%)`.
fn quantiles(values: &[f64]) -> [f64; 3] {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    [at(0.1), at(0.5), at(0.9)]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapSummary {
    pub per_replica: Vec<f64>,
    pub quantiles: [f64; 3],
    /// Scaling target with unit constant.
    pub target: f64,
}

impl GapSummary {
    fn new(per_replica: Vec<f64>, target: f64) -> Self {
        Self {
            quantiles: quantiles(&per_replica),
            per_replica,
            target,
        }
    }
}

/// Per-replica Stieltjes, directional and entrywise gaps at one size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorollaryReport {
    pub n: usize,
    pub stieltjes: GapSummary,
    pub directional: GapSummary,
    pub entrywise: GapSummary,
    /// Fraction of replicas with `|g_K - g_nu|` below the directional gap.
    pub below_directional: f64,
    /// Fraction of replicas with `|g_K - g_nu|` below the entrywise gap.
    pub below_entrywise: f64,
}

/// `e_1`, the normalized all-ones vector and two random unit vectors.
pub fn default_directions(p: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = vec![DVector::from_fn(p, |i, _| if i == 0 { 1.0 } else { 0.0 })];
    dirs.push(DVector::from_element(p, 1.0 / (p as f64).sqrt()));
    for _ in 0..2 {
        let v = DVector::<f64>::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let v: DVector<f64> = &v / v.norm();
        dirs.push(v);
    }
    dirs
}

pub fn corollary_bounds(
    config: &RunConfig,
    z: SpectralParameter,
    directions: &[DVector<f64>],
) -> Result<CorollaryReport> {
    check_validity_region(z, config.n())?;
    let p = config.p();
    for u in directions {
        if u.len() != p || (u.norm() - 1.0).abs() > tolerance::UNIT_VECTOR {
            return Err(Error::Precondition("directions must be unit vectors of length p".into()));
        }
    }
    let model = config.covariance_model()?;
    let sol = solve(&model, z)?;
    let g = equiv::deterministic_equivalent(&model, &sol, z)?.matrix();
    let g_nu = equiv::g_nu(&model, &sol, z)?;
    let det_forms: Vec<C64> = directions
        .iter()
        .map(|u| {
            let uc = u.map(|v| C64::new(v, 0.0));
            (uc.transpose() * &g * &uc)[(0, 0)]
        })
        .collect();
    let rows: Vec<(f64, f64, f64)> = (0..config.replicas())
        .into_par_iter()
        .map(|r| {
            let k = sample_covariance(&sample_matrix(config, r))?;
            let spec = SymmetricSpectrum::decompose(&k)?;
            let view = spec.at(z);
            let st = (view.normalized_trace() - g_nu).norm();
            let dir = directions
                .iter()
                .zip(&det_forms)
                .map(|(u, d)| (view.quadratic_form(u) - d).norm())
                .fold(0.0, f64::max);
            let ent = (view.matrix() - &g).iter().map(|e| e.norm()).fold(0.0, f64::max);
            Ok((st, dir, ent))
        })
        .collect::<Result<_>>()?;
    let n = config.n() as f64;
    let log_n = n.ln().sqrt();
    let frac = |f: &dyn Fn(&(f64, f64, f64)) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / rows.len() as f64;
    Ok(CorollaryReport {
        n: config.n(),
        below_directional: frac(&|r| r.0 < r.1),
        below_entrywise: frac(&|r| r.0 < r.2),
        stieltjes: GapSummary::new(rows.iter().map(|r| r.0).collect(), log_n / n),
        directional: GapSummary::new(rows.iter().map(|r| r.1).collect(), log_n / n.sqrt()),
        entrywise: GapSummary::new(rows.iter().map(|r| r.2).collect(), log_n / n.sqrt()),
    })
}

/// `Var[g_K(z)]` across replicas per size, with bound `1/n^2`.
pub fn stieltjes_variance(sweep: &SweepSpec, z: SpectralParameter) -> Result<SweepResult> {
    check_validity_region(z, sweep.ns[0])?;
    let mut points = Vec::new();
    for &n in &sweep.ns {
        let config = sweep.config(n)?;
        let g: Vec<C64> = (0..config.replicas())
            .into_par_iter()
            .map(|r| Ok(replica_resolvent(&config, r, z, false, None)?.trace))
            .collect::<Result<_>>()?;
        let var = variance_c(&g);
        let r = g.len() as f64;
        points.push(SweepPoint::new(
            "var_g",
            n,
            var,
            var * (2.0 / (r - 1.0)).sqrt(),
            1.0 / (n as f64).powi(2),
        ));
    }
    Ok(SweepResult::from_points("var_g", points))
}

/// Variances of the three leave-one-out quadratic forms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadraticFormReport {
    pub p: usize,
    pub n: usize,
    /// `Var[x^T G_- x]`
    pub plain: f64,
    /// `Var[x^T B G_- x]`
    pub left: f64,
    /// `Var[x^T G_- B G_- x]`
    pub sandwich: f64,
    /// `eta^2 (1 + eta^2 |z| / n)`
    pub scale: f64,
    pub pattern_ratio: f64,
    pub pattern_holds: bool,
    pub left_bound_holds: bool,
    pub sandwich_bound_holds: bool,
}

/// A Gaussian matrix with unit Frobenius norm.
pub fn random_unit_matrix(p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::<f64>::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng));
    let norm = b.norm();
    b / norm
}

/// Uses column 0 and its leave-one-out resolvent in every replica; `b`
/// defaults to [`random_unit_matrix`] seeded from the config.
pub fn quadratic_form_variances(
    config: &RunConfig,
    z: SpectralParameter,
    b: Option<&DMatrix<f64>>,
) -> Result<QuadraticFormReport> {
    let p = config.p();
    let owned;
    let b = match b {
        Some(b) => {
            if b.nrows() != p || b.ncols() != p {
                return Err(Error::Size(format!("B must be {p}x{p}")));
            }
            b
        }
        None => {
            owned = random_unit_matrix(p, config.seed() ^ 0xb0b0);
            &owned
        }
    };
    let bt = b.transpose();
    let rows: Vec<[C64; 3]> = (0..config.replicas())
        .into_par_iter()
        .map(|r| {
            let x = sample_matrix(config, r);
            let col = x.column(0)?;
            let k = crate::resolvent::loo_covariance(&x, 0)?;
            let spec = SymmetricSpectrum::decompose(&k)?;
            let view = spec.at(z);
            let w = view.apply(&col);
            let plain = view.quadratic_form(&col);
            let btx = &bt * &col;
            let left: C64 = btx.iter().zip(w.iter()).map(|(a, c)| c * *a).sum();
            let bw_re = b * w.map(|c| c.re);
            let bw_im = b * w.map(|c| c.im);
            let sandwich: C64 = (0..p)
                .map(|i| w[i] * C64::new(bw_re[i], bw_im[i]))
                .sum();
            Ok([plain, left, sandwich])
        })
        .collect::<Result<_>>()?;
    let var = |j: usize| variance_c(&rows.iter().map(|r| r[j]).collect::<Vec<_>>());
    let (plain, left, sandwich) = (var(0), var(1), var(2));
    let eta = z.eta();
    let scale = eta * eta * (1.0 + eta * eta * z.abs() / config.n() as f64);
    let pattern_ratio = if left > 0.0 { plain / (p as f64 * left) } else { f64::NAN };
    Ok(QuadraticFormReport {
        p,
        n: config.n(),
        plain,
        left,
        sandwich,
        scale,
        pattern_ratio,
        pattern_holds: (plain == 0.0 && left == 0.0) || (0.1..=10.0).contains(&pattern_ratio),
        left_bound_holds: left <= 10.0 * scale,
        sandwich_bound_holds: sandwich <= 10.0 * eta * eta * scale,
    })
}

/// Monte Carlo estimate of the intermediate parameter against the fixed point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntermediateReport {
    /// `|b_hat - c|` per size.
    pub gap: SweepResult,
    pub b_hat: Vec<[f64; 2]>,
    pub c: Vec<[f64; 2]>,
    /// Fraction of replicas whose every `a_i` lies in the domain.
    pub omega_fraction: f64,
}

/// `b = E[a_i]` with `a_i = z + (z/n) x_i^T G_{-i} x_i = -1 / Gc_ii`,
/// averaged over columns and replicas, with trace control variates.
pub fn intermediate_parameter_b(sweep: &SweepSpec, z: SpectralParameter) -> Result<IntermediateReport> {
    let omega = OmegaDomain::new(z);
    let mut points = Vec::new();
    let mut b_hat = Vec::new();
    let mut cs = Vec::new();
    let mut inside = 0_usize;
    let mut total = 0_usize;
    for &n in &sweep.ns {
        let config = sweep.config(n)?;
        let model = config.covariance_model()?;
        let c = solve(&model, z)?.c();
        let centre = control_covariates(&config);
        let rows: Vec<(C64, [f64; 2], bool)> = (0..config.replicas())
            .into_par_iter()
            .map(|r| {
                let x = sample_matrix(&config, r);
                let k = sample_covariance(&x)?;
                let spec = SymmetricSpectrum::decompose(&k)?;
                let weights = spec.at(z).weights();
                let proj = spec.eigenvectors().transpose() * x.entries();
                let zv = z.value();
                let mut all_in = true;
                let mut acc = C64::new(0.0, 0.0);
                for i in 0..n {
                    let form: C64 = (0..config.p())
                        .map(|k| weights[k] * proj[(k, i)].powi(2))
                        .sum::<C64>()
                        / n as f64;
                    let gc = (form - 1.0) / zv;
                    let a = -gc.inv();
                    all_in &= omega.contains(a);
                    acc += a;
                }
                let eig = spec.eigenvalues();
                let p = config.p() as f64;
                let (e1, e2) = centre.unwrap_or((0.0, 0.0));
                let cov = [
                    eig.iter().sum::<f64>() / p - e1,
                    eig.iter().map(|l| l * l).sum::<f64>() / p - e2,
                ];
                Ok((acc / n as f64, cov, all_in))
            })
            .collect::<Result<_>>()?;
        inside += rows.iter().filter(|r| r.2).count();
        total += rows.len();
        let samples: Vec<C64> = rows.iter().map(|r| r.0).collect();
        let adjusted = if centre.is_some() {
            control_variate_adjust(&samples, &rows.iter().map(|r| r.1).collect::<Vec<_>>())
        } else {
            samples
        };
        let b = mean_c(&adjusted);
        let se = (variance_c(&adjusted) / adjusted.len() as f64).sqrt();
        points.push(SweepPoint::new("b_gap", n, (b - c).norm(), se, 1.0 / n as f64));
        b_hat.push([b.re, b.im]);
        cs.push([c.re, c.im]);
    }
    Ok(IntermediateReport {
        gap: SweepResult::from_points("b_gap", points),
        b_hat,
        c: cs,
        omega_fraction: inside as f64 / total as f64,
    })
}

/// Kolmogorov distance between sample spectra and the free convolution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KolmogorovReport {
    /// Mean distance per size, with the `n^{-1/70}` reference as bound.
    pub distance: SweepResult,
    pub per_replica: Vec<Vec<f64>>,
    /// `Delta` at the largest size is below `Delta` at the smallest.
    pub decays: bool,
    /// Largest `|Delta(mu_K, nu) - Delta(mu_Kc, nu_check) / gamma|`, for `gamma > 1`.
    pub reduction_residual: Option<f64>,
}

impl KolmogorovReport {
    pub fn mean_at(&self, n: usize) -> Option<f64> {
        self.distance.value_at(n)
    }
}

pub fn kolmogorov_rate(sweep: &SweepSpec) -> Result<KolmogorovReport> {
    let mut points = Vec::new();
    let mut per_replica = Vec::new();
    let mut residual: Option<f64> = None;
    let mut cache: Vec<(usize, f64, FreeConvolutionResult)> = Vec::new();
    for &n in &sweep.ns {
        let config = sweep.config(n)?;
        let model = config.covariance_model()?;
        if model.min_eigenvalue() < 0.1 {
            return Err(Error::Precondition(format!(
                "covariance must be invertible with smallest eigenvalue at least 0.1, got {}",
                model.min_eigenvalue()
            )));
        }
        let gamma = config.gamma();
        let nu = match cache.iter().find(|c| c.0 == config.p() && c.1 == gamma) {
            Some(c) => c.2.clone(),
            None => {
                let r = freeconv::free_multiplicative_mp(&model, &FreeConvOptions::default())?;
                cache.push((config.p(), gamma, r.clone()));
                r
            }
        };
        let nu_cdf = nu.cdf();
        let nu_check = (gamma > 1.0)
            .then(|| freeconv::nu_check_measure(&nu, gamma).map(|r| r.cdf()))
            .transpose()?;
        let rows: Vec<(f64, Option<f64>)> = (0..config.replicas())
            .into_par_iter()
            .map(|r| {
                let x: DataMatrix = sample_matrix(&config, r);
                let mu = AtomicMeasure::from_eigenvalues(&SymmetricSpectrum::eigenvalues_of(
                    &sample_covariance(&x)?,
                )?)?;
                let d = kolmogorov_distance(&CdfFunction::Step(mu), &nu_cdf);
                let reduced = match &nu_check {
                    Some(check) => {
                        let mu_c = AtomicMeasure::from_eigenvalues(&SymmetricSpectrum::eigenvalues_of(
                            &co_covariance(&x)?,
                        )?)?;
                        Some(kolmogorov_distance(&CdfFunction::Step(mu_c), check) / gamma)
                    }
                    None => None,
                };
                Ok((d, reduced))
            })
            .collect::<Result<_>>()?;
        for (d, reduced) in &rows {
            if let Some(rd) = reduced {
                let res = (d - rd).abs();
                residual = Some(residual.map_or(res, |m: f64| m.max(res)));
            }
        }
        let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        points.push(SweepPoint::new(
            "kolmogorov",
            n,
            mean,
            sd / m.sqrt(),
            (n as f64).powf(-1.0 / 70.0),
        ));
        per_replica.push(values);
    }
    let decays = points.len() >= 2 && points.last().unwrap().value < points[0].value;
    Ok(KolmogorovReport {
        distance: SweepResult::from_points("kolmogorov", points),
        per_replica,
        decays,
        reduction_residual: residual,
    })
}

/// Ratio of mean distances at matched sizes.
pub fn universality_ratios(reference: &KolmogorovReport, other: &KolmogorovReport) -> Vec<(usize, f64)> {
    reference
        .distance
        .points
        .iter()
        .filter_map(|p| other.mean_at(p.n).map(|o| (p.n, o / p.value)))
        .collect()
}

/// Named pass/fail outcome of a preset check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyOutcome {
    pub rows: Vec<SweepPoint>,
    pub checks: Vec<Check>,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Gap slope, variance slope and the transform-versus-entry hierarchy for
/// Gaussian white data at `gamma = 1/2`, `z = -1`.
pub fn verify_gaussian_mp(n_max: usize, seed: u64) -> Result<VerifyOutcome> {
    let sweep = SweepSpec::gaussian_mp(n_max, seed, 32)?;
    if sweep.ns.len() < MIN_SLOPE_POINTS {
        return Err(Error::Config(format!(
            "n_max = {n_max} leaves fewer than {MIN_SLOPE_POINTS} sizes"
        )));
    }
    let z = SpectralParameter::real(-1.0)?;
    let gap = mean_resolvent_gap(&sweep, z)?;
    let var = stieltjes_variance(&sweep, z)?;
    let top = *sweep.ns.last().unwrap();
    let config = sweep.config(top)?;
    let cor = corollary_bounds(&config, z, &default_directions(config.p(), seed))?;

    let slope_check = |name: &str, r: &SweepResult, lo: f64, hi: f64| {
        let fit = r.fit.as_ref();
        Check {
            name: name.to_string(),
            passed: fit.is_some_and(|f| f.within(lo, hi)),
            detail: fit.map_or("no fit".into(), |f| {
                format!("slope {:.3} +- {:.3}, accepted [{lo}, {hi}]", f.slope, f.half_width)
            }),
        }
    };
    let mut rows = gap.rows();
    rows.extend(var.points.iter().cloned());
    let checks = vec![
        slope_check("gap_slope", &gap.gap, -0.8, -0.3),
        slope_check("var_g_slope", &var, -2.6, -1.4),
        Check {
            name: "hierarchy".into(),
            passed: cor.below_entrywise >= 0.9,
            detail: format!("{:.3} of replicas at n = {top}", cor.below_entrywise),
        },
    ];
    Ok(VerifyOutcome { rows, checks })
}
