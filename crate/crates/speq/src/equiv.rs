//! The self-consistent functional, its fixed point and the deterministic
//! equivalent of the sample covariance resolvent.
//!
//! For a population covariance with spectrum `lambda_1, ..., lambda_p` and
//! aspect ratio `gamma = p/n` the functional is
//!
//! ```text
//! F(l) = z + z * gamma * (1/p) * sum_i lambda_i / ((z/l) lambda_i - z)
//! ```
//!
//! and the deterministic equivalent is `G(z) = ((z/c) Sigma - z I)^{-1}` at
//! its unique fixed point `c`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::AtomicMeasure;
use crate::resolvent::{Branch, SpectralParameter, SymmetricSpectrum, C64};
use crate::tolerance;

/// Population description consumed through the spectrum of `Sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceModel {
    sigma_eigenvalues: Vec<f64>,
    gamma: f64,
    mean_norm: f64,
    basis: Option<DMatrix<f64>>,
    /// Distinct eigenvalues with their relative multiplicities.
    atoms: Vec<(f64, f64)>,
}

impl CovarianceModel {
    pub fn new(mut sigma_eigenvalues: Vec<f64>, gamma: f64, mean_norm: f64) -> Result<Self> {
        if sigma_eigenvalues.is_empty() {
            return Err(Error::Size("covariance spectrum is empty".into()));
        }
        if sigma_eigenvalues.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Precondition(
                "covariance eigenvalues must be finite and nonnegative".into(),
            ));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::NonPositive("gamma"));
        }
        if !(mean_norm >= 0.0) || !mean_norm.is_finite() {
            return Err(Error::Precondition("mean norm must be nonnegative".into()));
        }
        sigma_eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let atoms = compress(&sigma_eigenvalues);
        Ok(Self {
            sigma_eigenvalues,
            gamma,
            mean_norm,
            basis: None,
            atoms,
        })
    }

    pub fn identity(p: usize, gamma: f64) -> Result<Self> {
        Self::new(vec![1.0; p], gamma, 0.0)
    }

    pub fn zero(p: usize, gamma: f64) -> Result<Self> {
        Self::new(vec![0.0; p], gamma, 0.0)
    }

    /// Model from a full covariance matrix; its eigenbasis is kept for
    /// materializing the deterministic equivalent.
    pub fn from_matrix(sigma: &DMatrix<f64>, gamma: f64, mean_norm: f64) -> Result<Self> {
        let spec = SymmetricSpectrum::decompose(sigma)?;
        let p = spec.dim();
        let mut model = Self::new(spec.eigenvalues().to_vec(), gamma, mean_norm)?;
        let q = spec.eigenvectors();
        model.basis = Some(DMatrix::from_fn(p, p, |r, c| q[(r, p - 1 - c)]));
        Ok(model)
    }

    pub fn p(&self) -> usize {
        self.sigma_eigenvalues.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mean_norm(&self) -> f64 {
        self.mean_norm
    }

    pub fn sigma_eigenvalues(&self) -> &[f64] {
        &self.sigma_eigenvalues
    }

    /// Eigenvectors matching [`Self::sigma_eigenvalues`]; `None` means the
    /// standard basis.
    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }

    pub fn sigma_spectral_norm(&self) -> f64 {
        self.sigma_eigenvalues[0]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        *self.sigma_eigenvalues.last().unwrap()
    }

    pub fn is_invertible(&self) -> bool {
        self.min_eigenvalue() > 0.0
    }

    pub fn distinct_eigenvalues(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// Spectral distribution of `Sigma`.
    pub fn spectrum_measure(&self) -> Result<AtomicMeasure> {
        AtomicMeasure::from_atoms(&self.atoms)
    }

    /// Mass of `nu` at zero: `max(1 - 1/gamma, mu_Sigma({0}))`.
    pub fn zero_atom(&self) -> f64 {
        let sigma_zero: f64 = self
            .atoms
            .iter()
            .filter(|a| a.0 == 0.0)
            .map(|a| a.1)
            .sum();
        (1.0 - 1.0 / self.gamma).max(sigma_zero).max(0.0)
    }

    /// Same spectrum at a different aspect ratio.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut m = Self::new(self.sigma_eigenvalues.clone(), gamma, self.mean_norm)?;
        m.basis = self.basis.clone();
        Ok(m)
    }

    fn key(&self) -> ModelKey {
        ModelKey {
            p: self.p(),
            gamma: self.gamma.to_bits(),
            trace: self.sigma_eigenvalues.iter().sum::<f64>().to_bits(),
        }
    }
}

fn compress(desc: &[f64]) -> Vec<(f64, f64)> {
    let w = 1.0 / desc.len() as f64;
    let mut atoms: Vec<(f64, f64)> = Vec::new();
    for &v in desc {
        match atoms.last_mut() {
            Some(last) if last.0 == v => last.1 += w,
            _ => atoms.push((v, w)),
        }
    }
    atoms
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ModelKey {
    p: usize,
    gamma: u64,
    trace: u64,
}

/// The region on which the functional is a self-map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OmegaDomain {
    z: SpectralParameter,
}

impl OmegaDomain {
    pub fn new(z: SpectralParameter) -> Self {
        Self { z }
    }

    pub fn z(&self) -> SpectralParameter {
        self.z
    }

    /// `(-inf, z]` on the real branch; `Im l >= Im z` and `Im(l / z) >= 0`
    /// in the upper half-plane. A relative slack absorbs roundoff.
    pub fn contains(&self, l: C64) -> bool {
        if !l.re.is_finite() || !l.im.is_finite() {
            return false;
        }
        let z = self.z.value();
        let slack = tolerance::OMEGA_SLACK * z.norm().max(l.norm()).max(1.0);
        match self.z.branch() {
            Branch::RealNegative => l.im == 0.0 && l.re <= z.re + slack,
            Branch::UpperHalf => {
                let ratio = l / z;
                l.im >= z.im - slack && ratio.im >= -tolerance::OMEGA_SLACK * ratio.norm().max(1.0)
            }
        }
    }
}

fn eval_functional(model: &CovarianceModel, l: C64, z: C64) -> C64 {
    let zl = z / l;
    let sum: C64 = model
        .atoms
        .iter()
        .filter(|a| a.0 != 0.0)
        .map(|&(lambda, w)| (zl * lambda - z).inv() * (lambda * w))
        .sum();
    z + z * model.gamma * sum
}

/// `F(l) = z + (z/n) Tr(G^l Sigma)` with `G^l = ((z/l) Sigma - z I)^{-1}`.
pub fn functional_f(model: &CovarianceModel, l: C64, z: SpectralParameter) -> Result<C64> {
    let omega = OmegaDomain::new(z);
    if !omega.contains(l) {
        return Err(Error::OutsideDomain { l, z: z.value() });
    }
    let f = eval_functional(model, l, z.value());
    if !omega.contains(f) {
        return Err(Error::Consistency(format!(
            "F({l}) = {f} left the domain of z = {}",
            z.value()
        )));
    }
    Ok(f)
}

/// The contraction constant of the functional on the branch of `z`.
///
/// The textbook constants assume `||Sigma|| <= 1`; the functional is
/// invariant under `(Sigma, z, l) -> (Sigma/s, z/s, l/s)`, so the constant
/// is evaluated at `s = ||Sigma||`.
pub fn contraction_constant(model: &CovarianceModel, z: SpectralParameter) -> f64 {
    let s = model.sigma_spectral_norm();
    if s == 0.0 {
        return 0.0;
    }
    let g = model.gamma;
    let az = z.abs();
    match z.branch() {
        Branch::RealNegative => {
            let r = az / s;
            g / ((1.0 + r) * (g + r))
        }
        Branch::UpperHalf => {
            let t = g * s * az * z.eta() * z.eta();
            t / (1.0 + t)
        }
    }
}

/// `|w1 - w2| / sqrt(Im w1 Im w2)` on the open upper half-plane.
pub fn semi_metric(w1: C64, w2: C64) -> Result<f64> {
    if !(w1.im > 0.0) || !(w2.im > 0.0) {
        return Err(Error::Precondition(format!(
            "semi-metric needs points in the open upper half-plane, got {w1} and {w2}"
        )));
    }
    Ok((w1 - w2).norm() / (w1.im * w2.im).sqrt())
}

/// `step / (1 - kF (1 + delta))`, a bound on the distance from an
/// approximate fixed point to the true one.
pub fn stability_gap_bound(kf: f64, delta: f64, step_norm: f64) -> Result<f64> {
    let k = kf * (1.0 + delta);
    if !(k < 1.0) {
        return Err(Error::Inapplicable(k));
    }
    Ok(step_norm / (1.0 - k))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: tolerance::FIXED_POINT_TOL,
            max_iter: tolerance::FIXED_POINT_MAX_ITER,
        }
    }
}

/// Consecutive growing steps tolerated before switching to damped updates.
const DIVERGENCE_PATIENCE: usize = 10;
const DAMPING: f64 = 0.5;
/// Steps below this relative size are dominated by roundoff and are not
/// used for the observed contraction ratio.
const RATIO_FLOOR: f64 = 1e-9;
const ROUNDOFF_FLOOR: f64 = 16.0 * f64::EPSILON;

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointSolution {
    z: SpectralParameter,
    c: C64,
    residual: f64,
    iterations: usize,
    contraction_estimate: f64,
    kf_theoretical: f64,
    damped: bool,
    key: ModelKey,
}

impl FixedPointSolution {
    pub fn z(&self) -> SpectralParameter {
        self.z
    }

    pub fn c(&self) -> C64 {
        self.c
    }

    /// `-1/c`, the Stieltjes transform of the companion measure.
    pub fn g_check(&self) -> C64 {
        -self.c.inv()
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn contraction_estimate(&self) -> f64 {
        self.contraction_estimate
    }

    pub fn kf_theoretical(&self) -> f64 {
        self.kf_theoretical
    }

    pub fn damped(&self) -> bool {
        self.damped
    }

    fn check(&self, model: &CovarianceModel, z: SpectralParameter) -> Result<()> {
        if self.key != model.key() || self.z.value() != z.value() {
            return Err(Error::MismatchedSolution);
        }
        Ok(())
    }
}

fn step_size(branch: Branch, from: C64, to: C64) -> f64 {
    match branch {
        Branch::RealNegative => (to - from).norm(),
        Branch::UpperHalf => semi_metric(from, to).unwrap_or(f64::INFINITY),
    }
}

/// Picard iteration `l <- F(l)` from `l = z`.
pub fn solve_fixed_point(
    model: &CovarianceModel,
    z: SpectralParameter,
    opts: SolverOptions,
) -> Result<FixedPointSolution> {
    solve_fixed_point_from(model, z, z.value(), opts)
}

/// Picard iteration from an arbitrary starting point of the domain.
pub fn solve_fixed_point_from(
    model: &CovarianceModel,
    z: SpectralParameter,
    start: C64,
    opts: SolverOptions,
) -> Result<FixedPointSolution> {
    let omega = OmegaDomain::new(z);
    if !omega.contains(start) {
        return Err(Error::OutsideDomain {
            l: start,
            z: z.value(),
        });
    }
    let zv = z.value();
    let branch = z.branch();
    let mut l = start;
    let mut prev_step = f64::INFINITY;
    let mut growing = 0;
    let mut damped = false;
    let mut ratio = 0.0;
    let mut residual = f64::INFINITY;

    for it in 0..=opts.max_iter {
        let f = eval_functional(model, l, zv);
        if !omega.contains(f) {
            return Err(Error::Consistency(format!(
                "iterate F({l}) = {f} left the domain of z = {zv}"
            )));
        }
        residual = (f - l).norm();
        // a posteriori bound |l - c| <= residual / (1 - k) under contraction k
        let amplification = match branch {
            Branch::RealNegative if ratio > 0.0 && ratio < 1.0 => 1.0 / (1.0 - ratio),
            _ => 1.0,
        };
        let scale = l.norm().max(1.0);
        if residual * amplification <= opts.tol * scale || residual <= ROUNDOFF_FLOOR * scale {
            return Ok(FixedPointSolution {
                z,
                c: l,
                residual,
                iterations: it,
                contraction_estimate: ratio,
                kf_theoretical: contraction_constant(model, z),
                damped,
                key: model.key(),
            });
        }
        let next = if damped {
            l * (1.0 - DAMPING) + f * DAMPING
        } else {
            f
        };
        let step = step_size(branch, l, next);
        let floor = RATIO_FLOOR * l.norm().max(1.0);
        if prev_step.is_finite() && prev_step > floor && residual > floor {
            ratio = step / prev_step;
        }
        if step > prev_step {
            growing += 1;
            if growing >= DIVERGENCE_PATIENCE && !damped {
                log::warn!("fixed point at z = {zv}: steps grew {growing} times, damping");
                damped = true;
            }
        } else {
            growing = 0;
        }
        prev_step = step;
        l = next;
    }
    Err(Error::NonConvergence {
        last: l,
        residual,
        iterations: opts.max_iter,
    })
}

/// `G(z) = ((z/c) Sigma - z I)^{-1}`, diagonal in the eigenbasis of `Sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicEquivalent {
    diagonal: Vec<C64>,
    basis: Option<DMatrix<f64>>,
}

impl DeterministicEquivalent {
    /// Entries matching the descending eigenvalues of `Sigma`.
    pub fn diagonal(&self) -> &[C64] {
        &self.diagonal
    }

    pub fn spectral_norm(&self) -> f64 {
        self.diagonal.iter().fold(0.0, |m, d| m.max(d.norm()))
    }

    pub fn matrix(&self) -> DMatrix<C64> {
        let d = DVector::from_column_slice(&self.diagonal);
        match &self.basis {
            None => DMatrix::from_diagonal(&d),
            Some(q) => {
                let p = q.nrows();
                DMatrix::from_fn(p, p, |r, c| {
                    (0..p).map(|k| d[k] * (q[(r, k)] * q[(c, k)])).sum()
                })
            }
        }
    }

    /// Diagonal of the materialized matrix in the standard basis.
    pub fn standard_diagonal(&self) -> Vec<C64> {
        match &self.basis {
            None => self.diagonal.clone(),
            Some(q) => (0..q.nrows())
                .map(|r| {
                    (0..q.ncols())
                        .map(|k| self.diagonal[k] * (q[(r, k)] * q[(r, k)]))
                        .sum()
                })
                .collect(),
        }
    }
}

pub fn deterministic_equivalent(
    model: &CovarianceModel,
    solution: &FixedPointSolution,
    z: SpectralParameter,
) -> Result<DeterministicEquivalent> {
    solution.check(model, z)?;
    let zv = z.value();
    let zc = zv / solution.c;
    let diagonal = model
        .sigma_eigenvalues
        .iter()
        .map(|&lambda| (zc * lambda - zv).inv())
        .collect();
    Ok(DeterministicEquivalent {
        diagonal,
        basis: model.basis.clone(),
    })
}

/// `(1/p) Tr G(z)`, the Stieltjes transform of `MP(gamma) ⊠ mu_Sigma`.
pub fn g_nu(model: &CovarianceModel, solution: &FixedPointSolution, z: SpectralParameter) -> Result<C64> {
    solution.check(model, z)?;
    let zv = z.value();
    let zc = zv / solution.c;
    Ok(model
        .atoms
        .iter()
        .map(|&(lambda, w)| (zc * lambda - zv).inv() * w)
        .sum())
}

/// `(gamma - 1)/z + gamma g_nu`, which must agree with `-1/c`.
pub fn g_nu_check(
    model: &CovarianceModel,
    solution: &FixedPointSolution,
    z: SpectralParameter,
) -> Result<C64> {
    let g = g_nu(model, solution, z)?;
    Ok((model.gamma - 1.0) / z.value() + g * model.gamma)
}

/// One solve as emitted by the command line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveRecord {
    pub z_re: f64,
    pub z_im: f64,
    pub branch: &'static str,
    pub gamma: f64,
    pub c_re: f64,
    pub c_im: f64,
    pub g_nu_re: f64,
    pub g_nu_im: f64,
    pub residual: f64,
    pub iterations: usize,
    #[serde(rename = "kF")]
    pub kf: f64,
}

impl SolveRecord {
    pub fn new(model: &CovarianceModel, solution: &FixedPointSolution) -> Result<Self> {
        let z = solution.z();
        let g = g_nu(model, solution, z)?;
        Ok(Self {
            z_re: z.value().re,
            z_im: z.value().im,
            branch: z.branch().as_str(),
            gamma: model.gamma(),
            c_re: solution.c().re,
            c_im: solution.c().im,
            g_nu_re: g.re,
            g_nu_im: g.im,
            residual: solution.residual(),
            iterations: solution.iterations(),
            kf: solution.kf_theoretical(),
        })
    }
}
