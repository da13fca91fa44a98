//! Recovery of `nu = MP(gamma) ⊠ mu_Sigma` from its Stieltjes transform.
//!
//! The density is `Im g_nu(x + i eps) / pi` extrapolated to `eps -> 0`.
//! The analytic zero atom is removed from the transform before
//! extrapolating, since its Lorentzian would otherwise swamp the density
//! close to the origin.

use rayon::prelude::*;

use crate::equiv::{self, CovarianceModel, OmegaDomain, SolverOptions};
use crate::error::{Error, Result};
use crate::measure::{CdfFunction, SampledDensity};
use crate::resolvent::{SpectralParameter, C64};

#[derive(Clone, Debug, PartialEq)]
pub struct FreeConvOptions {
    pub grid_size: usize,
    /// Strictly descending heights above the real axis.
    pub epsilon_schedule: Vec<f64>,
    pub solver: SolverOptions,
}

impl Default for FreeConvOptions {
    fn default() -> Self {
        Self {
            grid_size: 512,
            epsilon_schedule: vec![1e-2, 5e-3, 2.5e-3],
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreeConvolutionResult {
    density: SampledDensity,
    support: (f64, f64),
    max_clamp: f64,
    extrapolation_error: f64,
}

impl FreeConvolutionResult {
    pub fn density(&self) -> &SampledDensity {
        &self.density
    }

    pub fn cdf(&self) -> CdfFunction {
        CdfFunction::Sampled(self.density.clone())
    }

    pub fn atom_at_zero(&self) -> f64 {
        self.density.atom_at_zero()
    }

    /// Grid bracket of where the density is visibly positive.
    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    /// Largest negative value removed from the extrapolated density.
    pub fn max_clamp(&self) -> f64 {
        self.max_clamp
    }

    /// Largest change of the extrapolated density when the two largest
    /// heights are used instead of the two smallest.
    pub fn extrapolation_error(&self) -> f64 {
        self.extrapolation_error
    }

    pub fn stieltjes(&self, z: SpectralParameter) -> C64 {
        self.density.stieltjes(z)
    }
}

/// Upper end of the support, `(1 + sqrt(gamma))^2 ||Sigma||`.
pub fn support_upper_bound(model: &CovarianceModel) -> f64 {
    (1.0 + model.gamma().sqrt()).powi(2) * model.sigma_spectral_norm()
}

/// Bound on `|F(s) - F(t)| / |s - t|^{1/2}` implied by
/// `f(t) <= (lambda_min gamma t)^{-1/2} / pi`; `None` for singular `Sigma`.
pub fn holder_constant(model: &CovarianceModel) -> Option<f64> {
    let lmin = model.min_eigenvalue();
    (lmin > 0.0).then(|| 2.0 / (std::f64::consts::PI * (lmin * model.gamma()).sqrt()))
}

fn build_grid(model: &CovarianceModel, size: usize) -> Vec<f64> {
    let upper = 1.05 * support_upper_bound(model);
    let h = upper / (size - 1) as f64;
    let mut grid: Vec<f64> = (0..size).map(|i| i as f64 * h).collect();
    let gamma = model.gamma();
    let extra = (size / 8).max(16);
    let mut refine = |edge: f64| {
        let lo = (edge - 4.0 * h).max(0.0);
        let hi = (edge + 4.0 * h).min(upper);
        grid.extend((0..=extra).map(|i| lo + (hi - lo) * i as f64 / extra as f64));
    };
    if gamma != 1.0 && model.min_eigenvalue() > 0.0 {
        refine((1.0 - gamma.sqrt()).powi(2) * model.min_eigenvalue());
    }
    refine(support_upper_bound(model));
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * upper);
    grid
}

fn density_at(
    model: &CovarianceModel,
    x: f64,
    eps: &[f64],
    zero_atom: f64,
    opts: SolverOptions,
) -> Result<(f64, f64)> {
    let mut values = Vec::with_capacity(eps.len());
    let mut warm: Option<C64> = None;
    for &e in eps {
        let z = SpectralParameter::upper(x, e)?;
        let start = warm
            .filter(|&l| OmegaDomain::new(z).contains(l))
            .unwrap_or(z.value());
        let sol = equiv::solve_fixed_point_from(model, z, start, opts)?;
        warm = Some(sol.c());
        let g = equiv::g_nu(model, &sol, z)? + zero_atom / z.value();
        values.push(g.im / std::f64::consts::PI);
    }
    let m = values.len();
    let extrapolate = |i: usize, j: usize| (eps[i] * values[j] - eps[j] * values[i]) / (eps[i] - eps[j]);
    Ok(match m {
        1 => (values[0], 0.0),
        2 => (extrapolate(0, 1), 0.0),
        _ => {
            let fine = extrapolate(m - 2, m - 1);
            let coarse = extrapolate(m - 3, m - 2);
            (fine, (fine - coarse).abs())
        }
    })
}

/// Density, CDF and zero atom of `MP(gamma) ⊠ mu_Sigma`.
pub fn free_multiplicative_mp(
    model: &CovarianceModel,
    opts: &FreeConvOptions,
) -> Result<FreeConvolutionResult> {
    if opts.grid_size < 64 {
        return Err(Error::Precondition(format!(
            "grid_size = {} is below 64",
            opts.grid_size
        )));
    }
    let eps = &opts.epsilon_schedule;
    if eps.is_empty()
        || eps.iter().any(|e| !(*e > 0.0) || !e.is_finite())
        || eps.windows(2).any(|w| !(w[1] < w[0]))
    {
        return Err(Error::Precondition(
            "epsilon schedule must be positive and strictly descending".into(),
        ));
    }
    if model.sigma_spectral_norm() == 0.0 {
        let grid = (0..opts.grid_size)
            .map(|i| i as f64 / (opts.grid_size - 1) as f64)
            .collect();
        let density = SampledDensity::new(grid, vec![0.0; opts.grid_size], 1.0)?;
        return Ok(FreeConvolutionResult {
            density,
            support: (0.0, 0.0),
            max_clamp: 0.0,
            extrapolation_error: 0.0,
        });
    }

    let grid = build_grid(model, opts.grid_size);
    let zero_atom = model.zero_atom();
    let raw: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&x| {
            density_at(model, x, eps, zero_atom, opts.solver).map_err(|e| Error::GridPoint {
                x,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let mut max_clamp = 0.0_f64;
    let mut extrapolation_error = 0.0_f64;
    let density: Vec<f64> = raw
        .iter()
        .map(|&(f, err)| {
            extrapolation_error = extrapolation_error.max(err);
            if f < 0.0 {
                max_clamp = max_clamp.max(-f);
                0.0
            } else {
                f
            }
        })
        .collect();

    let continuous: f64 = grid
        .windows(2)
        .zip(density.windows(2))
        .map(|(x, f)| 0.5 * (f[0] + f[1]) * (x[1] - x[0]))
        .sum();
    let atom = (1.0 - continuous).clamp(zero_atom, 1.0);

    let fmax = density.iter().fold(0.0_f64, |m, &f| m.max(f));
    let visible = |f: f64| f > 1e-3 * fmax;
    let lo = grid
        .iter()
        .zip(&density)
        .find(|(_, &f)| visible(f))
        .map_or(0.0, |(x, _)| *x);
    let hi = grid
        .iter()
        .zip(&density)
        .rev()
        .find(|(_, &f)| visible(f))
        .map_or(0.0, |(x, _)| *x)
        .min(support_upper_bound(model));

    Ok(FreeConvolutionResult {
        density: SampledDensity::new(grid, density, atom)?,
        support: (lo.min(hi), hi),
        max_clamp,
        extrapolation_error,
    })
}

/// `(1 - gamma) delta_0 + gamma nu`, the law of the spectrum of `X^T X / n`.
pub fn nu_check_measure(result: &FreeConvolutionResult, gamma: f64) -> Result<FreeConvolutionResult> {
    if !(gamma > 0.0) {
        return Err(Error::NonPositive("gamma"));
    }
    let density = result.density.mix_with_zero(gamma)?;
    let lo = if density.atom_at_zero() > 0.0 {
        0.0
    } else {
        result.support.0
    };
    Ok(FreeConvolutionResult {
        density,
        support: (lo, result.support.1),
        max_clamp: result.max_clamp * gamma,
        extrapolation_error: result.extrapolation_error * gamma,
    })
}
