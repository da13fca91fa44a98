//! Sample covariance, resolvents and the exact identities that tie them together.
//!
//! Every resolvent is computed from a symmetric eigendecomposition, so a
//! single [`SymmetricSpectrum`] can be reused for many spectral parameters.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tolerance;

pub type C64 = Complex<f64>;

/// Which half of the admissible region a spectral parameter lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Branch {
    RealNegative,
    UpperHalf,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::RealNegative => "real-negative",
            Branch::UpperHalf => "upper-half",
        }
    }
}

/// A point `z` away from the nonnegative real axis, together with the
/// distance scale `eta` used by every resolvent bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralParameter {
    value: C64,
    branch: Branch,
    eta: f64,
}

impl SpectralParameter {
    pub fn new(value: C64) -> Result<Self> {
        let invalid = |reason| Error::InvalidSpectralParameter {
            re: value.re,
            im: value.im,
            reason,
        };
        if !value.re.is_finite() || !value.im.is_finite() {
            return Err(invalid("not finite"));
        }
        let (branch, eta) = if value.im > 0.0 {
            (Branch::UpperHalf, 1.0 / value.im)
        } else if value.im == 0.0 && value.re < 0.0 {
            (Branch::RealNegative, 1.0 / value.re.abs())
        } else {
            return Err(invalid("must be real negative or in the open upper half-plane"));
        };
        if !eta.is_finite() || eta * value.norm() < 1.0 - 1e-15 {
            return Err(invalid("distance scale out of range"));
        }
        Ok(Self { value, branch, eta })
    }

    pub fn real(x: f64) -> Result<Self> {
        Self::new(C64::new(x, 0.0))
    }

    pub fn upper(re: f64, im: f64) -> Result<Self> {
        Self::new(C64::new(re, im))
    }

    pub fn value(&self) -> C64 {
        self.value
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn abs(&self) -> f64 {
        self.value.norm()
    }
}

/// A real `p x n` data matrix with finite entries, columns are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix {
    entries: DMatrix<f64>,
}

impl DataMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::Size(format!(
                "data matrix must be non-empty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        for j in 0..entries.ncols() {
            for i in 0..entries.nrows() {
                if !entries[(i, j)].is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_row_slice(p: usize, n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != p * n {
            return Err(Error::Size(format!(
                "expected {} entries for {p}x{n}, got {}",
                p * n,
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(p, n, data))
    }

    pub fn p(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n(&self) -> usize {
        self.entries.ncols()
    }

    pub fn gamma(&self) -> f64 {
        self.p() as f64 / self.n() as f64
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn column(&self, index: usize) -> Result<DVector<f64>> {
        if index >= self.n() {
            return Err(Error::IndexOutOfRange { index, n: self.n() });
        }
        Ok(self.entries.column(index).into_owned())
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.entries
    }
}

/// `K = X X^T / n`, symmetrized.
pub fn sample_covariance(x: &DataMatrix) -> Result<DMatrix<f64>> {
    let p = x.p();
    p.checked_mul(p)
        .and_then(|pp| pp.checked_mul(std::mem::size_of::<f64>()))
        .filter(|&bytes| bytes <= isize::MAX as usize)
        .ok_or_else(|| Error::Size(format!("p = {p} overflows a p x p allocation")))?;
    let k = x.entries() * x.entries().transpose() / x.n() as f64;
    Ok(symmetrize(k))
}

/// `K_check = X^T X / n`, symmetrized.
pub fn co_covariance(x: &DataMatrix) -> Result<DMatrix<f64>> {
    let n = x.n();
    n.checked_mul(n)
        .and_then(|nn| nn.checked_mul(std::mem::size_of::<f64>()))
        .filter(|&bytes| bytes <= isize::MAX as usize)
        .ok_or_else(|| Error::Size(format!("n = {n} overflows an n x n allocation")))?;
    let k = x.entries().transpose() * x.entries() / n as f64;
    Ok(symmetrize(k))
}

fn symmetrize(mut k: DMatrix<f64>) -> DMatrix<f64> {
    let p = k.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let avg = 0.5 * (k[(i, j)] + k[(j, i)]);
            k[(i, j)] = avg;
            k[(j, i)] = avg;
        }
    }
    k
}

fn check_square_symmetric(k: &DMatrix<f64>) -> Result<()> {
    if k.nrows() != k.ncols() || k.nrows() == 0 {
        return Err(Error::Size(format!(
            "expected a non-empty square matrix, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    let scale = k.amax().max(1.0);
    for i in 0..k.nrows() {
        for j in (i + 1)..k.ncols() {
            if (k[(i, j)] - k[(j, i)]).abs() > tolerance::SYMMETRY * scale {
                return Err(Error::Precondition(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

fn clean_eigenvalues(values: &mut [f64]) -> Result<()> {
    let scale = values.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for v in values.iter_mut() {
        if !v.is_finite() {
            return Err(Error::Eigen("non-finite eigenvalue".into()));
        }
        if *v < -tolerance::PSD_CLAMP * scale {
            return Err(Error::NotPsd(*v));
        }
        if v.abs() <= tolerance::PSD_CLAMP * scale {
            *v = 0.0;
        }
    }
    Ok(())
}

fn max_sweeps(p: usize) -> usize {
    1000 * p.max(10)
}

/// Eigendecomposition `K = Q diag(lambda) Q^T` of a symmetric PSD matrix,
/// eigenvalues ascending and snapped to zero below the clamp threshold.
#[derive(Clone, Debug)]
pub struct SymmetricSpectrum {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SymmetricSpectrum {
    pub fn decompose(k: &DMatrix<f64>) -> Result<Self> {
        check_square_symmetric(k)?;
        let eig = SymmetricEigen::try_new(k.clone(), f64::EPSILON, max_sweeps(k.nrows()))
            .ok_or_else(|| Error::Eigen("symmetric QR iteration did not converge".into()))?;
        let p = k.nrows();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let mut eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let eigenvectors = DMatrix::from_fn(p, p, |r, c| eig.eigenvectors[(r, order[c])]);

        let recon = &eigenvectors
            * DMatrix::from_diagonal(&DVector::from_column_slice(&eigenvalues))
            * eigenvectors.transpose();
        let residual = (recon - k).norm();
        if residual > tolerance::EIGEN_RECONSTRUCTION * k.norm().max(f64::MIN_POSITIVE) {
            return Err(Error::Eigen(format!(
                "reconstruction residual {residual:e} exceeds tolerance"
            )));
        }
        clean_eigenvalues(&mut eigenvalues)?;
        Ok(Self {
            eigenvalues,
            eigenvectors,
        })
    }

    /// Eigenvalues only, ascending, cleaned exactly as in [`Self::decompose`].
    pub fn eigenvalues_of(k: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_square_symmetric(k)?;
        let eig = SymmetricEigen::try_new(k.clone(), f64::EPSILON, max_sweeps(k.nrows()))
            .ok_or_else(|| Error::Eigen("symmetric QR iteration did not converge".into()))?;
        let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        values.sort_by(f64::total_cmp);
        clean_eigenvalues(&mut values)?;
        Ok(values)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    pub fn at(&self, z: SpectralParameter) -> ResolventView<'_> {
        ResolventView { spectrum: self, z }
    }
}

/// The resolvent `(K - zI)^{-1}` of a decomposed matrix at one spectral parameter.
#[derive(Clone, Copy, Debug)]
pub struct ResolventView<'a> {
    spectrum: &'a SymmetricSpectrum,
    z: SpectralParameter,
}

impl<'a> ResolventView<'a> {
    pub fn z(&self) -> SpectralParameter {
        self.z
    }

    /// Inverted eigenvalues `1 / (lambda_k - z)`.
    pub fn weights(&self) -> Vec<C64> {
        let z = self.z.value();
        self.spectrum
            .eigenvalues
            .iter()
            .map(|&l| (C64::new(l, 0.0) - z).inv())
            .collect()
    }

    pub fn matrix(&self) -> DMatrix<C64> {
        let q = &self.spectrum.eigenvectors;
        let w = self.weights();
        let scaled_re = DMatrix::from_fn(q.nrows(), q.ncols(), |r, c| q[(r, c)] * w[c].re);
        let scaled_im = DMatrix::from_fn(q.nrows(), q.ncols(), |r, c| q[(r, c)] * w[c].im);
        let re = &scaled_re * q.transpose();
        let im = &scaled_im * q.transpose();
        DMatrix::from_fn(q.nrows(), q.nrows(), |r, c| C64::new(re[(r, c)], im[(r, c)]))
    }

    pub fn diagonal(&self) -> Vec<C64> {
        let q = &self.spectrum.eigenvectors;
        let w = self.weights();
        (0..q.nrows())
            .map(|i| {
                (0..q.ncols())
                    .map(|k| w[k] * (q[(i, k)] * q[(i, k)]))
                    .sum()
            })
            .collect()
    }

    /// `(1/p) Tr(G)`, the Stieltjes transform of the spectral distribution.
    pub fn normalized_trace(&self) -> C64 {
        let w = self.weights();
        w.iter().sum::<C64>() / w.len() as f64
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<C64> {
        let q = &self.spectrum.eigenvectors;
        let coeffs = q.transpose() * u;
        let w = self.weights();
        let mut out = DVector::from_element(q.nrows(), C64::new(0.0, 0.0));
        for k in 0..q.ncols() {
            let a = w[k] * coeffs[k];
            for i in 0..q.nrows() {
                out[i] += a * q[(i, k)];
            }
        }
        out
    }

    /// `u^T G u` through the eigen expansion.
    pub fn quadratic_form(&self, u: &DVector<f64>) -> C64 {
        let coeffs = self.spectrum.eigenvectors.transpose() * u;
        self.weights()
            .iter()
            .zip(coeffs.iter())
            .map(|(w, c)| w * (c * c))
            .sum()
    }

    pub fn spectral_norm(&self) -> f64 {
        self.weights().iter().fold(0.0, |m, w| m.max(w.norm()))
    }
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|v| C64::new(v, 0.0))
}

pub fn to_complex_vector(v: &DVector<f64>) -> DVector<C64> {
    v.map(|x| C64::new(x, 0.0))
}

/// `(K - zI)^{-1}` for a symmetric PSD `K`.
pub fn resolvent(k: &DMatrix<f64>, z: SpectralParameter) -> Result<DMatrix<C64>> {
    Ok(SymmetricSpectrum::decompose(k)?.at(z).matrix())
}

/// Resolvent of `X^T X / n`.
pub fn co_resolvent(x: &DataMatrix, z: SpectralParameter) -> Result<DMatrix<C64>> {
    resolvent(&co_covariance(x)?, z)
}

/// `K` with the rank-one contribution of one column removed; `n` is unchanged.
pub fn loo_covariance(x: &DataMatrix, column_index: usize) -> Result<DMatrix<f64>> {
    let col = x.column(column_index)?;
    let k = sample_covariance(x)? - &col * col.transpose() / x.n() as f64;
    Ok(symmetrize(k))
}

pub fn loo_resolvent(
    x: &DataMatrix,
    column_index: usize,
    z: SpectralParameter,
) -> Result<DMatrix<C64>> {
    resolvent(&loo_covariance(x, column_index)?, z)
}

/// Scaled residuals of the three leave-one-out identities.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LooIdentityReport {
    /// `|(1/n) x^T G x - (1 + z Gc_ii)|`
    pub quadratic_form: f64,
    /// `||G - G_- - (z/n) Gc_ii G_- x x^T G_-||_F`
    pub rank_one: f64,
    /// `||G x + z Gc_ii G_- x||`
    pub column: f64,
    /// `|1 + (1/n) x^T G_- x|`
    pub denominator: f64,
}

impl LooIdentityReport {
    pub fn max_residual(&self) -> f64 {
        self.quadratic_form.max(self.rank_one).max(self.column)
    }
}

pub fn check_loo_identities(
    x: &DataMatrix,
    column_index: usize,
    z: SpectralParameter,
) -> Result<LooIdentityReport> {
    let col = x.column(column_index)?;
    let n = x.n() as f64;
    let zv = z.value();
    let g = resolvent(&sample_covariance(x)?, z)?;
    let g_loo = loo_resolvent(x, column_index, z)?;
    let g_co = co_resolvent(x, z)?;
    let gc_ii = g_co[(column_index, column_index)];
    let xc = to_complex_vector(&col);

    let denominator = (C64::new(1.0, 0.0) + xc.dot(&(&g_loo * &xc)) / n).norm();
    if denominator <= tolerance::DEGENERATE_DENOMINATOR {
        return Err(Error::Degenerate(denominator));
    }

    let lhs = xc.dot(&(&g * &xc)) / n;
    let rhs = C64::new(1.0, 0.0) + zv * gc_ii;
    let quadratic_form = (lhs - rhs).norm() / lhs.norm().max(rhs.norm()).max(1.0);

    let gx_loo = &g_loo * &xc;
    let correction = (&gx_loo * gx_loo.transpose()) * (zv / n * gc_ii);
    let rank_diff = &g - &g_loo - &correction;
    let rank_scale = g.norm().max(g_loo.norm()).max(correction.norm()).max(1.0);
    let rank_one = rank_diff.norm() / rank_scale;

    let gx = &g * &xc;
    let pred = &gx_loo * (-zv * gc_ii);
    let column = (&gx - &pred).norm() / gx.norm().max(pred.norm()).max(1.0);

    Ok(LooIdentityReport {
        quadratic_form,
        rank_one,
        column,
        denominator,
    })
}

/// `(M + u v^T)^{-1}` from `M^{-1}` by the rank-one formula.
pub fn sherman_morrison_update(
    minv: &DMatrix<C64>,
    u: &DVector<C64>,
    v: &DVector<C64>,
) -> Result<DMatrix<C64>> {
    let p = minv.nrows();
    if minv.ncols() != p || u.len() != p || v.len() != p {
        return Err(Error::Size(format!(
            "incompatible shapes {}x{}, u {}, v {}",
            p,
            minv.ncols(),
            u.len(),
            v.len()
        )));
    }
    let minv_u = minv * u;
    let vt_minv = v.transpose() * minv;
    let denom = C64::new(1.0, 0.0) + (v.transpose() * &minv_u)[(0, 0)];
    if denom.norm() <= tolerance::DEGENERATE_DENOMINATOR {
        return Err(Error::SingularUpdate(denom.norm()));
    }
    Ok(minv - (minv_u * vt_minv) / denom)
}

/// `u^T G_K(z) u` for a unit vector `u`: the Stieltjes transform of the
/// eigenvector-weighted spectral distribution along `u`.
pub fn vesd_transform(k: &DMatrix<f64>, u: &DVector<f64>, z: SpectralParameter) -> Result<C64> {
    if u.len() != k.nrows() {
        return Err(Error::Size(format!(
            "direction has length {}, matrix is {}x{}",
            u.len(),
            k.nrows(),
            k.ncols()
        )));
    }
    if (u.norm() - 1.0).abs() > tolerance::UNIT_VECTOR {
        return Err(Error::Precondition(format!(
            "direction must be a unit vector, norm is {}",
            u.norm()
        )));
    }
    Ok(SymmetricSpectrum::decompose(k)?.at(z).quadratic_form(u))
}

/// Residuals of the imaginary-part identities and the smallest eigenvalues
/// of `Im(G)` and `Im(zG)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ImaginaryPartReport {
    pub im_resolvent: f64,
    pub im_z_resolvent: f64,
    pub min_eig_im_resolvent: f64,
    pub min_eig_im_z_resolvent: f64,
}

pub fn imaginary_part_identities(
    k: &DMatrix<f64>,
    z: SpectralParameter,
) -> Result<ImaginaryPartReport> {
    let g = resolvent(k, z)?;
    let zv = z.value();
    let ggh = &g * g.adjoint();
    let im_g = g.map(|c| c.im);
    let zg = g.map(|c| c * zv);
    let im_zg = zg.map(|c| c.im);
    let target_g = ggh.map(|c| c.re * zv.im);
    let target_zg = (to_complex(k) * &ggh).map(|c| c.re * zv.im);
    let im_eigs = SymmetricEigen::new(symmetrize(im_g.clone())).eigenvalues;
    let im_z_eigs = SymmetricEigen::new(symmetrize(im_zg.clone())).eigenvalues;
    Ok(ImaginaryPartReport {
        im_resolvent: (&im_g - target_g).norm(),
        im_z_resolvent: (&im_zg - target_zg).norm(),
        min_eig_im_resolvent: im_eigs.min(),
        min_eig_im_z_resolvent: im_z_eigs.min(),
    })
}

/// Largest singular value of a complex matrix.
pub fn spectral_norm(m: &DMatrix<C64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0, |a, &b| a.max(b))
}
