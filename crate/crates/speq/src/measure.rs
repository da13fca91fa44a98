//! Probability measures on the nonnegative reals and the distances between them.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::resolvent::{SpectralParameter, SymmetricSpectrum, C64};
use crate::tolerance;

/// A finitely supported probability measure on `[0, inf)`.
///
/// Positions are strictly ascending; atoms closer than
/// [`tolerance::ATOM_MERGE`] are merged onto the smaller position.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomicMeasure {
    positions: Vec<f64>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl AtomicMeasure {
    pub fn new(positions: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidMeasure("no atoms".into()));
        }
        if positions.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} positions but {} weights",
                positions.len(),
                weights.len()
            )));
        }
        let mut atoms: Vec<(f64, f64)> = positions.into_iter().zip(weights).collect();
        for &(t, w) in &atoms {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::InvalidMeasure(format!("position {t} is not in [0, inf)")));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidMeasure(format!("weight {w} is not positive")));
            }
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut positions = Vec::with_capacity(atoms.len());
        let mut weights: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut last = f64::NEG_INFINITY;
        for (t, w) in atoms {
            if t - last < tolerance::ATOM_MERGE {
                *weights.last_mut().unwrap() += w;
            } else {
                positions.push(t);
                weights.push(w);
            }
            last = t;
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > tolerance::ATOMIC_MASS {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        let cumulative = weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            positions,
            weights,
            cumulative,
        })
    }

    pub fn dirac(t: f64) -> Result<Self> {
        Self::new(vec![t], vec![1.0])
    }

    pub fn from_atoms(atoms: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            atoms.iter().map(|a| a.0).collect(),
            atoms.iter().map(|a| a.1).collect(),
        )
    }

    /// Uniform weights on a list of eigenvalues.
    pub fn from_eigenvalues(values: &[f64]) -> Result<Self> {
        let w = 1.0 / values.len() as f64;
        Self::new(values.to_vec(), vec![w; values.len()])
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn atom_at_zero(&self) -> f64 {
        if self.positions[0] == 0.0 {
            self.weights[0]
        } else {
            0.0
        }
    }

    pub fn mean(&self) -> f64 {
        self.atoms().map(|(t, w)| t * w).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms().map(|(t, w)| t * t * w).sum()
    }

    pub fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.positions.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn cdf(&self, t: f64) -> f64 {
        let k = self.positions.partition_point(|&x| x <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    pub fn cdf_left(&self, t: f64) -> f64 {
        let k = self.positions.partition_point(|&x| x < t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    pub fn stieltjes(&self, z: SpectralParameter) -> C64 {
        stieltjes(self, z)
    }
}

/// `sum_i w_i / (t_i - z)`.
pub fn stieltjes(mu: &AtomicMeasure, z: SpectralParameter) -> C64 {
    let z = z.value();
    mu.atoms()
        .map(|(t, w)| (C64::new(t, 0.0) - z).inv() * w)
        .sum()
}

/// Spectral distribution of a symmetric PSD matrix, `(1/p) sum delta_lambda`.
pub fn empirical_spectrum(k: &DMatrix<f64>) -> Result<AtomicMeasure> {
    AtomicMeasure::from_eigenvalues(&SymmetricSpectrum::eigenvalues_of(k)?)
}

/// A piecewise-linear density on an ascending grid plus an atom at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledDensity {
    grid: Vec<f64>,
    density: Vec<f64>,
    atom_at_zero: f64,
    cumulative: Vec<f64>,
}

impl SampledDensity {
    pub fn new(grid: Vec<f64>, mut density: Vec<f64>, atom_at_zero: f64) -> Result<Self> {
        if grid.len() < 2 || grid.len() != density.len() {
            return Err(Error::InvalidMeasure(format!(
                "grid of {} points with {} density values",
                grid.len(),
                density.len()
            )));
        }
        if !(grid[0] >= 0.0) {
            return Err(Error::InvalidMeasure("grid must start at a nonnegative point".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::InvalidMeasure("grid must be strictly ascending".into()));
        }
        for f in density.iter_mut() {
            if !f.is_finite() || *f < -tolerance::DENSITY_NEGATIVE {
                return Err(Error::InvalidMeasure(format!("density value {f} is negative")));
            }
            *f = f.max(0.0);
        }
        if !atom_at_zero.is_finite() || atom_at_zero < 0.0 {
            return Err(Error::InvalidMeasure(format!("atom {atom_at_zero} is negative")));
        }
        let mut cumulative = Vec::with_capacity(grid.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for i in 1..grid.len() {
            acc += 0.5 * (density[i] + density[i - 1]) * (grid[i] - grid[i - 1]);
            cumulative.push(acc);
        }
        let total = atom_at_zero + acc;
        if (total - 1.0).abs() > tolerance::DENSITY_MASS {
            return Err(Error::InvalidMeasure(format!("total mass {total} is not 1")));
        }
        Ok(Self {
            grid,
            density,
            atom_at_zero,
            cumulative,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn atom_at_zero(&self) -> f64 {
        self.atom_at_zero
    }

    pub fn continuous_mass(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn total_mass(&self) -> f64 {
        self.atom_at_zero + self.continuous_mass()
    }

    fn cell(&self, t: f64) -> Option<usize> {
        let g = &self.grid;
        if t < g[0] || t > g[g.len() - 1] {
            return None;
        }
        let k = g.partition_point(|&x| x <= t);
        Some(k.clamp(1, g.len() - 1) - 1)
    }

    fn linear(&self, i: usize, t: f64) -> f64 {
        let (a, b) = (self.grid[i], self.grid[i + 1]);
        let (fa, fb) = (self.density[i], self.density[i + 1]);
        fa + (fb - fa) * (t - a) / (b - a)
    }

    pub fn density_at(&self, t: f64) -> f64 {
        self.cell(t).map_or(0.0, |i| self.linear(i, t))
    }

    /// Values at `a` and `b` of the linear piece covering `(a, b)`.
    fn piece(&self, a: f64, b: f64) -> (f64, f64) {
        let m = 0.5 * (a + b);
        match self.cell(m) {
            Some(i) => (self.linear(i, a), self.linear(i, b)),
            None => (0.0, 0.0),
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let g = &self.grid;
        let cont = if t < g[0] {
            0.0
        } else if t >= g[g.len() - 1] {
            self.continuous_mass()
        } else {
            let i = self.cell(t).unwrap();
            let fa = self.density[i];
            let ft = self.linear(i, t);
            self.cumulative[i] + 0.5 * (fa + ft) * (t - g[i])
        };
        self.atom_at_zero + cont
    }

    pub fn cdf_left(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            self.cdf(t)
        }
    }

    /// Exact Stieltjes transform of the piecewise-linear density plus the atom.
    pub fn stieltjes(&self, z: SpectralParameter) -> C64 {
        let z = z.value();
        let mut acc = C64::new(0.0, 0.0);
        if self.atom_at_zero > 0.0 {
            acc += (-z).inv() * self.atom_at_zero;
        }
        for i in 0..self.grid.len() - 1 {
            let (a, b) = (self.grid[i], self.grid[i + 1]);
            let (fa, fb) = (self.density[i], self.density[i + 1]);
            if fa == 0.0 && fb == 0.0 {
                continue;
            }
            let slope = (fb - fa) / (b - a);
            let f_z = C64::new(fa, 0.0) + (z - a) * slope;
            let log_ratio = ((C64::new(b, 0.0) - z) / (C64::new(a, 0.0) - z)).ln();
            acc += f_z * log_ratio + slope * (b - a);
        }
        acc
    }

    /// `(1 - weight) delta_0 + weight * self`; the zero atom absorbs `1 - weight`.
    pub fn mix_with_zero(&self, weight: f64) -> Result<Self> {
        let atom = (1.0 - weight) + weight * self.atom_at_zero;
        Self::new(
            self.grid.clone(),
            self.density.iter().map(|f| f * weight).collect(),
            atom.max(0.0),
        )
    }
}

/// A cumulative distribution function, step or piecewise quadratic.
#[derive(Clone, Debug, PartialEq)]
pub enum CdfFunction {
    Step(AtomicMeasure),
    Sampled(SampledDensity),
}

impl CdfFunction {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            CdfFunction::Step(m) => m.cdf(t),
            CdfFunction::Sampled(d) => d.cdf(t),
        }
    }

    pub fn left_limit(&self, t: f64) -> f64 {
        match self {
            CdfFunction::Step(m) => m.cdf_left(t),
            CdfFunction::Sampled(d) => d.cdf_left(t),
        }
    }

    fn breakpoints(&self, out: &mut Vec<f64>) {
        match self {
            CdfFunction::Step(m) => out.extend_from_slice(m.positions()),
            CdfFunction::Sampled(d) => {
                out.push(0.0);
                out.extend_from_slice(d.grid());
            }
        }
    }

    fn piece(&self, a: f64, b: f64) -> (f64, f64) {
        match self {
            CdfFunction::Step(_) => (0.0, 0.0),
            CdfFunction::Sampled(d) => d.piece(a, b),
        }
    }
}

impl From<AtomicMeasure> for CdfFunction {
    fn from(m: AtomicMeasure) -> Self {
        CdfFunction::Step(m)
    }
}

impl From<SampledDensity> for CdfFunction {
    fn from(d: SampledDensity) -> Self {
        CdfFunction::Sampled(d)
    }
}

/// `sup_t |F1(t) - F2(t)|`.
///
/// Both CDFs are piecewise polynomial of degree at most two between the
/// union of their breakpoints, so the supremum is attained at a breakpoint
/// (from either side) or at a stationary point of the difference, and is
/// computed exactly.
pub fn kolmogorov_distance(f1: &CdfFunction, f2: &CdfFunction) -> f64 {
    let mut pts = Vec::new();
    f1.breakpoints(&mut pts);
    f2.breakpoints(&mut pts);
    pts.sort_by(f64::total_cmp);
    pts.dedup();

    let gap = |t: f64| (f1.value(t) - f2.value(t)).abs();
    let mut best = 0.0_f64;
    for &t in &pts {
        best = best
            .max(gap(t))
            .max((f1.left_limit(t) - f2.left_limit(t)).abs());
    }
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (p1a, p1b) = f1.piece(a, b);
        let (p2a, p2b) = f2.piece(a, b);
        let da = p1a - p2a;
        let db = p1b - p2b;
        if da * db < 0.0 {
            let t = a + (b - a) * da / (da - db);
            best = best.max(gap(t));
        }
    }
    best
}

/// `|gamma1 - gamma2| / max(gamma1, gamma2)`.
pub fn mp_shape_distance_bound(gamma1: f64, gamma2: f64) -> Result<f64> {
    if !(gamma1 > 0.0) {
        return Err(Error::NonPositive("gamma1"));
    }
    if !(gamma2 > 0.0) {
        return Err(Error::NonPositive("gamma2"));
    }
    Ok((gamma1 - gamma2).abs() / gamma1.max(gamma2))
}

/// Height `y` and half-width `A` balancing the three terms of the
/// Kolmogorov-distance bound.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct KolmogorovSchedule {
    beta: f64,
    l: f64,
    k: f64,
    sigma: f64,
    epsilon: f64,
    y: f64,
    a: f64,
}

/// Relative agreement required between the three balanced terms.
const BALANCE_TOL: f64 = 1e-9;

impl KolmogorovSchedule {
    pub fn new(beta: f64, l: f64, k: f64, sigma: f64, epsilon: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Schedule(format!("beta = {beta} not in (0, 1]")));
        }
        if !(l > 0.0) || !(k > 0.0) {
            return Err(Error::Schedule(format!("exponents l = {l}, k = {k} must be positive")));
        }
        if !(sigma >= 1.0) || !sigma.is_finite() {
            return Err(Error::Schedule(format!("sigma = {sigma} must be at least 1")));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Schedule(format!("epsilon = {epsilon} must be positive")));
        }
        let y = (sigma.powf(3.0 * (1.0 + l)) * epsilon)
            .powf(1.0 / (2.0 + 2.0 * l + k + (2.0 + l) * beta));
        let a = (sigma.powi(3) / epsilon).powf(1.0 / (2.0 + l)) * y.powf((k - 2.0) / (2.0 + l));
        let schedule = Self {
            beta,
            l,
            k,
            sigma,
            epsilon,
            y,
            a,
        };
        schedule.check_balance()?;
        Ok(schedule)
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `(epsilon A^{1+l} / y^k, sigma^3 / (y^2 A), y^beta)`.
    pub fn terms(&self) -> [f64; 3] {
        [
            self.epsilon * self.a.powf(1.0 + self.l) / self.y.powf(self.k),
            self.sigma.powi(3) / (self.y * self.y * self.a),
            self.y.powf(self.beta),
        ]
    }

    fn check_balance(&self) -> Result<()> {
        let t = self.terms();
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            let rel = (t[i] - t[j]).abs() / t[i].abs().max(t[j].abs());
            if !(rel <= BALANCE_TOL) {
                return Err(Error::Schedule(format!(
                    "terms {} and {} differ by {rel:e} relative",
                    i, j
                )));
            }
        }
        Ok(())
    }
}

/// The three terms of the segment form of the Kolmogorov bound.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct BaiBoundReport {
    pub segment_term: f64,
    pub tail_term: f64,
    pub holder_term: f64,
    /// Sum of the three terms with the unknown leading constant set to 1.
    pub certificate: f64,
}

pub const BAI_SEGMENT_SAMPLES: usize = 2049;

/// Evaluates `(A max_{|t|<=A} g_gap(t+iy), sigma^3/(y^2 A), y^beta)`.
pub fn bai_bound_terms<F>(g_gap: F, schedule: &KolmogorovSchedule) -> Result<BaiBoundReport>
where
    F: Fn(SpectralParameter) -> f64,
{
    schedule.check_balance()?;
    let a = schedule.a();
    let y = schedule.y();
    let m = BAI_SEGMENT_SAMPLES;
    let mut max_gap = 0.0_f64;
    for i in 0..m {
        let t = -a + 2.0 * a * i as f64 / (m - 1) as f64;
        let z = SpectralParameter::upper(t, y)?;
        max_gap = max_gap.max(g_gap(z));
    }
    let segment_term = a * max_gap;
    let tail_term = schedule.sigma().powi(3) / (y * y * a);
    let holder_term = y.powf(schedule.beta());
    Ok(BaiBoundReport {
        segment_term,
        tail_term,
        holder_term,
        certificate: segment_term + tail_term + holder_term,
    })
}

pub fn write_measure_csv<W: Write>(mu: &AtomicMeasure, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "w"])?;
    for (t, wt) in mu.atoms() {
        w.write_record([t.to_string(), wt.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_measure_csv<R: Read>(reader: R) -> Result<AtomicMeasure> {
    let mut r = csv::Reader::from_reader(reader);
    check_header(&mut r, &["t", "w"])?;
    let mut positions = Vec::new();
    let mut weights = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        positions.push(parse_field(&rec, 0)?);
        weights.push(parse_field(&rec, 1)?);
    }
    AtomicMeasure::new(positions, weights)
}

pub fn write_density_csv<W: Write>(d: &SampledDensity, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "f", "atom0"])?;
    for (i, (x, f)) in d.grid().iter().zip(d.density()).enumerate() {
        let atom = if i == 0 {
            d.atom_at_zero().to_string()
        } else {
            String::new()
        };
        w.write_record([x.to_string(), f.to_string(), atom])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_density_csv<R: Read>(reader: R) -> Result<SampledDensity> {
    let mut r = csv::Reader::from_reader(reader);
    check_header(&mut r, &["x", "f", "atom0"])?;
    let mut grid = Vec::new();
    let mut density = Vec::new();
    let mut atom = None;
    for rec in r.records() {
        let rec = rec?;
        grid.push(parse_field(&rec, 0)?);
        density.push(parse_field(&rec, 1)?);
        if atom.is_none() {
            atom = Some(parse_field(&rec, 2)?);
        }
    }
    SampledDensity::new(grid, density, atom.unwrap_or(0.0))
}

fn check_header<R: Read>(r: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let header = r.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::InvalidMeasure(format!(
            "expected header {:?}, got {:?}",
            expected,
            header.iter().collect::<Vec<_>>()
        )));
    }
    Ok(())
}

fn parse_field(rec: &csv::StringRecord, i: usize) -> Result<f64> {
    let s = rec.get(i).unwrap_or("").trim();
    s.parse::<f64>()
        .map_err(|_| Error::InvalidMeasure(format!("cannot parse {s:?} as a number")))
}
