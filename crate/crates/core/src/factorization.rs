//! Linear-generator decomposition and residual factors.
//!
//! A generator is a pair `(fbar, sigmabar)` whose Euler step
//! `S(x, W) = x + fbar(x) h + sigmabar(x) W` drives the simulated states.
//! The residual factor `S_m(x)` satisfies
//! `sigma_m sigma_m' - a = sigmabar S_m S_m' sigmabar'` with `a = sigmabar sigmabar'`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::problem::{ProblemSpec, StateVectorMap};

/// State-only matrix map `x -> R^{d x d}`.
pub type StateMatrixMap = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Largest accepted condition number of a generator volatility.
pub const MAX_CONDITION: f64 = 1e12;
/// Default relative pivot tolerance of [`cholesky_drop_zero_columns`].
pub const DEFAULT_PIVOT_TOL: f64 = 1e-10;

#[derive(Clone)]
pub struct Generator {
    drift: StateVectorMap,
    volatility: StateMatrixMap,
}

impl Generator {
    pub fn new(drift: StateVectorMap, volatility: StateMatrixMap) -> Self {
        Self { drift, volatility }
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn volatility(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.volatility)(x)
    }

    /// Volatility and its inverse, failing when the condition number
    /// exceeds [`MAX_CONDITION`].
    pub fn volatility_with_inverse(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let s = self.volatility(x);
        let d = x.len();
        if s.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.nrows().max(s.ncols()),
            });
        }
        let sv = s.clone().singular_values();
        let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(cond <= MAX_CONDITION) {
            return Err(Error::IllConditioned(cond));
        }
        let inv = s.clone().try_inverse().ok_or(Error::IllConditioned(f64::INFINITY))?;
        Ok((s, inv))
    }

    /// `S(x, W) = x + fbar(x) h + sigmabar(x) W`.
    pub fn step(&self, x: &DVector<f64>, h: f64, w: &DVector<f64>) -> DVector<f64> {
        x + self.drift(x) * h + self.volatility(x) * w
    }
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Generator")
    }
}

/// Residual factor `S` (d x l, no zero columns) with `abar = tr(S S')`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFactor {
    pub sigma: DMatrix<f64>,
    pub abar: f64,
}

impl ResidualFactor {
    pub fn from_factor(sigma: DMatrix<f64>) -> Self {
        let abar = sigma.iter().fold(0.0, |acc, v| acc + v * v);
        Self { sigma, abar }
    }

    /// True when there is no second-order correction.
    pub fn is_trivial(&self) -> bool {
        self.sigma.ncols() == 0
    }
}

/// Retained generators, the projection of modes onto them and, for
/// constant-ratio problems, the per-mode residual factors.
#[derive(Debug, Clone)]
pub struct GeneratorChoice {
    generators: Vec<Generator>,
    representatives: Vec<usize>,
    projection: Vec<usize>,
    constant_residuals: Option<Vec<ResidualFactor>>,
}

impl GeneratorChoice {
    /// `representatives[r]` is the mode index represented by generator `r`;
    /// `projection[m]` is the generator serving mode `m`.
    pub fn new(generators: Vec<Generator>, representatives: Vec<usize>, projection: Vec<usize>) -> Result<Self> {
        if generators.is_empty() || generators.len() != representatives.len() {
            return Err(Error::Config("need one representative mode per generator".into()));
        }
        if let Some(&bad) = projection.iter().find(|&&r| r >= generators.len()) {
            return Err(Error::Config(format!("projection targets missing generator {bad}")));
        }
        for (r, &m) in representatives.iter().enumerate() {
            if projection.get(m) != Some(&r) {
                return Err(Error::Config(format!(
                    "projection must fix representative mode {m} of generator {r}"
                )));
            }
        }
        Ok(Self {
            generators,
            representatives,
            projection,
            constant_residuals: None,
        })
    }

    /// Attaches precomputed x-independent residual factors, one per mode.
    pub fn with_constant_residuals(mut self, residuals: Vec<ResidualFactor>) -> Result<Self> {
        check_dim(self.projection.len(), residuals.len())?;
        self.constant_residuals = Some(residuals);
        Ok(self)
    }

    pub fn retained_count(&self) -> usize {
        self.generators.len()
    }

    pub fn mode_count(&self) -> usize {
        self.projection.len()
    }

    pub fn generator(&self, retained: usize) -> &Generator {
        &self.generators[retained]
    }

    pub fn representative(&self, retained: usize) -> usize {
        self.representatives[retained]
    }

    pub fn projection(&self, mode: usize) -> usize {
        self.projection[mode]
    }

    /// Modes served by generator `retained`, in increasing order.
    pub fn class(&self, retained: usize) -> Vec<usize> {
        (0..self.projection.len()).filter(|&m| self.projection[m] == retained).collect()
    }

    pub fn constant_residuals(&self) -> Option<&[ResidualFactor]> {
        self.constant_residuals.as_deref()
    }

    /// Residual factor of mode `m` at `x` (cached when constant).
    pub fn residual(&self, spec: &ProblemSpec, m: usize, x: &DVector<f64>) -> Result<ResidualFactor> {
        if let Some(cache) = &self.constant_residuals {
            return Ok(cache[m].clone());
        }
        let s = residual_matrix(spec, self, m, x, &spec.zero_control())?;
        Ok(ResidualFactor::from_factor(cholesky_drop_zero_columns(&s, DEFAULT_PIVOT_TOL)?))
    }
}

/// `sigmabar^{-1} (sigma sigma' - a) sigmabar^{-T}` for mode `m`, symmetrized.
pub fn residual_matrix(
    spec: &ProblemSpec,
    generators: &GeneratorChoice,
    m: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_dim(spec.dim(), x.len())?;
    if m >= spec.mode_count() || m >= generators.mode_count() {
        return Err(Error::Usage(format!("mode {m} out of range")));
    }
    let generator = generators.generator(generators.projection(m));
    let (_, inv) = generator.volatility_with_inverse(x)?;
    let sigma = (spec.modes()[m].volatility)(x, u);
    if sigma.nrows() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: sigma.nrows(),
        });
    }
    let ratio = &inv * sigma;
    let mut r = &ratio * ratio.transpose();
    for i in 0..r.nrows() {
        r[(i, i)] -= 1.0;
    }
    let r = (&r + r.transpose()) * 0.5;
    let min_eig = r.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-8 * (1.0 + r.norm()) {
        return Err(Error::DominationViolated {
            mode: m,
            min_eigenvalue: min_eig,
        });
    }
    Ok(r)
}

/// Cholesky factorization of a PSD matrix in which columns with a pivot
/// at or below `tol * tr(S) / d` are eliminated, giving a lower
/// trapezoidal `d x l` factor with `l` the numerical rank.
pub fn cholesky_drop_zero_columns(s: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let d = s.nrows();
    if s.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: s.ncols() });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Indefinite("matrix has non-finite entries".into()));
    }
    let scale = s.norm();
    if scale == 0.0 {
        return Ok(DMatrix::zeros(d, 0));
    }
    let trace = s.trace();
    if !(trace > 0.0) {
        return Err(Error::Indefinite(format!("trace {trace:.3e} of a nonzero matrix")));
    }
    let threshold = tol * trace / d as f64;
    let mut l = DMatrix::<f64>::zeros(d, d);
    let mut rank = 0;
    for j in 0..d {
        let pivot = s[(j, j)] - (0..rank).map(|c| l[(j, c)] * l[(j, c)]).sum::<f64>();
        if pivot <= threshold {
            continue;
        }
        let ljj = pivot.sqrt();
        l[(j, rank)] = ljj;
        for i in j + 1..d {
            let dot: f64 = (0..rank).map(|c| l[(i, c)] * l[(j, c)]).sum();
            l[(i, rank)] = (s[(i, j)] - dot) / ljj;
        }
        rank += 1;
    }
    let factor = l.columns(0, rank).into_owned();
    let err = (&factor * factor.transpose() - s).norm();
    if err > 1e-9 * (1.0 + scale) {
        return Err(Error::Indefinite(format!(
            "reconstruction error {err:.3e} after dropping {} columns",
            d - rank
        )));
    }
    Ok(factor)
}

fn validate_correlation(m: &DMatrix<f64>, d: usize, index: usize) -> Result<()> {
    if m.shape() != (d, d) {
        return Err(Error::Config(format!("correlation matrix {index} is not {d} x {d}")));
    }
    for i in 0..d {
        if (m[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("correlation matrix {index} lacks a unit diagonal")));
        }
        for j in 0..d {
            let v = m[(i, j)];
            if !v.is_finite() || v.abs() > 1.0 || (v - m[(j, i)]).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "correlation matrix {index} has invalid entry ({i}, {j}) = {v}"
                )));
            }
        }
    }
    Ok(())
}

fn scaled_diagonal(vols: Arc<Vec<f64>>, scale: f64) -> StateMatrixMap {
    Arc::new(move |x: &DVector<f64>| {
        DMatrix::from_diagonal(&DVector::from_iterator(
            x.len(),
            vols.iter().zip(x.iter()).map(|(s, xi)| scale * s * xi),
        ))
    })
}

fn zero_drift() -> StateVectorMap {
    Arc::new(|x: &DVector<f64>| DVector::zeros(x.len()))
}

/// Shared generator for the uncertain-correlation model
/// `sigma_m(x) = diag(sigma_i x_i) chol(m)`: `sigmabar(x) = sqrt(lambda) diag(sigma_i x_i)`
/// with `lambda` the least eigenvalue over all correlation matrices, zero
/// drift, and constant residual factors `chol((m - lambda I) / lambda)`.
pub fn build_uncertain_correlation_generator(vols: &[f64], modes: &[DMatrix<f64>]) -> Result<GeneratorChoice> {
    let d = vols.len();
    if d == 0 || modes.is_empty() {
        return Err(Error::Config("need volatilities and at least one correlation matrix".into()));
    }
    if vols.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Config("volatilities must be positive".into()));
    }
    let mut lambda = f64::INFINITY;
    for (i, m) in modes.iter().enumerate() {
        validate_correlation(m, d, i)?;
        lambda = lambda.min(m.clone().symmetric_eigenvalues().min());
    }
    if !(lambda > 1e-12) {
        return Err(Error::Config(format!(
            "correlation set is not uniformly positive definite (least eigenvalue {lambda:.3e})"
        )));
    }
    let mut residuals = Vec::with_capacity(modes.len());
    for m in modes {
        let mut r = m.clone();
        for i in 0..d {
            r[(i, i)] -= lambda;
        }
        r /= lambda;
        residuals.push(ResidualFactor::from_factor(cholesky_drop_zero_columns(&r, DEFAULT_PIVOT_TOL)?));
    }
    let generator = Generator::new(zero_drift(), scaled_diagonal(Arc::new(vols.to_vec()), lambda.sqrt()));
    GeneratorChoice::new(vec![generator], vec![0], vec![0; modes.len()])?.with_constant_residuals(residuals)
}

/// One generator per mode, `sigmabar_m = sigma_m`: every residual vanishes
/// and each mode is simulated separately.
pub fn build_per_mode_correlation_generators(vols: &[f64], modes: &[DMatrix<f64>]) -> Result<GeneratorChoice> {
    let d = vols.len();
    let vols = Arc::new(vols.to_vec());
    let mut generators = Vec::with_capacity(modes.len());
    for (i, m) in modes.iter().enumerate() {
        validate_correlation(m, d, i)?;
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config(format!("correlation matrix {i} is singular")))?
            .l();
        let vols = Arc::clone(&vols);
        let vol: StateMatrixMap = Arc::new(move |x: &DVector<f64>| {
            let diag = DVector::from_iterator(x.len(), vols.iter().zip(x.iter()).map(|(s, xi)| s * xi));
            DMatrix::from_diagonal(&diag) * &chol
        });
        generators.push(Generator::new(zero_drift(), vol));
    }
    let n = modes.len();
    GeneratorChoice::new(generators, (0..n).collect(), (0..n).collect())?
        .with_constant_residuals(vec![ResidualFactor::from_factor(DMatrix::zeros(d, 0)); n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn corr(rho: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0])
    }

    #[test]
    fn cholesky_examples() {
        let l = cholesky_drop_zero_columns(&DMatrix::identity(3, 3), DEFAULT_PIVOT_TOL).unwrap();
        assert_eq!(l, DMatrix::identity(3, 3));
        let l = cholesky_drop_zero_columns(&DMatrix::from_element(2, 2, 1.0), DEFAULT_PIVOT_TOL).unwrap();
        assert_eq!(l.shape(), (2, 1));
        assert_abs_diff_eq!(l[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(1, 0)], 1.0, epsilon = 1e-15);
        let l = cholesky_drop_zero_columns(&DMatrix::zeros(2, 2), DEFAULT_PIVOT_TOL).unwrap();
        assert_eq!(l.shape(), (2, 0));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(cholesky_drop_zero_columns(&s, DEFAULT_PIVOT_TOL), Err(Error::Indefinite(_))));
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_drop_zero_columns(&s, DEFAULT_PIVOT_TOL).is_err());
    }

    #[test]
    fn cholesky_middle_zero_pivot() {
        // Rank two with the zero pivot in the middle.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 0.5, 3.0]);
        let s = &a * a.transpose();
        let l = cholesky_drop_zero_columns(&s, DEFAULT_PIVOT_TOL).unwrap();
        assert_eq!(l.ncols(), 2);
        assert!((&l * l.transpose() - &s).norm() <= 1e-12);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn uncertain_correlation_examples() {
        let g = build_uncertain_correlation_generator(&[0.4, 0.3], &[corr(0.8), corr(-0.8)]).unwrap();
        let res = g.constant_residuals().unwrap();
        for r in res {
            assert_abs_diff_eq!(r.abar, 8.0, epsilon = 1e-12);
            assert_eq!(r.sigma.ncols(), 1);
        }
        let s = &res[0].sigma;
        let full = s * s.transpose();
        for v in full.iter() {
            assert_abs_diff_eq!(v.abs(), 4.0, epsilon = 1e-12);
        }
        let g = build_uncertain_correlation_generator(&[0.4, 0.3], &[corr(0.4), corr(-0.4)]).unwrap();
        assert_abs_diff_eq!(g.constant_residuals().unwrap()[0].abar, 4.0 / 3.0, epsilon = 1e-12);
        let g = build_uncertain_correlation_generator(&[0.4, 0.3], &[corr(0.0)]).unwrap();
        assert!(g.constant_residuals().unwrap()[0].is_trivial());
        let x = DVector::from_vec(vec![50.0, 40.0]);
        let v = g.generator(0).volatility(&x);
        assert_abs_diff_eq!(v[(0, 0)], 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[(1, 1)], 12.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_correlation_rejected() {
        assert!(build_uncertain_correlation_generator(&[0.4, 0.3], &[corr(1.0)]).is_err());
        assert!(build_uncertain_correlation_generator(&[0.4, 0.3], &[corr(1.2)]).is_err());
    }

    #[test]
    fn projection_must_fix_representatives() {
        let g = build_uncertain_correlation_generator(&[0.4], &[DMatrix::identity(1, 1)]).unwrap();
        let gen = g.generator(0).clone();
        assert!(GeneratorChoice::new(vec![gen.clone()], vec![1], vec![0]).is_err());
        assert!(GeneratorChoice::new(vec![gen.clone()], vec![0], vec![1]).is_err());
        let ok = GeneratorChoice::new(vec![gen], vec![1], vec![0, 0]).unwrap();
        assert_eq!(ok.class(0), vec![0, 1]);
    }

    #[test]
    fn ill_conditioned_volatility_rejected() {
        let g = build_uncertain_correlation_generator(&[0.4, 0.3], &[corr(0.0)]).unwrap();
        let x = DVector::from_vec(vec![50.0, 1e-12]);
        assert!(matches!(g.generator(0).volatility_with_inverse(&x), Err(Error::IllConditioned(_))));
    }
}
