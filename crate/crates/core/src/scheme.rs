//! One-step operators: derivative estimators, the mode operator `G`, the
//! full operator `T`, the LQ maximizer and the discrete-increment stencils.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::factorization::GeneratorChoice;
use crate::monotone_poly::MonotonePolynomial;
use crate::problem::{ControlSpec, ProblemSpec};
use crate::quadrature::normal_rule;

/// Law of the normalized increment `W / sqrt(h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IncrementLaw {
    /// Standard normal (sampled or integrated by quadrature).
    Normal,
    /// Independent coordinates taking `+-nu` with probability `1/(2 nu^2)`
    /// and `0` otherwise.
    ThreePoint { nu: f64 },
}

/// Weighted increments `W_j` (not normalized) sharing one law.
#[derive(Debug, Clone)]
pub struct IncrementSet {
    dim: usize,
    h: f64,
    values: Vec<f64>,
    weights: Vec<f64>,
    law: IncrementLaw,
}

impl IncrementSet {
    /// Equally weighted sampled increments (`values` is `n * dim`).
    pub fn monte_carlo(dim: usize, h: f64, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(Error::Usage("increment sample must hold whole nonempty rows".into()));
        }
        check_step(h)?;
        let n = values.len() / dim;
        Ok(Self {
            dim,
            h,
            values,
            weights: vec![1.0 / n as f64; n],
            law: IncrementLaw::Normal,
        })
    }

    /// Tensor Gauss-Hermite rule for `N(0, h I)`.
    pub fn gauss_hermite(dim: usize, h: f64, nodes_per_dim: usize) -> Result<Self> {
        check_step(h)?;
        let (x, w) = normal_rule(nodes_per_dim)?;
        let points: Vec<(f64, f64)> = x.into_iter().map(|v| v * h.sqrt()).zip(w).collect();
        Self::tensor(dim, h, &points, IncrementLaw::Normal)
    }

    /// Product of one-dimensional three-point laws.
    pub fn three_point(dim: usize, h: f64, nu: f64) -> Result<Self> {
        check_step(h)?;
        if !(nu > 1.0 && nu.is_finite()) {
            return Err(Error::Usage(format!("three-point law needs nu > 1, got {nu}")));
        }
        let s = h.sqrt();
        let p = 1.0 / (2.0 * nu * nu);
        let points = [(0.0, 1.0 - 2.0 * p), (nu * s, p), (-nu * s, p)];
        Self::tensor(dim, h, &points, IncrementLaw::ThreePoint { nu })
    }

    fn tensor(dim: usize, h: f64, points: &[(f64, f64)], law: IncrementLaw) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Usage("increment dimension must be positive".into()));
        }
        let n1 = points.len();
        let n = n1
            .checked_pow(dim as u32)
            .filter(|n| *n <= 1 << 24)
            .ok_or_else(|| Error::Usage("tensor rule too large".into()))?;
        let mut values = Vec::with_capacity(n * dim);
        let mut weights = Vec::with_capacity(n);
        for idx in 0..n {
            let mut rest = idx;
            let mut weight = 1.0;
            for _ in 0..dim {
                let (x, w) = points[rest % n1];
                rest /= n1;
                values.push(x);
                weight *= w;
            }
            weights.push(weight);
        }
        Ok(Self {
            dim,
            h,
            values,
            weights,
            law,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time_step(&self) -> f64 {
        self.h
    }

    pub fn law(&self) -> IncrementLaw {
        self.law
    }

    pub fn value(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    /// Weight polynomial normalized against this set's law. For the
    /// three-point law the normalization is exact along coordinate axes.
    pub fn polynomial(&self, sigma: DMatrix<f64>, k: u32) -> Result<MonotonePolynomial> {
        match self.law {
            IncrementLaw::Normal => MonotonePolynomial::new(sigma, k),
            IncrementLaw::ThreePoint { nu } => MonotonePolynomial::with_moment(sigma, k, nu.powi(4 * k as i32)),
        }
    }
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Usage(format!("time step must be positive, got {h}")))
    }
}

/// Weighted means `D0`, `D1`, `D2_m` and their standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeEstimates {
    pub d0: f64,
    pub d1: DVector<f64>,
    /// Mode index and contracted second-order estimate.
    pub d2: Vec<(usize, f64)>,
    pub samples: usize,
    pub se_d0: f64,
    pub se_d1: DVector<f64>,
    pub se_d2: Vec<f64>,
}

impl DerivativeEstimates {
    pub fn d2_for(&self, mode: usize) -> Option<f64> {
        self.d2.iter().find(|(m, _)| *m == mode).map(|(_, v)| *v)
    }
}

/// Aggregation of the per-increment evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// `D0 = mean phi`, `D1 = mean phi (sigmabar')^{-1} W / h`,
    /// `D2_m = mean phi P_m(W / sqrt h) / h`.
    #[default]
    Plain,
    /// Sample-centered weights: `D1 = mean phi (sigmabar')^{-1} (W - Wbar) / h`
    /// and `D2_m = mean phi (P_m - Pbar_m) / (h (1 + Pbar_m))`. Constants
    /// have exactly zero first and second-order estimates and the weights
    /// `(1 + P_m) / (1 + Pbar_m)` stay nonnegative and average to one.
    Normalized,
}

/// Sample means of the direction `(sigmabar')^{-1} W / h` and of each
/// polynomial, and the per-increment weight of each estimate.
pub(crate) struct WeightCenters {
    pub dir_mean: Vec<f64>,
    pub p_mean: Vec<f64>,
}

impl WeightCenters {
    pub(crate) fn scale(&self, q: usize) -> Result<f64> {
        let s = 1.0 + self.p_mean[q];
        if s > 0.0 {
            Ok(1.0 / s)
        } else {
            Err(Error::Numerical(format!(
                "normalized estimator undefined: sample mean of the weight polynomial is {:.3e}",
                self.p_mean[q]
            )))
        }
    }
}

/// Estimates from the values `phi[j] = phi~(W_j)` with the plain estimator.
pub fn estimate_from_values(
    phi: &[f64],
    increments: &IncrementSet,
    sigma_bar_inv_t: &DMatrix<f64>,
    polys: &[(usize, MonotonePolynomial)],
) -> Result<DerivativeEstimates> {
    estimate_from_values_with(phi, increments, sigma_bar_inv_t, polys, Estimator::Plain)
}

/// Estimates from the values `phi[j] = phi~(W_j)`; every estimate is the
/// weighted mean of its per-increment terms.
pub fn estimate_from_values_with(
    phi: &[f64],
    increments: &IncrementSet,
    sigma_bar_inv_t: &DMatrix<f64>,
    polys: &[(usize, MonotonePolynomial)],
    estimator: Estimator,
) -> Result<DerivativeEstimates> {
    let n = increments.len();
    let d = increments.dim();
    check_dim(n, phi.len())?;
    check_dim(d, sigma_bar_inv_t.nrows())?;
    let h = increments.time_step();
    let inv_sqrt_h = 1.0 / h.sqrt();
    let npoly = polys.len();
    // Per-increment directions and polynomial values.
    let mut dirs = vec![0.0; n * d];
    let mut pvals = vec![0.0; n * npoly];
    let mut w_norm = vec![0.0; d];
    let mut centers = WeightCenters {
        dir_mean: vec![0.0; d],
        p_mean: vec![0.0; npoly],
    };
    for j in 0..n {
        let wj = increments.value(j);
        let weight = increments.weight(j);
        for (o, v) in w_norm.iter_mut().zip(wj) {
            *o = v * inv_sqrt_h;
        }
        for a in 0..d {
            let mut acc = 0.0;
            for b in 0..d {
                acc += sigma_bar_inv_t[(a, b)] * wj[b];
            }
            dirs[j * d + a] = acc / h;
            centers.dir_mean[a] += weight * acc / h;
        }
        for (q, (_, p)) in polys.iter().enumerate() {
            let v = p.value(&w_norm);
            pvals[j * npoly + q] = v;
            centers.p_mean[q] += weight * v;
        }
    }
    let mut scales = vec![1.0; npoly];
    if estimator == Estimator::Plain {
        centers.dir_mean.iter_mut().for_each(|v| *v = 0.0);
        centers.p_mean.iter_mut().for_each(|v| *v = 0.0);
    } else {
        for (q, s) in scales.iter_mut().enumerate() {
            *s = centers.scale(q)?;
        }
    }
    // Per-increment contributions: [phi, phi * dir (d), phi * P_m / h (npoly)].
    let width = 1 + d + npoly;
    let mut sum = vec![0.0; width];
    let mut contrib = vec![0.0; n * width];
    for j in 0..n {
        let row = &mut contrib[j * width..(j + 1) * width];
        row[0] = phi[j];
        for a in 0..d {
            row[1 + a] = phi[j] * (dirs[j * d + a] - centers.dir_mean[a]);
        }
        for q in 0..npoly {
            row[1 + d + q] = phi[j] * (pvals[j * npoly + q] - centers.p_mean[q]) * scales[q] / h;
        }
        let weight = increments.weight(j);
        for (s, v) in sum.iter_mut().zip(row.iter()) {
            *s += weight * v;
        }
    }
    let mut var = vec![0.0; width];
    if n > 1 {
        for j in 0..n {
            let weight = increments.weight(j);
            for (c, v) in var.iter_mut().enumerate() {
                let dev = contrib[j * width + c] - sum[c];
                *v += weight * dev * dev;
            }
        }
        for v in var.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    let se: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    Ok(DerivativeEstimates {
        d0: sum[0],
        d1: DVector::from_column_slice(&sum[1..=d]),
        d2: polys.iter().enumerate().map(|(q, (m, _))| (*m, sum[1 + d + q])).collect(),
        samples: n,
        se_d0: se[0],
        se_d1: DVector::from_column_slice(&se[1..=d]),
        se_d2: se[1 + d..].to_vec(),
    })
}

/// Estimates for `phi~(W) = phi(W)` evaluated on every increment.
pub fn estimate_derivatives(
    phi: impl Fn(&[f64]) -> f64,
    increments: &IncrementSet,
    sigma_bar_inv_t: &DMatrix<f64>,
    polys: &[(usize, MonotonePolynomial)],
) -> Result<DerivativeEstimates> {
    let values: Vec<f64> = (0..increments.len()).map(|j| phi(increments.value(j))).collect();
    estimate_from_values(&values, increments, sigma_bar_inv_t, polys)
}

/// LQ data of one mode frozen at a state.
#[derive(Debug, Clone)]
pub struct LqAtState {
    pub drift_control: DMatrix<f64>,
    pub reward_hessian: DMatrix<f64>,
    pub reward_linear: DVector<f64>,
}

/// Coefficients of one mode at a state `x`, with `u = 0` as reference.
#[derive(Debug, Clone)]
pub struct ModeAtState {
    pub drift_gap: DVector<f64>,
    pub discount: f64,
    pub reward: f64,
    pub lq: Option<LqAtState>,
}

impl ModeAtState {
    pub fn new(spec: &ProblemSpec, generators: &GeneratorChoice, m: usize, x: &DVector<f64>) -> Result<Self> {
        check_dim(spec.dim(), x.len())?;
        let coeffs = spec
            .modes()
            .get(m)
            .ok_or_else(|| Error::Usage(format!("mode {m} out of range")))?;
        let u0 = spec.zero_control();
        let fbar = generators.generator(generators.projection(m)).drift(x);
        let drift = (coeffs.drift)(x, &u0);
        check_dim(spec.dim(), drift.len())?;
        let lq = match spec.control() {
            ControlSpec::None => None,
            ControlSpec::LinearQuadratic { modes, .. } => {
                let data = &modes[m];
                Some(LqAtState {
                    drift_control: data.drift_control.clone(),
                    reward_hessian: data.reward_hessian.clone(),
                    reward_linear: (data.reward_linear)(x),
                })
            }
        };
        Ok(Self {
            drift_gap: drift - fbar,
            discount: (coeffs.discount)(x, &u0),
            reward: (coeffs.reward)(x, &u0),
            lq,
        })
    }

    /// `max_u G1(x, r, p) + d2` and the maximizing control (if any).
    /// Also returns the effective drift gap and discount at the optimum.
    pub fn maximize(&self, r: f64, p: &DVector<f64>, d2: f64) -> Result<ModeOptimum> {
        let base = self.drift_gap.dot(p) - self.discount * r + self.reward + d2;
        match &self.lq {
            None => Ok(ModeOptimum {
                value: base,
                control: None,
                drift_gap: self.drift_gap.clone(),
            }),
            Some(lq) => {
                let (u, gain) = lq_maximize(&lq.drift_control, &lq.reward_hessian, &lq.reward_linear, p)?;
                let drift_gap = &self.drift_gap + &lq.drift_control * &u;
                Ok(ModeOptimum {
                    value: base + gain,
                    control: Some(u),
                    drift_gap,
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModeOptimum {
    pub value: f64,
    pub control: Option<DVector<f64>>,
    /// `f(x, u*) - fbar(x)`.
    pub drift_gap: DVector<f64>,
}

/// Maximizes `(B u).p + g.u + u'Hu/2` over `u`: returns `u* = (-H)^{-1}(B'p + g)`
/// and the maximum `(B'p + g)'(-H)^{-1}(B'p + g) / 2`.
pub fn lq_maximize(
    drift_control: &DMatrix<f64>,
    reward_hessian: &DMatrix<f64>,
    reward_linear: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let k = reward_hessian.nrows();
    if reward_hessian.ncols() != k || drift_control.ncols() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: drift_control.ncols(),
        });
    }
    check_dim(k, reward_linear.len())?;
    check_dim(drift_control.nrows(), p.len())?;
    let neg = -reward_hessian;
    let chol = neg
        .cholesky()
        .ok_or_else(|| Error::Config("reward Hessian in the control is not negative definite".into()))?;
    let g = drift_control.transpose() * p + reward_linear;
    let u = chol.solve(&g);
    let value = 0.5 * g.dot(&u);
    Ok((u, value))
}

/// `G = D0 + h max_u (G1(x, D0, D1) + D2_m)` for mode `m` at `x`.
pub fn apply_g(
    spec: &ProblemSpec,
    generators: &GeneratorChoice,
    m: usize,
    x: &DVector<f64>,
    estimates: &DerivativeEstimates,
    h: f64,
) -> Result<f64> {
    let d2 = estimates
        .d2_for(m)
        .ok_or_else(|| Error::Usage(format!("estimates carry no second-order term for mode {m}")))?;
    let state = ModeAtState::new(spec, generators, m, x)?;
    let opt = state.maximize(estimates.d0, &estimates.d1, d2)?;
    Ok(estimates.d0 + h * opt.value)
}

/// `T(phi)(x) = max_m G_m(phi o S_m(x, .))` with increments integrated by
/// `increments` and weight polynomials of order `k`.
pub fn apply_t(
    spec: &ProblemSpec,
    generators: &GeneratorChoice,
    phi: &dyn Fn(&[f64]) -> f64,
    x: &DVector<f64>,
    increments: &IncrementSet,
    k: u32,
) -> Result<f64> {
    let d = spec.dim();
    check_dim(d, x.len())?;
    check_dim(d, increments.dim())?;
    let h = increments.time_step();
    let mut best = f64::NEG_INFINITY;
    for r in 0..generators.retained_count() {
        let generator = generators.generator(r);
        let (sbar, inv) = generator.volatility_with_inverse(x)?;
        let base = x + generator.drift(x) * h;
        let mut y = DVector::zeros(d);
        let values: Vec<f64> = (0..increments.len())
            .map(|j| {
                let w = DVector::from_column_slice(increments.value(j));
                y.copy_from(&(&base + &sbar * w));
                phi(y.as_slice())
            })
            .collect();
        let mut polys = Vec::new();
        for m in generators.class(r) {
            let residual = generators.residual(spec, m, x)?;
            polys.push((m, increments.polynomial(residual.sigma, k)?));
        }
        let est = estimate_from_values(&values, increments, &inv.transpose(), &polys)?;
        for m in generators.class(r) {
            best = best.max(apply_g(spec, generators, m, x, &est, h)?);
        }
    }
    Ok(best)
}

/// Three-point stencil `T phi(x) = w_c phi(x) + w_+ phi(x + nu sqrt h) + w_- phi(x - nu sqrt h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil1d {
    pub center: f64,
    pub plus: f64,
    pub minus: f64,
    pub b: f64,
    /// `b == A11`, i.e. `nu = sqrt(4k + 3)`.
    pub consistent: bool,
    /// All weights nonnegative.
    pub monotone: bool,
}

/// Stencil of the one-dimensional operator under the three-point law:
/// `b = 1 + (A11 - 1)(nu^2 - 1)/(4k + 2)`, `w_+- = b / (2 nu^2)`, `w_c = 1 - b / nu^2`.
pub fn discrete_increment_operator_1d(a11: f64, k: u32, nu: f64) -> Result<Stencil1d> {
    if !(nu > 1.0 && nu.is_finite()) {
        return Err(Error::Usage(format!("nu must exceed 1, got {nu}")));
    }
    if !(a11 >= 1.0 && a11.is_finite()) {
        return Err(Error::Usage(format!("A11 must be at least 1, got {a11}")));
    }
    let nu2 = nu * nu;
    let b = 1.0 + (a11 - 1.0) * (nu2 - 1.0) / (4 * k + 2) as f64;
    let side = b / (2.0 * nu2);
    let center = 1.0 - b / nu2;
    Ok(Stencil1d {
        center,
        plus: side,
        minus: side,
        b,
        consistent: (b - a11).abs() <= 1e-12 * a11,
        monotone: center >= 0.0 && side >= 0.0,
    })
}

/// Nine-point weights `[e1 + 1][e2 + 1]` of the two-dimensional `k = 0`
/// operator on the grid `x + sqrt(3h) (e1, e2)`, `e_i in {-1, 0, 1}`.
pub fn discrete_increment_weights_2d(a: &DMatrix<f64>) -> Result<[[f64; 3]; 3]> {
    if a.shape() != (2, 2) || a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Usage("expected a finite 2 x 2 matrix".into()));
    }
    if (a[(0, 1)] - a[(1, 0)]).abs() > 1e-12 * (1.0 + a.norm()) {
        return Err(Error::Usage("matrix must be symmetric".into()));
    }
    let mut e = a.clone();
    e[(0, 0)] -= 1.0;
    e[(1, 1)] -= 1.0;
    if e.clone().symmetric_eigenvalues().min() < -1e-12 * (1.0 + a.norm()) {
        return Err(Error::Usage("matrix must dominate the identity".into()));
    }
    let tr = e.trace();
    let mut out = [[0.0; 3]; 3];
    for (i1, e1) in [-1.0f64, 0.0, 1.0].into_iter().enumerate() {
        for (i2, e2) in [-1.0f64, 0.0, 1.0].into_iter().enumerate() {
            out[i1][i2] = match (e1 != 0.0, e2 != 0.0) {
                (false, false) => 2.0 / 9.0 * (2.0 - tr),
                (true, false) => (3.0 * e[(0, 0)] + 2.0 - tr) / 18.0,
                (false, true) => (3.0 * e[(1, 1)] + 2.0 - tr) / 18.0,
                (true, true) => {
                    let quad = e[(0, 0)] + e[(1, 1)] + 2.0 * e[(0, 1)] * e1 * e2;
                    (3.0 * quad + 2.0 - tr) / 72.0
                }
            };
        }
    }
    Ok(out)
}
