//! Backward max-plus driver.
//!
//! For each time step, backwards from the horizon:
//! 1. subsample design states and increments from the simulated paths;
//! 2. for every path and retained generator, pick the optimal form of the
//!    next value function at each successor, regress the one-step images
//!    onto quadratic forms (one per mode of the class) and keep the mode
//!    whose form is largest at the path's state;
//! 3. collect the kept forms into the next set.

use std::collections::HashSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::basis::{basis_len, fill_monomials, monomial_names};
use crate::error::{check_dim, Error, Result};
use crate::factorization::GeneratorChoice;
use crate::monotone_poly::{min_k_for_monotonicity, MonotonePolynomial};
use crate::problem::{time_steps, MaxPlusValueFunction, ProblemSpec, QuadraticForm};
use crate::rng::stream_rng;
use crate::scheme::{Estimator, ModeAtState};
use crate::simulation::{simulate, InitialSampler, SamplePaths};

const SUBSAMPLE_TAG: u64 = 0x5eed_5a4d_91e0_0001;
/// Smallest accepted eigenvalue of the normalized normal matrix.
const RANK_TOL: f64 = 1e-12;
const LANES: usize = 8;
/// Basis size for d = 5; larger dimensions use the unblocked path.
const MAX_BASIS: usize = 21;

/// Order of the weight polynomial: fixed, or the least monotone one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KChoice {
    #[default]
    Auto,
    Fixed(u32),
}

impl Serialize for KChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KChoice::Auto => s.serialize_str("auto"),
            KChoice::Fixed(k) => s.serialize_u32(*k),
        }
    }
}

impl<'de> Deserialize<'de> for KChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct KVisitor;
        impl Visitor<'_> for KVisitor {
            type Value = KChoice;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("\"auto\" or a nonnegative integer")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<KChoice, E> {
                if v == "auto" {
                    Ok(KChoice::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<KChoice, E> {
                u32::try_from(v)
                    .map(KChoice::Fixed)
                    .map_err(|_| E::invalid_value(de::Unexpected::Unsigned(v), &self))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<KChoice, E> {
                u32::try_from(v)
                    .map(KChoice::Fixed)
                    .map_err(|_| E::invalid_value(de::Unexpected::Signed(v), &self))
            }
        }
        d.deserialize_any(KVisitor)
    }
}

/// How modes share simulated generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModePolicy {
    /// One generator for all modes; residual factors carry the mode.
    #[default]
    Shared,
    /// One generator per mode with zero residual.
    PerMode,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub h: f64,
    pub k: KChoice,
    pub n_in: usize,
    pub n_x: usize,
    pub n_w: usize,
    pub seed: u64,
    /// Ridge multiplier of `tr(normal matrix) / basis size`.
    pub ridge: f64,
    pub dedup: bool,
    pub initial: InitialSampler,
    pub state_floor: Option<f64>,
    pub estimator: Estimator,
}

impl SolverConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {}", self.h)));
        }
        if self.n_in == 0 || self.n_w == 0 {
            return Err(Error::Config("N_in and N_w must be positive".into()));
        }
        if self.n_x > self.n_in {
            return Err(Error::Config(format!("N_x = {} exceeds N_in = {}", self.n_x, self.n_in)));
        }
        if self.n_x < basis_len(d) {
            return Err(Error::Config(format!(
                "N_x = {} is below the {} quadratic monomials in dimension {d}",
                self.n_x,
                basis_len(d)
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("ridge must be nonnegative, got {}", self.ridge)));
        }
        if let Some(f) = self.state_floor {
            if !f.is_finite() {
                return Err(Error::Config("state floor must be finite".into()));
            }
        }
        if self.initial.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.initial.dim(),
            });
        }
        Ok(())
    }
}

/// Quadratic forms in the monomial basis, stored both monomial-major (for
/// vectorized evaluation of all forms at one point) and form-major.
#[derive(Debug, Clone)]
pub struct FormBank {
    d: usize,
    p: usize,
    n: usize,
    by_monomial: Vec<f64>,
    by_form: Vec<f64>,
}

impl FormBank {
    pub fn new(d: usize, forms: &[QuadraticForm]) -> Result<Self> {
        if forms.is_empty() {
            return Err(Error::Usage("form bank needs at least one form".into()));
        }
        let p = basis_len(d);
        let n = forms.len();
        let mut by_form = Vec::with_capacity(n * p);
        for z in forms {
            check_dim(d, z.dim())?;
            by_form.extend(z.coefficients());
        }
        let mut by_monomial = vec![0.0; n * p];
        for z in 0..n {
            for k in 0..p {
                by_monomial[k * n + z] = by_form[z * p + k];
            }
        }
        Ok(Self {
            d,
            p,
            n,
            by_monomial,
            by_form,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Lowest index maximizing the forms at the point with monomials `mono`.
    #[inline]
    pub fn argmax(&self, mono: &[f64], scratch: &mut Vec<f64>) -> usize {
        let n = self.n;
        scratch.clear();
        scratch.extend_from_slice(&self.by_monomial[..n]);
        for (k, &mk) in mono.iter().enumerate().take(self.p).skip(1) {
            let row = &self.by_monomial[k * n..(k + 1) * n];
            for (s, c) in scratch.iter_mut().zip(row) {
                *s += mk * c;
            }
        }
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (z, &v) in scratch.iter().enumerate() {
            if v > best {
                best = v;
                arg = z;
            }
        }
        arg
    }

    /// `argmax` for many points at once (`monos` holds `p` monomials per
    /// point). Same arithmetic and tie rule, blocked over points.
    pub fn argmax_many(&self, monos: &[f64], out: &mut [usize]) {
        let p = self.p;
        debug_assert_eq!(monos.len(), out.len() * p);
        if p > MAX_BASIS {
            let mut scratch = Vec::with_capacity(self.n);
            for (slot, mono) in out.iter_mut().zip(monos.chunks_exact(p)) {
                *slot = self.argmax(mono, &mut scratch);
            }
            return;
        }
        let mut start = 0;
        while start < out.len() {
            let count = (out.len() - start).min(LANES);
            let mut m = [[0.0; LANES]; MAX_BASIS];
            for l in 0..count {
                for k in 0..p {
                    m[k][l] = monos[(start + l) * p + k];
                }
            }
            let arg = self.block_argmax(&m);
            out[start..start + count].copy_from_slice(&arg[..count]);
            start += count;
        }
    }

    fn block_argmax(&self, m: &[[f64; LANES]; MAX_BASIS]) -> [usize; LANES] {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: the required CPU feature was detected at runtime.
                return unsafe { block_argmax_avx512(&self.by_form, self.p, m) };
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: as above.
                return unsafe { block_argmax_avx2(&self.by_form, self.p, m) };
            }
        }
        block_argmax_generic(&self.by_form, self.p, m)
    }

    /// Value of form `z` at the point with monomials `mono`.
    #[inline]
    pub fn value(&self, z: usize, mono: &[f64]) -> f64 {
        self.by_form[z * self.p..(z + 1) * self.p]
            .iter()
            .zip(mono)
            .map(|(a, b)| a * b)
            .sum()
    }
}

#[inline(always)]
fn block_argmax_generic(by_form: &[f64], p: usize, m: &[[f64; LANES]; MAX_BASIS]) -> [usize; LANES] {
    let mut best = [f64::NEG_INFINITY; LANES];
    let mut arg = [0usize; LANES];
    for (z, c) in by_form.chunks_exact(p).enumerate() {
        let mut v = [c[0]; LANES];
        for k in 1..p {
            let ck = c[k];
            for l in 0..LANES {
                v[l] += m[k][l] * ck;
            }
        }
        for l in 0..LANES {
            if v[l] > best[l] {
                best[l] = v[l];
                arg[l] = z;
            }
        }
    }
    arg
}

// Same arithmetic as the generic kernel (no contraction into fused
// multiply-adds), compiled for wider vectors.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn block_argmax_avx512(by_form: &[f64], p: usize, m: &[[f64; LANES]; MAX_BASIS]) -> [usize; LANES] {
    block_argmax_generic(by_form, p, m)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn block_argmax_avx2(by_form: &[f64], p: usize, m: &[[f64; LANES]; MAX_BASIS]) -> [usize; LANES] {
    block_argmax_generic(by_form, p, m)
}

/// Optimal form index at `S(x_t, W_j)` for every increment (`increments`
/// is `n_w * d`).
pub fn select_optimal_forms(
    bank: &FormBank,
    generators: &GeneratorChoice,
    retained: usize,
    x_t: &[f64],
    increments: &[f64],
    h: f64,
) -> Result<Vec<usize>> {
    let d = bank.dim();
    check_dim(d, x_t.len())?;
    if !increments.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: increments.len() % d,
        });
    }
    let mut out = vec![0; increments.len() / d];
    let mut scratch = Vec::new();
    select_into(bank, generators, retained, x_t, increments, h, &mut out, &mut scratch);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn select_into(
    bank: &FormBank,
    generators: &GeneratorChoice,
    retained: usize,
    x_t: &[f64],
    increments: &[f64],
    h: f64,
    out: &mut [usize],
    scratch: &mut Vec<f64>,
) {
    let d = bank.dim();
    let generator = generators.generator(retained);
    let x = DVector::from_column_slice(x_t);
    let base = &x + generator.drift(&x) * h;
    let sbar = generator.volatility(&x);
    let p = bank.p;
    let mut y = vec![0.0; d];
    scratch.clear();
    scratch.resize(out.len() * p, 0.0);
    for (j, mono) in scratch.chunks_exact_mut(p).enumerate() {
        let w = &increments[j * d..(j + 1) * d];
        for a in 0..d {
            let mut acc = base[a];
            for b in 0..d {
                acc += sbar[(a, b)] * w[b];
            }
            y[a] = acc;
        }
        fill_monomials(&y, mono);
    }
    bank.argmax_many(scratch, out);
}

/// Ridge least-squares operator mapping responses at `states` to
/// coefficients in the quadratic monomial basis. Coordinates are
/// standardized and the normal matrix Jacobi-scaled before the ridge
/// `ridge * tr / p` is added to every non-constant monomial.
pub fn ridge_operator(states: &[Vec<f64>], ridge: f64) -> Result<DMatrix<f64>> {
    let nx = states.len();
    let d = states.first().map(|s| s.len()).ok_or_else(|| Error::Usage("no design states".into()))?;
    let p = basis_len(d);
    let mut mean = vec![0.0; d];
    for s in states {
        check_dim(d, s.len())?;
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / nx as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for s in states {
        for a in 0..d {
            scale[a] += (s[a] - mean[a]).powi(2) / nx as f64;
        }
    }
    for v in scale.iter_mut() {
        *v = if *v > 0.0 { v.sqrt() } else { 1.0 };
    }
    let mut design = DMatrix::zeros(nx, p);
    let mut std_x = vec![0.0; d];
    let mut mono = vec![0.0; p];
    for (i, s) in states.iter().enumerate() {
        for a in 0..d {
            std_x[a] = (s[a] - mean[a]) / scale[a];
        }
        fill_monomials(&std_x, &mut mono);
        for k in 0..p {
            design[(i, k)] = mono[k];
        }
    }
    let normal = design.transpose() * &design;
    let names = monomial_names(d);
    let zero_cols: Vec<String> = (0..p).filter(|&k| !(normal[(k, k)] > 0.0)).map(|k| names[k].clone()).collect();
    if !zero_cols.is_empty() {
        return Err(Error::RankDeficient(zero_cols));
    }
    let jac = DVector::from_iterator(p, (0..p).map(|k| 1.0 / normal[(k, k)].sqrt()));
    let scaled = DMatrix::from_fn(p, p, |a, b| normal[(a, b)] * jac[a] * jac[b]);
    let eig = scaled.clone().symmetric_eigen();
    let (imin, min_eig) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    if !(min_eig >= RANK_TOL) {
        let v = eig.eigenvectors.column(imin);
        let mut involved: Vec<(f64, usize)> = (0..p).filter(|&k| v[k].abs() > 0.2).map(|k| (-v[k].abs(), k)).collect();
        involved.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvector"));
        return Err(Error::RankDeficient(involved.into_iter().map(|(_, k)| names[k].clone()).collect()));
    }
    let lambda = ridge * scaled.trace() / p as f64;
    let mut reg = scaled;
    // The intercept is not shrunk.
    for k in 1..p {
        reg[(k, k)] += lambda;
    }
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::Numerical("regularized normal matrix is not positive definite".into()))?;
    // Standardized coefficients: D (N' + lambda I)^{-1} D A'.
    let rhs = DMatrix::from_fn(p, nx, |k, i| jac[k] * design[(i, k)]);
    let mut solved = chol.solve(&rhs);
    for k in 0..p {
        for i in 0..nx {
            solved[(k, i)] *= jac[k];
        }
    }
    // Map standardized-basis coefficients back to the raw basis.
    let mut back = DMatrix::zeros(p, p);
    let inv_scale = DVector::from_iterator(d, scale.iter().map(|s| 1.0 / s));
    let mu = DVector::from_column_slice(&mean);
    let mut unit = vec![0.0; p];
    for k in 0..p {
        unit.iter_mut().for_each(|v| *v = 0.0);
        unit[k] = 1.0;
        let f = QuadraticForm::from_coefficients(d, &unit)?;
        let q = DMatrix::from_fn(d, d, |a, b| f.q()[(a, b)] * inv_scale[a] * inv_scale[b]);
        let bs = f.b().component_mul(&inv_scale);
        let b = &bs - &q * &mu;
        let c = f.c() - bs.dot(&mu) + 0.5 * mu.dot(&(&q * &mu));
        let raw = QuadraticForm::new(q, b, c)?.coefficients();
        for (r, v) in raw.into_iter().enumerate() {
            back[(r, k)] = v;
        }
    }
    Ok(back * solved)
}

/// Everything of one time step that depends only on the design states and
/// the increment subsample, for one retained generator.
pub struct StepContext {
    d: usize,
    p: usize,
    h: f64,
    nx: usize,
    nw: usize,
    modes: Vec<usize>,
    succ_mono: Vec<f64>,
    dirs: Vec<f64>,
    poly_vals: Vec<f64>,
    estimator: Estimator,
    /// Sample means of `dirs` per state and of `poly_vals` per (mode, state);
    /// zero for the plain estimator.
    dir_mean: Vec<f64>,
    p_mean: Vec<f64>,
    mode_states: Vec<ModeAtState>,
    design_mono: Vec<f64>,
    regression: Option<DMatrix<f64>>,
}

/// Fitted forms of one class and fit diagnostics.
#[derive(Debug, Clone)]
pub struct RegressionOutput {
    pub forms: Vec<(usize, QuadraticForm)>,
    pub min_weight: f64,
    pub negative_weights: usize,
    /// Largest estimator standard error over the design states, combined
    /// with the fit residual.
    pub max_stderr: f64,
    pub max_residual: f64,
}

struct Response {
    value: f64,
    stderr: f64,
    min_weight: f64,
    negative: usize,
}

impl StepContext {
    /// `design` are the regression states; `increments` is `n_w * d`.
    /// Without `ridge`, no regression operator is built.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: &ProblemSpec,
        generators: &GeneratorChoice,
        retained: usize,
        design: &[Vec<f64>],
        increments: &[f64],
        h: f64,
        k: u32,
        estimator: Estimator,
        ridge: Option<f64>,
    ) -> Result<Self> {
        let d = spec.dim();
        let p = basis_len(d);
        let nx = design.len();
        if nx == 0 || increments.is_empty() || !increments.len().is_multiple_of(d) {
            return Err(Error::Usage("step context needs design states and whole increments".into()));
        }
        let nw = increments.len() / d;
        let generator = generators.generator(retained);
        let modes = generators.class(retained);
        let inv_sqrt_h = 1.0 / h.sqrt();
        let mut succ_mono = vec![0.0; nx * nw * p];
        let mut dirs = vec![0.0; nx * nw * d];
        let mut poly_vals = vec![0.0; modes.len() * nx * nw];
        let mut mode_states = Vec::with_capacity(modes.len() * nx);
        let mut design_mono = vec![0.0; nx * p];
        let mut y = vec![0.0; d];
        let mut w_norm = vec![0.0; d];
        for (i, xs) in design.iter().enumerate() {
            check_dim(d, xs.len())?;
            let x = DVector::from_column_slice(xs);
            fill_monomials(xs, &mut design_mono[i * p..(i + 1) * p]);
            let (sbar, inv) = generator.volatility_with_inverse(&x)?;
            let inv_t = inv.transpose();
            let base = &x + generator.drift(&x) * h;
            let mut polys: Vec<MonotonePolynomial> = Vec::with_capacity(modes.len());
            for &m in &modes {
                polys.push(MonotonePolynomial::new(generators.residual(spec, m, &x)?.sigma, k)?);
            }
            for j in 0..nw {
                let w = &increments[j * d..(j + 1) * d];
                for a in 0..d {
                    let mut acc = base[a];
                    let mut dir = 0.0;
                    for b in 0..d {
                        acc += sbar[(a, b)] * w[b];
                        dir += inv_t[(a, b)] * w[b];
                    }
                    y[a] = acc;
                    dirs[(i * nw + j) * d + a] = dir / h;
                    w_norm[a] = w[a] * inv_sqrt_h;
                }
                let off = (i * nw + j) * p;
                fill_monomials(&y, &mut succ_mono[off..off + p]);
                for (q, poly) in polys.iter().enumerate() {
                    poly_vals[(q * nx + i) * nw + j] = poly.value(&w_norm);
                }
            }
        }
        for &m in &modes {
            for xs in design {
                mode_states.push(ModeAtState::new(spec, generators, m, &DVector::from_column_slice(xs))?);
            }
        }
        let mut dir_mean = vec![0.0; nx * d];
        let mut p_mean = vec![0.0; modes.len() * nx];
        if estimator == Estimator::Normalized {
            let inv_nw = 1.0 / nw as f64;
            for i in 0..nx {
                for j in 0..nw {
                    for a in 0..d {
                        dir_mean[i * d + a] += dirs[(i * nw + j) * d + a] * inv_nw;
                    }
                }
            }
            for (qi, m) in p_mean.iter_mut().enumerate() {
                *m = poly_vals[qi * nw..(qi + 1) * nw].iter().sum::<f64>() * inv_nw;
                if 1.0 + *m <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "normalized estimator undefined: sample mean of the weight polynomial is {m:.3e}"
                    )));
                }
            }
        }
        let regression = match ridge {
            Some(r) => Some(ridge_operator(design, r)?),
            None => None,
        };
        Ok(Self {
            d,
            p,
            h,
            nx,
            nw,
            modes,
            succ_mono,
            dirs,
            poly_vals,
            estimator,
            dir_mean,
            p_mean,
            mode_states,
            design_mono,
            regression,
        })
    }

    pub fn modes(&self) -> &[usize] {
        &self.modes
    }

    /// One-step image at design state `i` for class position `q`, given
    /// the successor values `phi`.
    fn response(&self, phi: &[f64], i: usize, q: usize) -> Result<Response> {
        let (d, nw, h) = (self.d, self.nw, self.h);
        let weight = 1.0 / nw as f64;
        let dirs = &self.dirs[i * nw * d..(i + 1) * nw * d];
        let pv = &self.poly_vals[(q * self.nx + i) * nw..(q * self.nx + i + 1) * nw];
        let dbar = &self.dir_mean[i * d..(i + 1) * d];
        let pbar = self.p_mean[q * self.nx + i];
        // Per-increment weight of the second-order term; 1 + P for plain.
        let pscale = match self.estimator {
            Estimator::Plain => 1.0,
            Estimator::Normalized => 1.0 / (1.0 + pbar),
        };
        let mut d0 = 0.0;
        let mut d1 = DVector::zeros(d);
        let mut d2 = 0.0;
        for j in 0..nw {
            d0 += phi[j];
            for a in 0..d {
                d1[a] += phi[j] * (dirs[j * d + a] - dbar[a]);
            }
            d2 += phi[j] * (pv[j] - pbar);
        }
        d0 *= weight;
        d1 *= weight;
        d2 *= weight * pscale / h;
        let state = &self.mode_states[q * self.nx + i];
        let opt = state.maximize(d0, &d1, d2)?;
        let value = d0 + h * opt.value;
        // Per-increment weights of the linearized estimator.
        let lin_weight = |j: usize| {
            let mut lin = 0.0;
            for a in 0..d {
                lin += opt.drift_gap[a] * (dirs[j * d + a] - dbar[a]);
            }
            1.0 + (pv[j] - pbar) * pscale - h * state.discount + h * lin
        };
        let mut min_weight = f64::INFINITY;
        let mut negative = 0;
        let mut wsum = 0.0;
        let mut wphi = 0.0;
        for (j, &f) in phi.iter().enumerate() {
            let wj = lin_weight(j);
            min_weight = min_weight.min(wj);
            if wj < 0.0 {
                negative += 1;
            }
            wsum += wj;
            wphi += wj * f;
        }
        // The normalized weights have a fixed sum, so only the spread of
        // phi around its weighted mean contributes sampling error.
        let center = match self.estimator {
            Estimator::Plain => 0.0,
            Estimator::Normalized if wsum > 0.0 => wphi / wsum,
            Estimator::Normalized => 0.0,
        };
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for (j, &f) in phi.iter().enumerate() {
            let c = (f - center) * lin_weight(j);
            sum += c;
            sum_sq += c * c;
        }
        let mean = sum * weight;
        let var = if nw > 1 {
            ((sum_sq - nw as f64 * mean * mean) / (nw - 1) as f64).max(0.0)
        } else {
            0.0
        };
        Ok(Response {
            value,
            stderr: (var / nw as f64).sqrt(),
            min_weight,
            negative,
        })
    }

    fn successor_values(&self, bank: &FormBank, zbar: &[usize], i: usize, out: &mut [f64]) {
        let p = self.p;
        for (j, o) in out.iter_mut().enumerate() {
            let off = (i * self.nw + j) * p;
            *o = bank.value(zbar[j], &self.succ_mono[off..off + p]);
        }
    }

    /// Fits one quadratic form per mode of the class to the one-step images
    /// at the design states, using the form selection `zbar` (length `n_w`).
    pub fn regress(&self, bank: &FormBank, zbar: &[usize]) -> Result<RegressionOutput> {
        check_dim(self.nw, zbar.len())?;
        let regression = self
            .regression
            .as_ref()
            .ok_or_else(|| Error::Usage("step context was built without a regression operator".into()))?;
        let mut phi = vec![0.0; self.nw];
        let nq = self.modes.len();
        let mut y = vec![DVector::zeros(self.nx); nq];
        let mut se = vec![vec![0.0; self.nx]; nq];
        let mut out = RegressionOutput {
            forms: Vec::with_capacity(nq),
            min_weight: f64::INFINITY,
            negative_weights: 0,
            max_stderr: 0.0,
            max_residual: 0.0,
        };
        for i in 0..self.nx {
            self.successor_values(bank, zbar, i, &mut phi);
            for q in 0..nq {
                let r = self.response(&phi, i, q)?;
                y[q][i] = r.value;
                se[q][i] = r.stderr;
                out.min_weight = out.min_weight.min(r.min_weight);
                out.negative_weights += r.negative;
            }
        }
        for q in 0..nq {
            let beta = regression * &y[q];
            let mut ss = 0.0;
            for (yi, mono) in y[q].iter().zip(self.design_mono.chunks_exact(self.p)) {
                let fit: f64 = beta.iter().zip(mono).map(|(a, b)| a * b).sum();
                ss += (yi - fit).powi(2);
            }
            let rms = (ss / self.nx as f64).sqrt();
            out.max_residual = out.max_residual.max(rms);
            for s in &se[q] {
                out.max_stderr = out.max_stderr.max((s * s + rms * rms).sqrt());
            }
            if beta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("regression produced non-finite coefficients".into()));
            }
            out.forms.push((self.modes[q], QuadraticForm::from_coefficients(self.d, beta.as_slice())?));
        }
        Ok(out)
    }

    /// Best one-step image over the class at design state `i` and the
    /// standard error of its estimator.
    fn best_response(&self, bank: &FormBank, zbar: &[usize], i: usize) -> Result<(f64, f64)> {
        let mut phi = vec![0.0; self.nw];
        self.successor_values(bank, zbar, i, &mut phi);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for q in 0..self.modes.len() {
            let r = self.response(&phi, i, q)?;
            if r.value > best.0 {
                best = (r.value, r.stderr);
            }
        }
        Ok(best)
    }
}

/// Per-step solver diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    pub forms: usize,
    pub min_weight: f64,
    pub negative_weights: usize,
    pub max_residual: f64,
    pub max_stderr: f64,
    pub select_seconds: f64,
    pub wall_seconds: f64,
    #[serde(skip)]
    pub design: Vec<usize>,
    #[serde(skip)]
    pub increments: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub value_function: MaxPlusValueFunction,
    /// Indexed by step; the horizon has no entry.
    pub diagnostics: Vec<StepDiagnostics>,
    pub k: u32,
    pub abar: f64,
    pub estimator: Estimator,
    pub paths: SamplePaths,
}

impl Solution {
    /// Largest combined regression standard error over all steps.
    pub fn max_stderr(&self) -> f64 {
        self.diagnostics.iter().map(|s| s.max_stderr).fold(0.0, f64::max)
    }

    pub fn min_weight(&self) -> f64 {
        self.diagnostics.iter().map(|s| s.min_weight).fold(f64::INFINITY, f64::min)
    }

    pub fn negative_weights(&self) -> usize {
        self.diagnostics.iter().map(|s| s.negative_weights).sum()
    }

    /// Number of (step, path, generator) states at which the value lies
    /// outside `[lo - tol, hi + tol]`, and the number checked.
    pub fn count_out_of_range(&self, lo: f64, hi: f64, tol: f64) -> Result<(usize, usize)> {
        let vf = &self.value_function;
        let mut bad = 0;
        let mut checked = 0;
        for step in 0..=vf.steps() {
            let bank = FormBank::new(vf.dim(), vf.forms(step))?;
            let mut scratch = Vec::new();
            let mut mono = vec![0.0; basis_len(vf.dim())];
            for r in 0..self.paths.retained_count() {
                for omega in 0..self.paths.n_in() {
                    fill_monomials(self.paths.state(r, step, omega), &mut mono);
                    let z = bank.argmax(&mono, &mut scratch);
                    let v = bank.value(z, &mono);
                    checked += 1;
                    if !(v >= lo - tol && v <= hi + tol) {
                        bad += 1;
                    }
                }
            }
        }
        Ok((bad, checked))
    }

    /// One-step estimate at `x` for grid step `step` (using that step's
    /// increment subsample and the next value function) and the standard
    /// error of the estimator.
    pub fn one_step_report(
        &self,
        spec: &ProblemSpec,
        generators: &GeneratorChoice,
        step: usize,
        x: &[f64],
    ) -> Result<(f64, f64)> {
        let diag = self
            .diagnostics
            .get(step)
            .ok_or_else(|| Error::Usage(format!("no solver step {step}")))?;
        let d = spec.dim();
        check_dim(d, x.len())?;
        let h = self.paths.time_step();
        let increments = gather_increments(&self.paths, step, &diag.increments);
        let vf = &self.value_function;
        let bank = FormBank::new(d, vf.forms(step + 1))?;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for r in 0..generators.retained_count() {
            let ctx = StepContext::new(spec, generators, r, &[x.to_vec()], &increments, h, self.k, self.estimator, None)?;
            let zbar = select_optimal_forms(&bank, generators, r, x, &increments, h)?;
            let v = ctx.best_response(&bank, &zbar, 0)?;
            if v.0 > best.0 {
                best = v;
            }
        }
        Ok(best)
    }
}

fn gather_increments(paths: &SamplePaths, step: usize, indices: &[usize]) -> Vec<f64> {
    indices.iter().flat_map(|&o| paths.increment(step, o).iter().copied()).collect()
}

/// `k` actually used, together with the largest residual trace.
pub fn resolve_k(
    spec: &ProblemSpec,
    generators: &GeneratorChoice,
    paths: &SamplePaths,
    choice: KChoice,
) -> Result<(u32, f64)> {
    let abar = match generators.constant_residuals() {
        Some(res) => res.iter().map(|r| r.abar).fold(0.0, f64::max),
        None => {
            let mut worst: f64 = 0.0;
            for m in 0..generators.mode_count() {
                let r = generators.projection(m);
                for step in 0..paths.steps() {
                    for omega in 0..paths.n_in() {
                        let x = DVector::from_column_slice(paths.state(r, step, omega));
                        worst = worst.max(generators.residual(spec, m, &x)?.abar);
                    }
                }
            }
            worst
        }
    };
    let k = match choice {
        KChoice::Auto => min_k_for_monotonicity(abar)?,
        KChoice::Fixed(k) => k,
    };
    Ok((k, abar))
}

/// Runs the backward scheme from the terminal forms.
pub fn backward_solve(
    spec: &ProblemSpec,
    generators: &GeneratorChoice,
    config: &SolverConfig,
    terminal: Vec<QuadraticForm>,
) -> Result<Solution> {
    backward_solve_with_progress(spec, generators, config, terminal, &mut |_| {})
}

pub fn backward_solve_with_progress(
    spec: &ProblemSpec,
    generators: &GeneratorChoice,
    config: &SolverConfig,
    terminal: Vec<QuadraticForm>,
    progress: &mut dyn FnMut(&StepDiagnostics),
) -> Result<Solution> {
    let d = spec.dim();
    config.validate(d)?;
    if generators.mode_count() != spec.mode_count() {
        return Err(Error::Config(format!(
            "generator projection covers {} modes, problem has {}",
            generators.mode_count(),
            spec.mode_count()
        )));
    }
    let steps = time_steps(spec.horizon(), config.h)?;
    let retained = generators.retained_count();
    let bound = retained * config.n_in;
    if terminal.is_empty() || terminal.len() > bound {
        return Err(Error::Config(format!(
            "terminal set has {} forms; need between 1 and |retained modes| * N_in = {bound}",
            terminal.len()
        )));
    }
    for z in &terminal {
        check_dim(d, z.dim())?;
    }
    let paths = simulate(spec, generators, config.h, config.n_in, config.seed, &config.initial, config.state_floor)?;
    let (k, abar) = resolve_k(spec, generators, &paths, config.k)?;

    let mut sets: Vec<Vec<QuadraticForm>> = vec![Vec::new(); steps + 1];
    sets[steps] = terminal;
    let mut diagnostics: Vec<Option<StepDiagnostics>> = vec![None; steps];
    for step in (0..steps).rev() {
        let started = Instant::now();
        let (forms, mut diag) = solve_step(spec, generators, config, &paths, k, step, &sets[step + 1])
            .map_err(|e| Error::Step {
                step,
                source: Box::new(e),
            })?;
        diag.wall_seconds = started.elapsed().as_secs_f64();
        progress(&diag);
        sets[step] = forms;
        diagnostics[step] = Some(diag);
    }
    let value_function = MaxPlusValueFunction::new(d, config.h, spec.horizon(), sets)?;
    Ok(Solution {
        value_function,
        diagnostics: diagnostics.into_iter().map(|d| d.expect("every step solved")).collect(),
        k,
        abar,
        estimator: config.estimator,
        paths,
    })
}

struct PathOutcome {
    form: QuadraticForm,
    min_weight: f64,
    negative: usize,
    max_stderr: f64,
    max_residual: f64,
    select_seconds: f64,
}

fn solve_step(
    spec: &ProblemSpec,
    generators: &GeneratorChoice,
    config: &SolverConfig,
    paths: &SamplePaths,
    k: u32,
    step: usize,
    next: &[QuadraticForm],
) -> Result<(Vec<QuadraticForm>, StepDiagnostics)> {
    let d = spec.dim();
    let n_in = config.n_in;
    let mut rng = stream_rng(config.seed ^ SUBSAMPLE_TAG, step as u64, 0);
    let design: Vec<usize> = (0..config.n_x).map(|_| rng.random_range(0..n_in)).collect();
    let incr_idx: Vec<usize> = (0..config.n_w).map(|_| rng.random_range(0..n_in)).collect();
    let increments = gather_increments(paths, step, &incr_idx);
    let bank = FormBank::new(d, next)?;
    let retained = generators.retained_count();

    let mut per_generator: Vec<Vec<PathOutcome>> = Vec::with_capacity(retained);
    for r in 0..retained {
        let states: Vec<Vec<f64>> = design.iter().map(|&o| paths.state(r, step, o).to_vec()).collect();
        let ctx = StepContext::new(
            spec,
            generators,
            r,
            &states,
            &increments,
            config.h,
            k,
            config.estimator,
            Some(config.ridge),
        )?;
        let outcomes = (0..n_in)
            .into_par_iter()
            .map_init(
                || (vec![0usize; config.n_w], Vec::new()),
                |(zbar, scratch), omega| -> Result<PathOutcome> {
                    let x_t = paths.state(r, step, omega);
                    let t0 = Instant::now();
                    select_into(&bank, generators, r, x_t, &increments, config.h, zbar, scratch);
                    let select_seconds = t0.elapsed().as_secs_f64();
                    let fit = ctx.regress(&bank, zbar)?;
                    let mut best: Option<(f64, QuadraticForm)> = None;
                    for (_, form) in fit.forms {
                        let v = form.value(x_t);
                        if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                            best = Some((v, form));
                        }
                    }
                    let (_, form) = best.expect("nonempty mode class");
                    // Estimator error where this path's form is used.
                    let own = StepContext::new(
                        spec,
                        generators,
                        r,
                        &[x_t.to_vec()],
                        &increments,
                        config.h,
                        k,
                        config.estimator,
                        None,
                    )?;
                    let (_, se) = own.best_response(&bank, zbar, 0)?;
                    Ok(PathOutcome {
                        form,
                        min_weight: fit.min_weight,
                        negative: fit.negative_weights,
                        max_stderr: (se * se + fit.max_residual * fit.max_residual).sqrt(),
                        max_residual: fit.max_residual,
                        select_seconds,
                    })
                },
            )
            .collect::<Result<Vec<_>>>()?;
        per_generator.push(outcomes);
    }

    let mut forms = Vec::with_capacity(n_in * retained);
    let mut seen = HashSet::new();
    let mut diag = StepDiagnostics {
        step,
        t: step as f64 * config.h,
        forms: 0,
        min_weight: f64::INFINITY,
        negative_weights: 0,
        max_residual: 0.0,
        max_stderr: 0.0,
        select_seconds: 0.0,
        wall_seconds: 0.0,
        design,
        increments: incr_idx,
    };
    for omega in 0..n_in {
        for outcomes in &per_generator {
            let o = &outcomes[omega];
            diag.min_weight = diag.min_weight.min(o.min_weight);
            diag.negative_weights += o.negative;
            diag.max_residual = diag.max_residual.max(o.max_residual);
            diag.max_stderr = diag.max_stderr.max(o.max_stderr);
            diag.select_seconds += o.select_seconds;
            if !config.dedup || seen.insert(o.form.bit_key()) {
                forms.push(o.form.clone());
            }
        }
    }
    diag.forms = forms.len();
    Ok((forms, diag))
}

/// `max_{z in Z_t} q(x, z)`; `t` must lie on the solver grid.
pub fn value_eval(vf: &MaxPlusValueFunction, t: f64, x: &[f64]) -> Result<f64> {
    vf.eval(t, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::build_uncertain_correlation_generator;
    use crate::problem::ModeCoefficients;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn form(q: &[f64], b: &[f64], c: f64) -> QuadraticForm {
        let d = b.len();
        QuadraticForm::new(DMatrix::from_row_slice(d, d, q), DVector::from_column_slice(b), c).unwrap()
    }

    #[test]
    fn k_choice_serde() {
        assert_eq!(serde_json::from_str::<KChoice>("\"auto\"").unwrap(), KChoice::Auto);
        assert_eq!(serde_json::from_str::<KChoice>("3").unwrap(), KChoice::Fixed(3));
        assert!(serde_json::from_str::<KChoice>("-1").is_err());
        assert!(serde_json::from_str::<KChoice>("\"two\"").is_err());
        assert_eq!(serde_json::to_string(&KChoice::Fixed(2)).unwrap(), "2");
    }

    #[test]
    fn bank_matches_direct_evaluation() {
        let forms = vec![
            form(&[1.0, 0.2, 0.2, -3.0], &[0.5, 1.0], 2.0),
            form(&[-1.0, 0.0, 0.0, -1.0], &[0.0, 0.0], 4.0),
            form(&[-1.0, 0.0, 0.0, -1.0], &[0.0, 0.0], 4.0),
        ];
        let bank = FormBank::new(2, &forms).unwrap();
        let mut mono = vec![0.0; 6];
        let mut scratch = Vec::new();
        for x in [[0.0, 0.0], [3.0, 0.1], [-2.0, 1.5]] {
            fill_monomials(&x, &mut mono);
            let (v, idx) = crate::problem::sup_eval(&forms, &x).unwrap();
            assert_eq!(bank.argmax(&mono, &mut scratch), idx);
            assert_abs_diff_eq!(bank.value(idx, &mono), v, epsilon = 1e-12);
        }
        // Tie between identical forms resolves to the lower index.
        fill_monomials(&[0.0, 0.0], &mut mono);
        assert_eq!(bank.argmax(&mono, &mut scratch), 1);
    }

    #[test]
    fn blocked_argmax_matches_single() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for d in [1usize, 2, 5, 6] {
            let p = basis_len(d);
            let mut forms: Vec<QuadraticForm> = (0..37)
                .map(|_| {
                    let w: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
                    QuadraticForm::from_coefficients(d, &w).unwrap()
                })
                .collect();
            forms.push(forms[5].clone());
            let bank = FormBank::new(d, &forms).unwrap();
            let n = 21;
            let mut monos = vec![0.0; n * p];
            for (i, m) in monos.chunks_exact_mut(p).enumerate() {
                let x: Vec<f64> = (0..d).map(|_| if i == 0 { 0.0 } else { rng.random_range(-3.0..3.0) }).collect();
                fill_monomials(&x, m);
            }
            let mut out = vec![0; n];
            bank.argmax_many(&monos, &mut out);
            let mut scratch = Vec::new();
            for (i, m) in monos.chunks_exact(p).enumerate() {
                assert_eq!(out[i], bank.argmax(m, &mut scratch), "d={d} i={i}");
            }
        }
    }

    #[test]
    fn selection_examples() {
        let g = build_uncertain_correlation_generator(&[0.4, 0.3], &[DMatrix::identity(2, 2)]).unwrap();
        let single = FormBank::new(2, &[form(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 0.0)]).unwrap();
        let incs = vec![0.1, 0.0, 0.0, 0.0, -0.2, 0.3];
        assert_eq!(select_optimal_forms(&single, &g, 0, &[50.0, 50.0], &incs, 0.01).unwrap(), vec![0, 0, 0]);
        // x1 - x2 vs its negation: switches where the successor spread changes sign.
        let pair = FormBank::new(
            2,
            &[form(&[0.0; 4], &[1.0, -1.0], 0.0), form(&[0.0; 4], &[-1.0, 1.0], 0.0)],
        )
        .unwrap();
        let sel = select_optimal_forms(&pair, &g, 0, &[50.0, 50.0], &[0.1, 0.0, -0.1, 0.0, 0.0, 0.0], 0.01).unwrap();
        assert_eq!(sel, vec![0, 1, 0]);
    }

    #[test]
    fn ridge_operator_interpolates_and_reports_rank() {
        let states: Vec<Vec<f64>> = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.5], [0.3, 2.0]]
            .iter()
            .map(|s| s.to_vec())
            .collect();
        let target = form(&[1.0, -0.5, -0.5, 2.0], &[0.3, -0.7], 1.5);
        let y = DVector::from_iterator(6, states.iter().map(|s| target.value(s)));
        let beta = ridge_operator(&states, 0.0).unwrap() * y;
        let fitted = QuadraticForm::from_coefficients(2, beta.as_slice()).unwrap();
        for s in &states {
            assert_abs_diff_eq!(fitted.value(s), target.value(s), epsilon = 1e-9);
        }
        let line: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        assert!(matches!(ridge_operator(&line, 1e-8), Err(Error::RankDeficient(_))));
    }

    fn heat_problem(horizon: f64) -> (ProblemSpec, GeneratorChoice) {
        let vols = [0.4, 0.3];
        let mode = ModeCoefficients {
            name: "independent".into(),
            drift: Arc::new(|x, _| DVector::zeros(x.len())),
            volatility: Arc::new(move |x, _| {
                DMatrix::from_diagonal(&DVector::from_iterator(2, x.iter().zip(vols).map(|(x, s)| x * s)))
            }),
            discount: Arc::new(|_, _| 0.0),
            reward: Arc::new(|_, _| 0.0),
        };
        let spec = ProblemSpec::new(2, horizon, vec![mode], Arc::new(|_| 0.0)).unwrap();
        let g = build_uncertain_correlation_generator(&vols, &[DMatrix::identity(2, 2)]).unwrap();
        (spec, g)
    }

    fn config(n_in: usize) -> SolverConfig {
        SolverConfig {
            h: 0.01,
            k: KChoice::Auto,
            n_in,
            n_x: 10,
            n_w: 50,
            seed: 5,
            ridge: 1e-8,
            dedup: true,
            initial: InitialSampler::uniform(vec![50.0, 50.0], 10.0),
            state_floor: None,
            estimator: Estimator::Normalized,
        }
    }

    #[test]
    fn constant_terminal_one_step() {
        let (spec, g) = heat_problem(0.01);
        let mut cfg = config(40);
        cfg.dedup = false;
        let sol = backward_solve(&spec, &g, &cfg, vec![QuadraticForm::constant(2, 3.0)]).unwrap();
        let z0 = sol.value_function.forms(0);
        assert_eq!(z0.len(), 40);
        for z in z0 {
            assert_abs_diff_eq!(z.value(&[50.0, 50.0]), 3.0, epsilon = 1e-9);
            assert_abs_diff_eq!(z.value(&[70.0, 20.0]), 3.0, epsilon = 1e-7);
        }
        cfg.dedup = true;
        let sol = backward_solve(&spec, &g, &cfg, vec![QuadraticForm::constant(2, 3.0)]).unwrap();
        assert!(sol.value_function.forms(0).len() <= 40);
        assert_eq!(sol.k, 0);
        assert_eq!(sol.diagnostics.len(), 1);
    }

    #[test]
    fn exact_quadratic_image() {
        // Heat step of a quadratic is quadratic in x: with quadrature-free
        // Monte Carlo the regression must still interpolate it exactly.
        let (spec, g) = heat_problem(0.01);
        let mut cfg = config(30);
        cfg.ridge = 0.0;
        let terminal = form(&[0.02, 0.01, 0.01, -0.03], &[0.5, -0.2], 1.0);
        let sol = backward_solve(&spec, &g, &cfg, vec![terminal]).unwrap();
        assert!(sol.diagnostics[0].max_residual <= 1e-9, "{}", sol.diagnostics[0].max_residual);
    }

    #[test]
    fn terminal_bound_enforced() {
        let (spec, g) = heat_problem(0.01);
        let cfg = config(12);
        let many = vec![QuadraticForm::constant(2, 0.0); 13];
        assert!(matches!(backward_solve(&spec, &g, &cfg, many), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_reruns() {
        let (spec, g) = heat_problem(0.03);
        let cfg = config(30);
        let t = vec![form(&[0.0; 4], &[1.0, -1.0], 0.0), QuadraticForm::constant(2, 0.0)];
        let a = backward_solve(&spec, &g, &cfg, t.clone()).unwrap();
        let b = backward_solve(&spec, &g, &cfg, t).unwrap();
        for s in 0..=3 {
            assert_eq!(a.value_function.forms(s), b.value_function.forms(s));
        }
        assert!(value_eval(&a.value_function, 0.015, &[50.0, 50.0]).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let (spec, g) = heat_problem(0.01);
        let mut cfg = config(30);
        cfg.n_x = 5;
        assert!(matches!(backward_solve(&spec, &g, &cfg, vec![QuadraticForm::constant(2, 0.0)]), Err(Error::Config(_))));
        let mut cfg = config(8);
        cfg.n_x = 10;
        assert!(backward_solve(&spec, &g, &cfg, vec![QuadraticForm::constant(2, 0.0)]).is_err());
    }
}
