//! Monotone second-derivative weight polynomial
//!
//! `P(w) = c_k sum_j |S_j|^2 (u_j . w)^{4k+2} - K`, with `u_j` the unit
//! direction of column `j` of `S`, `c_k = 1 / (E N^{4k+4} - E N^{4k+2})`
//! and `K = tr(S S') / (4k+2)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::rng::{stream_rng, StandardNormals};

/// `E[N^{2m}] = (2m-1)!!` for a standard normal `N`.
pub fn normal_even_moment(m: u32) -> Result<f64> {
    if m > 15 {
        return Err(Error::Usage(format!("normal moment of order {} out of range", 2 * m)));
    }
    Ok((1..m).fold(1.0, |acc, i| acc * (2 * i + 1) as f64))
}

#[derive(Debug, Clone)]
pub struct MonotonePolynomial {
    sigma: DMatrix<f64>,
    k: u32,
    c_k: f64,
    big_k: f64,
    col_norms: Vec<f64>,
    // Unit column directions, column-major d x l.
    directions: Vec<f64>,
}

impl MonotonePolynomial {
    /// Builds the polynomial with the Gaussian normalization.
    pub fn new(sigma: DMatrix<f64>, k: u32) -> Result<Self> {
        let moment = normal_even_moment(2 * k + 1)?;
        // E N^{4k+4} - E N^{4k+2} = (4k+2) E N^{4k+2}
        Self::with_moment(sigma, k, moment)
    }

    /// Builds the polynomial normalized against an increment law whose
    /// `(4k+2)`-th moment along every column direction is `moment`.
    pub fn with_moment(sigma: DMatrix<f64>, k: u32, moment: f64) -> Result<Self> {
        if k > 6 {
            return Err(Error::Usage(format!("k = {k} is out of the supported range 0..=6")));
        }
        if !(moment > 0.0 && moment.is_finite()) {
            return Err(Error::Usage(format!("invalid increment moment {moment}")));
        }
        let (d, l) = sigma.shape();
        let mut col_norms = Vec::with_capacity(l);
        let mut directions = Vec::with_capacity(d * l);
        for j in 0..l {
            let col = sigma.column(j);
            let n = col.norm();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Usage(format!(
                    "column {j} of the residual factor is zero or non-finite; \
                     drop zero columns with cholesky_drop_zero_columns first"
                )));
            }
            col_norms.push(n);
            directions.extend(col.iter().map(|v| v / n));
        }
        let degree = (4 * k + 2) as f64;
        let trace: f64 = col_norms.iter().map(|n| n * n).sum();
        Ok(Self {
            sigma,
            k,
            c_k: 1.0 / (degree * moment),
            big_k: trace / degree,
            col_norms,
            directions,
        })
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn c_k(&self) -> f64 {
        self.c_k
    }

    /// The constant `K = tr(S S') / (4k+2)`.
    pub fn big_k(&self) -> f64 {
        self.big_k
    }

    /// `tr(S S')`.
    pub fn abar(&self) -> f64 {
        self.col_norms.iter().map(|n| n * n).sum()
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn rank(&self) -> usize {
        self.col_norms.len()
    }

    /// Unchecked evaluation.
    #[inline]
    pub fn value(&self, w: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for (j, n) in self.col_norms.iter().enumerate() {
            let u = &self.directions[j * d..(j + 1) * d];
            let proj: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
            acc += n * n * pow_odd_half(proj * proj, self.k);
        }
        self.c_k * acc - self.big_k
    }

    pub fn eval(&self, w: &[f64]) -> Result<f64> {
        check_dim(self.dim(), w.len())?;
        Ok(self.value(w))
    }
}

/// `s^{2k+1}` by repeated squaring.
#[inline]
fn pow_odd_half(s: f64, k: u32) -> f64 {
    let mut result = s;
    let mut base = s * s;
    let mut e = k;
    while e > 0 {
        if e & 1 == 1 {
            result *= base;
        }
        base *= base;
        e >>= 1;
    }
    result
}

/// Smallest `k` with `abar < 4k + 2`.
pub fn min_k_for_monotonicity(abar: f64) -> Result<u32> {
    if !(abar >= 0.0 && abar.is_finite()) {
        return Err(Error::Usage(format!("invalid trace bound {abar}")));
    }
    let mut k = 0u32;
    while abar >= (4 * k + 2) as f64 {
        k += 1;
    }
    Ok(k)
}

/// `1 + sqrt(h) drift_gap.(sigma_inv_t w) - h delta + P(w)`.
pub fn one_step_weight(
    p: &MonotonePolynomial,
    drift_gap: &DVector<f64>,
    sigma_inv_t: &DMatrix<f64>,
    delta: f64,
    h: f64,
    w: &[f64],
) -> Result<f64> {
    check_dim(p.dim(), w.len())?;
    check_dim(p.dim(), drift_gap.len())?;
    let wv = DVector::from_column_slice(w);
    let dir = sigma_inv_t * wv;
    Ok(1.0 + h.sqrt() * drift_gap.dot(&dir) - h * delta + p.value(w))
}

/// Summary of a sampled weight check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightProbe {
    pub mean_p: f64,
    pub stderr_p: f64,
    pub min_weight: f64,
}

/// Samples `n` standard normal `w` and reports the sample mean of `P` and
/// the minimum one-step weight.
pub fn probe_weights(
    p: &MonotonePolynomial,
    drift_gap: &DVector<f64>,
    sigma_inv_t: &DMatrix<f64>,
    delta: f64,
    h: f64,
    n: usize,
    seed: u64,
) -> Result<WeightProbe> {
    let d = p.dim();
    check_dim(d, drift_gap.len())?;
    if n == 0 {
        return Err(Error::Usage("probe needs at least one sample".into()));
    }
    let gap_dir = sigma_inv_t.transpose() * drift_gap;
    let mut normals = StandardNormals::new(stream_rng(seed, 0, 0));
    let mut w = vec![0.0; d];
    let (mut sum, mut sum_sq, mut min_w) = (0.0, 0.0, f64::INFINITY);
    for _ in 0..n {
        normals.fill(&mut w);
        let pw = p.value(&w);
        sum += pw;
        sum_sq += pw * pw;
        let lin: f64 = gap_dir.iter().zip(&w).map(|(a, b)| a * b).sum();
        min_w = min_w.min(1.0 + h.sqrt() * lin - h * delta + pw);
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0).max(1.0)).max(0.0);
    Ok(WeightProbe {
        mean_p: mean,
        stderr_p: (var / nf).sqrt(),
        min_weight: min_w,
    })
}

/// Empirical monotonicity threshold: the largest `h` in `(0, h_max]` (by
/// bisection) for which all sampled one-step weights are nonnegative.
/// `None` when even `h -> 0` fails.
pub fn probe_h0(
    p: &MonotonePolynomial,
    drift_gap: &DVector<f64>,
    sigma_inv_t: &DMatrix<f64>,
    delta: f64,
    h_max: f64,
    n: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let d = p.dim();
    let gap_dir = sigma_inv_t.transpose() * drift_gap;
    let mut normals = StandardNormals::new(stream_rng(seed, 0, 0));
    let mut samples = Vec::with_capacity(n);
    let mut w = vec![0.0; d];
    for _ in 0..n {
        normals.fill(&mut w);
        let lin: f64 = gap_dir.iter().zip(&w).map(|(a, b)| a * b).sum();
        samples.push((p.value(&w), lin));
    }
    let ok = |h: f64| samples.iter().all(|(pw, lin)| 1.0 + h.sqrt() * lin - h * delta + pw >= 0.0);
    if !ok(0.0) {
        return Ok(None);
    }
    if ok(h_max) {
        return Ok(Some(h_max));
    }
    let (mut lo, mut hi) = (0.0, h_max);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}
