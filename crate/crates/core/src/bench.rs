//! Uncertain-correlation option benchmark: problem builders, the
//! singleton-correlation oracle, the dimension-5 lower bound and the
//! experiment runner with its file formats.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::factorization::{build_per_mode_correlation_generators, build_uncertain_correlation_generator, GeneratorChoice};
use crate::problem::{
    approximate_scalar_payoff, call_spread, lift_payoff, time_steps, MaxPlusValueFunction, ModeCoefficients, ProblemSpec,
    QuadraticForm,
};
use crate::quadrature::normal_rule;
use crate::scheme::Estimator;
use crate::simulation::InitialSampler;
use crate::solver::{backward_solve_with_progress, KChoice, ModePolicy, Solution, SolverConfig, StepDiagnostics};

pub const DEFAULT_VOLS_D2: [f64; 2] = [0.4, 0.3];
pub const DEFAULT_VOLS_D5: [f64; 5] = [0.4, 0.3, 0.2, 0.3, 0.4];

/// Reporting slice: `base` with coordinate `sweep_coordinate` shifted by
/// each of `points` equally spaced offsets in `[sweep_min, sweep_max]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceConfig {
    pub t: f64,
    pub base: Option<Vec<f64>>,
    pub sweep_coordinate: usize,
    pub sweep_min: f64,
    pub sweep_max: f64,
    pub points: usize,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            t: 0.0,
            base: None,
            sweep_coordinate: 0,
            sweep_min: -50.0,
            sweep_max: 50.0,
            points: 101,
        }
    }
}

impl SliceConfig {
    pub fn offsets(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.sweep_min];
        }
        let step = (self.sweep_max - self.sweep_min) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.sweep_min + step * i as f64).collect()
    }

    pub fn base(&self, d: usize) -> Vec<f64> {
        self.base.clone().unwrap_or_else(|| vec![50.0; d])
    }

    pub fn point(&self, d: usize, offset: f64) -> Vec<f64> {
        let mut x = self.base(d);
        x[self.sweep_coordinate] += offset;
        x
    }
}

/// Quadrature controls of the singleton oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub tolerance: f64,
    pub start_nodes: usize,
    pub max_nodes: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            start_nodes: 8,
            max_nodes: 4096,
        }
    }
}

/// Sample sizes of the two-dimensional pair problems behind the
/// dimension-5 lower bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowerBoundConfig {
    pub n_in: usize,
    pub n_x: usize,
    pub n_w: usize,
}

impl Default for LowerBoundConfig {
    fn default() -> Self {
        Self {
            n_in: 1000,
            n_x: 10,
            n_w: 1000,
        }
    }
}

/// Half-width of the initial box: one value for every coordinate or one
/// per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HalfWidth {
    Uniform(f64),
    PerCoordinate(Vec<f64>),
}

impl HalfWidth {
    pub fn per_coordinate(&self, d: usize) -> Vec<f64> {
        match self {
            HalfWidth::Uniform(w) => vec![*w; d],
            HalfWidth::PerCoordinate(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub d: usize,
    /// Defaults to (0.4, 0.3) for d = 2 and (0.4, 0.3, 0.2, 0.3, 0.4) for d = 5.
    pub volatilities: Option<Vec<f64>>,
    pub rho: f64,
    pub k1: f64,
    pub k2: f64,
    pub horizon: f64,
    pub h: f64,
    pub k: KChoice,
    /// Defaults: 2000 for d = 2, 3000 otherwise.
    pub n_in: Option<usize>,
    /// Defaults: 10 for d = 2, 50 otherwise.
    pub n_x: Option<usize>,
    pub n_w: usize,
    pub seed: u64,
    pub ridge: f64,
    pub dedup: bool,
    pub mode_policy: ModePolicy,
    pub payoff_radius: f64,
    pub payoff_eps: f64,
    /// Initial states are uniform on the box `center +- half_width`.
    /// Defaults: center 50 in every coordinate; half-width covering the
    /// slice sweep on the sweep coordinate and 10 elsewhere.
    pub initial_center: Option<Vec<f64>>,
    pub initial_half_width: Option<HalfWidth>,
    pub state_floor: Option<f64>,
    pub estimator: Estimator,
    pub slice: SliceConfig,
    pub oracle: OracleSettings,
    pub lower_bound: Option<LowerBoundConfig>,
    pub output_dir: Option<PathBuf>,
    pub write_value_function: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            d: 2,
            volatilities: None,
            rho: 0.8,
            k1: -5.0,
            k2: 5.0,
            horizon: 0.25,
            h: 0.01,
            k: KChoice::Auto,
            n_in: None,
            n_x: None,
            n_w: 1000,
            seed: 1,
            ridge: 1e-8,
            dedup: true,
            mode_policy: ModePolicy::Shared,
            payoff_radius: 1000.0,
            payoff_eps: 0.05,
            initial_center: None,
            initial_half_width: None,
            state_floor: None,
            estimator: Estimator::Normalized,
            slice: SliceConfig::default(),
            oracle: OracleSettings::default(),
            lower_bound: None,
            output_dir: None,
            write_value_function: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn volatilities(&self) -> Vec<f64> {
        match (&self.volatilities, self.d) {
            (Some(v), _) => v.clone(),
            (None, 2) => DEFAULT_VOLS_D2.to_vec(),
            (None, 5) => DEFAULT_VOLS_D5.to_vec(),
            (None, d) => vec![0.3; d],
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in.unwrap_or(if self.d == 2 { 2000 } else { 3000 })
    }

    pub fn n_x(&self) -> usize {
        self.n_x.unwrap_or(if self.d == 2 { 10 } else { 50 })
    }

    pub fn initial_half_widths(&self) -> Vec<f64> {
        match &self.initial_half_width {
            Some(w) => w.per_coordinate(self.d),
            None => {
                let mut w = vec![10.0; self.d];
                if self.slice.sweep_coordinate < self.d {
                    w[self.slice.sweep_coordinate] = self.slice.sweep_min.abs().max(self.slice.sweep_max.abs()).max(10.0);
                }
                w
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(2..=64).contains(&self.d) {
            return cfg(format!("d must lie in 2..=64, got {}", self.d));
        }
        let vols = self.volatilities();
        if vols.len() != self.d || vols.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return cfg(format!("need {} positive volatilities", self.d));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return cfg(format!("correlation bound rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.k1 < self.k2) || !self.k1.is_finite() || !self.k2.is_finite() {
            return cfg("strikes must satisfy K1 < K2".into());
        }
        if !(self.payoff_radius > self.k1.abs().max(self.k2.abs())) || !self.payoff_radius.is_finite() {
            return cfg("payoff radius must exceed |K1| and |K2|".into());
        }
        if !(self.payoff_eps > 0.0) {
            return cfg("payoff_eps must be positive".into());
        }
        if !(self.horizon > 0.0) {
            return cfg("horizon must be positive".into());
        }
        time_steps(self.horizon, self.h).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(c) = &self.initial_center {
            if c.len() != self.d {
                return cfg(format!("initial_center needs {} coordinates", self.d));
            }
        }
        let widths = self.initial_half_widths();
        if widths.len() != self.d || widths.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return cfg(format!("initial_half_width needs {} nonnegative values", self.d));
        }
        let s = &self.slice;
        if s.sweep_coordinate >= self.d || s.points == 0 || !(s.sweep_min <= s.sweep_max) {
            return cfg("slice needs a valid sweep coordinate, a nonempty range and at least one point".into());
        }
        if let Some(b) = &s.base {
            if b.len() != self.d {
                return cfg(format!("slice base needs {} coordinates", self.d));
            }
        }
        if !(s.t >= 0.0 && s.t < self.horizon) {
            return cfg("slice time must lie in [0, T)".into());
        }
        let o = &self.oracle;
        if !(o.tolerance > 0.0) || o.start_nodes == 0 || o.start_nodes > o.max_nodes {
            return cfg("oracle needs a positive tolerance and 0 < start_nodes <= max_nodes".into());
        }
        if self.lower_bound.is_some() && self.d != 5 {
            return cfg("lower bound is defined for d = 5 only".into());
        }
        self.solver_config().validate(self.d)
    }

    pub fn solver_config(&self) -> SolverConfig {
        let center = self.initial_center.clone().unwrap_or_else(|| vec![50.0; self.d]);
        SolverConfig {
            h: self.h,
            k: self.k,
            n_in: self.n_in(),
            n_x: self.n_x(),
            n_w: self.n_w,
            seed: self.seed,
            ridge: self.ridge,
            dedup: self.dedup,
            initial: InitialSampler::uniform_box(center, self.initial_half_widths()),
            state_floor: self.state_floor,
            estimator: self.estimator,
        }
    }
}

fn correlation_pairs(d: usize) -> Result<Vec<(usize, usize)>> {
    match d {
        2 => Ok(vec![(0, 1)]),
        5 => Ok(vec![(0, 1), (3, 4)]),
        _ => Err(Error::Config(format!(
            "no shipped correlation set for d = {d}; use build_block_correlation_modes"
        ))),
    }
}

/// Every sign pattern of `+-rho` on the given disjoint coordinate pairs,
/// identity elsewhere. Patterns are ordered with `+` before `-`, first pair
/// most significant.
pub fn build_block_correlation_modes(d: usize, pairs: &[(usize, usize)], rho: f64) -> Result<Vec<DMatrix<f64>>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("invalid correlation {rho}: need 0 <= rho < 1")));
    }
    let mut used = vec![false; d];
    for &(i, j) in pairs {
        if i >= d || j >= d || i == j || used[i] || used[j] {
            return Err(Error::Config(format!("correlation pairs must be disjoint indices below {d}")));
        }
        used[i] = true;
        used[j] = true;
    }
    if pairs.len() > 16 {
        return Err(Error::Config("at most 16 correlated pairs".into()));
    }
    let count = 1usize << pairs.len();
    Ok((0..count)
        .map(|pattern| {
            let mut m = DMatrix::identity(d, d);
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let negative = (pattern >> (pairs.len() - 1 - p)) & 1 == 1;
                let v = if negative { -rho } else { rho };
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
            m
        })
        .collect())
}

/// Correlation sets of the benchmark: `m12 = +-rho` for d = 2 and
/// `m12 = +-rho, m45 = +-rho` for d = 5.
pub fn build_correlation_modes(d: usize, rho: f64) -> Result<Vec<DMatrix<f64>>> {
    build_block_correlation_modes(d, &correlation_pairs(d)?, rho)
}

/// Coordinates entering `max` and `min` of the payoff spread (0-based).
pub fn payoff_indices(d: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..d).step_by(2).collect(), (1..d).step_by(2).collect())
}

/// `dxi = diag(sigma_i xi_i) sqrt(m) dW` for each correlation matrix `m`,
/// no drift, discount or running reward; payoff
/// `psi1(max_{i odd} x_i - min_{j even} x_j)`.
pub fn uncertain_correlation_problem(
    vols: &[f64],
    modes: &[DMatrix<f64>],
    k1: f64,
    k2: f64,
    horizon: f64,
) -> Result<ProblemSpec> {
    let d = vols.len();
    let vols = Arc::new(vols.to_vec());
    let mut coefficients = Vec::with_capacity(modes.len());
    for (n, m) in modes.iter().enumerate() {
        if m.nrows() != d || m.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: m.nrows(),
            });
        }
        let root = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config(format!("correlation matrix {n} is not positive definite")))?
            .l();
        let vols = Arc::clone(&vols);
        let name = (0..d)
            .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
            .filter(|&(i, j)| m[(i, j)] != 0.0)
            .map(|(i, j)| format!("m{}{}={}", i + 1, j + 1, m[(i, j)]))
            .collect::<Vec<_>>()
            .join(",");
        coefficients.push(ModeCoefficients {
            name: if name.is_empty() { "independent".into() } else { name },
            drift: Arc::new(|x, _| DVector::zeros(x.len())),
            volatility: Arc::new(move |x, _| {
                let diag = DVector::from_iterator(x.len(), vols.iter().zip(x.iter()).map(|(s, xi)| s * xi));
                DMatrix::from_diagonal(&diag) * &root
            }),
            discount: Arc::new(|_, _| 0.0),
            reward: Arc::new(|_, _| 0.0),
        });
    }
    let (odd, even) = payoff_indices(d);
    let payoff = Arc::new(move |x: &DVector<f64>| {
        let hi = odd.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
        let lo = even.iter().map(|&j| x[j]).fold(f64::INFINITY, f64::min);
        call_spread(hi - lo, k1, k2)
    });
    ProblemSpec::new(d, horizon, coefficients, payoff)
}

/// Lifted terminal forms and the number of scalar forms behind them.
pub fn terminal_forms(d: usize, k1: f64, k2: f64, radius: f64, eps: f64) -> Result<(Vec<QuadraticForm>, usize)> {
    let scalar = approximate_scalar_payoff(k1, k2, radius, eps)?;
    let (odd, even) = payoff_indices(d);
    Ok((lift_payoff(&scalar, &odd, &even, d)?, scalar.len()))
}

pub fn build_generators(vols: &[f64], modes: &[DMatrix<f64>], policy: ModePolicy) -> Result<GeneratorChoice> {
    match policy {
        ModePolicy::Shared => build_uncertain_correlation_generator(vols, modes),
        ModePolicy::PerMode => build_per_mode_correlation_generators(vols, modes),
    }
}

// ---------------------------------------------------------------------------
// Singleton-correlation oracle

/// Two-asset lognormal model with a fixed correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingletonMarket {
    pub volatilities: [f64; 2],
    pub correlation: f64,
    pub k1: f64,
    pub k2: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleValue {
    pub value: f64,
    pub nodes: usize,
    pub last_change: f64,
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `E (F e^{v N - v^2/2} - K)^+`.
fn black_call(forward: f64, strike: f64, v: f64) -> f64 {
    if strike <= 0.0 {
        return forward - strike;
    }
    if v <= 0.0 || forward <= 0.0 {
        return (forward - strike).max(0.0);
    }
    let d1 = ((forward / strike).ln() + 0.5 * v * v) / v;
    forward * normal_cdf(d1) - strike * normal_cdf(d1 - v)
}

fn validate_market(m: &SingletonMarket, x: &[f64; 2], t: f64) -> Result<f64> {
    if !(m.correlation > -1.0 && m.correlation < 1.0) {
        return Err(Error::Config(format!("correlation must lie in (-1, 1), got {}", m.correlation)));
    }
    if m.volatilities.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Config("volatilities and prices must be finite and nonnegative".into()));
    }
    if !(m.k1 < m.k2) {
        return Err(Error::Config("strikes must satisfy K1 < K2".into()));
    }
    let tau = m.horizon - t;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("oracle time {t} must precede the horizon {}", m.horizon)));
    }
    Ok(tau)
}

/// `E psi1(xi_1,T - xi_2,T)` given `xi_t = x`. The second asset's normal is
/// integrated by Gauss-Hermite; conditionally on it the first asset is
/// lognormal and the call spread has a closed form. The node count doubles
/// until successive values differ by less than the tolerance.
pub fn oracle_singleton_price(market: &SingletonMarket, x: [f64; 2], t: f64, settings: &OracleSettings) -> Result<OracleValue> {
    let tau = validate_market(market, &x, t)?;
    let [s1, s2] = market.volatilities;
    let rho = market.correlation;
    let sqrt_tau = tau.sqrt();
    let v = s1 * (tau * (1.0 - rho * rho)).sqrt();
    let integrate = |n: usize| -> Result<f64> {
        let (nodes, weights) = normal_rule(n)?;
        Ok(nodes
            .iter()
            .zip(&weights)
            .map(|(&z, &w)| {
                let y2 = x[1] * (-0.5 * s2 * s2 * tau + s2 * sqrt_tau * z).exp();
                let f1 = x[0] * (-0.5 * s1 * s1 * tau * rho * rho + s1 * sqrt_tau * rho * z).exp();
                w * (black_call(f1, y2 + market.k1, v) - black_call(f1, y2 + market.k2, v))
            })
            .sum())
    };
    let mut n = settings.start_nodes.max(1);
    let mut prev = integrate(n)?;
    let mut last_change = f64::INFINITY;
    while n * 2 <= settings.max_nodes {
        n *= 2;
        let cur = integrate(n)?;
        last_change = (cur - prev).abs();
        if last_change < settings.tolerance {
            return Ok(OracleValue {
                value: cur,
                nodes: n,
                last_change,
            });
        }
        prev = cur;
    }
    Err(Error::QuadratureNonConvergence {
        max_nodes: settings.max_nodes,
        last_change,
    })
}

/// Plain tensor Gauss-Hermite estimate with `n` nodes per axis, used to
/// cross-check the conditional oracle.
pub fn oracle_tensor_gh(market: &SingletonMarket, x: [f64; 2], t: f64, n: usize) -> Result<f64> {
    let tau = validate_market(market, &x, t)?;
    let (nodes, weights) = normal_rule(n)?;
    let [s1, s2] = market.volatilities;
    let rho = market.correlation;
    let c = (1.0 - rho * rho).sqrt();
    let mut total = 0.0;
    for (&z1, &w1) in nodes.iter().zip(&weights) {
        for (&z2, &w2) in nodes.iter().zip(&weights) {
            let n1 = rho * z2 + c * z1;
            let y1 = x[0] * (-0.5 * s1 * s1 * tau + s1 * tau.sqrt() * n1).exp();
            let y2 = x[1] * (-0.5 * s2 * s2 * tau + s2 * tau.sqrt() * z2).exp();
            total += w1 * w2 * call_spread(y1 - y2, market.k1, market.k2);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OraclePoint {
    pub x_sweep: f64,
    pub value: f64,
    pub nodes: usize,
    pub last_change: f64,
}

/// Machine-generated oracle values on a reporting slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleFile {
    pub method: String,
    pub market: SingletonMarket,
    pub t: f64,
    pub base: Vec<f64>,
    pub sweep_coordinate: usize,
    pub settings: OracleSettings,
    pub points: Vec<OraclePoint>,
}

impl OracleFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| Error::Decode(format!("invalid oracle file: {e}")))?;
        if file.base.len() != 2 || file.sweep_coordinate > 1 {
            return Err(Error::Decode("oracle file must describe a two-dimensional slice".into()));
        }
        if file.points.iter().any(|p| !(p.x_sweep.is_finite() && p.value.is_finite())) {
            return Err(Error::Decode("oracle values must be finite".into()));
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Oracle on the configured slice for the singleton model `m12 = rho`.
pub fn oracle_for_config(cfg: &ExperimentConfig) -> Result<OracleFile> {
    cfg.validate()?;
    if cfg.d != 2 {
        return Err(Error::Config("the oracle covers d = 2 only".into()));
    }
    let vols = cfg.volatilities();
    let market = SingletonMarket {
        volatilities: [vols[0], vols[1]],
        correlation: cfg.rho,
        k1: cfg.k1,
        k2: cfg.k2,
        horizon: cfg.horizon,
    };
    let mut points = Vec::with_capacity(cfg.slice.points);
    for s in cfg.slice.offsets() {
        let x = cfg.slice.point(2, s);
        let v = oracle_singleton_price(&market, [x[0], x[1]], cfg.slice.t, &cfg.oracle)?;
        points.push(OraclePoint {
            x_sweep: s,
            value: v.value,
            nodes: v.nodes,
            last_change: v.last_change,
        });
    }
    Ok(OracleFile {
        method: "conditional lognormal call spread, Gauss-Hermite over the second asset, doubling".into(),
        market,
        t: cfg.slice.t,
        base: cfg.slice.base(2),
        sweep_coordinate: cfg.slice.sweep_coordinate,
        settings: cfg.oracle,
        points,
    })
}

// ---------------------------------------------------------------------------
// Dimension-5 lower bound

/// A solved two-dimensional problem applied to coordinates `(i, j)`.
pub struct PairValue<'a> {
    pub i: usize,
    pub j: usize,
    pub value_function: &'a MaxPlusValueFunction,
}

/// `max_{(i, j)} v2_ij(t, (x_i, x_j))` over odd `i` and even `j`
/// (1-based parity, 0-based indices), with the maximizing pair.
pub fn lower_bound_dim5(pairs: &[PairValue], t: f64, x: &[f64]) -> Result<(f64, (usize, usize))> {
    let (odd, even) = payoff_indices(5);
    if x.len() != 5 {
        return Err(Error::DimensionMismatch { expected: 5, got: x.len() });
    }
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for &i in &odd {
        for &j in &even {
            let pair = pairs
                .iter()
                .find(|p| p.i == i && p.j == j)
                .ok_or_else(|| Error::Config(format!("missing pair solution for coordinates ({}, {})", i + 1, j + 1)))?;
            let v = pair.value_function.eval(t, &[x[i], x[j]])?;
            if v > best.0 {
                best = (v, (i, j));
            }
        }
    }
    Ok(best)
}

/// Solves the two-dimensional problem of every (odd, even) coordinate pair:
/// volatilities `(sigma_i, sigma_j)` and correlation `+-rho` when the pair
/// is coupled in the d = 5 set, zero otherwise. Identical pair problems are
/// solved once.
pub fn solve_pair_problems(cfg: &ExperimentConfig, lb: &LowerBoundConfig) -> Result<Vec<(usize, usize, Arc<Solution>)>> {
    let vols = cfg.volatilities();
    let coupled = correlation_pairs(5)?;
    let (odd, even) = payoff_indices(5);
    let mut cache: HashMap<(u64, u64, bool), Arc<Solution>> = HashMap::new();
    let mut out = Vec::new();
    for &i in &odd {
        for &j in &even {
            let is_coupled = coupled.iter().any(|&(a, b)| (a, b) == (i.min(j), i.max(j)));
            let key = (vols[i].to_bits(), vols[j].to_bits(), is_coupled);
            let solution = match cache.get(&key) {
                Some(s) => Arc::clone(s),
                None => {
                    let mut pair_cfg = cfg.clone();
                    pair_cfg.d = 2;
                    pair_cfg.volatilities = Some(vec![vols[i], vols[j]]);
                    pair_cfg.rho = if is_coupled { cfg.rho } else { 0.0 };
                    pair_cfg.n_in = Some(lb.n_in);
                    pair_cfg.n_x = Some(lb.n_x);
                    pair_cfg.n_w = lb.n_w;
                    pair_cfg.initial_center = cfg.initial_center.as_ref().map(|c| vec![c[i], c[j]]);
                    let widths = cfg.initial_half_widths();
                    pair_cfg.initial_half_width = Some(HalfWidth::PerCoordinate(vec![widths[i], widths[j]]));
                    pair_cfg.slice.base = None;
                    pair_cfg.slice.sweep_coordinate = 0;
                    pair_cfg.lower_bound = None;
                    let (spec, gens, terminal, _) = build_problem(&pair_cfg)?;
                    let s = Arc::new(backward_solve_with_progress(&spec, &gens, &pair_cfg.solver_config(), terminal, &mut |_| {})?);
                    cache.insert(key, Arc::clone(&s));
                    s
                }
            };
            out.push((i, j, solution));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Experiment runner

/// Problem, generators, terminal forms and scalar form count for a config.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<(ProblemSpec, GeneratorChoice, Vec<QuadraticForm>, usize)> {
    let vols = cfg.volatilities();
    let modes = build_correlation_modes(cfg.d, cfg.rho)?;
    let spec = uncertain_correlation_problem(&vols, &modes, cfg.k1, cfg.k2, cfg.horizon)?;
    let gens = build_generators(&vols, &modes, cfg.mode_policy)?;
    let (terminal, scalar) = terminal_forms(cfg.d, cfg.k1, cfg.k2, cfg.payoff_radius, cfg.payoff_eps)?;
    let bound = gens.retained_count() * cfg.n_in();
    if terminal.len() > bound {
        return Err(Error::Config(format!(
            "{} terminal forms exceed |retained modes| * N_in = {bound}; raise payoff_eps or N_in",
            terminal.len()
        )));
    }
    Ok((spec, gens, terminal, scalar))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub t: f64,
    pub x_sweep: f64,
    pub value: f64,
    pub stderr_proxy: f64,
}

pub const CSV_HEADER: [&str; 4] = ["t", "x_sweep", "value", "stderr_proxy"];

pub fn write_slice_csv<W: Write>(rows: &[SliceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([r.t, r.x_sweep, r.value, r.stderr_proxy].map(|v| format!("{v:.16e}")))
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_slice_csv(bytes: &[u8]) -> Result<Vec<SliceRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| Error::Decode(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Decode(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Decode(e.to_string())))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowerBoundSummary {
    pub pair_tolerance: f64,
    pub max_abs_gap: f64,
    pub max_gap: f64,
    pub min_gap: f64,
    pub gap_tolerance: f64,
    pub within_tolerance: bool,
    /// Per slice point: bound value and maximizing 1-based pair.
    pub bound: Vec<(f64, f64, (usize, usize))>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub config: ExperimentConfig,
    pub d: usize,
    pub modes: usize,
    pub retained_modes: usize,
    pub steps: usize,
    pub k: u32,
    pub abar: f64,
    pub payoff_eps: f64,
    pub scalar_payoff_forms: usize,
    pub terminal_forms: usize,
    pub form_bound: usize,
    pub forms_per_step: Vec<usize>,
    pub max_forms: usize,
    pub min_weight: f64,
    pub negative_weights: usize,
    pub max_stderr: f64,
    pub stability_tolerance: f64,
    pub stability_violations: usize,
    pub stability_checked: usize,
    pub slice_bound_violations: usize,
    pub slice_shape_violations: usize,
    pub floored_states: usize,
    pub solve_seconds: f64,
    pub select_seconds: f64,
    pub total_seconds: f64,
    pub step_diagnostics: Vec<StepDiagnostics>,
    pub lower_bound: Option<LowerBoundSummary>,
}

pub struct RunReport {
    pub rows: Vec<SliceRow>,
    pub summary: RunSummary,
    pub solution: Solution,
}

/// Solves the configured problem and evaluates the reporting slice. The
/// standard-error proxy at a slice point combines the one-step estimator's
/// standard error there with the step's regression residual and scales by
/// the square root of the remaining number of steps.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&StepDiagnostics)) -> Result<RunReport> {
    let started = Instant::now();
    cfg.validate()?;
    let (spec, gens, terminal, scalar_forms) = build_problem(cfg)?;
    let terminal_count = terminal.len();
    let solver_cfg = cfg.solver_config();
    let solve_started = Instant::now();
    let solution = backward_solve_with_progress(&spec, &gens, &solver_cfg, terminal, progress)?;
    let solve_seconds = solve_started.elapsed().as_secs_f64();
    let vf = &solution.value_function;
    let step = vf.step_index(cfg.slice.t)?;
    let remaining = (vf.steps() - step) as f64;
    let rms = solution.diagnostics[step].max_residual;

    let mut rows = Vec::with_capacity(cfg.slice.points);
    for s in cfg.slice.offsets() {
        let x = cfg.slice.point(cfg.d, s);
        let value = vf.value_at_step(step, &x)?;
        let se = match solution.one_step_report(&spec, &gens, step, &x) {
            Ok((_, se)) => se,
            // Degenerate diffusion at the point (a zero price): no gradient
            // estimate is formed, only the regression residual remains.
            Err(Error::IllConditioned(_)) => 0.0,
            Err(e) => return Err(e),
        };
        rows.push(SliceRow {
            t: cfg.slice.t,
            x_sweep: s,
            value,
            stderr_proxy: (se * se + rms * rms).sqrt() * remaining.sqrt(),
        });
    }

    let plateau = cfg.k2 - cfg.k1;
    let tol = 10.0 * solution.max_stderr();
    let (stability_violations, stability_checked) = solution.count_out_of_range(0.0, plateau, tol)?;
    let slice_bound_violations = rows.iter().filter(|r| !(r.value >= -tol && r.value <= plateau + tol)).count();
    let slice_shape_violations = rows
        .windows(2)
        .filter(|w| w[1].value < w[0].value - 2.0 * w[0].stderr_proxy.max(w[1].stderr_proxy))
        .count();

    let lower_bound = match &cfg.lower_bound {
        None => None,
        Some(lb) => {
            let pairs = solve_pair_problems(cfg, lb)?;
            let pair_tol = pairs
                .iter()
                .map(|(_, _, s)| 10.0 * s.max_stderr())
                .fold(0.0, f64::max);
            let views: Vec<PairValue> = pairs
                .iter()
                .map(|(i, j, s)| PairValue {
                    i: *i,
                    j: *j,
                    value_function: &s.value_function,
                })
                .collect();
            let mut bound = Vec::with_capacity(rows.len());
            let (mut max_gap, mut min_gap) = (f64::NEG_INFINITY, f64::INFINITY);
            for r in &rows {
                let x = cfg.slice.point(cfg.d, r.x_sweep);
                let (b, (i, j)) = lower_bound_dim5(&views, cfg.slice.t, &x)?;
                let gap = b - r.value;
                max_gap = max_gap.max(gap);
                min_gap = min_gap.min(gap);
                bound.push((r.x_sweep, b, (i + 1, j + 1)));
            }
            let gap_tolerance = tol + pair_tol;
            let max_abs_gap = max_gap.abs().max(min_gap.abs());
            Some(LowerBoundSummary {
                pair_tolerance: pair_tol,
                max_abs_gap,
                max_gap,
                min_gap,
                gap_tolerance,
                within_tolerance: max_gap <= gap_tolerance,
                bound,
            })
        }
    };

    let forms_per_step: Vec<usize> = (0..=vf.steps()).map(|s| vf.forms(s).len()).collect();
    let summary = RunSummary {
        name: cfg.name.clone(),
        config: cfg.clone(),
        d: cfg.d,
        modes: spec.mode_count(),
        retained_modes: gens.retained_count(),
        steps: vf.steps(),
        k: solution.k,
        abar: solution.abar,
        payoff_eps: cfg.payoff_eps,
        scalar_payoff_forms: scalar_forms,
        terminal_forms: terminal_count,
        form_bound: gens.retained_count() * cfg.n_in(),
        max_forms: forms_per_step.iter().copied().max().unwrap_or(0),
        forms_per_step,
        min_weight: solution.min_weight(),
        negative_weights: solution.negative_weights(),
        max_stderr: solution.max_stderr(),
        stability_tolerance: tol,
        stability_violations,
        stability_checked,
        slice_bound_violations,
        slice_shape_violations,
        floored_states: solution.paths.floored_count(),
        solve_seconds,
        select_seconds: solution.diagnostics.iter().map(|d| d.select_seconds).sum(),
        total_seconds: started.elapsed().as_secs_f64(),
        step_diagnostics: solution.diagnostics.clone(),
        lower_bound,
    };
    Ok(RunReport { rows, summary, solution })
}

pub const SLICE_FILE: &str = "slice.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const VALUE_FUNCTION_FILE: &str = "value_function.json";

/// Writes the slice CSV, the JSON summary and optionally the value-function
/// dump into `dir`.
pub fn write_report(report: &RunReport, dir: &Path, with_value_function: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_slice_csv(&report.rows, fs::File::create(dir.join(SLICE_FILE))?)?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&report.summary)?)?;
    if with_value_function {
        fs::write(dir.join(VALUE_FUNCTION_FILE), report.solution.value_function.to_json()?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparePoint {
    pub x_sweep: f64,
    pub value: f64,
    pub oracle: f64,
    pub gap: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub points: Vec<ComparePoint>,
    pub max_gap: f64,
    pub max_gap_at: f64,
    pub max_stderr_proxy: f64,
    pub failures: usize,
    pub pass: bool,
}

/// Gap between a slice and the oracle; each point passes when its gap is at
/// most `max(floor, factor * stderr_proxy)`.
pub fn compare_with_oracle(rows: &[SliceRow], oracle: &OracleFile, floor: f64, factor: f64) -> Result<CompareReport> {
    if rows.len() != oracle.points.len() {
        return Err(Error::Decode(format!(
            "slice has {} points, oracle has {}",
            rows.len(),
            oracle.points.len()
        )));
    }
    let mut points = Vec::with_capacity(rows.len());
    for (r, o) in rows.iter().zip(&oracle.points) {
        if (r.x_sweep - o.x_sweep).abs() > 1e-9 * (1.0 + o.x_sweep.abs()) || (r.t - oracle.t).abs() > 1e-12 {
            return Err(Error::Decode(format!(
                "slice point (t={}, x_sweep={}) does not match oracle point (t={}, x_sweep={})",
                r.t, r.x_sweep, oracle.t, o.x_sweep
            )));
        }
        points.push(ComparePoint {
            x_sweep: r.x_sweep,
            value: r.value,
            oracle: o.value,
            gap: (r.value - o.value).abs(),
            tolerance: floor.max(factor * r.stderr_proxy),
        });
    }
    let (max_gap, max_gap_at) = points
        .iter()
        .map(|p| (p.gap, p.x_sweep))
        .fold((0.0, f64::NAN), |acc, v| if v.0 > acc.0 || acc.1.is_nan() { v } else { acc });
    let failures = points.iter().filter(|p| !(p.gap <= p.tolerance)).count();
    Ok(CompareReport {
        max_stderr_proxy: rows.iter().map(|r| r.stderr_proxy).fold(0.0, f64::max),
        max_gap,
        max_gap_at,
        failures,
        pass: failures == 0,
        points,
    })
}

/// Parses a square matrix written as rows separated by `;` and entries by
/// `,`, e.g. `"2,0.5;0.5,1.5"`.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::Config(format!("invalid matrix entry {v:?}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 || n > 64 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("matrix {text:?} is not square")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}
