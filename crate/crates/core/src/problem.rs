//! Control-problem data model, quadratic forms and their max-plus
//! combinations, and the terminal payoff approximation.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::basis_len;
use crate::error::{check_dim, Error, Result};

/// Vector-valued coefficient `(x, u) -> R^n`.
pub type VectorField = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
/// Matrix-valued coefficient `(x, u) -> R^{d x d}`.
pub type MatrixField = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// Scalar coefficient `(x, u) -> R`.
pub type ScalarField = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
/// State-only vector map `x -> R^n`.
pub type StateVectorMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

pub type StateScalarMap = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// `q(x) = 1/2 x'Qx + b.x + c` with symmetric `Q`.
#[derive(Clone, PartialEq)]
pub struct QuadraticForm {
    q: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

impl fmt::Debug for QuadraticForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuadraticForm")
            .field("q", &self.q.as_slice())
            .field("b", &self.b.as_slice())
            .field("c", &self.c)
            .finish()
    }
}

const SYMMETRY_TOL: f64 = 1e-12;

impl QuadraticForm {
    /// Builds a form, symmetrizing `q`. Inputs whose asymmetry exceeds
    /// `1e-12` relative to `|q|` are rejected.
    pub fn new(q: DMatrix<f64>, b: DVector<f64>, c: f64) -> Result<Self> {
        let d = b.len();
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: q.nrows().max(q.ncols()),
            });
        }
        if !c.is_finite() || q.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("quadratic form has non-finite entries".into()));
        }
        let scale = q.norm().max(f64::MIN_POSITIVE);
        let asym = (&q - q.transpose()).norm();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::Config(format!(
                "quadratic form matrix is not symmetric (relative asymmetry {:.3e})",
                asym / scale
            )));
        }
        let q = (&q + q.transpose()) * 0.5;
        Ok(Self { q, b, c })
    }

    pub fn constant(d: usize, c: f64) -> Self {
        Self {
            q: DMatrix::zeros(d, d),
            b: DVector::zeros(d),
            c,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// Evaluates the form without checking dimensions.
    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        let mut quad = 0.0;
        for j in 0..d {
            let col = self.q.column(j);
            let mut acc = 0.0;
            for i in 0..d {
                acc += col[i] * x[i];
            }
            quad += acc * x[j];
        }
        let lin: f64 = self.b.iter().zip(x).map(|(b, x)| b * x).sum();
        0.5 * quad + lin + self.c
    }

    /// Coefficients in the quadratic monomial basis (see [`crate::basis`]).
    pub fn coefficients(&self) -> Vec<f64> {
        let d = self.dim();
        let mut w = Vec::with_capacity(basis_len(d));
        w.push(self.c);
        w.extend(self.b.iter().copied());
        for a in 0..d {
            for b in a..d {
                if a == b {
                    w.push(0.5 * self.q[(a, a)]);
                } else {
                    w.push(self.q[(a, b)]);
                }
            }
        }
        w
    }

    /// Inverse of [`QuadraticForm::coefficients`].
    pub fn from_coefficients(d: usize, w: &[f64]) -> Result<Self> {
        check_dim(basis_len(d), w.len())?;
        let mut q = DMatrix::zeros(d, d);
        let b = DVector::from_column_slice(&w[1..=d]);
        let mut idx = d + 1;
        for a in 0..d {
            for bb in a..d {
                if a == bb {
                    q[(a, a)] = 2.0 * w[idx];
                } else {
                    q[(a, bb)] = w[idx];
                    q[(bb, a)] = w[idx];
                }
                idx += 1;
            }
        }
        Self::new(q, b, w[0])
    }

    /// Adds a constant to the form.
    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            q: self.q.clone(),
            b: self.b.clone(),
            c: self.c + delta,
        }
    }

    /// Bit pattern of all parameters; equal keys mean identical forms.
    pub(crate) fn bit_key(&self) -> Vec<u64> {
        self.q
            .iter()
            .chain(self.b.iter())
            .chain(std::iter::once(&self.c))
            .map(|v| v.to_bits())
            .collect()
    }
}

/// Checked evaluation of `q(x, z)`.
pub fn eval_quad(z: &QuadraticForm, x: &[f64]) -> Result<f64> {
    check_dim(z.dim(), x.len())?;
    Ok(z.value(x))
}

/// `max_z q(x, z)` and the lowest index attaining it.
pub fn sup_eval(forms: &[QuadraticForm], x: &[f64]) -> Result<(f64, usize)> {
    let first = forms
        .first()
        .ok_or_else(|| Error::Usage("sup_eval over an empty set of forms".into()))?;
    check_dim(first.dim(), x.len())?;
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, z) in forms.iter().enumerate() {
        check_dim(first.dim(), z.dim())?;
        let v = z.value(x);
        if v > best {
            best = v;
            arg = i;
        }
    }
    Ok((best, arg))
}

/// Value function stored as per-time-step sets of quadratic forms on the
/// uniform grid `0, h, ..., T`.
#[derive(Debug, Clone)]
pub struct MaxPlusValueFunction {
    dim: usize,
    time_step: f64,
    horizon: f64,
    sets: Vec<Vec<QuadraticForm>>,
}

impl MaxPlusValueFunction {
    pub fn new(dim: usize, time_step: f64, horizon: f64, sets: Vec<Vec<QuadraticForm>>) -> Result<Self> {
        let steps = time_steps(horizon, time_step)?;
        if sets.len() != steps + 1 {
            return Err(Error::Config(format!(
                "value function needs {} time slices, got {}",
                steps + 1,
                sets.len()
            )));
        }
        for (n, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Config(format!("empty form set at step {n}")));
            }
            for z in set {
                check_dim(dim, z.dim())?;
            }
        }
        Ok(Self {
            dim,
            time_step,
            horizon,
            sets,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time_step(&self) -> f64 {
        self.time_step
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.sets.len() - 1
    }

    pub fn forms(&self, step: usize) -> &[QuadraticForm] {
        &self.sets[step]
    }

    /// Grid index of `t`, or a usage error when `t` is off the grid.
    pub fn step_index(&self, t: f64) -> Result<usize> {
        let r = t / self.time_step;
        let n = r.round();
        if !(n >= 0.0 && (r - n).abs() <= 1e-9 * r.abs().max(1.0) && n as usize <= self.steps()) {
            return Err(Error::Usage(format!(
                "t = {t} is not on the time grid (h = {}, T = {})",
                self.time_step, self.horizon
            )));
        }
        Ok(n as usize)
    }

    /// `max_{z in Z_n} q(x, z)` at grid index `n`.
    pub fn value_at_step(&self, step: usize, x: &[f64]) -> Result<f64> {
        if step > self.steps() {
            return Err(Error::Usage(format!("step {step} beyond horizon")));
        }
        sup_eval(&self.sets[step], x).map(|(v, _)| v)
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.value_at_step(self.step_index(t)?, x)
    }

    pub fn to_dump(&self) -> ValueFunctionDump {
        let d = self.dim;
        ValueFunctionDump {
            dimension: d,
            time_step: self.time_step,
            horizon: self.horizon,
            steps: self
                .sets
                .iter()
                .enumerate()
                .map(|(n, set)| StepDump {
                    t: n as f64 * self.time_step,
                    forms: set
                        .iter()
                        .map(|z| FormDump {
                            // nalgebra is column-major; emit rows.
                            q: (0..d)
                                .flat_map(|i| (0..d).map(move |j| (i, j)))
                                .map(|(i, j)| z.q[(i, j)])
                                .collect(),
                            b: z.b.iter().copied().collect(),
                            c: z.c,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_dump())?)
    }

    /// Parses and validates a value-function dump.
    pub fn from_json(text: &str) -> Result<Self> {
        let dump: ValueFunctionDump = serde_json::from_str(text)?;
        Self::from_dump(dump)
    }

    pub fn from_dump(dump: ValueFunctionDump) -> Result<Self> {
        let d = dump.dimension;
        if d == 0 || d > 64 {
            return Err(Error::Decode(format!("unsupported dimension {d}")));
        }
        if !(dump.time_step.is_finite() && dump.horizon.is_finite()) {
            return Err(Error::Decode("non-finite time grid".into()));
        }
        let mut sets = Vec::with_capacity(dump.steps.len());
        for step in dump.steps {
            let mut set = Vec::with_capacity(step.forms.len());
            for f in step.forms {
                if f.q.len() != d * d || f.b.len() != d {
                    return Err(Error::Decode("form has wrong dimensions".into()));
                }
                let q = DMatrix::from_row_slice(d, d, &f.q);
                set.push(QuadraticForm::new(q, DVector::from_vec(f.b), f.c)?);
            }
            sets.push(set);
        }
        Self::new(d, dump.time_step, dump.horizon, sets)
    }
}

/// JSON schema of a value-function dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueFunctionDump {
    pub dimension: usize,
    pub time_step: f64,
    pub horizon: f64,
    pub steps: Vec<StepDump>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDump {
    pub t: f64,
    pub forms: Vec<FormDump>,
}

/// One quadratic form; `q` is row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FormDump {
    pub q: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

/// Number of steps `T / h`, erroring when it is not an integer.
pub fn time_steps(horizon: f64, h: f64) -> Result<usize> {
    if !(horizon > 0.0 && h > 0.0 && horizon.is_finite() && h.is_finite()) {
        return Err(Error::Config(format!("invalid horizon {horizon} / time step {h}")));
    }
    let r = horizon / h;
    let n = r.round();
    if (r - n).abs() > 1e-9 * r.max(1.0) || !(1.0..=1e7).contains(&n) {
        return Err(Error::Config(format!(
            "T/h = {r} is not a positive integer (T = {horizon}, h = {h})"
        )));
    }
    Ok(n as usize)
}

// ---------------------------------------------------------------------------
// Terminal payoff

/// Scalar quadratic `s -> a s^2 / 2 + b s + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarQuadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ScalarQuadratic {
    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        0.5 * self.a * s * s + self.b * s + self.c
    }

    /// Downward parabola with curvature `-alpha` tangent to `s -> slope*s + intercept` at `tau`.
    fn tangent(alpha: f64, tau: f64, slope: f64, intercept: f64) -> Self {
        // slope*s + intercept - alpha/2 (s - tau)^2
        Self {
            a: -alpha,
            b: slope + alpha * tau,
            c: intercept - 0.5 * alpha * tau * tau,
        }
    }
}

/// Call spread `(s - k1)^+ - (s - k2)^+`.
#[inline]
pub fn call_spread(s: f64, k1: f64, k2: f64) -> f64 {
    (s - k1).max(0.0) - (s - k2).max(0.0)
}

const PAYOFF_FORM_BUDGET: usize = 4096;

/// Finite family of downward parabolas whose pointwise max approximates the
/// call spread from below within `eps` on `[-radius, radius]`.
///
/// The family is the zero form, parabolas tangent to the rising line
/// `s - k1` and parabolas tangent to the plateau `k2 - k1`. Each curvature
/// is the least one keeping the parabola below the payoff on the whole
/// interval; tangent points are placed greedily so that consecutive
/// `eps`-coverage intervals overlap.
pub fn approximate_scalar_payoff(k1: f64, k2: f64, radius: f64, eps: f64) -> Result<Vec<ScalarQuadratic>> {
    if !(k1.is_finite() && k2.is_finite() && radius.is_finite() && eps.is_finite()) {
        return Err(Error::Config("payoff parameters must be finite".into()));
    }
    if !(k1 < k2) {
        return Err(Error::Config(format!("need K1 < K2, got {k1} >= {k2}")));
    }
    if !(radius > k1.abs() && radius > k2.abs()) {
        return Err(Error::Config(format!("radius {radius} must exceed |K1| and |K2|")));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {eps}")));
    }
    let target = eps;
    // Coverage edges sit exactly at the tolerance; keep a margin for rounding.
    let eps = eps * (1.0 - 1e-6);
    let spread = k2 - k1;
    let zero = ScalarQuadratic { a: 0.0, b: 0.0, c: 0.0 };
    let mut forms = vec![zero];
    if spread <= target {
        return verify_payoff_family(forms, k1, k2, radius, target);
    }

    let right_room = radius - k2;
    // Least curvature for a parabola tangent to the rising line at distance
    // `gap` left of k2: max over t in [0, right_room] of 2t/(t+gap)^2.
    let line_alpha = |gap: f64| {
        if right_room >= gap {
            0.5 / gap
        } else {
            2.0 * right_room / (right_room + gap).powi(2)
        }
    };
    // Same for a parabola tangent to the plateau at distance `gap` right of k2,
    // constrained over the rising segment of length `spread`.
    let plateau_alpha = |gap: f64| {
        if gap <= spread {
            0.5 / gap
        } else {
            2.0 * spread / (spread + gap).powi(2)
        }
    };

    let first_plateau_gap = (4.0 * eps).min(spread);
    let junction = k2 - 2.0 * first_plateau_gap;
    // The zero form covers s <= k1 + eps.
    let mut covered = k1 + eps;
    while covered < junction {
        let root = (eps + k2 - covered).sqrt() - eps.sqrt();
        let gap = root * root;
        if !(gap > 0.0) {
            break;
        }
        let tau = k2 - gap;
        let alpha = line_alpha(gap);
        forms.push(ScalarQuadratic::tangent(alpha, tau, 1.0, -k1));
        let next = (tau + (2.0 * eps / alpha).sqrt()).min(k2);
        if next <= covered || forms.len() > PAYOFF_FORM_BUDGET {
            return Err(Error::PayoffApproximation {
                achieved: f64::NAN,
                target,
                forms: forms.len(),
            });
        }
        covered = next;
    }

    let mut gap = first_plateau_gap;
    loop {
        let tau = k2 + gap;
        let alpha = plateau_alpha(gap);
        forms.push(ScalarQuadratic::tangent(alpha, tau, 0.0, spread));
        let reach = tau + (2.0 * eps / alpha).sqrt();
        if reach >= radius {
            break;
        }
        if forms.len() > PAYOFF_FORM_BUDGET {
            return Err(Error::PayoffApproximation {
                achieved: f64::NAN,
                target,
                forms: forms.len(),
            });
        }
        // Next tangent point: its left eps-edge sits on `reach`.
        let offset = reach - k2;
        let y = eps.sqrt() + (eps + offset).sqrt();
        let mut next_gap = y * y;
        if next_gap > spread {
            let ratio = (eps / spread).sqrt();
            next_gap = (offset + spread * ratio) / (1.0 - ratio);
        }
        gap = next_gap.max(gap * (1.0 + 1e-12));
    }

    verify_payoff_family(forms, k1, k2, radius, target)
}

fn verify_payoff_family(
    forms: Vec<ScalarQuadratic>,
    k1: f64,
    k2: f64,
    radius: f64,
    eps: f64,
) -> Result<Vec<ScalarQuadratic>> {
    let step = eps / 10.0;
    let n = ((2.0 * radius) / step).ceil() as usize;
    let mut worst_gap: f64 = 0.0;
    let mut worst_excess: f64 = 0.0;
    for i in 0..=n {
        let s = (-radius + i as f64 * step).min(radius);
        let target = call_spread(s, k1, k2);
        let mut best = f64::NEG_INFINITY;
        for p in &forms {
            let v = p.eval(s);
            worst_excess = worst_excess.max(v - target);
            best = best.max(v);
        }
        worst_gap = worst_gap.max(target - best);
    }
    if worst_excess > 1e-9 || worst_gap > eps {
        return Err(Error::PayoffApproximation {
            achieved: worst_gap.max(worst_excess),
            target: eps,
            forms: forms.len(),
        });
    }
    Ok(forms)
}

/// Lifts scalar forms to R^d through `s = x_i - x_j` for every `i` in `odd`
/// and `j` in `even` (0-based coordinate indices).
pub fn lift_payoff(scalar: &[ScalarQuadratic], odd: &[usize], even: &[usize], d: usize) -> Result<Vec<QuadraticForm>> {
    if odd.is_empty() || even.is_empty() {
        return Err(Error::Config("lift_payoff needs nonempty index sets".into()));
    }
    if let Some(&bad) = odd.iter().chain(even).find(|&&i| i >= d) {
        return Err(Error::Config(format!("coordinate index {bad} out of range for d = {d}")));
    }
    if odd.iter().any(|i| even.contains(i)) {
        return Err(Error::Config("index sets must be disjoint".into()));
    }
    let mut out = Vec::with_capacity(scalar.len() * odd.len() * even.len());
    for p in scalar {
        for &i in odd {
            for &j in even {
                let mut q = DMatrix::zeros(d, d);
                q[(i, i)] = p.a;
                q[(j, j)] = p.a;
                q[(i, j)] = -p.a;
                q[(j, i)] = -p.a;
                let mut b = DVector::zeros(d);
                b[i] = p.b;
                b[j] = -p.b;
                out.push(QuadraticForm::new(q, b, p.c)?);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Problem specification

/// Coefficients of one discrete mode.
#[derive(Clone)]
pub struct ModeCoefficients {
    pub name: String,
    pub drift: VectorField,
    pub volatility: MatrixField,
    pub discount: ScalarField,
    pub reward: ScalarField,
}

impl fmt::Debug for ModeCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModeCoefficients").field("name", &self.name).finish_non_exhaustive()
    }
}

/// Linear-quadratic continuum control for one mode:
/// `f(x,u) = f(x,0) + B u`, `l(x,u) = l(x,0) + g(x).u + u'Hu/2` with `H < 0`.
#[derive(Clone)]
pub struct LqModeData {
    pub drift_control: DMatrix<f64>,
    pub reward_hessian: DMatrix<f64>,
    pub reward_linear: StateVectorMap,
}

/// Continuum control descriptor: either none or LQ data for every mode.
#[derive(Clone, Default)]
pub enum ControlSpec {
    #[default]
    None,
    LinearQuadratic { control_dim: usize, modes: Vec<LqModeData> },
}

impl ControlSpec {
    pub fn control_dim(&self) -> usize {
        match self {
            ControlSpec::None => 0,
            ControlSpec::LinearQuadratic { control_dim, .. } => *control_dim,
        }
    }
}

/// Controlled diffusion data over a finite mode set.
#[derive(Clone)]
pub struct ProblemSpec {
    dim: usize,
    horizon: f64,
    modes: Vec<ModeCoefficients>,
    payoff: StateScalarMap,
    control: ControlSpec,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("modes", &self.modes)
            .field("control_dim", &self.control.control_dim())
            .finish()
    }
}

impl ProblemSpec {
    pub fn new(
        dim: usize,
        horizon: f64,
        modes: Vec<ModeCoefficients>,
        payoff: StateScalarMap,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if modes.is_empty() {
            return Err(Error::Config("mode set must be nonempty".into()));
        }
        Ok(Self {
            dim,
            horizon,
            modes,
            payoff,
            control: ControlSpec::None,
        })
    }

    /// Attaches LQ continuum control; checks that every reward Hessian is
    /// negative definite and that the descriptor matches the coefficient
    /// callables at a probe point.
    pub fn with_lq_control(mut self, control_dim: usize, modes: Vec<LqModeData>) -> Result<Self> {
        if modes.len() != self.modes.len() {
            return Err(Error::Config(format!(
                "LQ descriptor has {} modes, problem has {}",
                modes.len(),
                self.modes.len()
            )));
        }
        let d = self.dim;
        let x0 = DVector::zeros(d);
        let u0 = DVector::zeros(control_dim);
        for (m, lq) in modes.iter().enumerate() {
            if lq.drift_control.shape() != (d, control_dim) || lq.reward_hessian.shape() != (control_dim, control_dim) {
                return Err(Error::Config(format!("LQ data of mode {m} has wrong shape")));
            }
            let neg = -&lq.reward_hessian;
            if (&neg - neg.transpose()).norm() > 1e-12 * neg.norm().max(1.0) || neg.clone().cholesky().is_none() {
                return Err(Error::Config(format!(
                    "reward of mode {m} is not strictly concave in the control"
                )));
            }
            let coeffs = &self.modes[m];
            let f0 = (coeffs.drift)(&x0, &u0);
            let l0 = (coeffs.reward)(&x0, &u0);
            let g0 = (lq.reward_linear)(&x0);
            check_dim(control_dim, g0.len())?;
            for k in 0..control_dim {
                let mut u = DVector::zeros(control_dim);
                u[k] = 1.0;
                let df = (coeffs.drift)(&x0, &u) - &f0;
                let expected_df = lq.drift_control.column(k);
                let dl = (coeffs.reward)(&x0, &u) - l0;
                let expected_dl = g0[k] + 0.5 * lq.reward_hessian[(k, k)];
                let tol = 1e-9 * (1.0 + df.norm() + dl.abs());
                if (df - expected_df).norm() > tol || (dl - expected_dl).abs() > tol {
                    return Err(Error::Config(format!(
                        "LQ descriptor of mode {m} disagrees with the coefficient callables"
                    )));
                }
            }
        }
        self.control = ControlSpec::LinearQuadratic { control_dim, modes };
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn modes(&self) -> &[ModeCoefficients] {
        &self.modes
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn control(&self) -> &ControlSpec {
        &self.control
    }

    /// The reference control used where coefficients must not depend on `u`.
    pub fn zero_control(&self) -> DVector<f64> {
        DVector::zeros(self.control.control_dim())
    }

    pub fn payoff(&self, x: &DVector<f64>) -> f64 {
        (self.payoff)(x)
    }
}
