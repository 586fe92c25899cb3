//! Seeded Brownian increments and Euler states of the retained generators.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::factorization::GeneratorChoice;
use crate::problem::{time_steps, ProblemSpec};
use crate::rng::{half_open_unit, stream_rng, StandardNormals, WORDS_PER_NORMAL};

/// Law of the initial state `X(0)`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialSampler {
    Point(Vec<f64>),
    Uniform { center: Vec<f64>, half_width: Vec<f64> },
}

impl InitialSampler {
    pub fn point(x0: Vec<f64>) -> Self {
        InitialSampler::Point(x0)
    }

    /// Uniform on the cube `center +- half_width`.
    pub fn uniform(center: Vec<f64>, half_width: f64) -> Self {
        let half_width = vec![half_width; center.len()];
        InitialSampler::Uniform { center, half_width }
    }

    /// Uniform on the box `[c_i - w_i, c_i + w_i]`.
    pub fn uniform_box(center: Vec<f64>, half_width: Vec<f64>) -> Self {
        InitialSampler::Uniform { center, half_width }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialSampler::Point(x) => x.len(),
            InitialSampler::Uniform { center, .. } => center.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            InitialSampler::Point(x) => {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("initial point must be finite".into()));
                }
            }
            InitialSampler::Uniform { center, half_width } => {
                check_dim(center.len(), half_width.len())?;
                if center.iter().chain(half_width).any(|v| !v.is_finite()) || half_width.iter().any(|w| *w < 0.0) {
                    return Err(Error::Config("uniform sampler needs finite center and nonnegative widths".into()));
                }
            }
        }
        Ok(())
    }

    fn draw(&self, seed: u64, omega: usize, out: &mut [f64]) {
        match self {
            InitialSampler::Point(x) => out.copy_from_slice(x),
            InitialSampler::Uniform { center, half_width } => {
                let d = center.len() as u128;
                let mut rng = stream_rng(seed, 0, omega as u128 * d * WORDS_PER_NORMAL);
                for ((o, c), w) in out.iter_mut().zip(center).zip(half_width) {
                    let u = half_open_unit(&mut rng);
                    *o = if *w == 0.0 { *c } else { c + w * (2.0 * u - 1.0) };
                }
            }
        }
    }
}

/// Shared increments and the Euler chains of every retained generator.
#[derive(Debug, Clone)]
pub struct SamplePaths {
    seed: u64,
    dim: usize,
    n_in: usize,
    steps: usize,
    h: f64,
    increments: Vec<f64>,
    states: Vec<Vec<f64>>,
    floored: usize,
}

impl SamplePaths {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time_step(&self) -> f64 {
        self.h
    }

    pub fn retained_count(&self) -> usize {
        self.states.len()
    }

    /// `W_{t+h} - W_t` on path `omega`, `t = step * h`.
    pub fn increment(&self, step: usize, omega: usize) -> &[f64] {
        let d = self.dim;
        let off = (step * self.n_in + omega) * d;
        &self.increments[off..off + d]
    }

    /// All increments, step-major then path-major then coordinate.
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `X^{retained}(step * h, omega)`.
    pub fn state(&self, retained: usize, step: usize, omega: usize) -> &[f64] {
        let d = self.dim;
        let off = (step * self.n_in + omega) * d;
        &self.states[retained][off..off + d]
    }

    /// Number of coordinates raised to the positivity floor.
    pub fn floored_count(&self) -> usize {
        self.floored
    }

    /// Initial states and increments in dump form.
    pub fn to_dump(&self) -> PathDump {
        PathDump {
            seed: self.seed,
            dim: self.dim,
            n_in: self.n_in,
            steps: self.steps,
            initial: self.states[0][..self.n_in * self.dim].to_vec(),
            increments: self.increments.clone(),
        }
    }
}

/// Draws `n_in` paths of increments `N(0, h I)` keyed by
/// `(seed, step, path, coordinate)` and runs every retained generator's
/// Euler chain from a common initial draw. With `floor = Some(f)`,
/// state coordinates below `f` are raised to `f` and counted.
pub fn simulate(
    spec: &ProblemSpec,
    generators: &GeneratorChoice,
    h: f64,
    n_in: usize,
    seed: u64,
    sampler: &InitialSampler,
    floor: Option<f64>,
) -> Result<SamplePaths> {
    let steps = time_steps(spec.horizon(), h)?;
    let d = spec.dim();
    check_dim(d, sampler.dim())?;
    sampler.validate()?;
    if n_in == 0 {
        return Err(Error::Config("N_in must be at least 1".into()));
    }
    let mut initial = vec![0.0; n_in * d];
    initial
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(omega, out)| sampler.draw(seed, omega, out));

    let scale = h.sqrt();
    let mut increments = vec![0.0; steps * n_in * d];
    increments
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(idx, out)| {
            let (step, omega) = (idx / n_in, idx % n_in);
            let pos = omega as u128 * d as u128 * WORDS_PER_NORMAL;
            let mut normals = StandardNormals::new(stream_rng(seed, step as u64 + 1, pos));
            normals.fill(out);
            for v in out.iter_mut() {
                *v *= scale;
            }
        });
    build_paths(generators, seed, d, n_in, steps, h, initial, increments, floor)
}

/// Runs the Euler chains on caller-supplied increments (`steps * n_in * d`,
/// step-major) and initial states (`n_in * d`).
pub fn simulate_from_increments(
    generators: &GeneratorChoice,
    h: f64,
    initial: Vec<f64>,
    increments: Vec<f64>,
    n_in: usize,
    floor: Option<f64>,
) -> Result<SamplePaths> {
    if n_in == 0 || !initial.len().is_multiple_of(n_in) || initial.is_empty() {
        return Err(Error::Config("initial states must hold n_in rows".into()));
    }
    let d = initial.len() / n_in;
    if increments.is_empty() || !increments.len().is_multiple_of(n_in * d) {
        return Err(Error::Config("increments must hold whole steps".into()));
    }
    let steps = increments.len() / (n_in * d);
    build_paths(generators, 0, d, n_in, steps, h, initial, increments, floor)
}

#[allow(clippy::too_many_arguments)]
fn build_paths(
    generators: &GeneratorChoice,
    seed: u64,
    d: usize,
    n_in: usize,
    steps: usize,
    h: f64,
    initial: Vec<f64>,
    increments: Vec<f64>,
    floor: Option<f64>,
) -> Result<SamplePaths> {
    let mut states = Vec::with_capacity(generators.retained_count());
    let mut floored = 0;
    for r in 0..generators.retained_count() {
        let generator = generators.generator(r);
        let mut chain = vec![0.0; (steps + 1) * n_in * d];
        chain[..n_in * d].copy_from_slice(&initial);
        for step in 0..steps {
            let (done, rest) = chain.split_at_mut((step + 1) * n_in * d);
            let current = &done[step * n_in * d..];
            let next = &mut rest[..n_in * d];
            let step_incr = &increments[step * n_in * d..(step + 1) * n_in * d];
            floored += next
                .par_chunks_mut(d)
                .enumerate()
                .map(|(omega, out)| {
                    let x = DVector::from_column_slice(&current[omega * d..(omega + 1) * d]);
                    let w = DVector::from_column_slice(&step_incr[omega * d..(omega + 1) * d]);
                    let y = generator.step(&x, h, &w);
                    let mut hits = 0;
                    for (o, v) in out.iter_mut().zip(y.iter()) {
                        *o = match floor {
                            Some(f) if *v < f => {
                                hits += 1;
                                f
                            }
                            _ => *v,
                        };
                    }
                    hits
                })
                .sum::<usize>();
        }
        if chain.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite simulated state for generator {r}")));
        }
        states.push(chain);
    }
    Ok(SamplePaths {
        seed,
        dim: d,
        n_in,
        steps,
        h,
        increments,
        states,
        floored,
    })
}

/// Binary path dump: a header of four little-endian `u64`
/// (seed, d, N_in, steps) followed by little-endian `f64` blocks, step-major
/// then path-major then coordinate: first the initial states, then the
/// increments of each step.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDump {
    pub seed: u64,
    pub dim: usize,
    pub n_in: usize,
    pub steps: usize,
    pub initial: Vec<f64>,
    pub increments: Vec<f64>,
}

const HEADER_BYTES: usize = 32;
const MAX_DUMP_VALUES: usize = 1 << 31;

impl PathDump {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for v in [self.seed, self.dim as u64, self.n_in as u64, self.steps as u64] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in self.initial.iter().chain(&self.increments) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_BYTES + 8 * (self.initial.len() + self.increments.len()));
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Decode(format!("path dump too short ({} bytes)", bytes.len())));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("8-byte slice"));
        let seed = word(0);
        let to_usize = |v: u64, what: &str| {
            usize::try_from(v).map_err(|_| Error::Decode(format!("{what} {v} out of range")))
        };
        let dim = to_usize(word(1), "dimension")?;
        let n_in = to_usize(word(2), "path count")?;
        let steps = to_usize(word(3), "step count")?;
        if dim == 0 || n_in == 0 || steps == 0 {
            return Err(Error::Decode("path dump header has a zero size".into()));
        }
        let per_block = dim
            .checked_mul(n_in)
            .filter(|v| *v <= MAX_DUMP_VALUES)
            .ok_or_else(|| Error::Decode("path dump dimensions overflow".into()))?;
        let total = per_block
            .checked_mul(steps.checked_add(1).ok_or_else(|| Error::Decode("step count overflow".into()))?)
            .filter(|v| *v <= MAX_DUMP_VALUES)
            .ok_or_else(|| Error::Decode("path dump dimensions overflow".into()))?;
        let payload = &bytes[HEADER_BYTES..];
        if payload.len() != total * 8 {
            return Err(Error::Decode(format!(
                "path dump payload has {} bytes, header implies {}",
                payload.len(),
                total * 8
            )));
        }
        let mut values = Vec::with_capacity(total);
        for chunk in payload.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(Error::Decode("path dump contains a non-finite value".into()));
            }
            values.push(v);
        }
        let increments = values.split_off(per_block);
        Ok(Self {
            seed,
            dim,
            n_in,
            steps,
            initial: values,
            increments,
        })
    }

    /// Rebuilds the Euler chains from the dumped noise.
    pub fn into_paths(self, generators: &GeneratorChoice, h: f64, floor: Option<f64>) -> Result<SamplePaths> {
        build_paths(
            generators,
            self.seed,
            self.dim,
            self.n_in,
            self.steps,
            h,
            self.initial,
            self.increments,
            floor,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::build_uncertain_correlation_generator;
    use crate::problem::ModeCoefficients;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn heat_spec(d: usize, horizon: f64) -> ProblemSpec {
        let mode = ModeCoefficients {
            name: "identity".into(),
            drift: Arc::new(move |x, _| DVector::zeros(x.len())),
            volatility: Arc::new(|x, _| DMatrix::from_diagonal(x)),
            discount: Arc::new(|_, _| 0.0),
            reward: Arc::new(|_, _| 0.0),
        };
        ProblemSpec::new(d, horizon, vec![mode], Arc::new(|_| 0.0)).unwrap()
    }

    #[test]
    fn zero_increments_keep_paths_constant() {
        let g = build_uncertain_correlation_generator(&[0.4, 0.3], &[DMatrix::identity(2, 2)]).unwrap();
        let initial = vec![50.0, 40.0, 30.0, 20.0];
        let p = simulate_from_increments(&g, 0.1, initial.clone(), vec![0.0; 3 * 4], 2, None).unwrap();
        for step in 0..=3 {
            assert_eq!(p.state(0, step, 1), &initial[2..]);
        }
    }

    #[test]
    fn one_step_matches_componentwise_formula() {
        let rho = 0.8;
        let modes = [
            DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, -rho, -rho, 1.0]),
        ];
        let g = build_uncertain_correlation_generator(&[0.4, 0.3], &modes).unwrap();
        let spec = heat_spec(2, 0.02);
        let p = simulate(&spec, &g, 0.01, 16, 3, &InitialSampler::point(vec![50.0, 50.0]), None).unwrap();
        let lam: f64 = 0.2;
        for omega in 0..16 {
            let dw = p.increment(0, omega);
            let x1 = p.state(0, 1, omega);
            let expect = [50.0 * (1.0 + lam.sqrt() * 0.4 * dw[0]), 50.0 * (1.0 + lam.sqrt() * 0.3 * dw[1])];
            for c in 0..2 {
                assert!((x1[c] - expect[c]).abs() <= 1e-12 * expect[c].abs());
            }
        }
    }

    #[test]
    fn increments_are_reproducible_and_centered() {
        let g = build_uncertain_correlation_generator(&[0.4, 0.3], &[DMatrix::identity(2, 2)]).unwrap();
        let spec = heat_spec(2, 0.01);
        let sampler = InitialSampler::uniform(vec![50.0, 50.0], 5.0);
        let n = 200_000;
        let a = simulate(&spec, &g, 0.01, n, 9, &sampler, None).unwrap();
        let b = simulate(&spec, &g, 0.01, n, 9, &sampler, None).unwrap();
        assert_eq!(a.increments(), b.increments());
        for c in 0..2 {
            let mean: f64 = (0..n).map(|o| a.increment(0, o)[c]).sum::<f64>() / n as f64;
            assert!(mean.abs() <= 4.0 * (0.01 / n as f64).sqrt());
            let m0: f64 = (0..n).map(|o| a.state(0, 0, o)[c]).sum::<f64>() / n as f64;
            assert!((m0 - 50.0).abs() <= 4.0 * 5.0 / (3.0 * n as f64).sqrt());
        }
    }

    #[test]
    fn degenerate_uniform_equals_point() {
        let g = build_uncertain_correlation_generator(&[0.4], &[DMatrix::identity(1, 1)]).unwrap();
        let spec = heat_spec(1, 0.02);
        let a = simulate(&spec, &g, 0.01, 8, 1, &InitialSampler::uniform(vec![50.0], 0.0), None).unwrap();
        let b = simulate(&spec, &g, 0.01, 8, 1, &InitialSampler::point(vec![50.0]), None).unwrap();
        for o in 0..8 {
            assert_eq!(a.state(0, 2, o), b.state(0, 2, o));
            assert_eq!(a.state(0, 0, o), &[50.0]);
        }
    }

    #[test]
    fn non_integral_horizon_rejected() {
        let g = build_uncertain_correlation_generator(&[0.4], &[DMatrix::identity(1, 1)]).unwrap();
        let spec = heat_spec(1, 0.025);
        assert!(simulate(&spec, &g, 0.01, 8, 1, &InitialSampler::point(vec![50.0]), None).is_err());
    }

    #[test]
    fn floor_counts_events() {
        let g = build_uncertain_correlation_generator(&[1.0], &[DMatrix::identity(1, 1)]).unwrap();
        let p = simulate_from_increments(&g, 1.0, vec![1.0], vec![-5.0], 1, Some(1e-6)).unwrap();
        assert_eq!(p.state(0, 1, 0), &[1e-6]);
        assert_eq!(p.floored_count(), 1);
    }

    #[test]
    fn dump_round_trip() {
        let g = build_uncertain_correlation_generator(&[0.4, 0.3], &[DMatrix::identity(2, 2)]).unwrap();
        let spec = heat_spec(2, 0.03);
        let p = simulate(&spec, &g, 0.01, 5, 77, &InitialSampler::uniform(vec![50.0, 50.0], 5.0), None).unwrap();
        let bytes = p.to_dump().encode();
        let back = PathDump::decode(&bytes).unwrap();
        assert_eq!(back, p.to_dump());
        let rebuilt = back.into_paths(&g, 0.01, None).unwrap();
        assert_eq!(rebuilt.state(0, 3, 4), p.state(0, 3, 4));
        assert!(PathDump::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
