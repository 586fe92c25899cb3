//! Acceptance criteria, one line per criterion. Run with `cargo test --test acceptance`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use maxplus_hjb::bench::{
    build_correlation_modes, build_generators, build_problem, compare_with_oracle, oracle_for_config,
    run_experiment, uncertain_correlation_problem, write_report, ExperimentConfig, OracleFile, RunReport,
    SLICE_FILE,
};
use maxplus_hjb::factorization::{build_uncertain_correlation_generator, cholesky_drop_zero_columns};
use maxplus_hjb::monotone_poly::{min_k_for_monotonicity, one_step_weight, probe_weights, MonotonePolynomial};
use maxplus_hjb::scheme::{
    apply_t, discrete_increment_operator_1d, discrete_increment_weights_2d, estimate_from_values, IncrementSet,
};
use maxplus_hjb::solver::ModePolicy;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).expect("config")
}

fn run(cfg: &ExperimentConfig) -> Result<(RunReport, Duration), String> {
    let t0 = Instant::now();
    let report = run_experiment(cfg, &mut |_| {}).map_err(|e| e.to_string())?;
    Ok((report, t0.elapsed()))
}

fn random_sigma(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, rank, |_, _| rng.random_range(-1.5..1.5))
}

fn zero_mean_weight() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for case in 0..20 {
        let d = rng.random_range(1..=4usize);
        let rank = rng.random_range(1..=d);
        let k = rng.random_range(0..=3u32);
        let p = MonotonePolynomial::new(random_sigma(&mut rng, d, rank), k).map_err(|e| e.to_string())?;
        let probe = probe_weights(&p, &DVector::zeros(d), &DMatrix::identity(d, d), 0.0, 0.0, 1_000_000, 100 + case)
            .map_err(|e| e.to_string())?;
        let z = probe.mean_p.abs() / probe.stderr_p;
        worst = worst.max(z);
        ok &= z <= 4.0;
    }
    Ok((ok, format!("worst |mean|/stderr = {worst:.3} over 20 cases")))
}

fn ftw_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=5usize);
        let rank = rng.random_range(1..=d);
        let sigma = random_sigma(&mut rng, d, rank);
        let p = MonotonePolynomial::new(sigma.clone(), 0).map_err(|e| e.to_string())?;
        let w = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let a = &sigma * sigma.transpose();
        let expect = 0.5 * (&a * (&w * w.transpose() - DMatrix::identity(d, d))).trace();
        worst = worst.max((p.value(w.as_slice()) - expect).abs());
    }
    Ok((worst <= 1e-12, format!("max abs difference {worst:.2e} over 1000 draws")))
}

fn k_selection() -> Outcome {
    let mut got = Vec::new();
    for rho in [0.0, 0.4, 0.8] {
        let modes = build_correlation_modes(2, rho).map_err(|e| e.to_string())?;
        let gens = build_uncertain_correlation_generator(&[0.4, 0.3], &modes).map_err(|e| e.to_string())?;
        let abar = gens.constant_residuals().unwrap().iter().map(|r| r.abar).fold(0.0, f64::max);
        got.push(min_k_for_monotonicity(abar).map_err(|e| e.to_string())?);
    }
    Ok((got == [0, 0, 2], format!("k for rho = 0, 0.4, 0.8: {got:?}")))
}

fn monotonicity(cfg: &ExperimentConfig, report: &RunReport) -> Outcome {
    let (_, gens, _, _) = build_problem(cfg).map_err(|e| e.to_string())?;
    let sol = &report.solution;
    let h = cfg.h;
    let polys: Vec<MonotonePolynomial> = gens
        .constant_residuals()
        .unwrap()
        .iter()
        .map(|r| MonotonePolynomial::new(r.sigma.clone(), sol.k))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let zero = DVector::zeros(2);
    let eye = DMatrix::identity(2, 2);
    let mut min_w = f64::INFINITY;
    let mut checked = 0usize;
    for diag in &sol.diagnostics {
        for &omega in &diag.increments {
            let w: Vec<f64> = sol.paths.increment(diag.step, omega).iter().map(|v| v / h.sqrt()).collect();
            for p in &polys {
                min_w = min_w.min(one_step_weight(p, &zero, &eye, 0.0, h, &w).map_err(|e| e.to_string())?);
                checked += 1;
            }
        }
    }
    let ok = sol.k == 2 && min_w >= 0.0 && sol.negative_weights() == 0;
    Ok((
        ok,
        format!(
            "k={} min weight {min_w:.4} over {checked} (increment, mode) pairs; estimator weights below zero: {}",
            sol.k,
            sol.negative_weights()
        ),
    ))
}

fn fd_equivalence() -> Outcome {
    let h = 0.01;
    let mut worst: f64 = 0.0;
    // 1D: operator weights from the three-point law and the weight polynomial.
    for (a11, k) in [(1.0, 0u32), (2.0, 0), (2.0, 1), (3.5, 2), (1.7, 3)] {
        for nu in [((4 * k + 3) as f64).sqrt(), 2.5] {
            let inc = IncrementSet::three_point(1, h, nu).map_err(|e| e.to_string())?;
            let sigma = cholesky_drop_zero_columns(&DMatrix::from_element(1, 1, a11 - 1.0), 1e-14)
                .map_err(|e| e.to_string())?;
            let poly = inc.polynomial(sigma, k).map_err(|e| e.to_string())?;
            let stencil = discrete_increment_operator_1d(a11, k, nu).map_err(|e| e.to_string())?;
            let want_b = 1.0 + (a11 - 1.0) * (nu * nu - 1.0) / (4 * k + 2) as f64;
            worst = worst.max((stencil.b - want_b).abs());
            for j in 0..inc.len() {
                let mut phi = vec![0.0; inc.len()];
                phi[j] = 1.0;
                let est = estimate_from_values(&phi, &inc, &DMatrix::identity(1, 1), &[(0, poly.clone())])
                    .map_err(|e| e.to_string())?;
                let weight = est.d0 + h * est.d2_for(0).unwrap();
                let x = inc.value(j)[0];
                let want = if x > 0.0 {
                    stencil.plus
                } else if x < 0.0 {
                    stencil.minus
                } else {
                    stencil.center
                };
                worst = worst.max((weight - want).abs());
            }
            if (nu * nu - (4 * k + 3) as f64).abs() < 1e-12 && !stencil.consistent {
                return Ok((false, format!("nu = sqrt(4k+3) not flagged consistent at k={k}")));
            }
        }
    }
    // 2D, k = 0, nu = sqrt(3).
    let mut sum_err: f64 = 0.0;
    for a in [
        DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 1.3]),
        DMatrix::from_row_slice(2, 2, &[1.2, -0.1, -0.1, 1.1]),
        DMatrix::identity(2, 2),
    ] {
        let inc = IncrementSet::three_point(2, h, 3f64.sqrt()).map_err(|e| e.to_string())?;
        let e = &a - DMatrix::identity(2, 2);
        let sigma = cholesky_drop_zero_columns(&e, 1e-14).map_err(|e| e.to_string())?;
        let poly = inc.polynomial(sigma, 0).map_err(|e| e.to_string())?;
        let grid = discrete_increment_weights_2d(&a).map_err(|e| e.to_string())?;
        let total: f64 = grid.iter().flatten().sum();
        sum_err = sum_err.max((total - 1.0).abs());
        for j in 0..inc.len() {
            let mut phi = vec![0.0; inc.len()];
            phi[j] = 1.0;
            let est = estimate_from_values(&phi, &inc, &DMatrix::identity(2, 2), &[(0, poly.clone())])
                .map_err(|e| e.to_string())?;
            let weight = est.d0 + h * est.d2_for(0).unwrap();
            let w = inc.value(j);
            let idx = |v: f64| if v > 0.0 { 2 } else if v < 0.0 { 0 } else { 1 };
            worst = worst.max((weight - grid[idx(w[0])][idx(w[1])]).abs());
        }
    }
    Ok((
        worst <= 1e-12 && sum_err <= 1e-12,
        format!("max weight difference {worst:.2e}, max |sum - 1| {sum_err:.2e}"),
    ))
}

fn consistency_order() -> Outcome {
    let vols = [0.4, 0.3];
    let modes = build_correlation_modes(2, 0.8).map_err(|e| e.to_string())?;
    let spec = uncertain_correlation_problem(&vols, &modes, -5.0, 5.0, 0.25).map_err(|e| e.to_string())?;
    let gens = build_generators(&vols, &modes, ModePolicy::Shared).map_err(|e| e.to_string())?;
    let gamma0 = DMatrix::from_row_slice(2, 2, &[0.02, -0.015, -0.015, 0.01]);
    let x = DVector::from_vec(vec![52.0, 47.0]);
    let t = 0.1;
    let v = |t: f64, y: &[f64]| {
        let y = DVector::from_column_slice(y);
        0.5 * t.exp() * y.dot(&(&gamma0 * &y))
    };
    let hamiltonian = |t: f64| {
        let g = &gamma0 * t.exp();
        let s = DMatrix::from_diagonal(&DVector::from_fn(2, |i, _| vols[i] * x[i]));
        modes
            .iter()
            .map(|m| 0.5 * (&s * m * &s * &g).trace())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let k = 2;
    let mut residuals = Vec::new();
    for h in [1e-2, 5e-3, 2.5e-3] {
        let inc = IncrementSet::gauss_hermite(2, h, 20).map_err(|e| e.to_string())?;
        let phi = |y: &[f64]| v(t + h, y);
        let tv = apply_t(&spec, &gens, &phi, &x, &inc, k).map_err(|e| e.to_string())?;
        let lhs = (tv - v(t, x.as_slice())) / h;
        let rhs = v(t, x.as_slice()) + hamiltonian(t);
        residuals.push((lhs - rhs).abs());
    }
    let orders: Vec<f64> = residuals.windows(2).map(|p| (p[0] / p[1]).log2()).collect();
    let ok = orders.iter().all(|o| *o >= 0.9);
    Ok((ok, format!("residuals {:?}, observed orders {orders:.3?}", residuals.iter().map(|r| format!("{r:.3e}")).collect::<Vec<_>>())))
}

fn slice_bytes(report: &RunReport) -> Result<Vec<u8>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_report(report, dir.path(), false).map_err(|e| e.to_string())?;
    std::fs::read(dir.path().join(SLICE_FILE)).map_err(|e| e.to_string())
}

fn oracle_equivalence(
    small: &RunReport,
    full: &RunReport,
    elapsed: Duration,
    cfg: &ExperimentConfig,
) -> Outcome {
    let fixture = OracleFile::load(&configs_dir().join("oracle_d2_rho0.json")).map_err(|e| e.to_string())?;
    let fresh = oracle_for_config(cfg).map_err(|e| e.to_string())?;
    let fixture_drift = fixture
        .points
        .iter()
        .zip(&fresh.points)
        .map(|(a, b)| (a.value - b.value).abs())
        .fold(0.0, f64::max);
    let c_full = compare_with_oracle(&full.rows, &fixture, 0.3, 4.0).map_err(|e| e.to_string())?;
    let c_small = compare_with_oracle(&small.rows, &fixture, 0.3, 4.0).map_err(|e| e.to_string())?;
    let ok = c_full.pass
        && c_full.max_gap < c_small.max_gap
        && fixture_drift <= 1e-9
        && elapsed < Duration::from_secs(600);
    Ok((
        ok,
        format!(
            "N_in=2000 max gap {:.4} (proxy {:.4}, {} failures); N_in=1000 max gap {:.4}; fixture drift {:.1e}; {:.0}s",
            c_full.max_gap,
            c_full.max_stderr_proxy,
            c_full.failures,
            c_small.max_gap,
            fixture_drift,
            elapsed.as_secs_f64()
        ),
    ))
}

fn rho_monotonicity(runs: &[&RunReport; 3]) -> Outcome {
    let tol = runs.iter().map(|r| r.summary.stability_tolerance).fold(0.0, f64::max);
    let (v0, v4, v8) = (&runs[0].rows, &runs[1].rows, &runs[2].rows);
    let mut order_bad = 0;
    let mut margin = f64::INFINITY;
    for i in 0..v0.len() {
        let (a, b, c) = (v0[i].value, v4[i].value, v8[i].value);
        if !(c >= b - tol && b - tol >= a - 2.0 * tol) {
            order_bad += 1;
        }
        margin = margin.min((c - b).min(b - a));
    }
    let bound_bad: usize = runs.iter().map(|r| r.summary.slice_bound_violations).sum();
    let shape_bad: usize = runs.iter().map(|r| r.summary.slice_shape_violations).sum();
    let peak = runs
        .iter()
        .flat_map(|r| r.rows.iter().map(|p| p.value))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((
        order_bad == 0 && bound_bad == 0 && shape_bad == 0,
        format!(
            "order violations {order_bad}, bound violations {bound_bad}, shape violations {shape_bad}; \
             tol {tol:.3}, smallest pointwise increase {margin:.2e}, largest value {peak:.4}"
        ),
    ))
}

fn d5_smoke() -> Outcome {
    let cfg = load("d5_smoke.json");
    let (report, elapsed) = run(&cfg)?;
    let s = &report.summary;
    let ok = s.forms_per_step.iter().all(|&n| n <= s.form_bound)
        && s.stability_violations == 0
        && s.forms_per_step.len() == s.steps + 1
        && elapsed < Duration::from_secs(1800);
    Ok((
        ok,
        format!(
            "k={} max forms {} (bound {}), stability violations {}/{}, {:.0}s",
            s.k,
            s.max_forms,
            s.form_bound,
            s.stability_violations,
            s.stability_checked,
            elapsed.as_secs_f64()
        ),
    ))
}

fn determinism(first: &RunReport, cfg: &ExperimentConfig) -> Outcome {
    let (again, elapsed) = run(cfg)?;
    let a = slice_bytes(first)?;
    let b = slice_bytes(&again)?;
    Ok((
        a == b && elapsed < Duration::from_secs(600),
        format!("{} bytes, identical: {}, rerun {:.0}s", a.len(), a == b, elapsed.as_secs_f64()),
    ))
}

fn complexity_scaling() -> Outcome {
    let mut cfg = load("d2_rho08.json");
    cfg.horizon = 0.06;
    cfg.n_w = 200;
    let mut times = Vec::new();
    for n_in in [400, 800] {
        cfg.n_in = Some(n_in);
        let (report, _) = run(&cfg)?;
        // The first backward step reads the terminal set, whose size does not scale.
        let steps = &report.summary.step_diagnostics;
        let later: f64 = steps[..steps.len() - 1].iter().map(|s| s.select_seconds).sum();
        times.push(later);
    }
    let ratio = times[1] / times[0];
    Ok((
        (2.0..=6.0).contains(&ratio),
        format!("selection time {:.3}s -> {:.3}s, ratio {ratio:.2}", times[0], times[1]),
    ))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let out = f();
        let line = match &out {
            Ok((true, msg)) => format!("criterion {n:>2} PASS {name}: {msg}"),
            Ok((false, msg)) => format!("criterion {n:>2} FAIL {name}: {msg}"),
            Err(e) => format!("criterion {n:>2} FAIL {name}: error: {e}"),
        };
        println!("{line} [{:.1}s]", t0.elapsed().as_secs_f64());
        results.push((n, name, out));
    };

    record(1, "zero-mean weight", &mut zero_mean_weight);
    record(2, "k = 0 reduction", &mut ftw_reduction);
    record(3, "k selection", &mut k_selection);
    record(5, "finite-difference equivalence", &mut fd_equivalence);
    record(6, "consistency order", &mut consistency_order);

    let cfg0 = load("d2_rho0.json");
    let cfg0_small = load("d2_rho0_n1000.json");
    let cfg4 = load("d2_rho04.json");
    let cfg8 = load("d2_rho08.json");
    let runs = (|| -> Result<_, String> {
        let (r0, e0) = run(&cfg0)?;
        let (r0s, _) = run(&cfg0_small)?;
        let (r4, _) = run(&cfg4)?;
        let (r8, _) = run(&cfg8)?;
        Ok((r0, e0, r0s, r4, r8))
    })();
    match &runs {
        Ok((r0, e0, r0s, r4, r8)) => {
            record(4, "monotone weights", &mut || monotonicity(&cfg8, r8));
            record(7, "oracle equivalence", &mut || oracle_equivalence(r0s, r0, *e0, &cfg0));
            record(8, "correlation ordering and bounds", &mut || rho_monotonicity(&[r0, r4, r8]));
            record(10, "determinism", &mut || determinism(r0, &cfg0));
        }
        Err(e) => {
            for (n, name) in [(4, "monotone weights"), (7, "oracle equivalence"), (8, "correlation ordering and bounds"), (10, "determinism")] {
                let e = e.clone();
                record(n, name, &mut || Err(e.clone()));
            }
        }
    }
    record(9, "d = 5 smoke run", &mut d5_smoke);
    record(11, "selection cost scaling", &mut complexity_scaling);

    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !matches!(r.2, Ok((true, _)))).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
