use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use maxplus_hjb::bench::{
    build_correlation_modes, compare_with_oracle, oracle_for_config,
    parse_matrix, read_slice_csv, run_experiment, write_report, ExperimentConfig, OracleFile, SLICE_FILE,
};
use maxplus_hjb::factorization::build_uncertain_correlation_generator;
use maxplus_hjb::monotone_poly::{min_k_for_monotonicity, probe_weights, MonotonePolynomial};
use maxplus_hjb::scheme::{discrete_increment_operator_1d, discrete_increment_weights_2d};
use maxplus_hjb::{Error, Result};

#[derive(Parser)]
#[command(name = "maxplus-hjb", version, about = "Max-plus probabilistic HJB solver benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an experiment and write slice.csv and summary.json.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Quadrature oracle of the singleton-correlation model on the slice.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare a run directory's slice with an oracle file.
    Compare {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        floor: f64,
        #[arg(long, default_value_t = 4.0)]
        factor: f64,
    },
    /// Order selection and zero-mean check of the weight polynomial.
    CheckPoly {
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Finite-difference form of the three-point operators.
    CheckFd {
        #[arg(long, default_value_t = 2.0)]
        a11: f64,
        #[arg(long, default_value_t = 1)]
        k: u32,
        /// Defaults to sqrt(4k + 3).
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long, default_value = "1.5,0.2;0.2,1.3")]
        matrix: String,
    },
}

fn solve(config: PathBuf, output: Option<PathBuf>, quiet: bool) -> Result<bool> {
    let cfg = ExperimentConfig::load(&config)?;
    let dir = output
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    let report = run_experiment(&cfg, &mut |s| {
        if !quiet {
            eprintln!(
                "t={:.4} forms={} min_weight={:.4e} max_residual={:.3e} wall={:.2}s",
                s.t, s.forms, s.min_weight, s.max_residual, s.wall_seconds
            );
        }
    })?;
    write_report(&report, &dir, cfg.write_value_function)?;
    let s = &report.summary;
    println!(
        "{}: k={} abar={:.4} forms<={} negative_weights={} stability_violations={}/{} total={:.1}s -> {}",
        s.name,
        s.k,
        s.abar,
        s.max_forms,
        s.negative_weights,
        s.stability_violations,
        s.stability_checked,
        s.total_seconds,
        dir.display()
    );
    Ok(true)
}

fn oracle(config: PathBuf, output: Option<PathBuf>) -> Result<bool> {
    let cfg = ExperimentConfig::load(&config)?;
    let file = oracle_for_config(&cfg)?;
    let text = serde_json::to_string_pretty(&file)?;
    match output {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(true)
}

fn compare(run: PathBuf, oracle: PathBuf, floor: f64, factor: f64) -> Result<bool> {
    let rows = read_slice_csv(&std::fs::read(run.join(SLICE_FILE))?)?;
    let oracle = OracleFile::load(&oracle)?;
    let report = compare_with_oracle(&rows, &oracle, floor, factor)?;
    println!(
        "max_gap={:.6} at x_sweep={} max_stderr_proxy={:.6} failures={} {}",
        report.max_gap,
        report.max_gap_at,
        report.max_stderr_proxy,
        report.failures,
        if report.pass { "PASS" } else { "FAIL" }
    );
    Ok(report.pass)
}

fn check_poly(d: usize, samples: usize, seed: u64) -> Result<bool> {
    let vols = vec![0.3; d];
    let mut ok = true;
    for rho in [0.0, 0.4, 0.8] {
        let modes = build_correlation_modes(d, rho)?;
        let gens = build_uncertain_correlation_generator(&vols, &modes)?;
        let residuals = gens.constant_residuals().expect("constant residuals");
        let abar = residuals.iter().map(|r| r.abar).fold(0.0, f64::max);
        let k = min_k_for_monotonicity(abar)?;
        print!("d={d} rho={rho}: abar={abar:.6} k={k}");
        let sigma = residuals[0].sigma.clone();
        if sigma.ncols() == 0 {
            println!(" (no residual)");
            continue;
        }
        let p = MonotonePolynomial::new(sigma, k)?;
        let probe = probe_weights(&p, &DVector::zeros(d), &nalgebra::DMatrix::identity(d, d), 0.0, 0.0, samples, seed)?;
        let pass = probe.mean_p.abs() <= 4.0 * probe.stderr_p && probe.min_weight >= 0.0;
        ok &= pass;
        println!(
            " mean_P={:.3e} stderr={:.3e} min_weight={:.4} {}",
            probe.mean_p,
            probe.stderr_p,
            probe.min_weight,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn check_fd(a11: f64, k: u32, nu: Option<f64>, matrix: &str) -> Result<bool> {
    let nu = nu.unwrap_or(((4 * k + 3) as f64).sqrt());
    let s = discrete_increment_operator_1d(a11, k, nu)?;
    println!(
        "1d: A11={a11} k={k} nu={nu:.6} b={:.12} weights(-,0,+)=({:.12}, {:.12}, {:.12}) consistent={} monotone={}",
        s.b, s.minus, s.center, s.plus, s.consistent, s.monotone
    );
    let a = parse_matrix(matrix)?;
    let w = discrete_increment_weights_2d(&a)?;
    let sum: f64 = w.iter().flatten().sum();
    for (i, row) in w.iter().enumerate() {
        println!("2d: e1={:+} {:.12} {:.12} {:.12}", i as i32 - 1, row[0], row[1], row[2]);
    }
    let ok = (sum - 1.0).abs() <= 1e-12;
    println!("2d: sum={sum:.15} {}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve { config, output, quiet } => solve(config, output, quiet),
        Command::Oracle { config, output } => oracle(config, output),
        Command::Compare {
            run,
            oracle: o,
            floor,
            factor,
        } => compare(run, o, floor, factor),
        Command::CheckPoly { d, samples, seed } => check_poly(d, samples, seed),
        Command::CheckFd { a11, k, nu, matrix } => check_fd(a11, k, nu, &matrix),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
