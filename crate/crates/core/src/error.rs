use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("domination violated: residual matrix has eigenvalue {min_eigenvalue:.3e} (mode {mode})")]
    DominationViolated { mode: usize, min_eigenvalue: f64 },

    #[error("matrix is indefinite beyond tolerance: {0}")]
    Indefinite(String),

    #[error("ill-conditioned generator volatility (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("regression design is rank deficient in monomials [{}]", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("payoff approximation infeasible: achieved error {achieved:.3e} with {forms} forms (target {target:.3e})")]
    PayoffApproximation {
        achieved: f64,
        target: f64,
        forms: usize,
    },

    #[error("quadrature did not converge within {max_nodes} nodes (last change {last_change:.3e})")]
    QuadratureNonConvergence { max_nodes: usize, last_change: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("time step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("decode error: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Usage(_)
            | Error::DimensionMismatch { .. }
            | Error::Decode(_)
            | Error::Json(_)
            | Error::Io(_) => 2,
            Error::Step { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
