use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("shape mismatch at layer {layer}: expected input width {expected}, got {got}")]
    LayerShape {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("exponential overflow in divergence conjugate at t = {t} (tau = {tau})")]
    Overflow { t: f64, tau: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("training diverged at iteration {iteration}: loss = {loss:e}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("degenerate acceptance: all acceptance weights are zero")]
    DegenerateAcceptance,
    #[error("acceptance rate {rate:e} below 1e-4 after {candidates} candidates")]
    LowAcceptance { rate: f64, candidates: usize },
    #[error("matrix is not symmetric positive definite ({0})")]
    NotSpd(String),
    #[error("rank-deficient covariance from {n} samples in dimension {dim}; draw more samples")]
    RankDeficient { n: usize, dim: usize },
    #[error("degenerate plan row {row}: mass {mass:e} < 1e-12")]
    DegenerateRow { row: usize, mass: f64 },
    #[error("class `{0}` has no samples")]
    EmptyClass(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownKey(_) | Error::InvalidArgument(_) => 2,
            Error::Io { .. } | Error::Checkpoint(_) => 4,
            _ => 3,
        }
    }
}
