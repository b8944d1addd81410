use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid objective: {0}")]
    InvalidObjective(String),

    #[error("degenerate matrix: smallest eigenvalue {min_eigenvalue:e} is not positive")]
    DegenerateMatrix { min_eigenvalue: f64 },

    #[error("inner optimizer did not converge after {iterations} steps (gradient norm {gradient_norm:e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("infeasible family request: {0}")]
    Infeasible(String),

    #[error("invalid channel: {0}")]
    InvalidChannel(String),

    #[error("success probability {0} gives an infinite expected delay")]
    InfiniteDelay(f64),

    #[error("empty transmission trace")]
    EmptyTrace,

    #[error("client {client} sent more than one gradient in a single round")]
    DuplicateSender { client: usize },

    #[error("client {client} is missing from a synchronous round")]
    MissingClient { client: usize },

    #[error("message from client {client} carries stamp {found}, expected {expected}")]
    StaleSynchronousMessage {
        client: usize,
        expected: u64,
        found: u64,
    },

    #[error("client id {client} out of range for {n_clients} clients")]
    UnknownClient { client: usize, n_clients: usize },

    #[error("gradient cache entry for client {client} is uninitialized")]
    UninitializedCache { client: usize },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: u64, reason: String },

    #[error("invalid bound inputs: {0}")]
    InvalidBoundInputs(String),

    #[error("iteration index {index} lies outside the recorded trajectory (length {len})")]
    IndexOutOfTrajectory { index: i64, len: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("rule `{0}` missing from sweep output")]
    MissingRule(String),

    #[error("nothing to export: {0}")]
    EmptySeries(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, printed by the CLI and mapped onto its exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } | Error::Toml(_) | Error::Json(_) => "config",
            Error::Io { .. } | Error::Csv { .. } => "io",
            Error::Divergence { .. } | Error::NotConverged { .. } => "numeric",
            Error::EmptySeries(_) | Error::MissingRule(_) => "output",
            _ => "model",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "numeric" => 4,
            "output" => 5,
            _ => 6,
        }
    }
}
