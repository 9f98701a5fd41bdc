use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("numerical failure at tick {tick}: {reason}")]
    NumericalFailureAt { tick: usize, reason: String },

    #[error("pose {index} did not settle: |qdot| = {speed:.3e} rad/s after {settle_time_s} s")]
    NotSettled {
        index: usize,
        speed: f64,
        settle_time_s: f64,
    },

    #[error("rank deficient least-squares problem: {0}")]
    RankDeficient(String),

    #[error("no payload attached")]
    NoPayload,

    #[error("script error: {0}")]
    ScriptError(String),

    #[error("configuration error: {0}")]
    ConfigError(String),

    #[error("log schema error: {0}")]
    SchemaError(String),

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigError(_)
            | Error::SchemaError(_)
            | Error::ScriptError(_)
            | Error::Io(_)
            | Error::NoPayload
            | Error::MissingDependency(_) => 2,
            Error::NumericalFailure(_)
            | Error::NumericalFailureAt { .. }
            | Error::NotSettled { .. }
            | Error::RankDeficient(_) => 3,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
