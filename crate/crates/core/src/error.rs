use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("eigensolver failure: {0}")]
    NumericalFailure(String),

    #[error("nuclear coordinate R = {r} left the confinement |R| < {half_l}")]
    Domain { r: f64, half_l: f64 },

    #[error("SCF did not converge within {iterations} iterations (last energy change {last_delta:.3e})")]
    NoConvergence { iterations: usize, last_delta: f64 },

    #[error("electronic solution does not belong to the supplied ensemble state")]
    StaleSolution,

    #[error("signal of length {len} is shorter than the window length {window}")]
    SignalTooShort { len: usize, window: usize },

    #[error("trajectory lacks the `{0}` observable")]
    MissingObservable(&'static str),

    #[error("polariton peaks not found: {0}")]
    PeaksNotFound(String),

    #[error("normal mode {index} has negative curvature {eigenvalue:.3e}")]
    ImaginaryFrequency { index: usize, eigenvalue: f64 },

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid config field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("malformed trajectory file: {0}")]
    TrajectoryFormat(String),

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: msg.into(),
        }
    }

    /// Innermost error, looking through step wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            e => e,
        }
    }

    /// Step index attached by the trajectory driver, if any.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::Step { step, .. } => Some(*step),
            _ => None,
        }
    }

    /// Short machine-readable name used in `ERROR code=<name>` lines.
    pub fn code(&self) -> &'static str {
        match self.root() {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::IndexOutOfRange { .. } => "index-out-of-range",
            Error::NumericalFailure(_) => "numerical-failure",
            Error::Domain { .. } => "domain-error",
            Error::NoConvergence { .. } => "no-convergence",
            Error::StaleSolution => "stale-solution",
            Error::SignalTooShort { .. } => "signal-too-short",
            Error::MissingObservable(_) => "missing-observable",
            Error::PeaksNotFound(_) => "peaks-not-found",
            Error::ImaginaryFrequency { .. } => "imaginary-frequency",
            Error::ConfigParse { .. } => "parse-error",
            Error::Validation { .. } => "validation-error",
            Error::TrajectoryFormat(_) => "trajectory-format",
            Error::Io(_) => "io-error",
            Error::Step { .. } => unreachable!(),
        }
    }

    /// Process exit code: 2 config, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::ConfigParse { .. } | Error::Validation { .. } | Error::InvalidArgument(_) => 2,
            Error::Io(_) | Error::TrajectoryFormat(_) => 4,
            _ => 3,
        }
    }
}
