use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("matrix `{name}` is not symmetric")]
    NotSymmetric { name: String },

    #[error("matrix `{name}` is not positive definite (Cholesky failed)")]
    NotPositiveDefinite { name: String },

    #[error("matrix `{name}` is singular or rank deficient")]
    RankDeficient { name: String },

    #[error("model assumption violated: {0}")]
    ModelAssumption(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("location {location} has zero observed entries")]
    EmptyLocation { location: usize },

    #[error("ensemble must have at least {min} members, got {got}")]
    EnsembleSize { min: usize, got: usize },

    #[error("signal constraint infeasible: requested {requested}, maximum attainable {max_attainable}")]
    Constraint { requested: f64, max_attainable: f64 },

    #[error("coefficient {index} = {value} outside bounds [{lo}, {hi}]")]
    Bounds {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("provenance mismatch: {0}")]
    Consistency(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("emulator fit failed: {0}")]
    Fit(String),

    #[error("NROY space appears empty: {0}")]
    EmptyNroy(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Distinct process exit code per failure class, for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } => 2,
            Error::Config(_) => 3,
            Error::Shape { .. } | Error::Index(_) => 4,
            Error::NotSymmetric { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::RankDeficient { .. } => 5,
            Error::Data(_) | Error::EmptyLocation { .. } => 6,
            Error::Precondition(_) | Error::ModelAssumption(_) | Error::Consistency(_) => 7,
            Error::EnsembleSize { .. } | Error::Constraint { .. } | Error::Bounds { .. } => 8,
            Error::Fit(_) => 9,
            Error::EmptyNroy(_) => 10,
            Error::Json(_) => 11,
        }
    }
}
