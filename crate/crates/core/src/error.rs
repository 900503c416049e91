use thiserror::Error;

/// Errors raised by the library. The CLI maps the variants onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("matrix is not Hurwitz: eigenvalue estimate {re} + {im}i has real part >= -{margin}")]
    Stability { re: f64, im: f64, margin: f64 },
    #[error("Cholesky factorization failed at pivot {index} (value {pivot})")]
    Factorization { index: usize, pivot: f64 },
    #[error("pair (A, B) is not controllable: smallest Gramian eigenvalue {min_eig}")]
    Controllability { min_eig: f64 },
    #[error("unsupported density specification: {0}")]
    UnsupportedSpec(String),
    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("time {t} lies beyond the admissible horizon {limit}")]
    Horizon { t: f64, limit: f64 },
    #[error("forward covariance is near-singular at t = {t} (t_min = {t_min})")]
    NearSingular { t: f64, t_min: f64 },
    #[error("non-finite state at t = {t} for particle {pid}")]
    Divergence { t: f64, pid: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// Innermost error, looking through stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
