use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("matrix is not positive semi-definite (min eigenvalue {min_eig:e}, max {max_eig:e})")]
    NotPositiveSemiDefinite { min_eig: f64, max_eig: f64 },
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("degenerate ensemble: {size} member(s), covariance needs at least 2")]
    DegenerateEnsemble { size: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("unsupported model for this operation: {0}")]
    UnsupportedModel(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("filters require nonzero Sigma and Gamma; model was built noise-free")]
    NoiseFreeModel,
    #[error("grid domain too small: {lost_mass:e} of the mass fell off the grid")]
    DomainTooSmall { lost_mass: f64 },
    #[error("likelihood underflow: observation inconsistent with every state")]
    LikelihoodUnderflow,
    #[error("singular covariance: {0}")]
    SingularCovariance(&'static str),
    #[error("grid mismatch: {0}")]
    GridMismatch(&'static str),
    #[error("rate fit: {0}")]
    Fit(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in place of a value in result tables.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NotPositiveSemiDefinite { .. } => "not_psd",
            Error::NotPositiveDefinite(_) => "not_pd",
            Error::DegenerateEnsemble { .. } => "degenerate_ensemble",
            Error::InvalidWeights(_) => "invalid_weights",
            Error::UnsupportedModel(_) => "unsupported_model",
            Error::UnknownModel(_) => "unknown_model",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::NoiseFreeModel => "noise_free_model",
            Error::DomainTooSmall { .. } => "domain_too_small",
            Error::LikelihoodUnderflow => "likelihood_underflow",
            Error::SingularCovariance(_) => "singular_covariance",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::Fit(_) => "fit_error",
            Error::Config(_) => "config_error",
            Error::Io { .. } => "io_error",
            Error::Json(_) => "json_error",
        }
    }

    /// True for errors caused by the inputs rather than by numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::UnknownModel(_)
                | Error::InvalidParameter(_)
                | Error::Config(_)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::UnsupportedModel(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
