use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the public
/// operations can hit; the CLI maps them onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate regressor: {0}")]
    DegenerateRegressor(String),

    #[error("degenerate series: region {region} has zero variance")]
    DegenerateSeries { region: usize },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
