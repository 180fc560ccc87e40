use thiserror::Error;

/// Errors shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("cache must hold at least one key-value pair")]
    EmptyCache,
    #[error("query norm {norm} exceeds the declared radius {rho}")]
    QueryNorm { norm: f64, rho: f64 },
    #[error("feature layout needs {required} scalars, over the cap of {cap}; lower the truncation degree")]
    Capacity { required: usize, cap: usize },
    #[error("exhaustive balancing is limited to {limit} items, got {n}")]
    ExhaustiveTooLarge { n: usize, limit: usize },
    #[error("at least one seed is required")]
    NoSeeds,
    #[error("balancer made no progress: every item landed on one side")]
    NoProgress,
    #[error("cache must be preprocessed (centered and scaled) first")]
    NotPreprocessed,
    #[error("running key-sum norm {norm:.6} exceeded the drift allowance {allowance:.6}")]
    CenteringDrift { norm: f64, allowance: f64 },
    #[error("no spherical code found after {tries} tries: best pairwise bound {best_eta:.6} > target {target_eta:.6}")]
    CodeNotFound {
        best_eta: f64,
        target_eta: f64,
        tries: usize,
    },
    #[error("cache file error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
