use thiserror::Error;

/// Errors surfaced by model construction, fitting, prediction and simulation.
#[derive(Debug, Error)]
pub enum SaeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("area {0} has no unit records")]
    EmptyArea(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("rank-deficient design: offending columns {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("fit did not converge after {iterations} iterations (best psi {best_psi})")]
    NonConvergence { iterations: usize, best_psi: f64 },

    #[error(
        "population within-area means are unavailable for area {0}; \
         use the sample-mean predictor (sam_star) instead"
    )]
    MissingPopulationMeans(String),

    #[error("sampling rule has no entry covering an area of size {0}")]
    SamplingRuleGap(u64),

    #[error("mixture variance {sigma2} is below the attainable bound {bound}")]
    MixtureVarianceTooSmall { sigma2: f64, bound: f64 },

    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}
