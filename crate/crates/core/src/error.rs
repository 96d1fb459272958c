use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A coefficient produced NaN or infinity.
    #[error("coefficient `{name}` is not finite at (t = {t}, x = {x})")]
    NonFinite { name: &'static str, t: f64, x: f64 },

    #[error("population response inversion failed at t = {t}, a = {a}: {reason}")]
    ResponseInversion { t: f64, a: f64, reason: &'static str },

    /// Adaptive step bisection hit its depth limit; the grid needs refinement.
    #[error("step size underflow near t = {t} (refine the grid near the singularity)")]
    Singularity { t: f64 },

    #[error("upper envelope undefined: level {level} must exceed {threshold} (= sqrt(K1/K2))")]
    EnvelopeDomain { level: f64, threshold: f64 },

    #[error("shooting failed: {reason} (residual {residual:e})")]
    Convergence { reason: String, residual: f64 },

    #[error("invalid time grid: {0}")]
    Grid(String),

    #[error("invalid penalty ladder: {0}")]
    Ladder(String),

    #[error("level {level} failed: {source}")]
    LevelFailed {
        level: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("inputs solved on different grids: {0}")]
    GridMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("property violated at {location}: {detail}")]
    Property { location: String, detail: String },

    #[error("limit quality: {0}")]
    LimitQuality(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
