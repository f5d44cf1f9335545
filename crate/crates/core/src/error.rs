use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("argument outside analytic strip: |Im v| = {im} exceeds {limit}")]
    StripViolation { im: f64, limit: f64 },
    #[error("{what} did not converge: error estimate {estimate:.3e} above tolerance {tol:.3e}")]
    NonConvergence {
        what: &'static str,
        estimate: f64,
        tol: f64,
    },
    #[error("singular marching step: diagonal coefficient vanishes")]
    SingularStep,
    #[error("pole within {distance:.3e} of the integration contour")]
    PoleOnContour { distance: f64 },
    #[error("argument principle ambiguous: {0}")]
    WindingAmbiguity(String),
    #[error("fit window holds {samples} usable samples, need at least 8")]
    WindowTooShort { samples: usize },
    #[error("dispersion margin {value:.3e} below threshold {threshold:.3e}")]
    Margin { value: f64, threshold: f64 },
    #[error("source has nonzero z-mean {value:.3e}")]
    MeanViolation { value: f64 },
    #[error("horizon too short: {0}")]
    Horizon(String),
    #[error("characteristic left the perturbative regime: |V - v| = {deviation:.3e}")]
    BlowUp { deviation: f64 },
    #[error("fixed-point iteration diverged: {0}")]
    Divergence(String),
    #[error("equilibrium is not stable: {0}")]
    NotStable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
