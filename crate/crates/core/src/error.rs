use thiserror::Error;

/// Errors surfaced by system validation, certification, and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("gram matrix for space `{space}` is not symmetric: max |G_ij - G_ji| = {max_asymmetry:.3e} exceeds 1e-12")]
    NonSymmetricGram { space: String, max_asymmetry: f64 },

    #[error("gram matrix for space `{space}` is not positive definite (Cholesky factorization failed)")]
    NotPositiveDefinite { space: String },

    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },

    #[error("matrix is not skew-adjoint with respect to the state Gram: residual {residual:.3e} exceeds tolerance {tol:.1e}")]
    NotSkewAdjoint { residual: f64, tol: f64 },

    #[error("closed loop is not exponentially stable: spectral abscissa {abscissa:.6e} >= 0")]
    NotExponentiallyStable { abscissa: f64 },

    #[error("Lyapunov solve is ill-conditioned: separation estimate {separation:.3e}")]
    IllConditionedLyapunov { separation: f64 },

    #[error("beta = {beta} out of range: must lie in (0, alpha) with alpha = {alpha}")]
    BetaOutOfRange { beta: f64, alpha: f64 },

    #[error("eta = {eta} too small for the decay property: requires eta >= c1 + beta = {minimum}")]
    EtaTooSmall { eta: f64, minimum: f64 },

    #[error("quadrature did not converge: achieved accuracy {achieved:.3e}, requested {requested:.3e}")]
    QuadratureNoConvergence { achieved: f64, requested: f64 },

    #[error("event localization failed after {iterations} bisection levels; bracket [{lo}, {hi}]")]
    EventLocalization { iterations: usize, lo: f64, hi: f64 },

    #[error("scan step too coarse: trigger margin already negative at t_k + event_tol = {t}; reduce dt_max")]
    ScanTooCoarse { t: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("spectral factorization of the skew drift failed: residual {residual:.3e}")]
    SpectralFactorization { residual: f64 },

    #[error("failed to build a stable random system after {attempts} resamples (seed {seed})")]
    RandomSystemUnstable { attempts: usize, seed: u64 },

    #[error("non-finite entry at row {row}, column {col} of `{field}`")]
    NonFiniteEntry { field: String, row: usize, col: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
