//! Error type shared across the crate.

/// Errors produced by configuration validation, factorizations and time
/// integration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad parameters, inconsistent regime, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A series truncation cannot certify the requested tolerance.
    #[error(
        "truncation insufficient: tail estimate {tail:.3e} exceeds tolerance {tol:.3e} \
         (suggested K >= {suggested_k})"
    )]
    TruncationInsufficient {
        /// Estimated magnitude of the dropped tail.
        tail: f64,
        /// Requested tolerance.
        tol: f64,
        /// Band size estimated to bring the tail below the tolerance.
        suggested_k: usize,
    },

    /// A covariance factorization failed even after PSD clipping.
    #[error("covariance factorization failed: {0}")]
    Factorization(String),

    /// The solution left the representable range (NaN/inf) during a run.
    #[error("solution blew up (non-finite value) at t = {t}")]
    BlowUp {
        /// Time of the first non-finite value.
        t: f64,
    },

    /// Mismatched array sizes between grid, coefficients and truncation.
    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    /// Every Monte-Carlo path of a sweep stopped at the norm cutoff.
    #[error(
        "all {paths} paths stopped at the cutoff tau* for epsilon = {epsilon}; \
         the noise or initial condition is too large for this kappa"
    )]
    AllPathsStopped {
        /// The epsilon at which the sweep aborted.
        epsilon: f64,
        /// Number of paths in the sweep.
        paths: usize,
    },
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
