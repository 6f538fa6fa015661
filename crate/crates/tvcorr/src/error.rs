//! Error type shared across the crate.

/// Convenience alias used by every fallible function in this crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model construction, transforms, filters, and fits.
#[derive(Debug, Clone, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    /// An input matrix or parameter vector violates a mathematical domain
    /// requirement (symmetry, unit diagonal, norm bound, degrees of freedom
    /// range, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A matrix that must be positive definite is not; carries the smallest
    /// eigenvalue found.
    #[error("matrix is not positive definite: smallest eigenvalue {min_eigenvalue:.3e}")]
    NotPositiveDefinite {
        /// Smallest eigenvalue of the offending matrix.
        min_eigenvalue: f64,
    },

    /// Dimensions of related inputs disagree.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        /// What was being measured.
        what: &'static str,
        /// Expected size.
        expected: usize,
        /// Actual size.
        got: usize,
    },

    /// An iterative routine failed to reach its tolerance within the
    /// iteration cap.
    #[error("{what} did not converge within {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        /// Which routine failed.
        what: &'static str,
        /// Iterations performed.
        iterations: usize,
        /// Residual at the final iterate.
        residual: f64,
    },

    /// A matrix supposed to follow a declared block pattern deviates from it
    /// beyond tolerance.
    #[error("block structure violation in {what}: {detail}")]
    BlockStructure {
        /// Which input failed the check.
        what: &'static str,
        /// Description naming the offending block and deviation.
        detail: String,
    },

    /// A quantity reached a numerical boundary where the model is no longer
    /// well defined (for example an idiosyncratic scale collapsing to zero).
    #[error("numerical boundary reached: {0}")]
    Boundary(String),

    /// A linear map that must be inverted is numerically singular.
    #[error("ill-conditioned system in {what}: {detail}")]
    IllConditioned {
        /// Which operation hit the singularity.
        what: &'static str,
        /// Diagnostic detail.
        detail: String,
    },

    /// A filter recursion produced a non-finite value.
    #[error("filter diverged at step {step}: {detail}")]
    FilterDiverged {
        /// Zero-based time index at which the recursion broke down.
        step: usize,
        /// Description of the non-finite quantity.
        detail: String,
    },

    /// The requested combination of options is not supported.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
}

impl Error {
    /// Shorthand for a [`Error::Domain`] with a formatted message.
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
