//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. Numerical
//! failure modes (quadrature that cannot reach its tolerance, flows that
//! diverge, solvers that stall) carry the achieved state so callers can
//! report partial progress instead of a bare failure.

use thiserror::Error;

/// Errors produced by grid construction, form assembly, quadrature,
/// eigensolves, flows, and the CLI layer.
#[derive(Error, Debug)]
pub enum Error {
    /// A precondition on a parameter was violated (range, parity, sign).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A domain mask has no interior nodes.
    #[error("domain mask has no interior nodes")]
    EmptyMask,

    /// Two grid functions (or a function and a form) live on different masks.
    #[error("mask mismatch between operands")]
    MaskMismatch,

    /// A sampled value was NaN or infinite.
    #[error("non-finite sample value at node {node}")]
    NonFiniteSample {
        /// Flat lattice index of the offending node.
        node: usize,
    },

    /// Adaptive quadrature exhausted its interval budget before reaching
    /// the requested tolerance. The best value and its error estimate are
    /// carried so diagnostics can report how far the integral got.
    #[error("quadrature did not converge: value {value:.6e}, error estimate {error:.3e}")]
    QuadratureNonConvergence {
        /// Best available value of the integral.
        value: f64,
        /// Achieved absolute error estimate.
        error: f64,
    },

    /// A minimization flow failed to make progress.
    #[error("flow diverged: {0}")]
    FlowDivergence(String),

    /// An iterative solver hit its iteration cap before meeting both
    /// convergence criteria.
    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    SolverNonConvergence {
        /// Iterations performed.
        iterations: usize,
        /// Residual at the last iterate.
        residual: f64,
    },

    /// Solution extraction was requested at a nonpositive quotient value,
    /// which signals the regime where no extraction exists.
    #[error("extraction invalid at nonpositive value {value:.6e}")]
    ExtractionInvalid {
        /// The offending quotient value.
        value: f64,
    },

    /// A fit or scan was asked to run on fewer samples than it needs.
    #[error("insufficient samples: needed {needed}, got {got}")]
    InsufficientSamples {
        /// Minimum sample count.
        needed: usize,
        /// Provided sample count.
        got: usize,
    },

    /// A witness search exhausted its grid without finding a witness.
    #[error("no witness found: {0}")]
    NoWitness(String),

    /// Configuration file rejected during validation.
    #[error("config error: {0}")]
    Config(String),

    /// A binary weight cache file failed its integrity check.
    #[error("weight cache corrupt: {0}")]
    CacheCorrupt(String),

    /// Filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON encode/decode failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// TOML decode failure.
    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
