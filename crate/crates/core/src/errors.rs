//! Error type shared by every module in the crate.

use thiserror::Error;

/// Unified error type for model validation, certificate synthesis, and
/// closed-loop execution.
#[derive(Debug, Error)]
pub enum Error {
    /// An implicit-equation solve (plant layer, control law, observer, or
    /// state-map inversion) exhausted its iteration budget. This signals a
    /// model or operating point where the contraction/invertibility
    /// assumptions fail numerically.
    #[error("implicit solve did not converge in {context}: residual {residual:.3e} after {newton_iters} Newton + {fallback_iters} damped fixed-point iterations")]
    NonConvergence {
        context: &'static str,
        residual: f64,
        newton_iters: usize,
        fallback_iters: usize,
    },

    /// `I - Theta * B_s_tilde` is numerically singular for a sampled slope
    /// matrix `Theta`, so the implicit layer is not well posed.
    #[error("I - Theta*B_s_tilde is singular for a sampled Theta (sigma_min {sigma_min:.3e})")]
    SingularPhi { sigma_min: f64 },

    /// A scalar activation tag that the toolkit does not implement.
    #[error("unsupported activation '{0}'")]
    UnsupportedActivation(String),

    /// A quantity left the validity region that a certificate or constraint
    /// row requires.
    #[error("validity violation on {channel}: value {value:.6} exceeds bound {bound:.6}")]
    DomainViolation {
        channel: String,
        value: f64,
        bound: f64,
    },

    /// The conic solver failed to return a usable status.
    #[error("semidefinite solve failed: {0}")]
    NumericalFailure(String),

    /// A bisection template was infeasible even at the lower end of the
    /// search range.
    #[error("scalar maximization infeasible over the whole range [{lo}, {hi}]")]
    NeverFeasible { lo: f64, hi: f64 },

    /// A design pipeline exhausted its relaxation schedule without finding a
    /// feasible certificate.
    #[error("synthesis failed: {reason} (last sector slopes {last_lambdas:?})")]
    SynthesisFailed {
        reason: String,
        last_lambdas: Vec<f64>,
    },

    /// The admissible-level search found no positive level satisfying the
    /// constraint rows.
    #[error("ellipsoid level search found empty interior: row {row} violated even at gamma = {gamma:.3e}")]
    EmptyInterior { row: usize, gamma: f64 },

    /// The finite-horizon optimal control problem admits no feasible rollout.
    #[error("optimal control problem infeasible: {0}")]
    Infeasible(String),

    /// The sequential solver stopped making progress before reaching the
    /// optimality tolerance.
    #[error("solver stalled: KKT residual {kkt:.3e} after {iters} iterations")]
    SolverStall { kkt: f64, iters: usize },

    /// The closed loop left the trusted numeric range.
    #[error("closed loop diverged at step {step}: state magnitude {norm:.3e}")]
    Diverged { step: usize, norm: f64 },

    /// A runtime error tagged with the simulation step where it occurred.
    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// Model/result/scenario document violates the schema. The string names
    /// the offending field path.
    #[error("invalid document field '{path}': {message}")]
    InvalidField { path: String, message: String },

    /// Dimension mismatch between declared sizes and matrix payloads.
    #[error("dimension mismatch at '{path}': expected {expected}, got {got}")]
    DimensionMismatch {
        path: String,
        expected: String,
        got: String,
    },

    /// Underlying I/O failure, surfaced verbatim.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Document parse error from the TOML/CSV layer.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
