//! Numerical laboratory for "quantization commutes with reduction" on compact
//! Kähler models `M = ∏ CP^{n_j}` with Hamiltonian torus actions.
//!
//! The crate computes quantum Hilbert spaces upstairs and downstairs, the
//! descent maps with and without the metaplectic (half-form) correction,
//! stratified density integrals, and asymptotic unitarity defects as the
//! tensor power `k` grows.
//!
//! Module map:
//! - [`kahler_models`]: the Kähler arena (metric, charts, volume, curvature).
//! - [`torus_actions`]: weight-matrix actions, moment map, isotropy, `τ`, `f`.
//! - [`strata_flow`]: Kirwan flow, semistability, orbit-type strata and the
//!   decomposition of flow preimages.
//! - [`hilbert_spaces`]: monomial bases, invariant subspaces, pointwise norms
//!   and upstairs Gram matrices.
//! - [`reduction_maps`]: descent, pointwise descended norms, reduced Grams.
//! - [`asymptotics_lab`]: densities `I_k`, `J_k`, residual terms, tails,
//!   unitarity defects and norm-decomposition checks.
//! - [`cli_runner`]: JSON scenarios and the command-line driver.

pub mod asymptotics_lab;
pub mod catalog;
pub mod cli_runner;
pub mod hilbert_spaces;
pub mod kahler_models;
pub mod numerics;
pub mod reduction_maps;
pub mod strata_flow;
pub mod torus_actions;

pub use numerics::{Estimate, QuadConfig, C64};

/// Errors reported by every fallible operation in the crate.
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid model, action, scenario or quadrature configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid geometric input (degenerate coordinates, wrong dimensions).
    #[error("invalid input: {0}")]
    Invalid(String),
    /// A numerical procedure failed to converge or hit a degenerate case.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// The combinatorial and sampled stratifications disagree.
    #[error("stratification mismatch: {0}")]
    Stratification(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Numerical(_) | Error::Stratification(_) => 3,
        }
    }
}
