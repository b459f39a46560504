//! Desk-scale lab for self-supervised embedding learning through cycle-consistent
//! instance association.
//!
//! The pipeline: a synthetic multi-person stream simulator ([`sim`]) feeds frame
//! pairs to a small encoder ([`encoder`]), which is trained ([`trainer`]) with a
//! differentiable cycle-association loss ([`cycle`]) plus a cross-batch memory
//! repulsion term ([`xbm`]), all on top of a minimal reverse-mode tape ([`diffmath`]).
//! Ground-truth-aware metrics live in [`evalkit`], run configuration in [`config`].

pub mod checkpoint;
pub mod config;
pub mod cycle;
pub mod diffmath;
pub mod encoder;
pub mod evalkit;
pub mod gradcheck;
pub mod optim;
pub mod sim;
pub mod trainer;
pub mod xbm;

use thiserror::Error;

/// Crate-wide error type.
///
/// `Config` and `Shape`/`Param`/`Degenerate` style errors indicate invalid input
/// (CLI exit code 1); the rest are runtime failures (exit code 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid parameter: {detail}")]
    Param { op: &'static str, detail: String },

    #[error("{op}: degenerate input: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("backward: loss must be a 1x1 node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("backward: gradients already accumulated; call reset_gradients first")]
    BackwardWithoutReset,

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; offending batch dumped to {dump}")]
    NonFiniteLoss { epoch: usize, batch: usize, dump: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by invalid user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::Param { .. }
                | Error::Degenerate { .. }
                | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
