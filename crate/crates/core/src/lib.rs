//! Sparse identification of control-affine systems under a relative-degree
//! constraint, Lie-derivative analysis, and feedback-linearizing control.
//!
//! The typical flow is [`dynamics::integrate`] to produce a [`data::Dataset`],
//! [`regression::identify`] to fit a [`regression::SparseModel`],
//! [`lie::relative_degree`] on the identified system, and
//! [`control::synthesize`] for the tracking law.

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod control;
pub mod data;
pub mod dictionary;
pub mod dynamics;
pub mod lie;
mod linalg;
pub mod regression;
pub mod symexpr;

pub use control::{ControlError, ControllerSpec, GainSource, ReferenceSignal};
pub use data::{DataError, Dataset};
pub use dictionary::{DictionaryError, Library, LibrarySpec};
pub use dynamics::{ControlAffineSystem, DynamicsError, Excitation, InputSignal};
pub use lie::{LieChain, LieError};
pub use regression::{RegressionConfig, RegressionError, SparseModel};
pub use symexpr::{ExprError, Expression};

use thiserror::Error;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error(transparent)]
    Control(#[from] ControlError),
}
