//! Variational steady states of boundary-driven XXZ spin chains, with the
//! density matrix represented by a purified pair of restricted Boltzmann
//! machines.
//!
//! The [`guide`] module renders the user guide from `book/`; its examples
//! run as doctests.

pub mod error;
pub mod estimator;
pub mod exact;
pub mod model;
pub mod ndo;
pub mod observables;
pub mod optimize;
pub mod run;
pub mod sampler;

pub use error::{Error, Result};

/// Chapters of the user guide.
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/exact.md")]
    pub mod exact {}
    #[doc = include_str!("../../../book/src/ansatz.md")]
    pub mod ansatz {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    pub mod estimation {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    pub mod optimization {}
    #[doc = include_str!("../../../book/src/observables.md")]
    pub mod observables {}
    #[doc = include_str!("../../../book/src/running.md")]
    pub mod running {}
}
