//! Patched adapters on frozen pretrained transformers for multi-horizon
//! quantile forecasting, with heavy-tailed spectral diagnostics of the
//! trained weights.
//!
//! The guide in `book/` walks through each module with runnable examples.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod htsr;
pub mod io;
pub mod models;
pub mod nn;
pub mod patching;
pub mod plot;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/patching.md")]
    pub mod patching {}
    #[doc = include_str!("../../../book/src/models.md")]
    pub mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    pub mod diagnostics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}
