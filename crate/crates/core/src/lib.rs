//! Conditional generation of clinical time series with informative
//! missingness, plus the evaluation machinery around it.

pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod grud;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod srnn;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/privacy.md")]
    mod privacy {}
}
