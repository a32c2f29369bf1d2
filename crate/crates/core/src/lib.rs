//! Causal feature learning: build macrostates from micro-level data.
//!
//! The pipeline discretizes an outcome into bins ([`binning`]), estimates
//! the conditional distribution of the bin for every row ([`density`]), and
//! clusters those distributions into macrostates ([`clustering`]). The
//! remaining modules check the guarantees behind that recipe on small
//! discrete models ([`scm`], [`regularity`]) and carry the downstream causal
//! analyses ([`inference`]).

pub mod binning;
pub mod clustering;
pub mod data;
pub mod density;
pub mod error;
pub mod inference;
pub mod regularity;
pub mod scm;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/binning.md")]
    mod binning {}
    #[doc = include_str!("../../../book/src/density.md")]
    mod density {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/coarsening.md")]
    mod coarsening {}
    #[doc = include_str!("../../../book/src/regularity.md")]
    mod regularity {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
