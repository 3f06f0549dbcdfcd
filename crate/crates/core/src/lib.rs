//! Surrogate-modeling pipeline for process-induced deformation in curing
//! composites.
//!
//! The crate covers the full workflow: a synthetic cure-process simulator
//! ([`sim`]), feature-modulated operator networks ([`net`], [`operator`]),
//! gradient training with seed ensembles ([`train`]), last-layer transfer to
//! measured outcomes ([`transfer`]), ensemble Kalman inversion for
//! uncertainty-aware training and transfer ([`eki`]), and constrained
//! cure-schedule optimization ([`opt`]).

pub mod eki;
pub mod error;
pub mod net;
pub mod operator;
pub mod opt;
pub mod sim;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
