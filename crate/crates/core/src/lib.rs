//! Massive-activation trajectory toolkit.
//!
//! Pipeline: per-layer activation statistics ([`stats`]) are aggregated into
//! ratio trajectories ([`trajectory`]), fitted with the log-modulated decay
//! model ([`curve`], [`fit`]), analysed for peaks ([`peak`]), and predicted
//! from architecture features ([`features`], [`ml`], [`explain`]).

pub mod curve;
pub mod error;
pub mod explain;
pub mod features;
pub mod fit;
pub mod lambert;
pub mod ml;
pub mod peak;
pub mod solver;
pub mod stats;
pub mod synth;
pub mod trajectory;

pub use error::{MaError, Result};
