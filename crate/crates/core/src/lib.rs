//! Causal trajectory representation learning.
//!
//! The pipeline runs raw GPS trajectories through [`trajdata`] (partitioning,
//! context gridding, normalization, splits), encodes them with two unshared
//! conv+GRU branches ([`encoder`]), aligns each point to a learnable
//! environment codebook to obtain confounding/causal soft-masks
//! ([`envalign`]), and trains with the causal, confounding and intervention
//! losses ([`causalhead`], [`trainer`]). [`synthgen`] provides a confounded
//! synthetic world with a Bayes oracle, and [`evalharness`] runs the
//! benchmark protocol on it.

pub mod causalhead;
pub mod encoder;
pub mod envalign;
pub mod error;
pub mod evalharness;
pub mod model;
pub mod seed;
pub mod synthgen;
pub mod trainer;
pub mod trajdata;

pub use error::{Result, TrajError};
