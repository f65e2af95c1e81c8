//! Compositional energy-based models for visual concepts on a grid world.
//!
//! The crate trains conditional EBMs for elementary concepts and relations,
//! composes them at inference time into models for never-seen hierarchical
//! concepts via symbolic concept graphs, and inverts composition to parse a
//! concept graph out of an image for cross-domain transfer.

pub mod composer;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod model;
pub mod sampler;
pub mod trainer;

pub use error::{Result, ZcError};
