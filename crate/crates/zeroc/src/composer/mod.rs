//! Symbolic side: concept graphs, the hierarchical composition rule, and
//! exact graph metrics for small graphs.

mod compose;
mod graph;
mod metrics;

pub use compose::{combine_masks, compose, ComposedEnergyBound};
pub use graph::{is_symmetric_relation, inverse_relation, ConceptGraph, Edge};
pub use metrics::{graph_edit_distance, is_isomorphic, structurally_equivalent, MAX_METRIC_NODES};
