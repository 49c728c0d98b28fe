//! Graph storage, preprocessing, and the normalized diffusion operator.

pub mod bundle;
pub mod operator;

pub use bundle::{
    build_graph, build_graph_with_classes, l1_normalize_features, largest_connected_component,
    largest_connected_component_with_map, GraphBundle,
};
pub use operator::{
    build_operator, build_operator_with, propagate, propagate_masked, sample_edge_dropout,
    OperatorKind, PropagationOperator,
};
