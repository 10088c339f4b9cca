//! The tree: topology, routing, attention-transformer edges, leaf heads and
//! probability-weighted aggregation.

mod config;
mod model;
mod paths;
mod units;

pub use config::{
    edge_count, internal_count, leaf_count, leaves, node_count, nodes, EdgeMode, NodeId, Pooling, TreeConfig,
    DESK_DILATIONS, MAX_HEIGHT, FULL_DILATIONS,
};
pub use model::{build_tree, Prediction, TreeModel, TreeTrace};
pub use paths::{accumulate_path_probabilities, aggregate, leaf_slice, PROBABILITY_TOLERANCE};
pub use units::{
    bottleneck, AttentionTransformer, ChannelAttention, GlobalContext, LeafHead, RoutingUnit, TransformOutput,
};
