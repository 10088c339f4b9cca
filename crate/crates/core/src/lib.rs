//! Attention convolutional binary neural tree for fine-grained image
//! classification: a backbone feeds a soft-routed full binary tree whose
//! edges carry attention transformers and whose leaves emit class
//! distributions, combined by accumulated path probabilities.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod persist;
pub mod train;
pub mod tree;

pub use backbone::{build_desk_backbone, BlockSpec, DeskBackbone, DeskBackboneSpec, FeatureExtractor};
pub use error::{AcnetError, Result};
pub use tree::{build_tree, NodeId, Prediction, TreeConfig, TreeModel};
