use serde::{Deserialize, Serialize};

use crate::error::{AcnetError, Result};

/// Dilation rates sized for 8×8 feature maps.
pub const DESK_DILATIONS: [usize; 4] = [1, 2, 3, 4];
/// Dilation rates for feature maps of at least 19×19.
pub const FULL_DILATIONS: [usize; 4] = [1, 6, 12, 18];
/// Largest supported tree height.
pub const MAX_HEIGHT: usize = 16;

/// How many attention transformers sit on each edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// Two transformers on every left edge, one on every right edge.
    Asymmetric,
    /// One transformer per edge.
    Symmetric,
}

impl EdgeMode {
    pub fn transformers(self, left: bool) -> usize {
        match (self, left) {
            (EdgeMode::Asymmetric, true) => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeMode::Asymmetric => "asymmetric",
            EdgeMode::Symmetric => "symmetric",
        }
    }
}

/// Spatial pooling used by routing units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Gap,
    Gmp,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Gap => "gap",
            Pooling::Gmp => "gmp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub height: usize,
    /// Feature channels at each level, root first; `channels[0]` must match
    /// the backbone output.
    pub channels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub edge_mode: EdgeMode,
    pub routing_pool: Pooling,
    pub gc_block: bool,
    pub attention: bool,
    pub aspp: bool,
    pub num_classes: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig::desk(3, 4)
    }
}

impl TreeConfig {
    /// Desk-scale tree over the default 32-channel backbone: 16 channels
    /// below the root, rates 1–4, every component enabled.
    pub fn desk(height: usize, num_classes: usize) -> Self {
        let mut channels = vec![32];
        channels.extend(std::iter::repeat_n(16, height.saturating_sub(1)));
        TreeConfig {
            height,
            channels,
            dilations: DESK_DILATIONS.to_vec(),
            edge_mode: EdgeMode::Asymmetric,
            routing_pool: Pooling::Gap,
            gc_block: true,
            attention: true,
            aspp: true,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.height > MAX_HEIGHT {
            return Err(AcnetError::Config(format!(
                "tree height must be in 1..={MAX_HEIGHT}, got {}",
                self.height
            )));
        }
        if self.channels.len() != self.height {
            return Err(AcnetError::Config(format!(
                "expected {} channel widths (one per level), got {}",
                self.height,
                self.channels.len()
            )));
        }
        if let Some(level) = self.channels.iter().position(|&c| c == 0) {
            return Err(AcnetError::Config(format!("level {} has zero channels", level + 1)));
        }
        if self.dilations.is_empty() {
            return Err(AcnetError::Config("at least one dilation rate is required".into()));
        }
        for (i, &r) in self.dilations.iter().enumerate() {
            if r == 0 {
                return Err(AcnetError::Config("dilation rates must be at least 1".into()));
            }
            if self.dilations[..i].contains(&r) {
                return Err(AcnetError::Config(format!("dilation rate {r} is repeated")));
            }
        }
        if self.num_classes == 0 {
            return Err(AcnetError::Config("num_classes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        node_count(self.height)
    }

    pub fn leaf_count(&self) -> usize {
        leaf_count(self.height)
    }
}

pub fn node_count(height: usize) -> usize {
    (1 << height) - 1
}

pub fn edge_count(height: usize) -> usize {
    (1 << height) - 2
}

pub fn leaf_count(height: usize) -> usize {
    1 << (height - 1)
}

pub fn internal_count(height: usize) -> usize {
    leaf_count(height) - 1
}

/// Node `(level, index)`, both 1-based; level 1 is the root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub level: usize,
    pub index: usize,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId { level: 1, index: 1 };

    pub fn new(level: usize, index: usize) -> Self {
        debug_assert!(level >= 1 && index >= 1 && index <= 1 << (level - 1));
        NodeId { level, index }
    }

    pub fn left(self) -> NodeId {
        NodeId::new(self.level + 1, 2 * self.index - 1)
    }

    pub fn right(self) -> NodeId {
        NodeId::new(self.level + 1, 2 * self.index)
    }

    pub fn parent(self) -> Option<NodeId> {
        (self.level > 1).then(|| NodeId::new(self.level - 1, self.index.div_ceil(2)))
    }

    pub fn is_left_child(self) -> bool {
        self.level > 1 && self.index % 2 == 1
    }

    /// Position in level order, root = 0.
    pub fn flat(self) -> usize {
        (1 << (self.level - 1)) - 1 + (self.index - 1)
    }

    pub fn from_flat(flat: usize) -> NodeId {
        let level = (usize::BITS - (flat + 1).leading_zeros()) as usize;
        NodeId::new(level, flat + 2 - (1 << (level - 1)))
    }

    pub fn is_leaf(self, height: usize) -> bool {
        self.level == height
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}_{}", self.level, self.index)
    }
}

/// All nodes in level order.
pub fn nodes(height: usize) -> impl Iterator<Item = NodeId> {
    (0..node_count(height)).map(NodeId::from_flat)
}

/// Leaves left to right.
pub fn leaves(height: usize) -> impl Iterator<Item = NodeId> {
    (1..=leaf_count(height)).map(move |i| NodeId::new(height, i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!((node_count(3), edge_count(3), leaf_count(3)), (7, 6, 4));
        assert_eq!((node_count(1), edge_count(1), leaf_count(1)), (1, 0, 1));
        for h in 1..=6 {
            assert_eq!(node_count(h), internal_count(h) + leaf_count(h));
            assert_eq!(edge_count(h), node_count(h) - 1);
        }
    }

    #[test]
    fn flat_round_trip() {
        for (flat, node) in nodes(5).enumerate() {
            assert_eq!(node.flat(), flat);
            assert_eq!(NodeId::from_flat(flat), node);
            if let Some(p) = node.parent() {
                let child = if node.is_left_child() { p.left() } else { p.right() };
                assert_eq!(child, node);
            }
        }
        assert_eq!(NodeId::ROOT.left(), NodeId::new(2, 1));
        assert_eq!(NodeId::new(2, 2).right(), NodeId::new(3, 4));
    }

    #[test]
    fn validation() {
        assert!(TreeConfig::default().validate().is_ok());
        let mut c = TreeConfig::default();
        c.channels.pop();
        assert!(c.validate().is_err());
        let mut c = TreeConfig::default();
        c.dilations = vec![1, 2, 2];
        assert!(c.validate().is_err());
        let mut c = TreeConfig::default();
        c.height = 0;
        assert!(c.validate().is_err());
    }
}
