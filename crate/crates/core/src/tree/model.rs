use acnet_numeric::{argmax, Mode, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{internal_count, leaf_count, node_count, NodeId, TreeConfig};
use super::units::{AttentionTransformer, LeafHead, RoutingUnit};
use crate::backbone::{DeskBackbone, FeatureExtractor};
use crate::error::{AcnetError, Result};

/// Backbone plus a full binary tree of routing units, attention-transformer
/// edges and leaf heads. Parameters of the tree proper live in one store,
/// the backbone keeps its own so it can be frozen independently.
#[derive(Clone, Debug)]
pub struct TreeModel<B: FeatureExtractor = DeskBackbone> {
    config: TreeConfig,
    backbone: B,
    store: ParamStore,
    routers: Vec<RoutingUnit>,
    /// Transformers on the edge into each non-root node, indexed by
    /// `node.flat() - 1`.
    edges: Vec<Vec<AttentionTransformer>>,
    leaves: Vec<LeafHead>,
}

/// Builds a tree on top of `backbone`; identical seeds give identical weights.
pub fn build_tree<B: FeatureExtractor>(config: &TreeConfig, backbone: B, seed: u64) -> Result<TreeModel<B>> {
    config.validate()?;
    let (bc, bh, bw) = backbone.output_shape();
    if config.channels[0] != bc {
        return Err(AcnetError::Config(format!(
            "root level expects {} channels but the backbone produces {bc}",
            config.channels[0]
        )));
    }
    if config.aspp && config.height > 1 {
        if let Some(&r) = config.dilations.iter().find(|&&r| r >= bh.min(bw)) {
            return Err(AcnetError::Config(format!(
                "dilation rate {r} leaves only the center tap inside {bh}×{bw} feature maps"
            )));
        }
    }
    let h = config.height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();

    let mut routers = Vec::with_capacity(internal_count(h));
    for flat in 0..internal_count(h) {
        let node = NodeId::from_flat(flat);
        let c = config.channels[node.level - 1];
        routers.push(RoutingUnit::new(
            &mut store,
            &format!("node{node}.route"),
            c,
            config.routing_pool,
            config.gc_block,
            &mut rng,
        )?);
    }

    let rates = config.aspp.then_some(config.dilations.as_slice());
    let mut edges = Vec::with_capacity(node_count(h) - 1);
    for flat in 1..node_count(h) {
        let node = NodeId::from_flat(flat);
        let c_in = config.channels[node.level - 2];
        let c_out = config.channels[node.level - 1];
        let count = config.edge_mode.transformers(node.is_left_child());
        let mut units = Vec::with_capacity(count);
        for t in 0..count {
            let from = if t == 0 { c_in } else { c_out };
            units.push(AttentionTransformer::new(
                &mut store,
                &format!("edge{node}.t{t}"),
                from,
                c_out,
                rates,
                config.attention,
                &mut rng,
            )?);
        }
        edges.push(units);
    }

    let c_leaf = config.channels[h - 1];
    let leaves = (1..=leaf_count(h))
        .map(|i| LeafHead::new(&mut store, &format!("leaf{i}"), c_leaf, config.num_classes, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    Ok(TreeModel {
        config: config.clone(),
        backbone,
        store,
        routers,
        edges,
        leaves,
    })
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct TreeTrace {
    pub height: usize,
    pub features: Var,
    /// Left-child gate `[N]` per internal node, level order.
    pub gates: Vec<Var>,
    /// Accumulated probability `[N]` per node, level order.
    pub path_probs: Vec<Var>,
    /// Class distribution `[N, K]` per leaf, left to right.
    pub leaf_probs: Vec<Var>,
    /// Final distribution `[N, K]`.
    pub combined: Var,
    /// Map handed to the children of each internal node.
    pub node_maps: Vec<Var>,
    /// Convolution map inside each leaf head.
    pub leaf_maps: Vec<Var>,
}

impl TreeTrace {
    pub fn leaf_path_probs(&self) -> &[Var] {
        &self.path_probs[internal_count(self.height)..]
    }

    pub fn to_prediction(&self, tape: &Tape) -> Prediction {
        let get = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        Prediction {
            height: self.height,
            gates: get(&self.gates),
            path_probs: get(&self.path_probs),
            leaf_probs: get(&self.leaf_probs),
            combined: tape.value(self.combined).clone(),
        }
    }
}

/// Plain values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub height: usize,
    pub gates: Vec<Tensor>,
    pub path_probs: Vec<Tensor>,
    pub leaf_probs: Vec<Tensor>,
    pub combined: Tensor,
}

impl Prediction {
    pub fn batch_size(&self) -> usize {
        self.combined.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.combined.shape()[1]
    }

    pub fn leaf_path_probs(&self) -> &[Tensor] {
        &self.path_probs[internal_count(self.height)..]
    }

    /// Argmax of the final distribution per sample; ties go to the lowest class.
    pub fn predicted(&self) -> Vec<usize> {
        (0..self.batch_size()).map(|n| argmax(self.combined.row(n))).collect()
    }

    /// Argmax of one leaf's distribution per sample.
    pub fn leaf_predicted(&self, leaf: usize) -> Vec<usize> {
        (0..self.batch_size()).map(|n| argmax(self.leaf_probs[leaf].row(n))).collect()
    }

    /// Sample `n` alone, as a batch of one.
    pub fn sample(&self, n: usize) -> Prediction {
        let one = |t: &Tensor| {
            let mut shape = t.shape().to_vec();
            shape[0] = 1;
            t.index_outer(n).reshape(&shape).expect("row of a batch")
        };
        Prediction {
            height: self.height,
            gates: self.gates.iter().map(one).collect(),
            path_probs: self.path_probs.iter().map(one).collect(),
            leaf_probs: self.leaf_probs.iter().map(one).collect(),
            combined: one(&self.combined),
        }
    }
}

impl<B: FeatureExtractor> TreeModel<B> {
    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn backbone(&self) -> &B {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut B {
        &mut self.backbone
    }

    /// Parameters of the tree proper (everything but the backbone).
    pub fn tree_params(&self) -> &ParamStore {
        &self.store
    }

    pub fn tree_params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Backbone store first, then the tree store.
    pub fn stores(&self) -> [&ParamStore; 2] {
        [self.backbone.params(), &self.store]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore; 2] {
        [self.backbone.params_mut(), &mut self.store]
    }

    pub fn routers(&self) -> &[RoutingUnit] {
        &self.routers
    }

    /// Transformers on the edge into `node` (empty for the root).
    pub fn edge(&self, node: NodeId) -> &[AttentionTransformer] {
        match node.flat() {
            0 => &[],
            f => &self.edges[f - 1],
        }
    }

    pub fn leaves(&self) -> &[LeafHead] {
        &self.leaves
    }

    pub fn num_scalars(&self) -> usize {
        self.stores().iter().map(|s| s.num_scalars()).sum()
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.backbone.set_frozen(frozen);
    }

    pub fn zero_grads(&mut self) {
        for s in self.stores_mut() {
            s.zero_grads();
        }
    }

    /// Adds the gradients of every parameter bound on `tape`.
    pub fn collect_grads(&mut self, tape: &Tape) -> Result<()> {
        for s in self.stores_mut() {
            s.collect_grads(tape)?;
        }
        Ok(())
    }

    /// Records a full forward pass of `images` on `tape`.
    pub fn forward_tape(&mut self, tape: &mut Tape, images: Var, mode: Mode) -> Result<TreeTrace> {
        let features = self.backbone.extract(tape, images, mode)?;
        let n = tape.shape(features)[0];
        let h = self.config.height;
        let total = node_count(h);
        let internal = internal_count(h);

        let mut maps = vec![features; total];
        let mut path_probs = vec![tape.constant(Tensor::ones(&[n])); total];
        let mut gates = Vec::with_capacity(internal);
        let mut node_maps = Vec::with_capacity(internal);
        for flat in 0..internal {
            let node = NodeId::from_flat(flat);
            let (g, passed) = self.routers[flat].forward(&self.store, tape, maps[flat])?;
            let r = path_probs[flat];
            let r_left = tape.mul(r, g)?;
            let not_g = tape.one_minus(g);
            let r_right = tape.mul(r, not_g)?;
            for (child, rc) in [(node.left(), r_left), (node.right(), r_right)] {
                let mut y = passed;
                for t in &self.edges[child.flat() - 1] {
                    y = t.forward(&mut self.store, tape, y, mode)?;
                }
                maps[child.flat()] = y;
                path_probs[child.flat()] = rc;
            }
            gates.push(g);
            node_maps.push(passed);
        }

        let mut leaf_probs = Vec::with_capacity(self.leaves.len());
        let mut leaf_maps = Vec::with_capacity(self.leaves.len());
        let mut combined = None;
        for (j, leaf) in self.leaves.iter().enumerate() {
            let flat = internal + j;
            let (p, map) = leaf.forward(&mut self.store, tape, maps[flat], mode)?;
            let weighted = tape.scale_rows(p, path_probs[flat])?;
            combined = Some(match combined {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
            leaf_probs.push(p);
            leaf_maps.push(map);
        }

        Ok(TreeTrace {
            height: h,
            features,
            gates,
            path_probs,
            leaf_probs,
            combined: combined.expect("a tree has at least one leaf"),
            node_maps,
            leaf_maps,
        })
    }

    /// Forward pass without gradient bookkeeping beyond a scratch tape.
    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<Prediction> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let trace = self.forward_tape(&mut tape, x, mode)?;
        Ok(trace.to_prediction(&tape))
    }

    /// Eval-mode forward pass; normalization statistics must be initialized.
    pub fn predict(&mut self, images: &Tensor) -> Result<Prediction> {
        self.forward(images, Mode::Eval)
    }
}
