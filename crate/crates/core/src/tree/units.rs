//! Routing units, attention transformers and leaf heads.

use acnet_numeric::{BatchNorm2d, Conv2d, ConvSpec, LayerNorm, Linear, Mode, ParamStore, Tape, Var};
use rand::Rng;

use super::config::Pooling;
use crate::error::Result;

/// Hidden width of the global-context and channel-attention bottlenecks.
pub fn bottleneck(channels: usize) -> usize {
    (channels / 4).max(1)
}

/// Spatial-softmax context pooling followed by a bottleneck transform that
/// is broadcast-added back onto every position.
#[derive(Clone, Debug)]
pub struct GlobalContext {
    pub context: Conv2d,
    pub down: Linear,
    pub norm: LayerNorm,
    pub up: Linear,
}

impl GlobalContext {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        // A one-wide layer norm outputs its bias alone, so keep at least two.
        let hidden = bottleneck(channels).max(2);
        Ok(GlobalContext {
            context: Conv2d::new(store, &format!("{name}.context"), ConvSpec::new(channels, 1, 1, 0), false, rng)?,
            down: Linear::new(store, &format!("{name}.down"), channels, hidden, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), hidden),
            up: Linear::new(store, &format!("{name}.up"), hidden, channels, rng),
        })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (n, hw) = (shape[0], shape[2] * shape[3]);
        let logits = self.context.forward(store, tape, x)?;
        let logits = tape.reshape(logits, &[n, hw])?;
        let weights = tape.softmax(logits)?;
        let ctx = tape.attention_pool(x, weights)?;
        let t = self.down.forward(store, tape, ctx)?;
        let t = self.norm.forward(store, tape, t)?;
        let t = tape.relu(t);
        let t = self.up.forward(store, tape, t)?;
        Ok(tape.add_channels(x, t)?)
    }
}

/// Splits a sample's probability mass between the two children of a node.
#[derive(Clone, Debug)]
pub struct RoutingUnit {
    pub conv: Conv2d,
    pub gc: Option<GlobalContext>,
    pub pool: Pooling,
    pub fc: Linear,
}

impl RoutingUnit {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        pool: Pooling,
        gc_block: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), ConvSpec::new(channels, channels, 1, 0), true, rng)?;
        let gc = if gc_block {
            Some(GlobalContext::new(store, &format!("{name}.gc"), channels, rng)?)
        } else {
            None
        };
        let fc = Linear::new(store, &format!("{name}.fc"), channels, 1, rng);
        Ok(RoutingUnit { conv, gc, pool, fc })
    }

    /// Returns the left-child gate `[N]` and the map passed to both children.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let mut passed = self.conv.forward(store, tape, x)?;
        if let Some(gc) = &self.gc {
            passed = gc.forward(store, tape, passed)?;
        }
        let pooled = match self.pool {
            Pooling::Gap => tape.global_avg_pool(passed)?,
            Pooling::Gmp => tape.global_max_pool(passed)?,
        };
        let feat = tape.signed_sqrt_l2norm(pooled)?;
        let logit = self.fc.forward(store, tape, feat)?;
        let n = tape.shape(logit)[0];
        let logit = tape.reshape(logit, &[n])?;
        Ok((tape.sigmoid(logit), passed))
    }
}

/// `BN → GAP → FC → relu → FC → sigmoid`: one scale in (0, 1) per channel.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub bn: BatchNorm2d,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = bottleneck(channels);
        ChannelAttention {
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels),
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng),
        }
    }

    /// Channel scales `[N, C]`.
    pub fn forward(&self, store: &mut ParamStore, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let y = self.bn.forward(store, tape, x, mode)?;
        let y = tape.global_avg_pool(y)?;
        let y = self.fc1.forward(store, tape, y)?;
        let y = tape.relu(y);
        let y = self.fc2.forward(store, tape, y)?;
        Ok(tape.sigmoid(y))
    }
}

/// Edge unit: parallel dilated 3×3 convolutions fused by a 1×1 convolution
/// (or a single 3×3 convolution), then channel attention.
#[derive(Clone, Debug)]
pub struct AttentionTransformer {
    pub branches: Vec<Conv2d>,
    pub fuse: Option<Conv2d>,
    pub attention: Option<ChannelAttention>,
}

/// Intermediate values of one transformer pass.
#[derive(Clone, Copy, Debug)]
pub struct TransformOutput {
    pub fused: Var,
    pub scales: Option<Var>,
    pub output: Var,
}

impl AttentionTransformer {
    /// `dilations = None` builds the single-convolution variant.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        dilations: Option<&[usize]>,
        attention: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (branches, fuse) = match dilations {
            Some(rates) => {
                let branches = rates
                    .iter()
                    .map(|&r| {
                        let spec = ConvSpec::new(in_channels, out_channels, 3, r).with_dilation(r);
                        Conv2d::new(store, &format!("{name}.aspp{r}"), spec, true, rng)
                    })
                    .collect::<acnet_numeric::Result<Vec<_>>>()?;
                let spec = ConvSpec::new(out_channels * rates.len(), out_channels, 1, 0);
                let fuse = Conv2d::new(store, &format!("{name}.fuse"), spec, true, rng)?;
                (branches, Some(fuse))
            }
            None => {
                let spec = ConvSpec::new(in_channels, out_channels, 3, 1);
                (vec![Conv2d::new(store, &format!("{name}.conv"), spec, true, rng)?], None)
            }
        };
        let attention = attention.then(|| ChannelAttention::new(store, &format!("{name}.att"), out_channels, rng));
        Ok(AttentionTransformer { branches, fuse, attention })
    }

    pub fn forward(&self, store: &mut ParamStore, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_detailed(store, tape, x, mode)?.output)
    }

    pub fn forward_detailed(&self, store: &mut ParamStore, tape: &mut Tape, x: Var, mode: Mode) -> Result<TransformOutput> {
        let fused = match &self.fuse {
            Some(fuse) => {
                let outs = self
                    .branches
                    .iter()
                    .map(|b| b.forward(store, tape, x))
                    .collect::<acnet_numeric::Result<Vec<_>>>()?;
                let cat = tape.concat_channels(&outs)?;
                fuse.forward(store, tape, cat)?
            }
            None => self.branches[0].forward(store, tape, x)?,
        };
        match &self.attention {
            Some(att) => {
                let scales = att.forward(store, tape, fused, mode)?;
                let output = tape.scale_channels(fused, scales)?;
                Ok(TransformOutput { fused, scales: Some(scales), output })
            }
            None => Ok(TransformOutput { fused, scales: None, output: fused }),
        }
    }
}

/// `BN → 1×1 conv → global max pool → signed sqrt/L2 → FC → softmax`.
#[derive(Clone, Debug)]
pub struct LeafHead {
    pub bn: BatchNorm2d,
    pub conv: Conv2d,
    pub fc: Linear,
}

impl LeafHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LeafHead {
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels),
            conv: Conv2d::new(store, &format!("{name}.conv"), ConvSpec::new(channels, channels, 1, 0), true, rng)?,
            fc: Linear::new(store, &format!("{name}.fc"), channels, num_classes, rng),
        })
    }

    /// Returns the class distribution `[N, K]` and the convolution map.
    pub fn forward(&self, store: &mut ParamStore, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let y = self.bn.forward(store, tape, x, mode)?;
        let map = self.conv.forward(store, tape, y)?;
        let pooled = tape.global_max_pool(map)?;
        let feat = tape.signed_sqrt_l2norm(pooled)?;
        let logits = self.fc.forward(store, tape, feat)?;
        Ok((tape.softmax(logits)?, map))
    }
}
