//! Feature extractors that feed the tree root.

use acnet_numeric::{BatchNorm2d, Conv2d, ConvSpec, Mode, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AcnetError, Result};

/// A differentiable map from images `[N, C_in, S, S]` to features
/// `[N, C_out, H_out, W_out]` with a declared shape contract.
pub trait FeatureExtractor {
    /// `(channels, side)` of accepted images.
    fn input_shape(&self) -> (usize, usize);
    /// `(channels, height, width)` of produced feature maps.
    fn output_shape(&self) -> (usize, usize, usize);
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Records the extraction of `images` on `tape`.
    fn extract(&mut self, tape: &mut Tape, images: Var, mode: Mode) -> Result<Var>;

    fn is_frozen(&self) -> bool {
        self.params().is_frozen()
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.params_mut().set_frozen(frozen);
    }
}

/// One `conv 3×3 → BN → relu (→ 2×2 max pool)` stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub width: usize,
    pub downsample: bool,
}

/// Small convolutional stack standing in for a truncated pretrained network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeskBackboneSpec {
    pub input_channels: usize,
    pub side: usize,
    pub blocks: Vec<BlockSpec>,
}

impl Default for DeskBackboneSpec {
    /// 3×32×32 input, widths 16/32/32, downsampling after the first two
    /// blocks: 32×8×8 features.
    fn default() -> Self {
        DeskBackboneSpec {
            input_channels: 3,
            side: 32,
            blocks: vec![
                BlockSpec { width: 16, downsample: true },
                BlockSpec { width: 32, downsample: true },
                BlockSpec { width: 32, downsample: false },
            ],
        }
    }
}

impl DeskBackboneSpec {
    /// `(channels, height, width)` produced for the declared input.
    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        if self.input_channels == 0 || self.side == 0 {
            return Err(AcnetError::Config("backbone input must be non-empty".into()));
        }
        if self.blocks.is_empty() {
            return Err(AcnetError::Config("backbone needs at least one block".into()));
        }
        let mut side = self.side;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.width == 0 {
                return Err(AcnetError::Config(format!("backbone block {i} has zero width")));
            }
            if b.downsample {
                side /= 2;
                if side == 0 {
                    return Err(AcnetError::Config(format!(
                        "backbone block {i} downsamples a {}-pixel input to nothing",
                        self.side
                    )));
                }
            }
        }
        Ok((self.blocks.last().unwrap().width, side, side))
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
    downsample: bool,
}

#[derive(Clone, Debug)]
pub struct DeskBackbone {
    spec: DeskBackboneSpec,
    output: (usize, usize, usize),
    store: ParamStore,
    blocks: Vec<Block>,
}

/// Xavier-initialized desk backbone; identical seeds give identical weights.
pub fn build_desk_backbone(spec: &DeskBackboneSpec, seed: u64) -> Result<DeskBackbone> {
    let output = spec.output_shape()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut in_ch = spec.input_channels;
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for (i, b) in spec.blocks.iter().enumerate() {
        let name = format!("backbone.block{i}");
        let conv = Conv2d::new(
            &mut store,
            &format!("{name}.conv"),
            ConvSpec::new(in_ch, b.width, 3, 1),
            false,
            &mut rng,
        )?;
        let bn = BatchNorm2d::new(&mut store, &format!("{name}.bn"), b.width);
        blocks.push(Block {
            conv,
            bn,
            downsample: b.downsample,
        });
        in_ch = b.width;
    }
    Ok(DeskBackbone {
        spec: spec.clone(),
        output,
        store,
        blocks,
    })
}

impl DeskBackbone {
    pub fn spec(&self) -> &DeskBackboneSpec {
        &self.spec
    }
}

impl FeatureExtractor for DeskBackbone {
    fn input_shape(&self) -> (usize, usize) {
        (self.spec.input_channels, self.spec.side)
    }

    fn output_shape(&self) -> (usize, usize, usize) {
        self.output
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn extract(&mut self, tape: &mut Tape, images: Var, mode: Mode) -> Result<Var> {
        let (c, s) = self.input_shape();
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1] != c || shape[2] != s || shape[3] != s {
            return Err(AcnetError::Input(format!(
                "backbone expects [N, {c}, {s}, {s}] images, got {shape:?}"
            )));
        }
        let mut x = images;
        for b in &self.blocks {
            x = b.conv.forward(&self.store, tape, x)?;
            x = b.bn.forward(&mut self.store, tape, x, mode)?;
            x = tape.relu(x);
            if b.downsample {
                x = tape.max_pool2x2(x)?;
            }
        }
        Ok(x)
    }
}
