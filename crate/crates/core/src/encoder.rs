//! Shared hierarchical feature extractor.
//!
//! The backbone consumes a `[B, 3, H, W]` batch (B = 2 for a Siamese pair)
//! and returns six side outputs whose spatial sizes are
//! `H / (1, 2, 4, 8, 16, 16)`. Because the two modalities travel as batch
//! entries through one parameter set, weight sharing is structural.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::dataset::SiamesePair;
use crate::error::{Error, Result};
use crate::params::{init_conv, ConvParams, ParamStore};
use crate::tensor::{ConvSpec, Tensor};

pub const LEVELS: usize = 6;

/// Downsampling factor of each level relative to the input.
pub const LEVEL_STRIDES: [usize; LEVELS] = [1, 2, 4, 8, 16, 16];

/// Coarsest stride; inputs must be divisible by it.
pub const MAX_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub channels: [usize; LEVELS],
    /// Dilation of the stride-1 convolutions in the last stage.
    pub dilation: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [16, 32, 64, 64, 64, 64],
            dilation: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        if self.channels[..5].windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "backbone channels must be non-decreasing over levels 1-5, got {:?}",
                self.channels
            )));
        }
        if self.dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn check_input_size(size: usize) -> Result<()> {
    if size == 0 || size % MAX_STRIDE != 0 {
        return Err(Error::Config(format!(
            "input size {size} must be a positive multiple of {MAX_STRIDE}"
        )));
    }
    Ok(())
}

/// Spatial size of every level for a square input.
pub fn level_sizes(input: usize) -> [usize; LEVELS] {
    LEVEL_STRIDES.map(|s| input / s)
}

/// A six-level side-output feature extractor. Implement this to plug in a
/// larger (e.g. pretrained) network; it must keep the stride contract of
/// [`LEVEL_STRIDES`] and register its parameters in the shared store.
pub trait Backbone: Send + Sync {
    fn channels(&self) -> [usize; LEVELS];

    fn forward(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<[NodeId; LEVELS]>;
}

/// Builds a custom [`Backbone`] inside a parameter store under `prefix`.
pub trait BackboneFactory {
    fn build(&self, store: &mut ParamStore, rng: &mut dyn rand::RngCore, prefix: &str) -> Result<Box<dyn Backbone>>;
}

/// Six stages of two 3×3 convolutions with rectification. Stages 2-5 open
/// with a stride-2 convolution; stage 6 keeps resolution and dilates.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    config: BackboneConfig,
    stages: Vec<[(ConvParams, ConvSpec); 2]>,
}

impl ToyBackbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(LEVELS);
        let mut in_ch = 3;
        for (level, &out_ch) in config.channels.iter().enumerate() {
            let (first, second) = match level {
                0 => (ConvSpec::same(3, 1), ConvSpec::same(3, 1)),
                1..=4 => (ConvSpec::new(2, 1, 1), ConvSpec::same(3, 1)),
                _ => (ConvSpec::same(3, config.dilation), ConvSpec::same(3, config.dilation)),
            };
            let name = format!("{prefix}.stage{}", level + 1);
            let c1 = init_conv(store, &mut *rng, &format!("{name}.conv1"), in_ch, out_ch, 3)?;
            let c2 = init_conv(store, &mut *rng, &format!("{name}.conv2"), out_ch, out_ch, 3)?;
            stages.push([(c1, first), (c2, second)]);
            in_ch = out_ch;
        }
        Ok(ToyBackbone { config, stages })
    }

    pub fn config(&self) -> BackboneConfig {
        self.config
    }
}

impl Backbone for ToyBackbone {
    fn channels(&self) -> [usize; LEVELS] {
        self.config.channels
    }

    fn forward(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<[NodeId; LEVELS]> {
        let t = g.value(x);
        if t.channels() != 3 {
            return Err(Error::Shape(format!("backbone expects 3 channels, got {}", t.channels())));
        }
        if t.height() % MAX_STRIDE != 0 || t.width() % MAX_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by {MAX_STRIDE}",
                t.height(),
                t.width()
            )));
        }
        let mut h = x;
        let mut out = [x; LEVELS];
        for (level, stage) in self.stages.iter().enumerate() {
            for (conv, spec) in stage {
                let w = g.param(params, conv.weight);
                let b = g.param(params, conv.bias);
                let y = g.conv2d(h, w, Some(b), *spec)?;
                h = g.relu(y);
            }
            out[level] = h;
        }
        Ok(out)
    }
}

/// Six side-output tensors, each `[B, C_h, H_h, W_h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Exchange the two batch entries of every level.
    pub fn swapped(&self) -> Result<FeaturePyramid> {
        let levels = self
            .levels
            .iter()
            .map(|t| Tensor::concat(&[&t.slice_batch(1), &t.slice_batch(0)], 0))
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid { levels })
    }
}

/// Run the backbone on a Siamese pair in one forward pass.
pub fn encode(backbone: &dyn Backbone, params: &ParamStore, pair: &SiamesePair) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let x = g.input(pair.stacked().clone());
    let ids = backbone.forward(&mut g, params, x)?;
    Ok(FeaturePyramid {
        levels: ids.iter().map(|&id| g.value(id).clone()).collect(),
    })
}
