//! Channel compression of the six side outputs and the coarse prediction
//! used for global guidance.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::encoder::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::params::{init_conv, ConvParams, ParamStore};
use crate::tensor::{ConvSpec, Tensor};

/// One 3×3 convolution per level mapping `C_h` channels to `k`. Outputs
/// keep their batch entries.
#[derive(Clone, Debug)]
pub struct CompressionHead {
    convs: Vec<ConvParams>,
    k: usize,
    relu: bool,
}

impl CompressionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        in_channels: [usize; LEVELS],
        k: usize,
        relu: bool,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("compression width k must be positive".into()));
        }
        let convs = in_channels
            .iter()
            .enumerate()
            .map(|(h, &c)| init_conv(store, &mut *rng, &format!("cp{}", h + 1), c, k, 3))
            .collect::<Result<_>>()?;
        Ok(CompressionHead { convs, k, relu })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, levels: &[NodeId; LEVELS]) -> Result<[NodeId; LEVELS]> {
        let mut out = *levels;
        for (slot, (conv, &x)) in out.iter_mut().zip(self.convs.iter().zip(levels)) {
            let w = g.param(params, conv.weight);
            let b = g.param(params, conv.bias);
            let y = g.conv2d(x, w, Some(b), ConvSpec::same(3, 1))?;
            *slot = if self.relu { g.relu(y) } else { y };
        }
        Ok(out)
    }
}

/// Compressed pyramid: six tensors of `[B, k, H_h, W_h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedPyramid {
    pub levels: Vec<Tensor>,
    pub k: usize,
}

/// Apply the head to precomputed features.
pub fn compress(head: &CompressionHead, params: &ParamStore, pyramid: &FeaturePyramid) -> Result<CompressedPyramid> {
    if pyramid.levels.len() != LEVELS {
        return Err(Error::Shape(format!("expected {LEVELS} levels, got {}", pyramid.levels.len())));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = pyramid.levels.iter().map(|t| g.input(t.clone())).collect();
    let ids: [NodeId; LEVELS] = ids.try_into().expect("six levels");
    let out = head.forward(&mut g, params, &ids)?;
    Ok(CompressedPyramid {
        levels: out.iter().map(|&id| g.value(id).clone()).collect(),
        k: head.k,
    })
}

/// A single 1×1 convolution with one output channel, shared by every batch
/// entry of the coarsest compressed level.
#[derive(Clone, Debug)]
pub struct CoarsePredictor {
    conv: ConvParams,
    k: usize,
}

impl CoarsePredictor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, k: usize) -> Result<Self> {
        Ok(CoarsePredictor {
            conv: init_conv(store, rng, "coarse", k, 1, 1)?,
            k,
        })
    }

    pub fn params(&self) -> ConvParams {
        self.conv
    }

    /// Logits `[B, 1, H_6, W_6]`.
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, cp6: NodeId) -> Result<NodeId> {
        let c = g.value(cp6).channels();
        if c != self.k {
            return Err(Error::Shape(format!("coarse predictor expects {} channels, got {c}", self.k)));
        }
        let w = g.param(params, self.conv.weight);
        let b = g.param(params, self.conv.bias);
        g.conv2d(cp6, w, Some(b), ConvSpec::new(1, 0, 1))
    }
}

/// Coarse logit maps for the RGB and depth batch entries, `[1, 1, H_6, W_6]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarsePrediction {
    pub s_c_rgb: Tensor,
    pub s_c_d: Tensor,
}

pub fn coarse_predict(pred: &CoarsePredictor, params: &ParamStore, cp6: &Tensor) -> Result<CoarsePrediction> {
    if cp6.batch() != 2 {
        return Err(Error::Shape(format!("coarse prediction expects a batch of 2, got {}", cp6.batch())));
    }
    let mut g = Graph::new();
    let x = g.input(cp6.clone());
    let y = pred.forward(&mut g, params, x)?;
    let logits = g.value(y);
    Ok(CoarsePrediction {
        s_c_rgb: logits.slice_batch(0),
        s_c_d: logits.slice_batch(1),
    })
}
