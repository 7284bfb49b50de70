//! Cross-modal fusion and the densely connected top-down decoder.
//!
//! At every level the compressed RGB and depth features are merged into a
//! single tensor (sum plus product by default), then six Inception-style
//! aggregation modules decode from the coarsest level upward. Each module
//! receives its own fused level together with the bilinearly up-sampled
//! outputs of every deeper module.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::encoder::LEVELS;
use crate::error::{Error, Result};
use crate::params::{init_conv, ConvParams, ParamStore};
use crate::tensor::{ConvSpec, Tensor};

/// `a + b + a ⊙ b`, elementwise.
pub fn cm_fuse(x_rgb: &Tensor, x_d: &Tensor) -> Result<Tensor> {
    x_rgb.zip_map(x_d, |a, b| a + b + a * b)
}

/// Channel concatenation, RGB channels first.
pub fn concat_fuse(x_rgb: &Tensor, x_d: &Tensor) -> Result<Tensor> {
    x_rgb.expect_same_shape(x_d)?;
    Tensor::concat(&[x_rgb, x_d], 1)
}

/// How the two modality slices of a compressed level become one tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Sum-plus-product cross-modal fusion; `k` channels.
    Cm,
    /// Channel concatenation; `2k` channels.
    Concat,
    /// Single-modality input passed through unchanged; `k` channels.
    Identity,
}

impl FusionMode {
    pub fn fused_width(self, k: usize) -> usize {
        match self {
            FusionMode::Concat => 2 * k,
            FusionMode::Cm | FusionMode::Identity => k,
        }
    }

    /// Fuse a compressed level. For `Cm` and `Concat` the input is a
    /// two-entry batch (RGB, depth); for `Identity` it is a one-entry batch.
    pub fn apply(self, g: &mut Graph, level: NodeId) -> Result<NodeId> {
        let batch = g.value(level).batch();
        match self {
            FusionMode::Identity => {
                if batch != 1 {
                    return Err(Error::Shape(format!("identity fusion expects one stream, got {batch}")));
                }
                Ok(level)
            }
            FusionMode::Cm | FusionMode::Concat => {
                if batch != 2 {
                    return Err(Error::Shape(format!("cross-modal fusion expects a batch of 2, got {batch}")));
                }
                let rgb = g.slice_batch(level, 0)?;
                let d = g.slice_batch(level, 1)?;
                if self == FusionMode::Concat {
                    g.concat_channels(&[rgb, d])
                } else {
                    let sum = g.add(rgb, d)?;
                    let prod = g.mul(rgb, d)?;
                    g.add(sum, prod)
                }
            }
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Cm => "cm",
            FusionMode::Concat => "concat",
            FusionMode::Identity => "identity",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cm" => Ok(FusionMode::Cm),
            "concat" => Ok(FusionMode::Concat),
            "identity" => Ok(FusionMode::Identity),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Inception-style aggregation with four stride-1 branches of `k / 4`
/// channels each: 1×1; 1×1→3×3; 1×1→5×5; 3×3 max-pool→1×1.
#[derive(Clone, Debug)]
pub struct FaModule {
    in_channels: usize,
    k: usize,
    output_relu: bool,
    b1: ConvParams,
    b2_reduce: ConvParams,
    b2: ConvParams,
    b3_reduce: ConvParams,
    b3: ConvParams,
    b4: ConvParams,
}

impl FaModule {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        k: usize,
        output_relu: bool,
    ) -> Result<Self> {
        if k == 0 || k % 4 != 0 {
            return Err(Error::Config(format!("aggregation width k = {k} must be a positive multiple of 4")));
        }
        let q = k / 4;
        let mut conv = |suffix: &str, cin: usize, ks: usize| init_conv(store, &mut *rng, &format!("{name}.{suffix}"), cin, q, ks);
        Ok(FaModule {
            in_channels,
            k,
            output_relu,
            b1: conv("b1", in_channels, 1)?,
            b2_reduce: conv("b2_reduce", in_channels, 1)?,
            b2: conv("b2", q, 3)?,
            b3_reduce: conv("b3_reduce", in_channels, 1)?,
            b3: conv("b3", q, 5)?,
            b4: conv("b4", in_channels, 1)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.k
    }

    fn conv(g: &mut Graph, params: &ParamStore, p: ConvParams, x: NodeId, kernel: usize) -> Result<NodeId> {
        let w = g.param(params, p.weight);
        let b = g.param(params, p.bias);
        g.conv2d(x, w, Some(b), ConvSpec::same(kernel, 1))
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let c = g.value(x).channels();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "aggregation module expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let o1 = Self::conv(g, params, self.b1, x, 1)?;

        let r2 = Self::conv(g, params, self.b2_reduce, x, 1)?;
        let r2 = g.relu(r2);
        let o2 = Self::conv(g, params, self.b2, r2, 3)?;

        let r3 = Self::conv(g, params, self.b3_reduce, x, 1)?;
        let r3 = g.relu(r3);
        let o3 = Self::conv(g, params, self.b3, r3, 5)?;

        let pooled = g.max_pool3(x);
        let o4 = Self::conv(g, params, self.b4, pooled, 1)?;

        let cat = g.concat_channels(&[o1, o2, o3, o4])?;
        Ok(if self.output_relu { g.relu(cat) } else { cat })
    }
}

/// Run a standalone aggregation module on a `[B, C, H, W]` tensor.
pub fn fa_forward(fa: &FaModule, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let id = g.input(x.clone());
    let out = fa.forward(&mut g, params, id)?;
    Ok(g.value(out).clone())
}

/// Number of input channels of the aggregation module at level `h`
/// (1-based): its own fused level plus `k` from every deeper module.
pub fn fa_input_channels(level: usize, fused_width: usize, k: usize) -> usize {
    fused_width + (LEVELS - level) * k
}

#[derive(Clone, Debug)]
pub struct DenseDecoder {
    /// Index 0 is FA1 (finest), index 5 is FA6.
    modules: Vec<FaModule>,
    final_conv: ConvParams,
    k: usize,
    fused_width: usize,
}

impl DenseDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        k: usize,
        fusion: FusionMode,
        fa_output_relu: bool,
    ) -> Result<Self> {
        let fused_width = fusion.fused_width(k);
        let mut modules = Vec::with_capacity(LEVELS);
        for level in 1..=LEVELS {
            let cin = fa_input_channels(level, fused_width, k);
            modules.push(FaModule::new(store, &mut *rng, &format!("fa{level}"), cin, k, fa_output_relu)?);
        }
        let final_conv = init_conv(store, rng, "final", k, 1, 1)?;
        Ok(DenseDecoder {
            modules,
            final_conv,
            k,
            fused_width,
        })
    }

    pub fn module(&self, level: usize) -> &FaModule {
        &self.modules[level - 1]
    }

    pub fn fused_width(&self) -> usize {
        self.fused_width
    }

    /// Decode six fused levels (finest first) to full-resolution logits
    /// `[1, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, fused: &[NodeId; LEVELS]) -> Result<NodeId> {
        for (h, &f) in fused.iter().enumerate() {
            let c = g.value(f).channels();
            if c != self.fused_width {
                return Err(Error::Shape(format!(
                    "fused level {} has {c} channels, expected {}",
                    h + 1,
                    self.fused_width
                )));
            }
        }
        let mut outputs: Vec<NodeId> = Vec::with_capacity(LEVELS);
        for level in (1..=LEVELS).rev() {
            let own = fused[level - 1];
            let (height, width) = {
                let t = g.value(own);
                (t.height(), t.width())
            };
            let mut inputs = vec![own];
            // outputs holds FA6, FA5, ... in creation order; feed shallower-first
            for &deeper in outputs.iter().rev() {
                inputs.push(g.resize_bilinear(deeper, height, width));
            }
            let x = g.concat_channels(&inputs)?;
            outputs.push(self.modules[level - 1].forward(g, params, x)?);
        }
        let fa1 = *outputs.last().expect("six modules");
        let w = g.param(params, self.final_conv.weight);
        let b = g.param(params, self.final_conv.bias);
        g.conv2d(fa1, w, Some(b), ConvSpec::new(1, 0, 1))
    }

    pub fn k(&self) -> usize {
        self.k
    }
}
