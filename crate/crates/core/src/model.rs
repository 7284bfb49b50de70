//! Network assembly and the ablation variant matrix.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{sigmoid, Graph, NodeId};
use crate::dataset::{form_siamese_pair, InputNorm, RgbdSample, SiamesePair};
use crate::decoder::{DenseDecoder, FusionMode};
use crate::encoder::{check_input_size, Backbone, BackboneConfig, BackboneFactory, ToyBackbone, LEVELS};
use crate::error::{Error, Result};
use crate::head::{CoarsePredictor, CompressionHead};
use crate::loss::DEFAULT_LAMBDA;
use crate::params::ParamStore;
use crate::tensor::{self, Map};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    /// Built-in six-stage toy network.
    Toy,
    /// Caller-supplied network via [`BackboneFactory`].
    Hook,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modalities {
    RgbD,
    Rgb,
    Depth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Learning {
    /// One backbone shared by both modalities.
    Joint,
    /// One backbone per modality.
    Separate,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " value {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}

text_enum!(BackboneKind { Toy => "toy", Hook => "hook" });
text_enum!(Modalities { RgbD => "rgb+d", Rgb => "rgb", Depth => "d" });
text_enum!(Learning { Joint => "joint", Separate => "separate" });

/// Architecture configuration of one network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariantConfig {
    pub backbone: BackboneKind,
    pub fusion: FusionMode,
    pub modalities: Modalities,
    pub learning: Learning,
    /// Compressed feature width.
    pub k: usize,
    pub input_size: usize,
    /// Weight of the coarse guidance terms.
    pub lambda: f64,
    pub backbone_channels: [usize; LEVELS],
    pub dilation: usize,
    /// Rectify compression outputs.
    pub cp_relu: bool,
    /// Rectify the concatenated output of each aggregation module.
    pub fa_output_relu: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        VariantConfig {
            backbone: BackboneKind::Toy,
            fusion: FusionMode::Cm,
            modalities: Modalities::RgbD,
            learning: Learning::Joint,
            k: 64,
            input_size: 320,
            lambda: DEFAULT_LAMBDA,
            backbone_channels: bb.channels,
            dilation: bb.dilation,
            cp_relu: true,
            fa_output_relu: true,
        }
    }
}

impl VariantConfig {
    /// Small configuration that trains on a CPU in minutes.
    pub fn desk() -> Self {
        VariantConfig {
            k: 16,
            input_size: 64,
            backbone_channels: [8, 16, 32, 32, 32, 32],
            ..Self::default()
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            channels: self.backbone_channels,
            dilation: self.dilation,
        }
    }

    /// Reject inconsistent combinations, naming the violated rule.
    pub fn validate(&self) -> Result<()> {
        let single = self.modalities != Modalities::RgbD;
        if single != (self.fusion == FusionMode::Identity) {
            return Err(Error::Config(format!(
                "fusion = identity must coincide with a single modality (got fusion {}, modalities {})",
                self.fusion, self.modalities
            )));
        }
        if self.learning == Learning::Separate && single {
            return Err(Error::Config("separate learning needs both modalities".into()));
        }
        if self.k == 0 || self.k % 4 != 0 {
            return Err(Error::Config(format!("k = {} must be a positive multiple of 4", self.k)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda = {} must be finite and nonnegative", self.lambda)));
        }
        check_input_size(self.input_size)?;
        self.backbone_config().validate()
    }

    pub fn with_variant(self, v: Variant) -> Self {
        let (fusion, modalities, learning) = match v {
            Variant::A | Variant::B => (FusionMode::Cm, Modalities::RgbD, Learning::Joint),
            Variant::C => (FusionMode::Concat, Modalities::RgbD, Learning::Joint),
            Variant::D => (FusionMode::Identity, Modalities::Rgb, Learning::Joint),
            Variant::E => (FusionMode::Identity, Modalities::Depth, Learning::Joint),
            Variant::F => (FusionMode::Cm, Modalities::RgbD, Learning::Separate),
        };
        VariantConfig {
            fusion,
            modalities,
            learning,
            ..self
        }
    }
}

/// Rows of the ablation matrix. At toy scale there is a single backbone
/// family, so `B` shares `A`'s topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Shared backbone, sum-plus-product fusion, RGB + depth.
    A,
    /// `A` with the alternative backbone family.
    B,
    /// `A` with channel concatenation instead of cross-modal fusion.
    C,
    /// RGB only.
    D,
    /// Depth only.
    E,
    /// Two unshared backbones.
    F,
}

impl Variant {
    pub const ABLATION: [Variant; 5] = [Variant::A, Variant::C, Variant::D, Variant::E, Variant::F];

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "A: shared+CM+RGB-D",
            Variant::B => "B: alt-backbone+CM+RGB-D",
            Variant::C => "C: shared+concat+RGB-D",
            Variant::D => "D: shared+RGB",
            Variant::E => "E: shared+D",
            Variant::F => "F: separate+CM+RGB-D",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_end_matches('\'').to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            "E" => Ok(Variant::E),
            "F" => Ok(Variant::F),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    /// Final logits `[1, 1, H, W]`.
    pub s_f: NodeId,
    /// Coarse logits `[1, 1, H/16, W/16]` per available modality.
    pub coarse_rgb: Option<NodeId>,
    pub coarse_d: Option<NodeId>,
    /// Backbone side outputs (two-entry batches for two-stream models).
    pub pyramid: [NodeId; LEVELS],
    pub compressed: [NodeId; LEVELS],
    pub fused: [NodeId; LEVELS],
}

/// Probability maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub s_f: Map,
    pub s_c_rgb: Option<Map>,
    pub s_c_d: Option<Map>,
}

pub struct Model {
    cfg: VariantConfig,
    params: ParamStore,
    backbones: Vec<Box<dyn Backbone>>,
    head: CompressionHead,
    coarse: CoarsePredictor,
    decoder: DenseDecoder,
    norm: InputNorm,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("cfg", &self.cfg)
            .field("parameters", &self.params.count())
            .finish()
    }
}

/// Build a variant with the toy backbone.
pub fn build_variant(cfg: VariantConfig, seed: u64) -> Result<Model> {
    Model::build(cfg, seed, None)
}

impl Model {
    pub fn build(cfg: VariantConfig, seed: u64, hook: Option<&dyn BackboneFactory>) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let prefixes: &[&str] = match cfg.learning {
            Learning::Joint => &["backbone"],
            Learning::Separate => &["backbone_rgb", "backbone_depth"],
        };
        let mut backbones: Vec<Box<dyn Backbone>> = Vec::new();
        for prefix in prefixes {
            let bb: Box<dyn Backbone> = match (cfg.backbone, hook) {
                (BackboneKind::Toy, _) => Box::new(ToyBackbone::new(&mut params, &mut rng, prefix, cfg.backbone_config())?),
                (BackboneKind::Hook, Some(factory)) => factory.build(&mut params, &mut rng, prefix)?,
                (BackboneKind::Hook, None) => {
                    return Err(Error::Config("backbone = hook requires a backbone factory".into()));
                }
            };
            backbones.push(bb);
        }
        let channels = backbones[0].channels();
        let head = CompressionHead::new(&mut params, &mut rng, channels, cfg.k, cfg.cp_relu)?;
        let coarse = CoarsePredictor::new(&mut params, &mut rng, cfg.k)?;
        let decoder = DenseDecoder::new(&mut params, &mut rng, cfg.k, cfg.fusion, cfg.fa_output_relu)?;
        Ok(Model {
            cfg,
            params,
            backbones,
            head,
            coarse,
            decoder,
            norm: InputNorm::identity(),
        })
    }

    pub fn config(&self) -> &VariantConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn norm(&self) -> &InputNorm {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: InputNorm) {
        self.norm = norm;
    }

    pub fn decoder(&self) -> &DenseDecoder {
        &self.decoder
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Scalar count of all backbone parameters.
    pub fn backbone_parameter_count(&self) -> usize {
        self.params.count_prefix("backbone")
    }

    /// Record one forward pass on `g`.
    pub fn forward(&self, g: &mut Graph, pair: &SiamesePair) -> Result<ForwardNodes> {
        let p = &self.params;
        let x = g.input(pair.stacked().clone());
        let (pyramid, batch) = match (self.cfg.modalities, self.cfg.learning) {
            (Modalities::RgbD, Learning::Joint) => (self.backbones[0].forward(g, p, x)?, 2),
            (Modalities::RgbD, Learning::Separate) => {
                let xr = g.slice_batch(x, SiamesePair::RGB)?;
                let xd = g.slice_batch(x, SiamesePair::DEPTH)?;
                let lr = self.backbones[0].forward(g, p, xr)?;
                let ld = self.backbones[1].forward(g, p, xd)?;
                let mut levels = lr;
                for h in 0..LEVELS {
                    levels[h] = g.stack_batch(&[lr[h], ld[h]])?;
                }
                (levels, 2)
            }
            (single, _) => {
                let idx = if single == Modalities::Rgb { SiamesePair::RGB } else { SiamesePair::DEPTH };
                let xm = g.slice_batch(x, idx)?;
                (self.backbones[0].forward(g, p, xm)?, 1)
            }
        };
        let compressed = self.head.forward(g, p, &pyramid)?;
        let coarse = self.coarse.forward(g, p, compressed[LEVELS - 1])?;
        let (coarse_rgb, coarse_d) = if batch == 2 {
            (Some(g.slice_batch(coarse, 0)?), Some(g.slice_batch(coarse, 1)?))
        } else if self.cfg.modalities == Modalities::Rgb {
            (Some(coarse), None)
        } else {
            (None, Some(coarse))
        };
        let mut fused = compressed;
        for h in 0..LEVELS {
            fused[h] = self.cfg.fusion.apply(g, compressed[h])?;
        }
        let s_f = self.decoder.forward(g, p, &fused)?;
        Ok(ForwardNodes {
            s_f,
            coarse_rgb,
            coarse_d,
            pyramid,
            compressed,
            fused,
        })
    }

    /// Probability maps for a preprocessed pair.
    pub fn predict_pair(&self, pair: &SiamesePair) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, pair)?;
        let to_map = |id: NodeId| Map::from_tensor_plane(&g.value(id).map(sigmoid), 0, 0);
        Ok(Prediction {
            s_f: to_map(out.s_f),
            s_c_rgb: out.coarse_rgb.map(to_map),
            s_c_d: out.coarse_d.map(to_map),
        })
    }

    /// Preprocess with the model's normalization, resizing to the
    /// configured input size first if needed.
    pub fn prepare(&self, sample: &RgbdSample) -> Result<SiamesePair> {
        let size = self.cfg.input_size;
        if (sample.height(), sample.width()) == (size, size) {
            return form_siamese_pair(sample, &self.norm);
        }
        let resized = RgbdSample {
            id: sample.id.clone(),
            rgb: tensor::resize_bilinear(&sample.rgb, size, size),
            depth: sample.depth.resize_bilinear(size, size),
            gt: crate::dataset::binarize(&sample.gt.resize_bilinear(size, size), 0.5),
        };
        form_siamese_pair(&resized, &self.norm)
    }

    pub fn predict(&self, sample: &RgbdSample) -> Result<Prediction> {
        self.predict_pair(&self.prepare(sample)?)
    }
}
