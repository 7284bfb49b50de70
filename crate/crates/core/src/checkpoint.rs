//! Binary checkpoint format, version 1. All integers and floats are
//! little-endian.
//!
//! | field         | encoding                                        |
//! |---------------|-------------------------------------------------|
//! | magic         | 8 bytes, `RGBDSOD\0`                            |
//! | version       | u32                                             |
//! | header        | u32 byte length, then UTF-8 `key = value` lines |
//! | tensor count  | u32                                             |
//! | per tensor    | u32 name length, UTF-8 name, 4 × u32 dims (NCHW), f64 values |
//!
//! The header holds every configuration key (see [`crate::config`]), the
//! input normalization under `norm.*`, and free-form `meta.*` entries.
//! Trailing bytes are an error.

use std::path::Path;

use crate::config::{KeyValues, RunConfig};
use crate::dataset::InputNorm;
use crate::encoder::BackboneFactory;
use crate::error::{Error, Result};
use crate::model::{Model, VariantConfig};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"RGBDSOD\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub norm: InputNorm,
    /// `meta.*` header entries with the prefix removed.
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train: &TrainConfig, meta: &[(&str, String)]) -> Self {
        Checkpoint {
            config: RunConfig {
                variant: *model.config(),
                train: *train,
            },
            norm: *model.norm(),
            meta: meta.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            params: model.params().iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn header(&self) -> KeyValues {
        let mut kv = self.config.to_kv();
        let m = &self.norm.rgb_mean;
        kv.push("norm.rgb_mean", format!("{},{},{}", m[0], m[1], m[2]));
        kv.push("norm.depth_mean", self.norm.depth_mean);
        for (k, v) in &self.meta {
            kv.push(format!("meta.{k}"), v);
        }
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = self.header().to_text();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let kv = KeyValues::parse(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        let mut config_kv = KeyValues::default();
        let mut meta = Vec::new();
        let mut rgb_mean = None;
        let mut depth_mean = None;
        let bad = |k: &str| Error::Checkpoint(format!("header: malformed {k}"));
        for (k, v) in kv.iter() {
            if let Some(m) = k.strip_prefix("meta.") {
                meta.push((m.to_string(), v.to_string()));
            } else if k == "norm.rgb_mean" {
                let parts: Vec<f64> = v.split(',').map(|p| p.trim().parse().map_err(|_| bad(k))).collect::<Result<_>>()?;
                rgb_mean = Some(<[f64; 3]>::try_from(parts).map_err(|_| bad(k))?);
            } else if k == "norm.depth_mean" {
                depth_mean = Some(v.parse::<f64>().map_err(|_| bad(k))?);
            } else {
                config_kv.push(k, v);
            }
        }
        for key in RunConfig::KEYS {
            if config_kv.get(key).is_none() {
                return Err(Error::Checkpoint(format!("header: missing {key}")));
            }
        }
        let mut config = RunConfig::default();
        config.apply(&config_kv).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let (Some(rgb_mean), Some(depth_mean)) = (rgb_mean, depth_mean) else {
            return Err(Error::Checkpoint("header: missing input normalization".into()));
        };

        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            norm: InputNorm { rgb_mean, depth_mean },
            meta,
            params,
        })
    }

    /// Refuse unless the recorded architecture equals `expected`.
    pub fn check_variant(&self, expected: &VariantConfig) -> Result<()> {
        if &self.config.variant == expected {
            return Ok(());
        }
        let ours = self.config.to_kv();
        let theirs = RunConfig {
            variant: *expected,
            train: self.config.train,
        }
        .to_kv();
        let diffs: Vec<String> = ours
            .iter()
            .zip(theirs.iter())
            .filter(|(a, b)| a != b)
            .map(|((k, a), (_, b))| format!("{k}: checkpoint {a}, requested {b}"))
            .collect();
        Err(Error::Checkpoint(format!("configuration mismatch ({})", diffs.join("; "))))
    }

    /// Rebuild the recorded variant and install the stored parameters.
    pub fn into_model(self, hook: Option<&dyn BackboneFactory>) -> Result<Model> {
        let mut model = Model::build(self.config.variant, 0, hook)?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, the recorded variant has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in self.params {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name:?}")))?;
            store
                .set(id, t)
                .map_err(|e| Error::Checkpoint(format!("tensor {name:?}: {e}")))?;
        }
        model.set_norm(self.norm);
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Write atomically: a sibling temporary file is renamed into place.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
