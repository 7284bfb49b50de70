//! Flat `key = value` configuration text.
//!
//! ```text
//! # variant
//! fusion = cm
//! modalities = rgb+d
//! k = 16
//! backbone_channels = 8,16,32,32,32,32
//! # optimizer
//! lr = 3e-7
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Keys mirror the
//! fields of [`VariantConfig`] and [`TrainConfig`]; unknown or repeated keys
//! are rejected.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::VariantConfig;
use crate::trainer::TrainConfig;

/// Ordered key-value pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if kv.get(key).is_some() {
                return Err(Error::Config(format!("line {}: key {key:?} repeated", n + 1)));
            }
            kv.push(key, value.trim());
        }
        Ok(kv)
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// Architecture plus optimizer settings for one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: VariantConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: VariantConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 18] = [
        "backbone",
        "fusion",
        "modalities",
        "learning",
        "k",
        "input_size",
        "lambda",
        "backbone_channels",
        "dilation",
        "cp_relu",
        "fa_output_relu",
        "lr",
        "momentum",
        "weight_decay",
        "epochs",
        "mirror_augment",
        "seed",
        "batch_size",
    ];

    /// Desk defaults overridden by `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(&KeyValues::parse(text)?)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = &mut self.variant;
        let t = &mut self.train;
        match key {
            "backbone" => v.backbone = value.parse()?,
            "fusion" => v.fusion = value.parse()?,
            "modalities" => v.modalities = value.parse()?,
            "learning" => v.learning = value.parse()?,
            "k" => v.k = parse_value(key, value)?,
            "input_size" => v.input_size = parse_value(key, value)?,
            "lambda" => v.lambda = parse_value(key, value)?,
            "backbone_channels" => {
                let parts = value
                    .split(',')
                    .map(|p| parse_value::<usize>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?;
                v.backbone_channels = parts
                    .try_into()
                    .map_err(|p: Vec<usize>| Error::Config(format!("{key}: expected 6 values, got {}", p.len())))?;
            }
            "dilation" => v.dilation = parse_value(key, value)?,
            "cp_relu" => v.cp_relu = parse_bool(key, value)?,
            "fa_output_relu" => v.fa_output_relu = parse_bool(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "momentum" => t.momentum = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "mirror_augment" => t.mirror_augment = parse_bool(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.train.validate()
    }

    pub fn to_kv(&self) -> KeyValues {
        let (v, t) = (&self.variant, &self.train);
        let channels: Vec<String> = v.backbone_channels.iter().map(|c| c.to_string()).collect();
        let mut kv = KeyValues::default();
        kv.push("backbone", v.backbone);
        kv.push("fusion", v.fusion);
        kv.push("modalities", v.modalities);
        kv.push("learning", v.learning);
        kv.push("k", v.k);
        kv.push("input_size", v.input_size);
        kv.push("lambda", v.lambda);
        kv.push("backbone_channels", channels.join(","));
        kv.push("dilation", v.dilation);
        kv.push("cp_relu", v.cp_relu);
        kv.push("fa_output_relu", v.fa_output_relu);
        kv.push("lr", t.lr);
        kv.push("momentum", t.momentum);
        kv.push("weight_decay", t.weight_decay);
        kv.push("epochs", t.epochs);
        kv.push("mirror_augment", t.mirror_augment);
        kv.push("seed", t.seed);
        kv.push("batch_size", t.batch_size);
        kv
    }
}
