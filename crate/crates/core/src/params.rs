//! Named parameter storage and initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
}

/// Flat registry of every trainable tensor, addressed by a dotted name
/// such as `backbone.stage3.conv2.weight`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }
}

/// Convolution parameters: weight `[out, in, k, k]` and bias `[1, out, 1, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Register a convolution with zero-mean Gaussian weights of standard
/// deviation `sqrt(2 / fan_in)` and zero bias.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
) -> Result<ConvParams> {
    let fan_in = in_channels * kernel * kernel;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
        .map_err(|e| Error::Config(format!("{name}: {e}")))?;
    let shape = [out_channels, in_channels, kernel, kernel];
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let weight = store.insert(format!("{name}.weight"), Tensor::from_vec(shape, data)?)?;
    let bias = store.insert(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1]))?;
    Ok(ConvParams { weight, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_init_registers_weight_and_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_conv(&mut store, &mut rng, "cp1", 16, 8, 3).unwrap();
        assert_eq!(store.get(p.weight).shape(), [8, 16, 3, 3]);
        assert_eq!(store.get(p.bias).shape(), [1, 8, 1, 1]);
        assert_eq!(store.count(), 8 * 16 * 9 + 8);
        assert_eq!(store.id("cp1.bias"), Some(p.bias));
        assert!(store.get(p.bias).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(store.insert("a", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn init_std_tracks_fan_in() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = init_conv(&mut store, &mut rng, "c", 50, 40, 3).unwrap();
        let w = store.get(p.weight).data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / 450.0;
        assert!((var / expect - 1.0).abs() < 0.1, "variance {var} vs {expect}");
    }
}
