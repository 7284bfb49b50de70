//! RGB-D salient object detection: a Siamese encoder shared by the RGB and
//! depth views, cross-modal fusion, a densely cooperative decoder, and the
//! standard saliency metrics.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
