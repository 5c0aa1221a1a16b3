//! Convolutional feature maps, attention weighting, pooling into global
//! descriptors, whitening, and descriptor storage.

mod backbone;
mod describe;
mod pca;
mod pooling;
mod store;

pub use backbone::{Backbone, BackboneSpec, ConvBackbone};
pub use describe::{
    describe, fit_method_whitening, pca_samples, GlobalDescriptor, MethodConfig, Models, Pooling,
    SoftAttention,
};
pub use pca::PcaWhitening;
pub use pooling::{apply_attention, l2_normalize, mac, postprocess, rmac, rmac_regions, spoc, Processed};
pub use store::{ids_path, read_store, write_store, StoredDescriptors, STORE_MAGIC, STORE_VERSION};

use candle_core::Tensor;

use crate::error::{shape_mismatch, Error, Result};

/// Activations `f_k(x, y)` laid out channel-major: `values[k][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "feature map must be non-empty, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(shape_mismatch(channels * height * width, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature map holds non-finite values".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    /// From a `(K, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (k, h, w) = t.dims3()?;
        Self::new(k, h, w, t.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> f32 {
        self.values[(k * self.height + y) * self.width + x]
    }

    /// The `H x W` plane of channel `k`, row-major.
    pub fn channel(&self, k: usize) -> &[f32] {
        let cells = self.height * self.width;
        &self.values[k * cells..(k + 1) * cells]
    }
}
