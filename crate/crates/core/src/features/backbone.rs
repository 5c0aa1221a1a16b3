use std::path::Path;

use candle_core::{Device, Tensor};
use candle_nn::VarMap;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::imaging::{crop, normalized_tensor, resize_rgb, InputNorm};
use crate::nn::{self, ConvTrunk, Padding, TrunkLayer, TrunkSpec};

/// Share of the shorter side kept by the centre-crop ablation.
pub const CENTER_CROP_FRACTION: f64 = 0.875;

/// Identity and geometry of a retrieval backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    /// Layer whose (post-ReLU) activations are returned.
    pub tap_layer: String,
    /// Side images are resized to before the forward pass.
    pub input_size: u32,
    pub trunk: TrunkSpec,
    pub norm: InputNorm,
}

impl BackboneSpec {
    /// VGG-16 up to conv5_3 on 300 px canonical images.
    pub fn vgg16() -> Self {
        Self {
            name: "vgg16".into(),
            tap_layer: "conv5_3".into(),
            input_size: 300,
            trunk: TrunkSpec::vgg16_conv5_3(),
            norm: InputNorm::ImageNet,
        }
    }

    /// Seeded random-weight trunk with the same 19x19x512 output geometry as
    /// the reference network on 300 px input. Edge-replicating padding keeps
    /// constant images constant.
    pub fn random_stub() -> Self {
        use TrunkLayer::{Conv, Pool};
        let c = |out| Conv { out, kernel: 3 };
        Self {
            name: "random-conv".into(),
            tap_layer: "conv5".into(),
            input_size: 300,
            trunk: TrunkSpec {
                in_channels: 3,
                layers: vec![c(8), Pool, c(16), Pool, c(32), Pool, c(64), Pool, Conv { out: 512, kernel: 1 }],
                padding: Padding::Replicate,
            },
            norm: InputNorm::Centered,
        }
    }
}

/// Anything that turns canonical images into spatial activation maps.
pub trait Backbone: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    /// One map per image, each fed at its own size.
    fn feature_maps(&self, images: &[RgbImage]) -> Result<Vec<FeatureMap>>;

    /// Fingerprint of the weights, used to key descriptor caches.
    fn checksum(&self) -> Result<String>;

    /// Activations of one image, resized to the input side. With
    /// `center_crop` the central square (`CENTER_CROP_FRACTION` of the
    /// shorter side) of the resized image is fed at its own size.
    fn extract_feature_map(&self, image: &RgbImage, center_crop: bool) -> Result<FeatureMap> {
        crate::imaging::ensure_non_empty(image)?;
        let side = self.spec().input_size;
        let resized = if image.dimensions() == (side, side) { image.clone() } else { resize_rgb(image, side, side) };
        let input = if center_crop { center_square(&resized) } else { resized };
        let mut maps = self.feature_maps(std::slice::from_ref(&input))?;
        Ok(maps.pop().expect("one map per image"))
    }
}

pub(crate) fn center_square(image: &RgbImage) -> RgbImage {
    let (w, h) = image.dimensions();
    let side = ((f64::from(w.min(h)) * CENTER_CROP_FRACTION).round() as u32).max(1);
    let bbox = crate::hard_attention::BBox {
        x0: (w - side) / 2,
        y0: (h - side) / 2,
        x1: (w - side) / 2 + side,
        y1: (h - side) / 2 + side,
    };
    crop(image, bbox)
}

/// Backbone built from a [`TrunkSpec`].
pub struct ConvBackbone {
    spec: BackboneSpec,
    varmap: VarMap,
    device: Device,
    trunk: ConvTrunk,
}

impl ConvBackbone {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        let (varmap, device) = nn::new_varmap();
        let trunk = ConvTrunk::new(spec.trunk.clone(), nn::var_builder(&varmap, &device))?;
        nn::reinit_varmap(&varmap, seed)?;
        Ok(Self {
            spec,
            varmap,
            device,
            trunk,
        })
    }

    pub fn random_stub(seed: u64) -> Result<Self> {
        Self::new(BackboneSpec::random_stub(), seed)
    }

    /// Loads trunk weights from a safetensors file with `features.{i}.weight`
    /// / `.bias` names (the torchvision VGG layout).
    pub fn from_weights(spec: BackboneSpec, weights: &Path) -> Result<Self> {
        let mut backbone = Self::new(spec, 0)?;
        nn::load_weights(&mut backbone.varmap, weights)?;
        Ok(backbone)
    }

    pub fn vgg16(weights: &Path) -> Result<Self> {
        Self::from_weights(BackboneSpec::vgg16(), weights)
    }
}

impl Backbone for ConvBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn feature_maps(&self, images: &[RgbImage]) -> Result<Vec<FeatureMap>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity(images.len());
        // batch only images of equal size
        let mut start = 0;
        while start < images.len() {
            let dims = images[start].dimensions();
            let mut end = start + 1;
            while end < images.len() && end - start < 8 && images[end].dimensions() == dims {
                end += 1;
            }
            let batch = images[start..end]
                .iter()
                .map(|img| {
                    if img.width() == 0 || img.height() == 0 {
                        return Err(Error::InvalidInput("zero-area image".into()));
                    }
                    normalized_tensor(img, self.spec.norm, &self.device)
                })
                .collect::<Result<Vec<_>>>()?;
            let features = self.trunk.forward(&Tensor::stack(&batch, 0)?)?;
            for i in 0..end - start {
                out.push(FeatureMap::from_tensor(&features.get(i)?)?);
            }
            start = end;
        }
        Ok(out)
    }

    fn checksum(&self) -> Result<String> {
        nn::weights_checksum(&self.varmap)
    }
}
