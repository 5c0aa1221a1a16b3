use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{preprocess_image, CANONICAL_SIDE};
use crate::error::{Error, Result};
use crate::features::backbone::center_square;
use crate::features::pooling::{apply_attention, l2_normalize, mac, postprocess, rmac, rmac_regions, spoc};
use crate::features::{Backbone, FeatureMap, PcaWhitening};
use crate::hard_attention::{remove_text, AtrhaConfig};
use crate::segmenter::Segmenter;
use crate::soft_attention::{
    camsa_weights, compute_cam, resample_attention, ssa_weights, AttentionMap, CamModel, CamsaParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SoftAttention {
    #[default]
    None,
    Ssa,
    Camsa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pooling {
    #[default]
    Mac,
    Spoc,
    Rmac,
}

/// One retrieval method: which attention is applied and how activations are
/// pooled and post-processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub hard_attention: bool,
    pub soft_attention: SoftAttention,
    pub pooling: Pooling,
    /// Whitening after pooling. Always on for R-MAC, where it is applied per
    /// region.
    pub whitening: bool,
    pub center_crop: bool,
}

impl MethodConfig {
    pub fn plain(pooling: Pooling) -> Self {
        Self {
            pooling,
            whitening: pooling == Pooling::Rmac,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pooling == Pooling::Rmac && !self.whitening {
            return Err(Error::InvalidConfig("R-MAC requires whitening".into()));
        }
        Ok(())
    }

    /// E.g. `ATRHA_CAMSA_MAC`, `SPOC_PCAW`, `ATRHA_RMAC`, `MAC_CC`.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.hard_attention {
            parts.push("ATRHA");
        }
        match self.soft_attention {
            SoftAttention::None => {}
            SoftAttention::Ssa => parts.push("SSA"),
            SoftAttention::Camsa => parts.push("CAMSA"),
        }
        parts.push(match self.pooling {
            Pooling::Mac => "MAC",
            Pooling::Spoc => "SPOC",
            Pooling::Rmac => "RMAC",
        });
        if self.whitening && self.pooling != Pooling::Rmac {
            parts.push("PCAW");
        }
        if self.center_crop {
            parts.push("CC");
        }
        parts.join("_")
    }
}

impl fmt::Display for MethodConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for MethodConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut method = MethodConfig::default();
        let mut pooling = None;
        for part in s.split(['_', '-', ' ']).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "ATRHA" => method.hard_attention = true,
                "SSA" => method.soft_attention = SoftAttention::Ssa,
                "CAMSA" => method.soft_attention = SoftAttention::Camsa,
                "MAC" => pooling = Some(Pooling::Mac),
                "SPOC" => pooling = Some(Pooling::Spoc),
                "RMAC" => pooling = Some(Pooling::Rmac),
                "PCAW" => method.whitening = true,
                "CC" => method.center_crop = true,
                other => return Err(Error::InvalidInput(format!("unknown method part {other:?} in {s:?}"))),
            }
        }
        method.pooling = pooling.ok_or_else(|| Error::InvalidInput(format!("method {s:?} names no pooling")))?;
        if method.pooling == Pooling::Rmac {
            method.whitening = true;
        }
        Ok(method)
    }
}

/// Final descriptor of one image under one method.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub tag: String,
    pub values: Vec<f32>,
    /// Set when pooling produced an all-zero vector that could not be
    /// normalised.
    pub zero: bool,
}

/// Models and parameters a method may need. The retrieval backbone and the
/// classifier behind CAMSA are always separate networks.
#[derive(Clone)]
pub struct Models {
    pub backbone: Arc<dyn Backbone>,
    pub segmenter: Option<Arc<Segmenter>>,
    pub cam: Option<Arc<CamModel>>,
    pub whitening: Option<Arc<PcaWhitening>>,
    pub atrha: AtrhaConfig,
    pub ssa_offset: f32,
    pub camsa: CamsaParams,
    pub rmac_scales: usize,
}

impl Models {
    pub fn new(backbone: Arc<dyn Backbone>) -> Self {
        Self {
            backbone,
            segmenter: None,
            cam: None,
            whitening: None,
            atrha: AtrhaConfig::default(),
            ssa_offset: 0.5,
            camsa: CamsaParams::default(),
            rmac_scales: 4,
        }
    }

    fn segmenter(&self) -> Result<&Segmenter> {
        self.segmenter.as_deref().ok_or(Error::MissingModel("text segmenter"))
    }

    fn cam(&self) -> Result<&CamModel> {
        self.cam.as_deref().ok_or(Error::MissingModel("CAM classifier"))
    }

    fn whitening(&self) -> Result<&PcaWhitening> {
        self.whitening.as_deref().ok_or(Error::MissingModel("PCA whitening"))
    }

    /// Fails early when `method` needs a model that is not loaded.
    pub fn check(&self, method: &MethodConfig) -> Result<()> {
        method.validate()?;
        if method.hard_attention || method.soft_attention == SoftAttention::Ssa {
            self.segmenter()?;
        }
        if method.soft_attention == SoftAttention::Camsa {
            self.cam()?;
        }
        if method.whitening {
            self.whitening()?;
        }
        Ok(())
    }
}

/// Canonicalise, optionally remove text and centre-crop, extract features and
/// apply soft attention.
fn attended_features(image: &RgbImage, method: &MethodConfig, models: &Models) -> Result<FeatureMap> {
    let mut canonical = preprocess_image(image, CANONICAL_SIDE)?;
    if method.hard_attention {
        canonical = remove_text(&canonical, models.segmenter()?, &models.atrha)?.image;
    }
    let fmap = models.backbone.extract_feature_map(&canonical, method.center_crop)?;
    // attention sees exactly what the backbone saw
    let input = if method.center_crop { center_square(&canonical) } else { canonical };
    let weights: Option<AttentionMap> = match method.soft_attention {
        SoftAttention::None => None,
        SoftAttention::Ssa => {
            let mask = models.segmenter()?.segment_text(&input)?;
            Some(ssa_weights(&mask, models.ssa_offset)?)
        }
        SoftAttention::Camsa => {
            let cam = compute_cam(models.cam()?, &input, models.camsa.class)?;
            Some(camsa_weights(&cam, &models.camsa)?)
        }
    };
    match weights {
        Some(att) => apply_attention(&fmap, &resample_attention(&att, fmap.height(), fmap.width())?),
        None => Ok(fmap),
    }
}

pub fn describe(image: &RgbImage, method: &MethodConfig, models: &Models) -> Result<GlobalDescriptor> {
    models.check(method)?;
    let fmap = attended_features(image, method, models)?;
    let processed = match method.pooling {
        Pooling::Rmac => {
            let values = rmac(&fmap, models.whitening()?, models.rmac_scales)?;
            crate::features::Processed {
                zero: values.iter().all(|&v| v == 0.0),
                values,
            }
        }
        Pooling::Mac => postprocess(&mac(&fmap), method.whitening.then(|| models.whitening()).transpose()?)?,
        Pooling::Spoc => postprocess(&spoc(&fmap), method.whitening.then(|| models.whitening()).transpose()?)?,
    };
    Ok(GlobalDescriptor {
        tag: method.tag(),
        values: processed.values,
        zero: processed.zero,
    })
}

/// Vectors the method's whitening is fitted on: the l2-normalised pooled
/// vector, or every l2-normalised regional MAC for R-MAC.
pub fn pca_samples(image: &RgbImage, method: &MethodConfig, models: &Models) -> Result<Vec<Vec<f32>>> {
    let unwhitened = MethodConfig {
        whitening: false,
        ..*method
    };
    let mut probe = models.clone();
    probe.whitening = None;
    if unwhitened.hard_attention || unwhitened.soft_attention == SoftAttention::Ssa {
        probe.segmenter()?;
    }
    if unwhitened.soft_attention == SoftAttention::Camsa {
        probe.cam()?;
    }
    let fmap = attended_features(image, &unwhitened, &probe)?;
    Ok(match method.pooling {
        Pooling::Mac => vec![l2_normalize(&mac(&fmap))],
        Pooling::Spoc => vec![l2_normalize(&spoc(&fmap))],
        Pooling::Rmac => rmac_regions(fmap.height(), fmap.width(), models.rmac_scales)
            .iter()
            .map(|r| {
                let sub = crate::features::pooling::region_mac(&fmap, r);
                l2_normalize(&sub)
            })
            .collect(),
    })
}

/// Fits the method's whitening on at most `max_samples` vectors drawn
/// (seeded) from the given images.
pub fn fit_method_whitening(
    images: &[RgbImage],
    method: &MethodConfig,
    models: &Models,
    dims: usize,
    max_samples: usize,
    seed: u64,
) -> Result<PcaWhitening> {
    let mut samples = Vec::new();
    for image in images {
        samples.extend(pca_samples(image, method, models)?);
    }
    if samples.len() > max_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        samples.shuffle(&mut rng);
        samples.truncate(max_samples);
    }
    PcaWhitening::fit(&samples, dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for tag in ["MAC", "ATRHA_MAC", "ATRHA_CAMSA_MAC", "SSA_SPOC_PCAW", "ATRHA_RMAC", "MAC_CC"] {
            let m: MethodConfig = tag.parse().unwrap();
            assert_eq!(m.tag(), tag);
        }
        assert!("ATRHA".parse::<MethodConfig>().is_err());
        assert!("MAC_FOO".parse::<MethodConfig>().is_err());
        assert!("rmac".parse::<MethodConfig>().unwrap().whitening);
    }

    #[test]
    fn missing_models_reported() {
        let backbone = Arc::new(crate::features::ConvBackbone::random_stub(0).unwrap());
        let models = Models::new(backbone);
        let img = RgbImage::from_pixel(40, 40, image::Rgb([255, 0, 0]));
        for (tag, what) in [("ATRHA_MAC", "text segmenter"), ("CAMSA_MAC", "CAM classifier"), ("SPOC_PCAW", "PCA whitening")] {
            let m: MethodConfig = tag.parse().unwrap();
            assert!(matches!(describe(&img, &m, &models), Err(Error::MissingModel(w)) if w == what));
        }
        let d = describe(&img, &MethodConfig::plain(Pooling::Mac), &models).unwrap();
        assert_eq!(d.values.len(), 512);
        assert_eq!(d.tag, "MAC");
    }
}
