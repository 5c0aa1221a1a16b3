//! Spatial attention weights: from text masks (SSA) and from class
//! activation maps of a trademark-type classifier (CAMSA).

use std::fs;
use std::path::Path;

use candle_core::{Module, Tensor, D};
use candle_nn::{linear, Linear, VarMap};
use image::{Rgb, RgbImage};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, TypeLabel};
use crate::error::{shape_mismatch, Error, IoContext, Result};
use crate::features::FeatureMap;
use crate::imaging::{load_rgb, normalized_tensor, resample_grid, resize_rgb, InputNorm};
use crate::mask::PixelMask;
use crate::nn::{self, ConvTrunk, Padding, RmsProp, TrunkLayer, TrunkSpec};
use crate::segmenter::BINARY_THRESHOLD;

/// Nonnegative weight per spatial cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl AttentionMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("attention map needs at least one cell".into()));
        }
        if values.len() != width * height {
            return Err(shape_mismatch(width * height, values.len()));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!("attention weight {bad} is not finite and nonnegative")));
        }
        Ok(Self { width, height, values })
    }

    pub fn uniform(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Pseudo-coloured rendering (blue = high weight, red = low), scaled by
    /// the map's own maximum.
    pub fn heatmap(&self) -> RgbImage {
        let max = self.values.iter().copied().fold(0.0f32, f32::max);
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = if max > 0.0 { self.get(x as usize, y as usize) / max } else { 0.0 };
            let hi = (v * 255.0).round() as u8;
            Rgb([255 - hi, 64, hi])
        })
    }

    pub fn save_heatmap(&self, path: &Path, scale_to: u32) -> Result<()> {
        let img = image::imageops::resize(
            &self.heatmap(),
            scale_to,
            scale_to,
            image::imageops::FilterType::Nearest,
        );
        img.save(path)?;
        Ok(())
    }
}

/// `alpha = 1 + b - I(x, y)` over a text mask. Probability masks are
/// binarised at the segmenter threshold first.
pub fn ssa_weights(mask: &PixelMask, b: f32) -> Result<AttentionMap> {
    if !(b > -1.0) {
        return Err(Error::InvalidInput(format!("offset b must exceed -1, got {b}")));
    }
    let values = mask
        .values()
        .iter()
        .map(|&v| if v >= BINARY_THRESHOLD { b } else { 1.0 + b })
        .collect();
    AttentionMap::new(mask.width() as usize, mask.height() as usize, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamsaParams {
    pub beta: f32,
    pub tau: f32,
    pub class: TypeLabel,
}

impl Default for CamsaParams {
    fn default() -> Self {
        Self {
            beta: 100.0,
            tau: 0.5,
            class: TypeLabel::FigureOnly,
        }
    }
}

impl CamsaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 1.0) || !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need beta > 1 and 0 < tau < 1, got beta={} tau={}",
                self.beta, self.tau
            )));
        }
        Ok(())
    }
}

/// `beta * M` above the threshold, `M / beta` at or below it.
pub fn camsa_weights(cam: &AttentionMap, params: &CamsaParams) -> Result<AttentionMap> {
    params.validate()?;
    let values = cam
        .values
        .iter()
        .map(|&m| if m > params.tau { params.beta * m } else { m / params.beta })
        .collect();
    AttentionMap::new(cam.width, cam.height, values)
}

/// Triangle-filter resampling to `target_w x target_h` (bilinear when
/// enlarging, area-weighted when shrinking).
pub fn resample_attention(att: &AttentionMap, target_h: usize, target_w: usize) -> Result<AttentionMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidInput("target grid must be at least 1x1".into()));
    }
    let values = resample_grid(&att.values, att.width, att.height, target_w, target_h)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    AttentionMap::new(target_w, target_h, values)
}

/// `M(x, y) = sum_k w_k f_k(x, y)` before any normalisation.
pub fn raw_cam(fmap: &FeatureMap, class_weights: &[f32]) -> Result<Vec<f32>> {
    if class_weights.len() != fmap.channels() {
        return Err(shape_mismatch(fmap.channels(), class_weights.len()));
    }
    let cells = fmap.height() * fmap.width();
    let mut out = vec![0.0f32; cells];
    for (k, &w) in class_weights.iter().enumerate() {
        for (o, f) in out.iter_mut().zip(fmap.channel(k)) {
            *o += w * f;
        }
    }
    Ok(out)
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all 0.5.
pub fn normalize_cam(raw: &[f32], width: usize, height: usize) -> Result<AttentionMap> {
    let (lo, hi) = raw
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let values = if range > 0.0 && range.is_finite() {
        raw.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; raw.len()]
    };
    AttentionMap::new(width, height, values)
}

/// Classifier used only to derive attention: a conv trunk, global average
/// pooling and one linear layer over the three trademark types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamArch {
    pub input_size: u32,
    pub trunk: TrunkSpec,
    pub norm: InputNorm,
}

impl CamArch {
    /// VGG-16 up to conv5_3, expecting ImageNet-normalised 224 px input.
    pub fn reference() -> Self {
        Self {
            input_size: 224,
            trunk: TrunkSpec::vgg16_conv5_3(),
            norm: InputNorm::ImageNet,
        }
    }

    /// Small trunk trained from scratch on 64 px thumbnails.
    pub fn desk() -> Self {
        use TrunkLayer::{Conv, Pool};
        Self {
            input_size: 64,
            trunk: TrunkSpec {
                in_channels: 3,
                layers: vec![
                    Conv { out: 16, kernel: 3 },
                    Pool,
                    Conv { out: 32, kernel: 3 },
                    Pool,
                    Conv { out: 64, kernel: 3 },
                    Pool,
                    Conv { out: 64, kernel: 3 },
                ],
                padding: Padding::Zero,
            },
            norm: InputNorm::Centered,
        }
    }
}

const CAM_ARCH_FILE: &str = "architecture.json";
const CAM_WEIGHTS_FILE: &str = "weights.safetensors";

pub struct CamModel {
    arch: CamArch,
    varmap: VarMap,
    device: candle_core::Device,
    trunk: ConvTrunk,
    head: Linear,
}

impl CamModel {
    pub fn new(arch: CamArch, seed: u64) -> Result<Self> {
        let model = Self::build(arch)?;
        nn::reinit_varmap(&model.varmap, seed)?;
        Ok(model)
    }

    /// Fresh head on top of trunk weights loaded from a checkpoint that uses
    /// the `features.{i}` naming.
    pub fn with_pretrained_trunk(arch: CamArch, trunk_weights: &Path, seed: u64) -> Result<Self> {
        let model = Self::new(arch, seed)?;
        let tensors = candle_core::safetensors::load(trunk_weights, &model.device)?;
        let data = model.varmap.data().lock().expect("varmap lock poisoned");
        for (name, var) in data.iter().filter(|(n, _)| n.starts_with("features.")) {
            let t = tensors.get(name).ok_or_else(|| Error::Format {
                path: trunk_weights.to_path_buf(),
                reason: format!("missing tensor {name}"),
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Format {
                    path: trunk_weights.to_path_buf(),
                    reason: format!("{name} has shape {:?}, expected {:?}", t.dims(), var.dims()),
                });
            }
            var.set(&t.to_dtype(candle_core::DType::F32)?)?;
        }
        drop(data);
        Ok(model)
    }

    fn build(arch: CamArch) -> Result<Self> {
        if arch.input_size == 0 {
            return Err(Error::InvalidConfig("CAM input size must be positive".into()));
        }
        let (varmap, device) = nn::new_varmap();
        let vb = nn::var_builder(&varmap, &device);
        let trunk = ConvTrunk::new(arch.trunk.clone(), vb.clone())?;
        let head = linear(arch.trunk.out_channels(), TypeLabel::ALL.len(), vb.pp("head"))?;
        drop(vb);
        Ok(Self {
            arch,
            varmap,
            device,
            trunk,
            head,
        })
    }

    pub fn arch(&self) -> &CamArch {
        &self.arch
    }

    /// Weights `w^i` of one class, one per trunk channel.
    pub fn class_weights(&self, class: TypeLabel) -> Result<Vec<f32>> {
        Ok(self.head.weight().get(class.index())?.to_vec1::<f32>()?)
    }

    fn input(&self, images: &[RgbImage]) -> Result<Tensor> {
        let side = self.arch.input_size;
        let batch = images
            .iter()
            .map(|img| normalized_tensor(&resize_rgb(img, side, side), self.arch.norm, &self.device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&batch, 0)?)
    }

    /// `(features, logits)` for a batch.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let features = self.trunk.forward(x)?;
        let logits = self.head.forward(&nn::global_average_pool(&features)?)?;
        Ok((features, logits))
    }

    /// Last-conv activations of one image.
    pub fn feature_map(&self, image: &RgbImage) -> Result<FeatureMap> {
        let (features, _) = self.forward(&self.input(std::slice::from_ref(image))?)?;
        FeatureMap::from_tensor(&features.get(0)?)
    }

    pub fn predict(&self, images: &[RgbImage]) -> Result<Vec<TypeLabel>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (_, logits) = self.forward(&self.input(images)?)?;
        let best = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
        Ok(best
            .into_iter()
            .map(|i| TypeLabel::from_index(i as usize).expect("three logits"))
            .collect())
    }

    pub fn checksum(&self) -> Result<String> {
        nn::weights_checksum(&self.varmap)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
        let descriptor = serde_json::json!({ "kind": "cam", "version": 1, "arch": self.arch });
        let path = dir.join(CAM_ARCH_FILE);
        fs::write(&path, serde_json::to_string_pretty(&descriptor)?)
            .context(|| format!("writing {}", path.display()))?;
        self.varmap.save(dir.join(CAM_WEIGHTS_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CAM_ARCH_FILE);
        let text = fs::read_to_string(&path).context(|| format!("reading {}", path.display()))?;
        let descriptor: serde_json::Value = serde_json::from_str(&text)?;
        if descriptor["kind"] != "cam" {
            return Err(Error::Format {
                path,
                reason: "not a CAM checkpoint".into(),
            });
        }
        let arch: CamArch = serde_json::from_value(descriptor["arch"].clone())?;
        let mut model = Self::build(arch)?;
        nn::load_weights(&mut model.varmap, &dir.join(CAM_WEIGHTS_FILE))?;
        Ok(model)
    }
}

/// Normalised class activation map of `image` for `class`, at the trunk's
/// output resolution.
pub fn compute_cam(model: &CamModel, image: &RgbImage, class: TypeLabel) -> Result<AttentionMap> {
    let fmap = model.feature_map(image)?;
    let raw = raw_cam(&fmap, &model.class_weights(class)?)?;
    normalize_cam(&raw, fmap.width(), fmap.height())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamTrainConfig {
    pub arch: CamArch,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Optional `features.*` checkpoint to start the trunk from.
    pub pretrained_trunk: Option<std::path::PathBuf>,
}

impl Default for CamTrainConfig {
    fn default() -> Self {
        Self {
            arch: CamArch::reference(),
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            pretrained_trunk: None,
        }
    }
}

pub struct CamTrainOutcome {
    pub model: CamModel,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    pub validation_accuracy: Option<f64>,
}

fn load_labelled(manifest: &DatasetManifest, model: &CamModel) -> Result<(Vec<RgbImage>, Vec<u32>)> {
    let side = model.arch.input_size;
    manifest
        .records
        .par_iter()
        .map(|r| {
            let label = r.type_label.ok_or_else(|| {
                Error::InvalidInput(format!("record {} has no type label", r.id))
            })?;
            let img = load_rgb(&manifest.image_path(r))?;
            Ok((resize_rgb(&img, side, side), label.index() as u32))
        })
        .collect::<Result<Vec<_>>>()
        .map(|pairs| pairs.into_iter().unzip())
}

/// Share of correctly classified records.
pub fn cam_accuracy(model: &CamModel, manifest: &DatasetManifest) -> Result<f64> {
    if manifest.is_empty() {
        return Err(Error::InvalidInput("empty manifest".into()));
    }
    let (images, labels) = load_labelled(manifest, model)?;
    let mut correct = 0usize;
    for (chunk, truth) in images.chunks(64).zip(labels.chunks(64)) {
        let predicted = model.predict(chunk)?;
        correct += predicted
            .iter()
            .zip(truth)
            .filter(|(p, &t)| p.index() as u32 == t)
            .count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Fits the classifier with RMSprop and cross-entropy on a labelled
/// trademark-type manifest.
pub fn train_cam(
    tt: &DatasetManifest,
    validation: Option<&DatasetManifest>,
    config: &CamTrainConfig,
) -> Result<CamTrainOutcome> {
    if config.batch_size == 0 || config.epochs == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig("batch size, epochs and learning rate must be positive".into()));
    }
    let mut present = [false; 3];
    for r in &tt.records {
        if let Some(label) = r.type_label {
            present[label.index()] = true;
        }
    }
    if let Some(missing) = TypeLabel::ALL.iter().find(|l| !present[l.index()]) {
        return Err(Error::Insufficient(format!("class {missing} absent from the training manifest")));
    }
    let model = match &config.pretrained_trunk {
        Some(path) => CamModel::with_pretrained_trunk(config.arch.clone(), path, config.seed)?,
        None => CamModel::new(config.arch.clone(), config.seed)?,
    };
    let (images, labels) = load_labelled(tt, &model)?;
    let mut opt = RmsProp::new(model.varmap.all_vars(), config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xca_0001);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<RgbImage> = chunk.iter().map(|&i| images[i].clone()).collect();
            let targets: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let x = model.input(&batch)?;
            let y = Tensor::new(targets.as_slice(), &model.device)?;
            let (_, logits) = model.forward(&x)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("classifier loss {value} at epoch {epoch}"),
                });
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
            step += 1;
        }
        let mean = total / batches.max(1) as f64;
        info!("CAM epoch {epoch}: mean loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let validation_accuracy = match validation {
        Some(v) if !v.is_empty() => {
            let acc = cam_accuracy(&model, v)?;
            info!("CAM validation accuracy {acc:.4}");
            Some(acc)
        }
        _ => None,
    };
    Ok(CamTrainOutcome {
        model,
        epoch_losses,
        validation_accuracy,
    })
}
