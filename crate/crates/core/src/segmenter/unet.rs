use std::fs;
use std::path::Path;

use candle_core::{Device, Module, ModuleT, Tensor};
use candle_nn::{
    batch_norm, conv2d, conv_transpose2d, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig,
    ConvTranspose2d, ConvTranspose2dConfig, VarBuilder, VarMap,
};
use image::RgbImage;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::imaging::{image_to_tensor, resize_rgb};
use crate::mask::PixelMask;
use crate::nn;

const ARCH_FILE: &str = "architecture.json";
const WEIGHTS_FILE: &str = "weights.safetensors";
/// Initial text probability of the output layer.
const TEXT_PRIOR: f32 = 0.01;

/// U-Net layout: one double-conv block per entry of `channels`, a 2x2 max
/// pool between encoder levels, transposed-conv upsampling and skip
/// concatenation on the way back up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnetArch {
    pub input_size: u32,
    pub channels: Vec<usize>,
    pub bn_decay: f64,
    pub bn_epsilon: f64,
    pub dropout_keep: f32,
}

impl UnetArch {
    /// Full-size network: 256 px input, 64..1024 channels.
    pub fn reference() -> Self {
        Self {
            input_size: 256,
            channels: vec![64, 128, 256, 512, 1024],
            bn_decay: 0.997,
            bn_epsilon: 1e-3,
            dropout_keep: 0.9,
        }
    }

    /// Narrow, low-resolution variant sized for single-core CPU training.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            channels: vec![8, 16, 32, 64],
            // few steps per epoch: slow running stats lag the weights badly
            bn_decay: 0.9,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::InvalidConfig(
                "U-Net needs at least two non-empty levels".into(),
            ));
        }
        let stride = 1u32 << (self.channels.len() - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::InvalidConfig(format!(
                "input size {} must be a positive multiple of {stride}",
                self.input_size
            )));
        }
        if !(0.0..1.0).contains(&self.bn_decay) || self.bn_epsilon < 0.0 {
            return Err(Error::InvalidConfig("bad batch-norm parameters".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::InvalidConfig("dropout keep must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

struct DoubleConv {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl DoubleConv {
    fn new(cin: usize, cout: usize, arch: &UnetArch, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let bn = BatchNormConfig {
            eps: arch.bn_epsilon,
            remove_mean: true,
            affine: true,
            momentum: 1.0 - arch.bn_decay,
        };
        Ok(Self {
            conv1: conv2d(cin, cout, 3, cfg, vb.pp("conv1"))?,
            bn1: batch_norm(cout, bn, vb.pp("bn1"))?,
            conv2: conv2d(cout, cout, 3, cfg, vb.pp("conv2"))?,
            bn2: batch_norm(cout, bn, vb.pp("bn2"))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        Ok(self.bn2.forward_t(&self.conv2.forward(&x)?, train)?.relu()?)
    }
}

/// Trained or freshly initialised text segmenter. Immutable once built, so a
/// shared reference can serve concurrent inference.
pub struct Segmenter {
    arch: UnetArch,
    varmap: VarMap,
    device: Device,
    encoder: Vec<DoubleConv>,
    decoder: Vec<(ConvTranspose2d, DoubleConv)>,
    head: Conv2d,
}

impl Segmenter {
    pub fn new(arch: UnetArch, seed: u64) -> Result<Self> {
        let model = Self::build(arch)?;
        nn::reinit_varmap(&model.varmap, seed)?;
        // start every pixel at a low text probability so the many easy
        // background pixels do not swamp the first updates
        let bias = -((1.0 - TEXT_PRIOR) / TEXT_PRIOR).ln();
        let vars = model.varmap.data().lock().expect("varmap lock poisoned");
        vars["head.bias"].set(&Tensor::new(&[bias], &model.device)?)?;
        drop(vars);
        Ok(model)
    }

    fn build(arch: UnetArch) -> Result<Self> {
        arch.validate()?;
        let (varmap, device) = nn::new_varmap();
        let vb = nn::var_builder(&varmap, &device);
        let ch = &arch.channels;
        let mut encoder = Vec::with_capacity(ch.len());
        let mut cin = 3;
        for (level, &c) in ch.iter().enumerate() {
            encoder.push(DoubleConv::new(cin, c, &arch, vb.pp(format!("enc{level}")))?);
            cin = c;
        }
        let up_cfg = ConvTranspose2dConfig {
            stride: 2,
            ..Default::default()
        };
        let mut decoder = Vec::with_capacity(ch.len() - 1);
        for level in (0..ch.len() - 1).rev() {
            let up = conv_transpose2d(ch[level + 1], ch[level], 2, up_cfg, vb.pp(format!("up{level}")))?;
            let block = DoubleConv::new(2 * ch[level], ch[level], &arch, vb.pp(format!("dec{level}")))?;
            decoder.push((up, block));
        }
        let head = conv2d(ch[0], 1, 1, Conv2dConfig::default(), vb.pp("head"))?;
        drop(vb);
        Ok(Self {
            arch,
            varmap,
            device,
            encoder,
            decoder,
            head,
        })
    }

    pub fn arch(&self) -> &UnetArch {
        &self.arch
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub(crate) fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Per-pixel text logits, `(B, 1, S, S)` for a `(B, 3, S, S)` batch.
    pub(crate) fn forward_t(
        &self,
        x: &Tensor,
        train: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for (level, block) in self.encoder.iter().enumerate() {
            if level > 0 {
                h = h.max_pool2d(2)?;
            }
            h = block.forward(&h, train)?;
            skips.push(h.clone());
        }
        skips.pop();
        if let (true, Some(rng)) = (train, rng) {
            h = nn::dropout(&h, 1.0 - self.arch.dropout_keep, rng)?;
        }
        for (up, block) in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let upsampled = up.forward(&h)?;
            h = block.forward(&Tensor::cat(&[&upsampled, &skip], 1)?, train)?;
        }
        Ok(self.head.forward(&h)?)
    }

    /// Text probabilities at the network's input resolution.
    pub fn predict_batch(&self, images: &[RgbImage]) -> Result<Vec<PixelMask>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let side = self.arch.input_size;
        let batch = images
            .iter()
            .map(|img| image_to_tensor(&resize_rgb(img, side, side), &self.device))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&batch, 0)?;
        let probs = candle_nn::ops::sigmoid(&self.forward_t(&x, false, None)?)?;
        let probs = probs.flatten_from(1)?.to_vec2::<f32>()?;
        probs
            .into_iter()
            .map(|p| PixelMask::new(side, side, p.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()))
            .collect()
    }

    /// Probability mask at the image's own resolution (bilinear resampling of
    /// the network output).
    pub fn segment_text(&self, image: &RgbImage) -> Result<PixelMask> {
        crate::imaging::ensure_non_empty(image)?;
        let mask = self
            .predict_batch(std::slice::from_ref(image))?
            .pop()
            .expect("one mask per image");
        Ok(mask.resize_bilinear(image.width(), image.height()))
    }

    pub fn checksum(&self) -> Result<String> {
        nn::weights_checksum(&self.varmap)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
        let descriptor = serde_json::json!({ "kind": "unet", "version": 1, "arch": self.arch });
        fs::write(dir.join(ARCH_FILE), serde_json::to_string_pretty(&descriptor)?)
            .context(|| format!("writing {}", dir.join(ARCH_FILE).display()))?;
        self.varmap.save(dir.join(WEIGHTS_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let arch_path = dir.join(ARCH_FILE);
        let text = fs::read_to_string(&arch_path)
            .context(|| format!("reading {}", arch_path.display()))?;
        let descriptor: serde_json::Value = serde_json::from_str(&text)?;
        if descriptor["kind"] != "unet" {
            return Err(Error::Format {
                path: arch_path,
                reason: "not a U-Net checkpoint".into(),
            });
        }
        let arch: UnetArch = serde_json::from_value(descriptor["arch"].clone())?;
        let mut model = Self::build(arch)?;
        nn::load_weights(&mut model.varmap, &dir.join(WEIGHTS_FILE))?;
        Ok(model)
    }
}

/// Free-function form of [`Segmenter::segment_text`].
pub fn segment_text(model: &Segmenter, image: &RgbImage) -> Result<PixelMask> {
    model.segment_text(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UnetArch {
        UnetArch {
            input_size: 16,
            channels: vec![4, 8],
            ..UnetArch::reference()
        }
    }

    #[test]
    fn output_matches_input_size_and_range() {
        let model = Segmenter::new(tiny(), 0).unwrap();
        let img = RgbImage::from_fn(37, 23, |x, y| image::Rgb([(x * 7) as u8, (y * 11) as u8, 90]));
        let mask = model.segment_text(&img).unwrap();
        assert_eq!(mask.dimensions(), (37, 23));
        assert!(mask.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(model.segment_text(&img).unwrap(), mask);
    }

    #[test]
    fn rejects_indivisible_input() {
        let arch = UnetArch {
            input_size: 30,
            channels: vec![4, 8, 16],
            ..UnetArch::reference()
        };
        assert!(Segmenter::new(arch, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = Segmenter::new(tiny(), 5).unwrap();
        model.save(dir.path()).unwrap();
        let back = Segmenter::load(dir.path()).unwrap();
        assert_eq!(back.checksum().unwrap(), model.checksum().unwrap());
        let img = RgbImage::from_pixel(16, 16, image::Rgb([200, 10, 10]));
        assert_eq!(back.segment_text(&img).unwrap(), model.segment_text(&img).unwrap());
    }

    #[test]
    fn architecture_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        Segmenter::new(tiny(), 5).unwrap().save(dir.path()).unwrap();
        let wider = UnetArch {
            channels: vec![4, 12],
            ..tiny()
        };
        let descriptor = serde_json::json!({ "kind": "unet", "version": 1, "arch": wider });
        fs::write(dir.path().join(ARCH_FILE), descriptor.to_string()).unwrap();
        assert!(matches!(Segmenter::load(dir.path()), Err(Error::Format { .. })));
    }
}
