use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, IoContext, Result};
use crate::imaging::{image_to_tensor, load_rgb, resize_rgb};
use crate::mask::PixelMask;
use crate::segmenter::{focal_loss_tensor, Augmentation, PixelCounts, Segmenter, UnetArch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub arch: UnetArch,
    pub alpha: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Staircase decay: the rate is multiplied by `decay_rate` every
    /// `decay_steps` optimizer steps.
    pub decay_steps: u64,
    pub decay_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augmentation: Augmentation,
    /// Share of the manifest held out for per-epoch pixel F1.
    pub validation_fraction: f64,
    /// Epochs without a held-out F1 improvement before stopping; 0 disables.
    pub patience: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub log_path: Option<PathBuf>,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            arch: UnetArch::reference(),
            alpha: 0.25,
            gamma: 2.0,
            learning_rate: 1e-3,
            decay_steps: 20_000,
            decay_rate: 0.95,
            batch_size: 8,
            epochs: 8,
            augmentation: Augmentation::default(),
            validation_fraction: 0.1,
            patience: 3,
            max_steps: None,
            seed: 0,
            log_path: None,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.gamma < 0.0 || !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need gamma >= 0 and 0 < alpha <= 1, got gamma={} alpha={}",
                self.gamma, self.alpha
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.decay_steps == 0 {
            return Err(Error::InvalidConfig(
                "batch size, epochs and decay steps must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate and decay rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        self.learning_rate * self.decay_rate.powi((step / self.decay_steps) as i32)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_f1: Option<f64>,
}

pub struct TrainOutcome {
    /// Weights of the best held-out epoch (the last one without a held-out split).
    pub model: Segmenter,
    pub log: Vec<LogRecord>,
    pub best_val_f1: Option<f64>,
    pub best_epoch: usize,
    pub steps: u64,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
}

struct Sample {
    image: RgbImage,
    mask: PixelMask,
}

fn load_sample(manifest: &DatasetManifest, index: usize, side: u32) -> Result<Sample> {
    let record = &manifest.records[index];
    let mask_path = manifest.mask_path(record).ok_or_else(|| {
        Error::InvalidInput(format!("record {} has no mask_path", record.id))
    })?;
    let image = load_rgb(&manifest.image_path(record))?;
    let mask = PixelMask::load(&mask_path)?;
    if mask.dimensions() != image.dimensions() {
        return Err(Error::InvalidInput(format!(
            "mask of {} is {:?}, image is {:?}",
            record.id,
            mask.dimensions(),
            image.dimensions()
        )));
    }
    Ok(Sample {
        image: resize_rgb(&image, side, side),
        mask: mask.resize_nearest(side, side),
    })
}

fn to_batch(samples: &[Sample], model: &Segmenter) -> Result<(Tensor, Tensor)> {
    let images = samples
        .iter()
        .map(|s| image_to_tensor(&s.image, model.device()))
        .collect::<Result<Vec<_>>>()?;
    let side = model.arch().input_size as usize;
    let masks = samples
        .iter()
        .map(|s| Tensor::from_slice(s.mask.values(), (1, side, side), model.device()))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok((Tensor::stack(&images, 0)?, Tensor::stack(&masks, 0)?))
}

/// Pixel F1 of `model` over the given manifest records, at the network's
/// input resolution.
pub(crate) fn evaluate_indices(
    model: &Segmenter,
    manifest: &DatasetManifest,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let side = model.arch().input_size;
    let mut counts = PixelCounts::default();
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples = chunk
            .par_iter()
            .map(|&i| load_sample(manifest, i, side))
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<RgbImage> = samples.iter().map(|s| s.image.clone()).collect();
        for (pred, sample) in model.predict_batch(&images)?.iter().zip(&samples) {
            counts.add(PixelCounts::between(&pred.binarize(0.5), &sample.mask)?);
        }
    }
    Ok(counts.f1())
}

/// Pixel F1 over a whole PTL manifest.
pub fn evaluate_segmenter(model: &Segmenter, manifest: &DatasetManifest) -> Result<f64> {
    let indices: Vec<usize> = (0..manifest.len()).collect();
    evaluate_indices(model, manifest, &indices, 16)
}

pub fn train_segmenter(ptl: &DatasetManifest, config: &SegTrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if ptl.is_empty() {
        return Err(Error::InvalidInput("PTL manifest is empty".into()));
    }
    let model = Segmenter::new(config.arch.clone(), config.seed)?;
    let side = config.arch.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e6_0001);

    let mut order: Vec<usize> = (0..ptl.len()).collect();
    order.shuffle(&mut rng);
    let held = if ptl.len() >= 2 {
        ((ptl.len() as f64 * config.validation_fraction).round() as usize).min(ptl.len() - 1)
    } else {
        0
    };
    let validation: Vec<usize> = order[..held].to_vec();
    let mut train: Vec<usize> = order[held..].to_vec();
    info!("segmenter training: {} train / {} held-out records", train.len(), validation.len());

    let mut log_file = match &config.log_path {
        Some(path) => Some(BufWriter::new(
            File::create(path).context(|| format!("creating {}", path.display()))?,
        )),
        None => None,
    };
    let mut log = Vec::new();
    let mut emit = |record: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        if let Some(out) = log_file.as_mut() {
            writeln!(out, "{}", serde_json::to_string(&record)?).context(|| "writing training log".into())?;
            out.flush().context(|| "writing training log".into())?;
        }
        log.push(record);
        Ok(())
    };

    let params = ParamsAdamW {
        lr: config.learning_rate,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(model.varmap().all_vars(), params)?;
    let mut step: u64 = 0;
    let mut best: Option<(f64, usize, Vec<(String, Tensor)>)> = None;
    let mut stale = 0usize;
    let mut last_epoch = 0;

    'epochs: for epoch in 0..config.epochs {
        last_epoch = epoch;
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in train.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let loaded = chunk
                .par_iter()
                .map(|&i| load_sample(ptl, i, side))
                .collect::<Result<Vec<_>>>()?;
            let samples: Vec<Sample> = loaded
                .into_iter()
                .map(|s| {
                    let (image, mask) = config.augmentation.apply(&mut rng, &s.image, &s.mask);
                    Sample { image, mask }
                })
                .collect();
            let (x, y) = to_batch(&samples, &model)?;
            let lr = config.learning_rate_at(step);
            opt.set_learning_rate(lr);
            let logits = model.forward_t(&x, true, Some(&mut rng))?;
            let loss = focal_loss_tensor(&logits, &y, config.alpha, config.gamma)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {value} at epoch {epoch}, learning rate {lr}"),
                });
            }
            opt.backward_step(&loss)?;
            step += 1;
            epoch_loss += value;
            batches += 1;
            debug!("step {step} loss {value:.5}");
            emit(
                LogRecord { epoch, step, learning_rate: lr, loss: Some(value), val_f1: None },
                &mut log,
            )?;
        }
        if batches == 0 {
            break;
        }
        let val_f1 = if validation.is_empty() {
            None
        } else {
            Some(evaluate_indices(&model, ptl, &validation, config.batch_size)?)
        };
        info!(
            "epoch {epoch}: mean loss {:.5}, held-out F1 {}",
            epoch_loss / batches as f64,
            val_f1.map_or("n/a".to_string(), |f| format!("{f:.4}"))
        );
        emit(
            LogRecord {
                epoch,
                step,
                learning_rate: config.learning_rate_at(step),
                loss: None,
                val_f1,
            },
            &mut log,
        )?;
        if let Some(f1) = val_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, crate::nn::snapshot(model.varmap())?));
                stale = 0;
            } else {
                stale += 1;
                if config.patience > 0 && stale >= config.patience {
                    info!("held-out F1 flat for {stale} epochs, stopping");
                    break 'epochs;
                }
            }
        }
        if config.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }

    let (best_val_f1, best_epoch) = match best {
        Some((f1, epoch, weights)) => {
            crate::nn::restore(model.varmap(), &weights)?;
            (Some(f1), epoch)
        }
        None => (None, last_epoch),
    };
    let ids = |idx: &[usize]| idx.iter().map(|&i| ptl.records[i].id.clone()).collect();
    Ok(TrainOutcome {
        train_ids: ids(&train),
        validation_ids: ids(&validation),
        model,
        log,
        best_val_f1,
        best_epoch,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staircase_schedule() {
        let config = SegTrainConfig::default();
        assert_eq!(config.learning_rate_at(0), 1e-3);
        assert_eq!(config.learning_rate_at(19_999), 1e-3);
        assert!((config.learning_rate_at(20_000) - 0.95e-3).abs() < 1e-15);
        assert!((config.learning_rate_at(45_000) - 0.9025e-3).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SegTrainConfig { alpha: 0.0, ..Default::default() },
            SegTrainConfig { gamma: -1.0, ..Default::default() },
            SegTrainConfig { batch_size: 0, ..Default::default() },
            SegTrainConfig { validation_fraction: 1.0, ..Default::default() },
        ];
        for config in bad {
            assert!(config.validate().is_err());
        }
    }

    #[test]
    fn empty_manifest_rejected() {
        let manifest = DatasetManifest::new(crate::dataset::Purpose::Ptl, Vec::new());
        let config = SegTrainConfig { arch: UnetArch::desk(), ..Default::default() };
        assert!(matches!(train_segmenter(&manifest, &config), Err(Error::InvalidInput(_))));
    }
}
