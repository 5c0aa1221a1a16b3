//! Encoder-decoder text/non-text pixel segmenter trained with focal loss.

mod augment;
mod train;
mod unet;

pub use augment::Augmentation;
pub use train::{evaluate_segmenter, train_segmenter, LogRecord, SegTrainConfig, TrainOutcome};
pub use unet::{segment_text, Segmenter, UnetArch};

use candle_core::Tensor;

use crate::error::{shape_mismatch, Error, Result};
use crate::mask::PixelMask;

/// Lower clamp applied to `p_t` inside the tensor loss.
pub const PROB_FLOOR: f32 = 1e-7;

/// Threshold turning probabilities into a binary text mask.
pub const BINARY_THRESHOLD: f32 = 0.5;

/// `-alpha * (1 - p_t)^gamma * ln(p_t)` for a single prediction.
pub fn focal_loss(p_t: f64, gamma: f64, alpha: f64) -> Result<f64> {
    if !(p_t > 0.0 && p_t <= 1.0) {
        return Err(Error::Domain(format!("p_t must lie in (0, 1], got {p_t}")));
    }
    if gamma < 0.0 || !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!(
            "need gamma >= 0 and 0 < alpha <= 1, got gamma={gamma} alpha={alpha}"
        )));
    }
    let modulating = if gamma == 0.0 { 1.0 } else { (1.0 - p_t).powf(gamma) };
    Ok(-alpha * modulating * p_t.ln())
}

/// Mean per-pixel binary focal loss over logits.
///
/// `alpha` weights the text class and `1 - alpha` the background; `p_t` is
/// clamped to `[PROB_FLOOR, 1]` through a stable log-sigmoid.
pub fn focal_loss_tensor(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    // sign = +1 on text, -1 on background; p_t = sigmoid(sign * logit)
    let sign = ((targets * 2.0)? - 1.0)?;
    let z = (logits * &sign)?;
    // ln sigmoid(z) = -softplus(-z) = -(relu(-z) + ln(1 + exp(-|z|)))
    let softplus = (z.neg()?.relu()? + (z.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let log_pt = softplus.neg()?.clamp(PROB_FLOOR.ln(), 0.0)?;
    let p_t = log_pt.exp()?;
    let one_minus = p_t.affine(-1.0, 1.0)?;
    let modulating = if gamma == 0.0 {
        one_minus.ones_like()?
    } else if gamma == 1.0 {
        one_minus
    } else if gamma == 2.0 {
        one_minus.sqr()?
    } else {
        one_minus.powf(gamma)?
    };
    let alpha_t = targets.affine(2.0 * alpha - 1.0, 1.0 - alpha)?;
    let loss = (alpha_t * modulating)?.mul(&log_pt)?.neg()?;
    Ok(loss.mean_all()?)
}

/// Pixel confusion counts for the text class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PixelCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl PixelCounts {
    pub fn between(pred: &PixelMask, gt: &PixelMask) -> Result<Self> {
        if pred.dimensions() != gt.dimensions() {
            return Err(shape_mismatch(
                format!("{:?}", gt.dimensions()),
                format!("{:?}", pred.dimensions()),
            ));
        }
        let mut counts = Self::default();
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            match (p >= BINARY_THRESHOLD, g >= BINARY_THRESHOLD) {
                (true, true) => counts.true_pos += 1,
                (true, false) => counts.false_pos += 1,
                (false, true) => counts.false_neg += 1,
                (false, false) => {}
            }
        }
        Ok(counts)
    }

    pub fn add(&mut self, other: PixelCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }

    /// F1 over text pixels; 1 when neither mask contains text.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.true_pos + self.false_pos + self.false_neg;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.true_pos as f64 / denom as f64
        }
    }
}

pub fn pixel_f1(pred: &PixelMask, gt: &PixelMask) -> Result<f64> {
    Ok(PixelCounts::between(pred, gt)?.f1())
}
