//! Image helpers shared by every pipeline stage.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::{imageops, DynamicImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::hard_attention::BBox;

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// Converts any decoded image to 8-bit RGB. Gray inputs are replicated across
/// channels and alpha is composited over white.
pub fn to_rgb(image: &DynamicImage) -> RgbImage {
    match image {
        DynamicImage::ImageRgb8(rgb) => rgb.clone(),
        DynamicImage::ImageLuma8(gray) => {
            RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
                let v = gray.get_pixel(x, y).0[0];
                Rgb([v, v, v])
            })
        }
        other => {
            let rgba = other.to_rgba8();
            RgbImage::from_fn(rgba.width(), rgba.height(), |x, y| {
                let [r, g, b, a] = rgba.get_pixel(x, y).0;
                let a = f32::from(a) / 255.0;
                let over = |c: u8| (f32::from(c) * a + 255.0 * (1.0 - a)).round() as u8;
                Rgb([over(r), over(g), over(b)])
            })
        }
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let decoded = image::open(path)?;
    Ok(to_rgb(&decoded))
}

/// Bilinear resize with area-aware filtering when shrinking.
pub fn resize_rgb(image: &RgbImage, width: u32, height: u32) -> RgbImage {
    if image.dimensions() == (width, height) {
        return image.clone();
    }
    imageops::resize(image, width, height, imageops::FilterType::Triangle)
}

pub fn crop(image: &RgbImage, bbox: BBox) -> RgbImage {
    imageops::crop_imm(image, bbox.x0, bbox.y0, bbox.width(), bbox.height()).to_image()
}

/// Largest absolute per-channel difference between two pixels, in [0, 1].
pub fn channel_distance(a: Rgb<u8>, b: Rgb<u8>) -> f32 {
    a.0.iter()
        .zip(b.0.iter())
        .map(|(&p, &q)| (f32::from(p) - f32::from(q)).abs())
        .fold(0.0, f32::max)
        / 255.0
}

/// Triangle-filter resampling of a single-channel row-major grid.
///
/// Matches bilinear interpolation (half-pixel centres, clamped edges) when
/// enlarging and widens the kernel when shrinking so every source cell
/// contributes. Weights are nonnegative and normalised, so constant grids stay
/// constant and nonnegative grids stay nonnegative.
pub fn resample_grid(
    src: &[f32],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), src_w * src_h, "grid length does not match dims");
    if (src_w, src_h) == (dst_w, dst_h) {
        return src.to_vec();
    }
    let wx = filter_weights(src_w, dst_w);
    let wy = filter_weights(src_h, dst_h);

    let mut horizontal = vec![0.0f32; dst_w * src_h];
    for y in 0..src_h {
        let row = &src[y * src_w..(y + 1) * src_w];
        for (x, (start, weights)) in wx.iter().enumerate() {
            horizontal[y * dst_w + x] = weights
                .iter()
                .enumerate()
                .map(|(i, w)| w * row[start + i])
                .sum();
        }
    }
    let mut out = vec![0.0f32; dst_w * dst_h];
    for (y, (start, weights)) in wy.iter().enumerate() {
        for x in 0..dst_w {
            out[y * dst_w + x] = weights
                .iter()
                .enumerate()
                .map(|(i, w)| w * horizontal[(start + i) * dst_w + x])
                .sum();
        }
    }
    out
}

fn filter_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f32>)> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut weights: Vec<f32> = (lo..hi)
                .map(|j| {
                    let d = ((j as f64 + 0.5 - center) / support).abs();
                    (1.0 - d).max(0.0) as f32
                })
                .collect();
            let total: f32 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            } else {
                // centre falls exactly between cells at the edge; take the nearest
                let nearest = (center.floor() as usize).min(src - 1);
                return (nearest, vec![1.0]);
            }
            (lo, weights)
        })
        .collect()
}

/// Per-channel input normalisation applied before a network sees an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    /// `pixel / 255 - 0.5`.
    #[default]
    Centered,
    /// ImageNet channel means and deviations, as expected by torchvision weights.
    ImageNet,
}

impl InputNorm {
    fn coefficients(self) -> ([f32; 3], [f32; 3]) {
        match self {
            InputNorm::Centered => ([0.5; 3], [1.0; 3]),
            InputNorm::ImageNet => ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]),
        }
    }
}

/// Packs an RGB image into a `(3, H, W)` tensor with values `pixel / 255 - 0.5`.
pub fn image_to_tensor(image: &RgbImage, device: &Device) -> Result<Tensor> {
    normalized_tensor(image, InputNorm::Centered, device)
}

/// `(3, H, W)` tensor of `(pixel / 255 - mean) / std`.
pub fn normalized_tensor(image: &RgbImage, norm: InputNorm, device: &Device) -> Result<Tensor> {
    let (mean, std) = norm.coefficients();
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, p) in image.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * w * h + idx] = (f32::from(p.0[c]) / 255.0 - mean[c]) / std[c];
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), device)?)
}

/// Normalised `[0, 1]` RGB planes, used by the synthesizer.
pub fn normalized_planes(image: &RgbImage) -> [Vec<f32>; 3] {
    let n = (image.width() * image.height()) as usize;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (i, p) in image.pixels().enumerate() {
        for c in 0..3 {
            planes[c][i] = f32::from(p.0[c]) / 255.0;
        }
    }
    planes
}

pub(crate) fn ensure_non_empty(image: &RgbImage) -> Result<()> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::InvalidInput(format!(
            "zero-area image ({}x{})",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}
