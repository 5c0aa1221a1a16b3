use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{shape_mismatch, Error, Result};
use crate::imaging::resample_grid;

/// Per-pixel text map aligned with an image: probabilities in `[0, 1]` or a
/// binary `{0, 1}` map.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl PixelMask {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        if values.len() != (width * height) as usize {
            return Err(shape_mismatch(
                format!("{} values", width * height),
                values.len(),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "mask value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut values = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                values.push(if f(x, y) { 1.0 } else { 0.0 });
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[(y * self.width + x) as usize]
    }

    pub fn is_text(&self, x: u32, y: u32) -> bool {
        self.get(x, y) >= 0.5
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Binary view: 1 where the probability is at least `threshold`.
    pub fn binarize(&self, threshold: f32) -> PixelMask {
        PixelMask {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn text_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn mean(&self) -> f32 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f32>() / self.values.len() as f32
    }

    /// Bilinear resampling for probability maps.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> PixelMask {
        let values = resample_grid(
            &self.values,
            self.width as usize,
            self.height as usize,
            width as usize,
            height as usize,
        )
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
        PixelMask {
            width,
            height,
            values,
        }
    }

    /// Nearest-neighbour resampling for binary maps.
    pub fn resize_nearest(&self, width: u32, height: u32) -> PixelMask {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut values = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            let src_y = (((y as f64 + 0.5) * sy) as u32).min(self.height - 1);
            for x in 0..width {
                let src_x = (((x as f64 + 0.5) * sx) as u32).min(self.width - 1);
                values.push(self.get(src_x, src_y));
            }
        }
        PixelMask {
            width,
            height,
            values,
        }
    }

    /// 8-bit single-channel view, 255 = text.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([(self.get(x, y) * 255.0).round() as u8])
        })
    }

    pub fn from_gray(gray: &GrayImage) -> Self {
        Self {
            width: gray.width(),
            height: gray.height(),
            values: gray.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_gray(&image::open(path)?.to_luma8()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(PixelMask::new(1, 1, vec![1.5]).is_err());
        assert!(PixelMask::new(2, 1, vec![0.5]).is_err());
    }

    #[test]
    fn gray_round_trip_of_binary_mask() {
        let mask = PixelMask::from_fn(5, 4, |x, y| (x + y) % 3 == 0);
        assert_eq!(PixelMask::from_gray(&mask.to_gray()), mask);
    }

    #[test]
    fn nearest_resize_keeps_binary() {
        let mask = PixelMask::from_fn(8, 8, |x, _| x < 4);
        let big = mask.resize_nearest(16, 16);
        assert!(big.is_binary());
        assert_eq!(big.text_count(), 128);
    }
}
