use image::{imageops, RgbImage};

use crate::error::Result;
use crate::imaging::{ensure_non_empty, resize_rgb, WHITE};

/// Side of the canonical square every catalog image is mapped to.
pub const CANONICAL_SIDE: u32 = 300;

/// Scales `image` so its longer side equals `target_side`, centres it on a
/// white square canvas, and keeps the aspect ratio.
///
/// Already-canonical inputs are returned untouched, which makes the operation
/// idempotent.
pub fn preprocess_image(image: &RgbImage, target_side: u32) -> Result<RgbImage> {
    ensure_non_empty(image)?;
    let (w, h) = image.dimensions();
    if w == target_side && h == target_side {
        return Ok(image.clone());
    }
    let longer = w.max(h) as f64;
    let scale = f64::from(target_side) / longer;
    let new_w = ((f64::from(w) * scale).round() as u32).clamp(1, target_side);
    let new_h = ((f64::from(h) * scale).round() as u32).clamp(1, target_side);
    let content = resize_rgb(image, new_w, new_h);

    let mut canvas = RgbImage::from_pixel(target_side, target_side, WHITE);
    let left = (target_side - new_w) / 2;
    let top = (target_side - new_h) / 2;
    imageops::replace(&mut canvas, &content, i64::from(left), i64::from(top));
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn solid(w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([10, 20, 30]))
    }

    fn white_rows(img: &RgbImage, rows: std::ops::Range<u32>) -> bool {
        rows.into_iter()
            .all(|y| (0..img.width()).all(|x| *img.get_pixel(x, y) == WHITE))
    }

    #[test]
    fn wide_image_is_padded_top_and_bottom() {
        let out = preprocess_image(&solid(600, 300), 300).unwrap();
        assert_eq!(out.dimensions(), (300, 300));
        assert!(white_rows(&out, 0..75));
        assert!(white_rows(&out, 225..300));
        assert_eq!(*out.get_pixel(150, 75), Rgb([10, 20, 30]));
        assert_eq!(*out.get_pixel(150, 224), Rgb([10, 20, 30]));
    }

    #[test]
    fn canonical_input_is_unchanged() {
        let mut img = solid(300, 300);
        img.put_pixel(3, 4, Rgb([200, 0, 0]));
        assert_eq!(preprocess_image(&img, 300).unwrap(), img);
    }

    #[test]
    fn small_image_is_upscaled_and_padded() {
        // 100x40 -> 300x120 content, 90 white rows above and below
        let out = preprocess_image(&solid(100, 40), 300).unwrap();
        assert!(white_rows(&out, 0..90));
        assert!(white_rows(&out, 210..300));
        assert!(!white_rows(&out, 90..91));
        assert!(!white_rows(&out, 209..210));
        assert!((0..300).all(|x| *out.get_pixel(x, 150) == Rgb([10, 20, 30])));
    }

    #[test]
    fn zero_area_rejected() {
        assert!(preprocess_image(&RgbImage::new(0, 5), 300).is_err());
    }

    #[test]
    fn idempotent_on_tall_image() {
        let mut img = solid(37, 91);
        img.put_pixel(5, 5, Rgb([255, 0, 0]));
        let once = preprocess_image(&img, 300).unwrap();
        assert_eq!(preprocess_image(&once, 300).unwrap(), once);
    }
}
