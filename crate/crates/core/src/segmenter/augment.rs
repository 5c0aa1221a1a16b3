use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mask::PixelMask;

/// Random geometric jitter applied identically to an image and its mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub enabled: bool,
    pub max_rotation_deg: f32,
    pub flip_probability: f32,
    pub max_shear: f32,
    /// Per-axis scale drawn from `[1 - max_stretch, 1 + max_stretch]`.
    pub max_stretch: f32,
    /// Translation as a fraction of the side.
    pub max_shift: f32,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: true,
            max_rotation_deg: 10.0,
            flip_probability: 0.5,
            max_shear: 0.1,
            max_stretch: 0.1,
            max_shift: 0.05,
        }
    }
}

impl Augmentation {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Warps `image` (bilinear, edges clamped) and `mask` (nearest) with one
    /// randomly drawn affine map.
    pub fn apply(&self, rng: &mut impl Rng, image: &RgbImage, mask: &PixelMask) -> (RgbImage, PixelMask) {
        if !self.enabled {
            return (image.clone(), mask.clone());
        }
        let sym = |rng: &mut dyn rand::RngCore, r: f32| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let angle = sym(rng, self.max_rotation_deg).to_radians();
        let shear = sym(rng, self.max_shear);
        let sx = 1.0 + sym(rng, self.max_stretch);
        let sy = 1.0 + sym(rng, self.max_stretch);
        let flip = if rng.random::<f32>() < self.flip_probability { -1.0 } else { 1.0 };
        let (w, h) = image.dimensions();
        let tx = sym(rng, self.max_shift) * w as f32;
        let ty = sym(rng, self.max_shift) * h as f32;

        // forward map A = R * Shear * Scale * Flip; sample through A^-1
        let (sin, cos) = angle.sin_cos();
        let a = [
            cos * sx * flip,
            (cos * shear - sin) * sy,
            sin * sx * flip,
            (sin * shear + cos) * sy,
        ];
        let det = a[0] * a[3] - a[1] * a[2];
        let inv = [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det];
        let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
        let source = |x: u32, y: u32| {
            let dx = x as f32 + 0.5 - cx - tx;
            let dy = y as f32 + 0.5 - cy - ty;
            (
                inv[0] * dx + inv[1] * dy + cx - 0.5,
                inv[2] * dx + inv[3] * dy + cy - 0.5,
            )
        };

        let out_image = RgbImage::from_fn(w, h, |x, y| {
            let (u, v) = source(x, y);
            bilinear(image, u, v)
        });
        let mask = if mask.dimensions() == (w, h) { mask.clone() } else { mask.resize_nearest(w, h) };
        let mut values = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = source(x, y);
                let mx = u.round().clamp(0.0, w as f32 - 1.0) as u32;
                let my = v.round().clamp(0.0, h as f32 - 1.0) as u32;
                values.push(mask.get(mx, my));
            }
        }
        let out_mask = PixelMask::new(w, h, values).expect("values copied from a valid mask");
        (out_image, out_mask)
    }
}

fn bilinear(image: &RgbImage, u: f32, v: f32) -> Rgb<u8> {
    let (w, h) = image.dimensions();
    let u = u.clamp(0.0, w as f32 - 1.0);
    let v = v.clamp(0.0, h as f32 - 1.0);
    let (x0, y0) = (u.floor() as u32, v.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f32, v - y0 as f32);
    let p = |x, y| image.get_pixel(x, y).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    let mut out = [0u8; 3];
    for k in 0..3 {
        let top = a[k] as f32 * (1.0 - fx) + b[k] as f32 * fx;
        let bottom = c[k] as f32 * (1.0 - fx) + d[k] as f32 * fx;
        out[k] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_when_ranges_are_zero() {
        let aug = Augmentation {
            enabled: true,
            max_rotation_deg: 0.0,
            flip_probability: 0.0,
            max_shear: 0.0,
            max_stretch: 0.0,
            max_shift: 0.0,
        };
        let img = RgbImage::from_fn(9, 7, |x, y| Rgb([(x * 20) as u8, (y * 30) as u8, 5]));
        let mask = PixelMask::from_fn(9, 7, |x, y| x > y);
        let (i2, m2) = aug.apply(&mut ChaCha8Rng::seed_from_u64(0), &img, &mask);
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn flip_mirrors_image_and_mask_together() {
        let aug = Augmentation {
            enabled: true,
            max_rotation_deg: 0.0,
            flip_probability: 1.0,
            max_shear: 0.0,
            max_stretch: 0.0,
            max_shift: 0.0,
        };
        let img = RgbImage::from_fn(8, 4, |x, _| if x < 2 { Rgb([0, 0, 0]) } else { Rgb([255; 3]) });
        let mask = PixelMask::from_fn(8, 4, |x, _| x < 2);
        let (i2, m2) = aug.apply(&mut ChaCha8Rng::seed_from_u64(0), &img, &mask);
        for y in 0..4 {
            for x in 0..8 {
                assert_eq!(i2.get_pixel(x, y)[0] == 0, m2.is_text(x, y));
                assert_eq!(m2.is_text(x, y), x >= 6);
            }
        }
    }

    #[test]
    fn mask_stays_binary_and_aligned() {
        let aug = Augmentation::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = RgbImage::from_fn(32, 32, |x, y| {
            if (8..24).contains(&x) && (12..20).contains(&y) { Rgb([0, 0, 0]) } else { Rgb([255; 3]) }
        });
        let mask = PixelMask::from_fn(32, 32, |x, y| (8..24).contains(&x) && (12..20).contains(&y));
        for _ in 0..5 {
            let (i2, m2) = aug.apply(&mut rng, &img, &mask);
            assert!(m2.is_binary());
            let agree = (0..32)
                .flat_map(|y| (0..32).map(move |x| (x, y)))
                .filter(|&(x, y)| (i2.get_pixel(x, y)[0] < 128) == m2.is_text(x, y))
                .count();
            assert!(agree >= 32 * 32 * 95 / 100, "{agree}");
        }
    }
}
