use log::warn;

use crate::error::{shape_mismatch, Result};
use crate::features::{FeatureMap, PcaWhitening};
use crate::hard_attention::BBox;
use crate::soft_attention::AttentionMap;

/// `f'_k(x, y) = alpha(x, y) * f_k(x, y)`.
pub fn apply_attention(fmap: &FeatureMap, att: &AttentionMap) -> Result<FeatureMap> {
    if (att.height(), att.width()) != (fmap.height(), fmap.width()) {
        return Err(shape_mismatch(
            format!("{}x{}", fmap.height(), fmap.width()),
            format!("{}x{}", att.height(), att.width()),
        ));
    }
    let cells = fmap.height() * fmap.width();
    let values = fmap
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| v * att.values()[i % cells])
        .collect();
    FeatureMap::new(fmap.channels(), fmap.height(), fmap.width(), values)
}

/// Per-channel spatial sum.
pub fn spoc(fmap: &FeatureMap) -> Vec<f32> {
    (0..fmap.channels())
        .map(|k| fmap.channel(k).iter().map(|&v| f64::from(v)).sum::<f64>() as f32)
        .collect()
}

/// Per-channel spatial maximum.
pub fn mac(fmap: &FeatureMap) -> Vec<f32> {
    (0..fmap.channels())
        .map(|k| fmap.channel(k).iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect()
}

pub(crate) fn region_mac(fmap: &FeatureMap, r: &BBox) -> Vec<f32> {
    let w = fmap.width();
    (0..fmap.channels())
        .map(|k| {
            let plane = fmap.channel(k);
            let mut best = f32::NEG_INFINITY;
            for y in r.y0 as usize..r.y1 as usize {
                for &v in &plane[y * w + r.x0 as usize..y * w + r.x1 as usize] {
                    best = best.max(v);
                }
            }
            best
        })
        .collect()
}

/// Square regions over an `H x W` grid: at scale `l` the side is
/// `ceil(2 min(H, W) / (l + 1))`, and along the longer axis extra positions
/// are added so that consecutive regions overlap by about 40%. Duplicate
/// regions are dropped.
pub fn rmac_regions(height: usize, width: usize, scales: usize) -> Vec<BBox> {
    if height == 0 || width == 0 || scales == 0 {
        return Vec::new();
    }
    let (h, w) = (height as f64, width as f64);
    let short = h.min(w);
    // extra steps along the longer side, chosen so the overlap is closest to 0.4
    let extra = if height == width {
        0
    } else {
        let best = (2..=7)
            .map(|steps: usize| {
                let b = (h.max(w) - short) / (steps - 1) as f64;
                ((short * short - short * b) / (short * short) - 0.4).abs()
            })
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        best + 1
    };
    let (extra_w, extra_h) = if height < width { (extra, 0) } else { (0, extra) };

    let mut regions = Vec::new();
    for l in 1..=scales {
        let side = ((2.0 * short) / (l as f64 + 1.0)).ceil().max(1.0);
        let half = (side / 2.0 - 1.0).floor();
        let starts = |len: f64, n_extra: usize| -> Vec<u32> {
            let count = l + n_extra;
            let step = if count > 1 { (len - side) / (count - 1) as f64 } else { 0.0 };
            (0..count)
                .map(|i| ((half + i as f64 * step).floor() - half).clamp(0.0, len - side) as u32)
                .collect()
        };
        let xs = starts(w, extra_w);
        let ys = starts(h, extra_h);
        let side = side as u32;
        for &y in &ys {
            for &x in &xs {
                let r = BBox {
                    x0: x,
                    y0: y,
                    x1: x + side,
                    y1: y + side,
                };
                if !regions.contains(&r) {
                    regions.push(r);
                }
            }
        }
    }
    regions
}

/// Scales to unit l2 norm; the zero vector stays zero.
pub fn l2_normalize(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|&x| (f64::from(x) / norm) as f32).collect()
    } else {
        v.to_vec()
    }
}

/// Regional MACs, each l2-normalised, whitened and l2-normalised again,
/// summed and normalised once more.
pub fn rmac(fmap: &FeatureMap, pca: &PcaWhitening, scales: usize) -> Result<Vec<f32>> {
    if pca.input_dim() != fmap.channels() {
        return Err(shape_mismatch(pca.input_dim(), fmap.channels()));
    }
    let mut total = vec![0.0f64; pca.output_dim()];
    for r in rmac_regions(fmap.height(), fmap.width(), scales) {
        let v = l2_normalize(&pca.apply(&l2_normalize(&region_mac(fmap, &r)))?);
        for (t, x) in total.iter_mut().zip(v) {
            *t += f64::from(x);
        }
    }
    let total: Vec<f32> = total.into_iter().map(|v| v as f32).collect();
    Ok(l2_normalize(&total))
}

/// Result of [`postprocess`]; `zero` flags an all-zero input.
#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub values: Vec<f32>,
    pub zero: bool,
}

/// l2, then optionally whiten and l2 again.
pub fn postprocess(v: &[f32], pca: Option<&PcaWhitening>) -> Result<Processed> {
    if v.iter().all(|&x| x == 0.0) {
        warn!("zero descriptor left unnormalised");
        let dim = pca.map_or(v.len(), PcaWhitening::output_dim);
        return Ok(Processed {
            values: vec![0.0; dim],
            zero: true,
        });
    }
    let mut out = l2_normalize(v);
    if let Some(pca) = pca {
        out = l2_normalize(&pca.apply(&out)?);
    }
    Ok(Processed {
        zero: out.iter().all(|&x| x == 0.0),
        values: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(k: usize, h: usize, w: usize, v: &[f32]) -> FeatureMap {
        FeatureMap::new(k, h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn pooling_examples() {
        let f = map(1, 2, 2, &[1.0, 2.0, 3.0, 0.0]);
        assert_eq!(spoc(&f), vec![6.0]);
        assert_eq!(mac(&f), vec![3.0]);
        let zero = map(2, 2, 2, &[0.0; 8]);
        assert_eq!(spoc(&zero), vec![0.0, 0.0]);
    }

    #[test]
    fn attention_hand_example() {
        let f = map(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let att = AttentionMap::new(2, 2, vec![2.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(apply_attention(&f, &att).unwrap().values(), &[2.0, 0.0, 3.0, 4.0]);
        let ones = AttentionMap::uniform(2, 2, 1.0).unwrap();
        assert_eq!(apply_attention(&f, &ones).unwrap(), f);
        let wrong = AttentionMap::uniform(3, 2, 1.0).unwrap();
        assert!(apply_attention(&f, &wrong).is_err());
    }

    #[test]
    fn region_examples() {
        assert_eq!(rmac_regions(1, 1, 1), vec![BBox::full(1, 1)]);
        assert_eq!(rmac_regions(8, 8, 1), vec![BBox::full(8, 8)]);
        // 19x19 with 4 scales: 1 + 4 + 9 + 16
        assert_eq!(rmac_regions(19, 19, 4).len(), 30);
        for r in rmac_regions(13, 29, 4) {
            assert!(r.x1 <= 29 && r.y1 <= 13 && r.width() == r.height());
        }
    }

    #[test]
    fn postprocess_examples() {
        let out = postprocess(&[3.0, 4.0], None).unwrap();
        assert_eq!(out.values, vec![0.6, 0.8]);
        assert!(!out.zero);
        let z = postprocess(&[0.0, 0.0], None).unwrap();
        assert!(z.zero);
        assert_eq!(z.values, vec![0.0, 0.0]);
    }
}
