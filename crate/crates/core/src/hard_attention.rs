//! Hard attention: segment text, paint it over with the surrounding
//! background, trim to what is left, and crop the original to that box.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::{preprocess_image, CANONICAL_SIDE};
use crate::error::{shape_mismatch, Error, IoContext, Result};
use crate::imaging::{channel_distance, crop};
use crate::mask::PixelMask;
use crate::segmenter::{Segmenter, BINARY_THRESHOLD};

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidInput(format!(
                "empty box ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtrhaConfig {
    /// Side of the square closing element; odd.
    pub closing_kernel: u32,
    /// Crops smaller than this share of the image fall back to the original.
    pub small_bbox_ratio: f64,
    /// Normalised colour distance from the border colour that counts as
    /// foreground when trimming.
    pub trim_tolerance: f32,
    /// Chebyshev radii of the ring sampled around each text component.
    pub ring_inner: u32,
    pub ring_outer: u32,
    /// Extra dilation of the closed mask before inpainting (0 = none).
    pub mask_dilation: u32,
    /// Safety margin around predicted text, in segmenter input pixels.
    /// [`remove_text`] converts it to image pixels and adds it to
    /// `mask_dilation`; a mask upsampled from a coarse grid misses glyph
    /// edges by about one cell.
    pub segmenter_margin: f32,
}

impl Default for AtrhaConfig {
    fn default() -> Self {
        Self {
            closing_kernel: 3,
            small_bbox_ratio: 0.05,
            trim_tolerance: 0.05,
            ring_inner: 1,
            ring_outer: 3,
            mask_dilation: 0,
            segmenter_margin: 1.5,
        }
    }
}

impl AtrhaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.closing_kernel == 0 || self.closing_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "closing kernel must be odd and >= 1, got {}",
                self.closing_kernel
            )));
        }
        if !(self.small_bbox_ratio > 0.0 && self.small_bbox_ratio < 1.0) {
            return Err(Error::InvalidConfig("small-box ratio must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.trim_tolerance) {
            return Err(Error::InvalidConfig("trim tolerance must lie in [0, 1)".into()));
        }
        if !(self.segmenter_margin >= 0.0 && self.segmenter_margin.is_finite()) {
            return Err(Error::InvalidConfig("segmenter margin must be finite and >= 0".into()));
        }
        if self.ring_outer <= self.ring_inner {
            return Err(Error::InvalidConfig("ring outer radius must exceed the inner one".into()));
        }
        Ok(())
    }
}

/// Square max filter of radius `r` over a boolean grid; cells outside the
/// grid read as `outside`.
fn square_filter(grid: &[bool], w: usize, h: usize, r: usize, outside: bool, dilate: bool) -> Vec<bool> {
    if r == 0 {
        return grid.to_vec();
    }
    // separable: rows then columns. Dilation is "any", erosion is "all".
    let pass = |src: &[bool], along_x: bool| {
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if along_x { (x, w) } else { (y, h) };
                let mut acc = !dilate;
                for d in -(r as isize)..=(r as isize) {
                    let p = pos as isize + d;
                    let v = if p < 0 || p >= len as isize {
                        outside
                    } else if along_x {
                        src[y * w + p as usize]
                    } else {
                        src[p as usize * w + x]
                    };
                    if dilate {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let rows = pass(grid, true);
    pass(&rows, false)
}

fn text_grid(mask: &PixelMask) -> Vec<bool> {
    mask.values().iter().map(|&v| v >= BINARY_THRESHOLD).collect()
}

fn grid_mask(w: u32, h: u32, grid: &[bool]) -> PixelMask {
    PixelMask::from_fn(w, h, |x, y| grid[(y * w + x) as usize])
}

/// Morphological closing (dilation then erosion) with a `kernel x kernel`
/// square. Pixels beyond the border count as background while dilating and
/// as text while eroding, so text touching the edge is not eaten away.
pub fn close_mask(mask: &PixelMask, kernel: u32) -> Result<PixelMask> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("closing kernel must be odd, got {kernel}")));
    }
    let (w, h) = mask.dimensions();
    let r = (kernel / 2) as usize;
    let grid = text_grid(mask);
    let dilated = square_filter(&grid, w as usize, h as usize, r, false, true);
    let closed = square_filter(&dilated, w as usize, h as usize, r, true, false);
    Ok(grid_mask(w, h, &closed))
}

/// Binary dilation with a `(2r+1)` square.
pub fn dilate_mask(mask: &PixelMask, radius: u32) -> PixelMask {
    let (w, h) = mask.dimensions();
    let grid = square_filter(&text_grid(mask), w as usize, h as usize, radius as usize, false, true);
    grid_mask(w, h, &grid)
}

/// 8-connected text components, each as a list of pixel indices.
pub fn text_components(mask: &PixelMask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let grid = text_grid(mask);
    let mut seen = vec![false; w * h];
    let mut components = Vec::new();
    for start in 0..w * h {
        if !grid[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut component = Vec::new();
        while let Some(i) = stack.pop() {
            component.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if grid[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    components
}

fn pack(c: Rgb<u8>) -> u32 {
    (u32::from(c[0]) << 16) | (u32::from(c[1]) << 8) | u32::from(c[2])
}

fn unpack(v: u32) -> Rgb<u8> {
    Rgb([(v >> 16) as u8, (v >> 8) as u8, v as u8])
}

/// Mode of a colour sample: the most populated 4-bit-per-channel bin wins,
/// then the most frequent exact colour inside it. Ties go to the smaller
/// packed value so the result does not depend on iteration order.
pub fn modal_color(colors: impl IntoIterator<Item = Rgb<u8>>) -> Option<Rgb<u8>> {
    let mut bins = vec![0u32; 4096];
    let mut exact: HashMap<u32, u32> = HashMap::new();
    for c in colors {
        let bin = ((c[0] >> 4) as usize) << 8 | ((c[1] >> 4) as usize) << 4 | (c[2] >> 4) as usize;
        bins[bin] += 1;
        *exact.entry(pack(c)).or_default() += 1;
    }
    let (best_bin, &count) = bins.iter().enumerate().max_by_key(|&(i, n)| (*n, std::cmp::Reverse(i)))?;
    if count == 0 {
        return None;
    }
    let in_bin = |v: u32| {
        let c = unpack(v);
        ((c[0] >> 4) as usize) << 8 | ((c[1] >> 4) as usize) << 4 | (c[2] >> 4) as usize
    };
    exact
        .into_iter()
        .filter(|&(v, _)| in_bin(v) == best_bin)
        .max_by_key(|&(v, n)| (n, std::cmp::Reverse(v)))
        .map(|(v, _)| unpack(v))
}

fn check_dims(image: &RgbImage, mask: &PixelMask) -> Result<()> {
    if image.dimensions() != mask.dimensions() {
        return Err(shape_mismatch(
            format!("mask {:?}", image.dimensions()),
            format!("{:?}", mask.dimensions()),
        ));
    }
    Ok(())
}

fn global_background(image: &RgbImage, text: &[bool]) -> Result<Rgb<u8>> {
    modal_color(
        image
            .pixels()
            .zip(text)
            .filter(|(_, &t)| !t)
            .map(|(p, _)| *p),
    )
    .ok_or_else(|| Error::Domain("image is entirely text; no background to sample".into()))
}

/// Modal colour of the non-text pixels lying between `ring_inner` and
/// `ring_outer` (Chebyshev distance) of `component`; the global non-text mode
/// when that ring is empty.
pub fn dominant_background_color(
    image: &RgbImage,
    text_mask: &PixelMask,
    component: &[usize],
    config: &AtrhaConfig,
) -> Result<Rgb<u8>> {
    check_dims(image, text_mask)?;
    if component.is_empty() {
        return Err(Error::InvalidInput("empty text component".into()));
    }
    let text = text_grid(text_mask);
    ring_mode(image, &text, component, config.ring_inner, config.ring_outer)
        .map_or_else(|| global_background(image, &text), Ok)
}

fn ring_mode(image: &RgbImage, text: &[bool], component: &[usize], inner: u32, outer: u32) -> Option<Rgb<u8>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let outer = outer as usize;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &i in component {
        let (x, y) = (i % w, i / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    // local window around the component, padded by the outer radius
    let lx0 = x0.saturating_sub(outer);
    let ly0 = y0.saturating_sub(outer);
    let lx1 = (x1 + outer + 1).min(w);
    let ly1 = (y1 + outer + 1).min(h);
    let (lw, lh) = (lx1 - lx0, ly1 - ly0);
    let mut local = vec![false; lw * lh];
    for &i in component {
        local[(i / w - ly0) * lw + (i % w - lx0)] = true;
    }
    let far = square_filter(&local, lw, lh, outer, false, true);
    let near = square_filter(&local, lw, lh, inner as usize, false, true);
    let ring = (0..lw * lh).filter(|&j| far[j] && !near[j]).filter_map(|j| {
        let (x, y) = (lx0 + j % lw, ly0 + j / lw);
        (!text[y * w + x]).then(|| *image.get_pixel(x as u32, y as u32))
    });
    modal_color(ring)
}

/// Replaces each text component with its dominant surrounding colour.
pub fn inpaint_text(image: &RgbImage, text_mask: &PixelMask, config: &AtrhaConfig) -> Result<RgbImage> {
    check_dims(image, text_mask)?;
    let components = text_components(text_mask);
    if components.is_empty() {
        return Ok(image.clone());
    }
    let text = text_grid(text_mask);
    let w = image.width() as usize;
    let mut out = image.clone();
    let mut fallback = None;
    for component in &components {
        let color = match ring_mode(image, &text, component, config.ring_inner, config.ring_outer) {
            Some(c) => c,
            None => *fallback.get_or_insert(global_background(image, &text)?),
        };
        for &i in component {
            out.put_pixel((i % w) as u32, (i / w) as u32, color);
        }
    }
    Ok(out)
}

/// Modal colour of the one-pixel image border.
pub fn border_color(image: &RgbImage) -> Rgb<u8> {
    let (w, h) = image.dimensions();
    let border = (0..w)
        .flat_map(|x| [(x, 0), (x, h - 1)])
        .chain((0..h).flat_map(|y| [(0, y), (w - 1, y)]))
        .map(|(x, y)| *image.get_pixel(x, y));
    let mut counts: HashMap<u32, u32> = HashMap::new();
    for c in border {
        *counts.entry(pack(c)).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by_key(|&(v, n)| (n, std::cmp::Reverse(v)))
        .map(|(v, _)| unpack(v))
        .expect("non-empty image has a border")
}

/// Tightest box around pixels farther than `trim_tolerance` from the border
/// colour; `None` when there are none.
pub fn foreground_bbox(image: &RgbImage, trim_tolerance: f32) -> Option<BBox> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return None;
    }
    let bg = border_color(image);
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for (x, y, p) in image.enumerate_pixels() {
        if channel_distance(*p, bg) > trim_tolerance {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    (x0 != u32::MAX).then_some(BBox { x0, y0, x1, y1 })
}

/// Everything [`remove_text`] computed, for inspection and debug dumps.
#[derive(Debug, Clone)]
pub struct TextRemoval {
    /// Final canonical image.
    pub image: RgbImage,
    /// Canonical input the crop was taken from.
    pub original: RgbImage,
    /// Cleaned binary text mask.
    pub mask: PixelMask,
    pub inpainted: RgbImage,
    /// Foreground box of the inpainted image, if any.
    pub bbox: Option<BBox>,
    /// `true` when the original was returned instead of a crop.
    pub fell_back: bool,
}

impl TextRemoval {
    /// Crop of the original before re-padding (the whole original on fallback).
    pub fn cropped(&self) -> RgbImage {
        match (self.fell_back, self.bbox) {
            (false, Some(b)) => crop(&self.original, b),
            _ => self.original.clone(),
        }
    }

    pub fn dump(&self, dir: &Path, id: &str) -> Result<()> {
        fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
        self.mask.save(&dir.join(format!("{id}.mask.png")))?;
        self.inpainted.save(dir.join(format!("{id}.inpainted.png")))?;
        self.image.save(dir.join(format!("{id}.result.png")))?;
        let meta = serde_json::json!({ "id": id, "bbox": self.bbox, "fell_back": self.fell_back });
        let path = dir.join(format!("{id}.json"));
        fs::write(&path, meta.to_string()).context(|| format!("writing {}", path.display()))
    }
}

/// Hard attention with a caller-supplied text probability mask. The image is
/// brought to the canonical square first; the mask must match the image as
/// given.
pub fn remove_text_with_mask(image: &RgbImage, text_probs: &PixelMask, config: &AtrhaConfig) -> Result<TextRemoval> {
    config.validate()?;
    check_dims(image, text_probs)?;
    let original = preprocess_image(image, CANONICAL_SIDE)?;
    let probs = if image.dimensions() == original.dimensions() {
        text_probs.clone()
    } else {
        // follow the image through the same scale-and-pad
        preprocess_mask(text_probs)?
    };
    let mut mask = close_mask(&probs.binarize(BINARY_THRESHOLD), config.closing_kernel)?;
    if config.mask_dilation > 0 {
        mask = dilate_mask(&mask, config.mask_dilation);
    }
    let inpainted = match inpaint_text(&original, &mask, config) {
        Ok(img) => img,
        Err(Error::Domain(_)) => {
            return Ok(TextRemoval {
                image: original.clone(),
                inpainted: original.clone(),
                original,
                mask,
                bbox: None,
                fell_back: true,
            })
        }
        Err(e) => return Err(e),
    };
    let bbox = foreground_bbox(&inpainted, config.trim_tolerance);
    let total = u64::from(original.width()) * u64::from(original.height());
    let keep = bbox.filter(|b| b.area() as f64 >= config.small_bbox_ratio * total as f64);
    let image = match keep {
        Some(b) => preprocess_image(&crop(&original, b), CANONICAL_SIDE)?,
        None => original.clone(),
    };
    Ok(TextRemoval {
        image,
        original,
        mask,
        inpainted,
        bbox,
        fell_back: keep.is_none(),
    })
}

fn preprocess_mask(mask: &PixelMask) -> Result<PixelMask> {
    // inverted so the white padding maps back to "no text"
    let gray = mask.to_gray();
    let inverted = RgbImage::from_fn(mask.width(), mask.height(), |x, y| {
        let v = 255 - gray.get_pixel(x, y)[0];
        Rgb([v, v, v])
    });
    let canon = preprocess_image(&inverted, CANONICAL_SIDE)?;
    let values = canon.pixels().map(|p| f32::from(255 - p[0]) / 255.0).collect();
    PixelMask::new(CANONICAL_SIDE, CANONICAL_SIDE, values)
}

/// Segments `image`, removes the detected text and crops the original to
/// the remaining foreground; falls back to the canonical original when no
/// sizeable foreground survives. The predicted mask is grown by
/// `segmenter_margin` cells of the segmenter grid before inpainting.
pub fn remove_text(image: &RgbImage, segmenter: &Segmenter, config: &AtrhaConfig) -> Result<TextRemoval> {
    config.validate()?;
    let canonical = preprocess_image(image, CANONICAL_SIDE)?;
    let probs = segmenter.segment_text(&canonical)?;
    let cell = CANONICAL_SIDE as f32 / segmenter.arch().input_size as f32;
    let config = AtrhaConfig {
        mask_dilation: config.mask_dilation + (config.segmenter_margin * cell).ceil() as u32,
        ..config.clone()
    };
    remove_text_with_mask(&canonical, &probs, &config)
}
