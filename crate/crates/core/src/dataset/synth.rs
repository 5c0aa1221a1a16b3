//! Procedural trademark-like composites with exact text and figure masks.
//!
//! Every composite is painted in layers (background, figure, text) and masks
//! are read off by differencing consecutive layers in normalised `[0, 1]`
//! intensity: a pixel belongs to a layer iff some channel moved by at least
//! [`MASK_THRESHOLD`].

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ab_glyph::{Font, FontVec, PxScale, ScaleFont};
use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TypeLabel;
use crate::error::{Error, IoContext, Result};
use crate::imaging::{channel_distance, load_rgb, resize_rgb, WHITE};
use crate::mask::PixelMask;

/// Normalised difference at or above which a pixel counts as changed.
pub const MASK_THRESHOLD: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColorPolicy {
    /// Near-black ink.
    Dark,
    /// Uniform RGB.
    Random,
    /// Dark ink with the given probability, otherwise uniform RGB.
    Mixed { dark_probability: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub count: usize,
    /// Side of the square canvas in pixels.
    pub canvas: u32,
    pub rng_seed: u64,
    /// Directory of `.ttf`/`.otf` files; the built-in 8x8 bitmap font is used
    /// when unset.
    pub font_dir: Option<PathBuf>,
    /// A text file (or directory of them) with one phrase per line.
    pub text_pool: Option<PathBuf>,
    /// Directory of background images; procedural backgrounds when unset.
    pub background_pool: Option<PathBuf>,
    /// Directory of figure images on white; procedural shapes when unset.
    pub figure_pool: Option<PathBuf>,
    /// Glyph height range as a fraction of the canvas side.
    pub font_size: (f32, f32),
    /// Maximum absolute text rotation in degrees.
    pub rotation_deg: f32,
    /// Inclusive range of text items scattered on a free-form sample.
    pub text_items: (u32, u32),
    pub figure_probability: f32,
    /// Share of samples laid out as trademarks (text-only, figure-only,
    /// figure with caption) instead of free-form scatter.
    pub trademark_probability: f32,
    pub color_policy: ColorPolicy,
    /// Minimum normalised distance between ink and the local background mean.
    pub min_contrast: f32,
    pub max_placement_retries: u32,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            canvas: 300,
            rng_seed: 0,
            font_dir: None,
            text_pool: None,
            background_pool: None,
            figure_pool: None,
            font_size: (0.12, 0.3),
            rotation_deg: 20.0,
            text_items: (1, 3),
            figure_probability: 0.6,
            trademark_probability: 0.4,
            color_policy: ColorPolicy::Mixed {
                dark_probability: 0.5,
            },
            min_contrast: MASK_THRESHOLD,
            max_placement_retries: 16,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.count == 0 {
            return bad("count must be positive");
        }
        if self.canvas < 16 {
            return bad("canvas must be at least 16 pixels");
        }
        let (lo, hi) = self.font_size;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("font_size must satisfy 0 < min <= max <= 1");
        }
        if self.text_items.0 > self.text_items.1 {
            return bad("text_items range is inverted");
        }
        if !(0.0..=1.0).contains(&self.figure_probability)
            || !(0.0..=1.0).contains(&self.trademark_probability)
        {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.min_contrast) {
            return bad("min_contrast must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A rendered trademark with per-layer ground truth.
#[derive(Debug, Clone)]
pub struct TrademarkSample {
    pub image: RgbImage,
    /// The composite before any text was drawn.
    pub pre_text: RgbImage,
    pub text_mask: PixelMask,
    pub figure_mask: PixelMask,
    pub label: TypeLabel,
}

/// Single-channel glyph coverage in `[0, 1]`.
#[derive(Debug, Clone)]
pub(crate) struct Coverage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Coverage {
    fn sample(&self, u: f32, v: f32) -> f32 {
        // bilinear with zero outside
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let at = |x: f32, y: f32| -> f32 {
            if x < 0.0 || y < 0.0 || x >= self.width as f32 || y >= self.height as f32 {
                0.0
            } else {
                self.data[y as usize * self.width + x as usize]
            }
        };
        at(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + at(x0 + 1.0, y0) * fx * (1.0 - fy)
            + at(x0, y0 + 1.0) * (1.0 - fx) * fy
            + at(x0 + 1.0, y0 + 1.0) * fx * fy
    }
}

enum GlyphSet {
    Bitmap,
    Fonts(Vec<FontVec>),
}

impl GlyphSet {
    fn load(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(GlyphSet::Bitmap);
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .context(|| format!("reading font directory {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("ttf") || e.eq_ignore_ascii_case("otf"))
            })
            .collect();
        paths.sort();
        let mut fonts = Vec::new();
        for path in paths {
            let bytes = fs::read(&path).context(|| format!("reading {}", path.display()))?;
            match FontVec::try_from_vec(bytes) {
                Ok(font) => fonts.push(font),
                Err(_) => log::warn!("skipping unparsable font {}", path.display()),
            }
        }
        if fonts.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "no usable fonts in {}",
                dir.display()
            )));
        }
        Ok(GlyphSet::Fonts(fonts))
    }

    fn render(&self, text: &str, px: f32, font_index: usize) -> Coverage {
        match self {
            GlyphSet::Bitmap => render_bitmap(text, px),
            GlyphSet::Fonts(fonts) => render_outline(&fonts[font_index % fonts.len()], text, px),
        }
    }

    fn len(&self) -> usize {
        match self {
            GlyphSet::Bitmap => 1,
            GlyphSet::Fonts(fonts) => fonts.len(),
        }
    }
}

fn render_bitmap(text: &str, px: f32) -> Coverage {
    use font8x8::UnicodeFonts;
    let scale = ((px / 8.0).round() as usize).max(1);
    let cell = 8 * scale;
    let chars: Vec<char> = text.chars().collect();
    let width = (cell * chars.len()).max(1);
    let height = cell;
    let mut data = vec![0.0; width * height];
    for (i, ch) in chars.iter().enumerate() {
        let Some(rows) = font8x8::BASIC_FONTS.get(*ch) else {
            continue;
        };
        for (gy, row) in rows.iter().enumerate() {
            for gx in 0..8 {
                if row & (1 << gx) == 0 {
                    continue;
                }
                for sy in 0..scale {
                    for sx in 0..scale {
                        let x = i * cell + gx * scale + sx;
                        let y = gy * scale + sy;
                        data[y * width + x] = 1.0;
                    }
                }
            }
        }
    }
    Coverage {
        width,
        height,
        data,
    }
}

fn render_outline(font: &FontVec, text: &str, px: f32) -> Coverage {
    let scale = PxScale::from(px);
    let scaled = font.as_scaled(scale);
    let ascent = scaled.ascent();
    let mut caret = 0.0f32;
    let mut previous = None;
    let mut glyphs = Vec::new();
    for ch in text.chars() {
        let id = scaled.glyph_id(ch);
        if let Some(prev) = previous {
            caret += scaled.kern(prev, id);
        }
        glyphs.push(id.with_scale_and_position(scale, ab_glyph::point(caret, ascent)));
        caret += scaled.h_advance(id);
        previous = Some(id);
    }
    let width = (caret.ceil() as usize + 2).max(1);
    let height = ((ascent - scaled.descent()).ceil() as usize + 2).max(1);
    let mut data = vec![0.0f32; width * height];
    for glyph in glyphs {
        let Some(outline) = font.outline_glyph(glyph) else {
            continue;
        };
        let bounds = outline.px_bounds();
        outline.draw(|gx, gy, c| {
            let x = gx as i64 + bounds.min.x as i64;
            let y = gy as i64 + bounds.min.y as i64;
            if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                let cell = &mut data[y as usize * width + x as usize];
                *cell = cell.max(c.clamp(0.0, 1.0));
            }
        });
    }
    Coverage {
        width,
        height,
        data,
    }
}

/// Blends `coverage` onto `canvas`, rotated by `angle` radians about
/// `(cx, cy)`. Returns the number of canvas pixels that received ink.
fn stamp(
    canvas: &mut RgbImage,
    coverage: &Coverage,
    cx: f32,
    cy: f32,
    angle: f32,
    color: Rgb<u8>,
) -> usize {
    let (sin, cos) = angle.sin_cos();
    let (hw, hh) = (coverage.width as f32 / 2.0, coverage.height as f32 / 2.0);
    let ex = hw * cos.abs() + hh * sin.abs() + 1.0;
    let ey = hw * sin.abs() + hh * cos.abs() + 1.0;
    let x_lo = (cx - ex).floor().max(0.0) as u32;
    let y_lo = (cy - ey).floor().max(0.0) as u32;
    let x_hi = ((cx + ex).ceil().max(0.0) as u32).min(canvas.width());
    let y_hi = ((cy + ey).ceil().max(0.0) as u32).min(canvas.height());
    let mut inked = 0;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let u = cos * dx + sin * dy + hw;
            let v = -sin * dx + cos * dy + hh;
            let a = coverage.sample(u - 0.5, v - 0.5);
            if a <= 0.0 {
                continue;
            }
            let p = canvas.get_pixel_mut(x, y);
            for c in 0..3 {
                let blended = f32::from(p.0[c]) * (1.0 - a) + f32::from(color.0[c]) * a;
                p.0[c] = blended.round() as u8;
            }
            inked += 1;
        }
    }
    inked
}

/// Axis-aligned rectangle in canvas pixels (float).
#[derive(Debug, Clone, Copy)]
struct Rect {
    x: f32,
    y: f32,
    w: f32,
    h: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ShapeKind {
    Circle { r: f32 },
    Ring { r_out: f32, r_in: f32 },
    Ellipse { rx: f32, ry: f32, rot: f32 },
    Rect { hw: f32, hh: f32, rot: f32 },
    Polygon { points: Vec<(f32, f32)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Shape {
    cx: f32,
    cy: f32,
    kind: ShapeKind,
    color: [u8; 3],
}

impl Shape {
    /// Membership test in unit-square coordinates.
    fn contains(&self, u: f32, v: f32) -> bool {
        let dx = u - self.cx;
        let dy = v - self.cy;
        match &self.kind {
            ShapeKind::Circle { r } => dx * dx + dy * dy <= r * r,
            ShapeKind::Ring { r_out, r_in } => {
                let d2 = dx * dx + dy * dy;
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
            ShapeKind::Ellipse { rx, ry, rot } => {
                let (s, c) = rot.sin_cos();
                let lx = c * dx + s * dy;
                let ly = -s * dx + c * dy;
                (lx / rx).powi(2) + (ly / ry).powi(2) <= 1.0
            }
            ShapeKind::Rect { hw, hh, rot } => {
                let (s, c) = rot.sin_cos();
                let lx = c * dx + s * dy;
                let ly = -s * dx + c * dy;
                lx.abs() <= *hw && ly.abs() <= *hh
            }
            ShapeKind::Polygon { points } => point_in_polygon(points, dx, dy),
        }
    }
}

fn point_in_polygon(points: &[(f32, f32)], x: f32, y: f32) -> bool {
    let mut inside = false;
    let mut j = points.len() - 1;
    for i in 0..points.len() {
        let (xi, yi) = points[i];
        let (xj, yj) = points[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// A reproducible figurative element defined on the unit square; it can be
/// drawn into any square region of any canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureSpec {
    shapes: Vec<Shape>,
}

impl FigureSpec {
    pub fn random(rng: &mut impl Rng) -> Self {
        let n = rng.random_range(1..=4);
        let mut shapes = Vec::with_capacity(n);
        for i in 0..n {
            // first shape is the large anchor, the rest decorate it
            let (size_lo, size_hi) = if i == 0 { (0.3, 0.48) } else { (0.08, 0.28) };
            let size = rng.random_range(size_lo..size_hi);
            let cx = if i == 0 { 0.5 } else { rng.random_range(0.2..0.8) };
            let cy = if i == 0 { 0.5 } else { rng.random_range(0.2..0.8) };
            let rot = rng.random_range(0.0..PI);
            let kind = match rng.random_range(0..6) {
                0 => ShapeKind::Circle { r: size },
                1 => ShapeKind::Ring {
                    r_out: size,
                    r_in: size * rng.random_range(0.45..0.8),
                },
                2 => ShapeKind::Ellipse {
                    rx: size,
                    ry: size * rng.random_range(0.4..0.9),
                    rot,
                },
                3 => ShapeKind::Rect {
                    hw: size,
                    hh: size * rng.random_range(0.3..1.0),
                    rot,
                },
                4 => {
                    let spikes = rng.random_range(5..=8);
                    let inner = rng.random_range(0.35..0.65);
                    let points = (0..spikes * 2)
                        .map(|k| {
                            let r = if k % 2 == 0 { size } else { size * inner };
                            let t = rot + PI * k as f32 / spikes as f32;
                            (r * t.cos(), r * t.sin())
                        })
                        .collect();
                    ShapeKind::Polygon { points }
                }
                _ => {
                    let sides = rng.random_range(3..=6);
                    let points = (0..sides)
                        .map(|k| {
                            let t = rot + 2.0 * PI * k as f32 / sides as f32;
                            (size * t.cos(), size * t.sin())
                        })
                        .collect();
                    ShapeKind::Polygon { points }
                }
            };
            shapes.push(Shape {
                cx,
                cy,
                kind,
                color: ink_color(rng),
            });
        }
        Self { shapes }
    }

    /// Paints the figure into `region` with 4x4 supersampling.
    fn draw(&self, canvas: &mut RgbImage, region: Rect) {
        const SS: usize = 4;
        let x_lo = region.x.floor().max(0.0) as u32;
        let y_lo = region.y.floor().max(0.0) as u32;
        let x_hi = ((region.x + region.w).ceil() as u32).min(canvas.width());
        let y_hi = ((region.y + region.h).ceil() as u32).min(canvas.height());
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let base = *canvas.get_pixel(x, y);
                let mut acc = [0.0f32; 3];
                let mut hit = false;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px = x as f32 + (sx as f32 + 0.5) / SS as f32;
                        let py = y as f32 + (sy as f32 + 0.5) / SS as f32;
                        let u = (px - region.x) / region.w;
                        let v = (py - region.y) / region.h;
                        let color = self
                            .shapes
                            .iter()
                            .rev()
                            .find(|s| s.contains(u, v))
                            .map(|s| s.color);
                        let color = match color {
                            Some(c) => {
                                hit = true;
                                c
                            }
                            None => base.0,
                        };
                        for c in 0..3 {
                            acc[c] += f32::from(color[c]);
                        }
                    }
                }
                if hit {
                    let n = (SS * SS) as f32;
                    canvas.put_pixel(
                        x,
                        y,
                        Rgb([
                            (acc[0] / n).round() as u8,
                            (acc[1] / n).round() as u8,
                            (acc[2] / n).round() as u8,
                        ]),
                    );
                }
            }
        }
    }
}

/// Saturated or dark colour clearly distinct from white.
fn ink_color(rng: &mut impl Rng) -> [u8; 3] {
    loop {
        let c = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
        if channel_distance(Rgb(c), WHITE) >= 0.3 {
            return c;
        }
    }
}

/// Marks pixels whose normalised difference reaches [`MASK_THRESHOLD`].
pub fn diff_mask(before: &RgbImage, after: &RgbImage) -> PixelMask {
    PixelMask::from_fn(after.width(), after.height(), |x, y| {
        channel_distance(*before.get_pixel(x, y), *after.get_pixel(x, y)) >= MASK_THRESHOLD
    })
}

const BUILTIN_WORDS: &[&str] = &[
    "ACME", "Nova", "Zenith", "BLUE RIVER", "Orbit", "Falcon", "Sunrise", "KAPPA", "Delta Co",
    "Vertex", "Lumen", "NORTH", "Maple", "Atlas", "Crest", "Pioneer", "Quartz", "Summit",
    "Harbor", "Ember", "TRIDENT", "Willow", "Apex", "Cobalt", "Meridian", "Solis", "Granite",
    "Iris", "Pulse", "Horizon", "Echo", "Prime", "Aurora", "Cedar", "Vista", "Nimbus",
    "Sterling", "Beacon", "Onyx", "Terra", "Polar", "Kite", "LOTUS", "Rapid", "Fjord", "Opal",
    "Raven", "Magnet", "Juniper", "Citrus", "Lynx", "Sable", "Titan", "Vortex", "Ivory",
    "Monarch", "Nexus", "Quest", "Ridge", "Tundra", "Umbra", "Valor", "Yonder", "Zephyr",
    "Bolt & Co", "Helix", "Mosaic", "Prism", "Saffron", "Tango", "Nordic Ltd", "Gamma 7",
    "Alpha", "Bravo", "Kilo", "ROYAL", "Golden", "Silver Line", "Tech", "Global",
];

fn load_text_pool(path: &Path) -> Result<Vec<String>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .context(|| format!("reading text pool {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut phrases = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file).context(|| format!("reading {}", file.display()))?;
        phrases.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string),
        );
    }
    if phrases.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "text pool {} is empty",
            path.display()
        )));
    }
    Ok(phrases)
}

fn load_image_pool(path: &Path) -> Result<Vec<RgbImage>> {
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .context(|| format!("reading image pool {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    let images = files
        .iter()
        .map(|f| load_rgb(f))
        .collect::<Result<Vec<_>>>()?;
    if images.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "image pool {} is empty",
            path.display()
        )));
    }
    Ok(images)
}

/// Owns the loaded asset pools and draws samples from them.
pub struct Synthesizer {
    config: SynthesisConfig,
    glyphs: GlyphSet,
    phrases: Vec<String>,
    backgrounds: Vec<RgbImage>,
    figures: Vec<RgbImage>,
}

impl Synthesizer {
    pub fn new(config: SynthesisConfig) -> Result<Self> {
        config.validate()?;
        let glyphs = GlyphSet::load(config.font_dir.as_deref())?;
        let phrases = match &config.text_pool {
            Some(path) => load_text_pool(path)?,
            None => BUILTIN_WORDS.iter().map(|w| w.to_string()).collect(),
        };
        let backgrounds = match &config.background_pool {
            Some(path) => load_image_pool(path)?,
            None => Vec::new(),
        };
        let figures = match &config.figure_pool {
            Some(path) => load_image_pool(path)?,
            None => Vec::new(),
        };
        Ok(Self {
            config,
            glyphs,
            phrases,
            backgrounds,
            figures,
        })
    }

    pub fn config(&self) -> &SynthesisConfig {
        &self.config
    }

    pub fn canvas(&self) -> u32 {
        self.config.canvas
    }

    pub fn random_phrase(&self, rng: &mut impl Rng) -> String {
        if rng.random_bool(0.25) {
            // random token so the model cannot memorise the word list
            let len = rng.random_range(2..=7);
            let charset: &[u8] = if rng.random_bool(0.5) {
                b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
            } else {
                b"abcdefghijklmnopqrstuvwxyz"
            };
            (0..len)
                .map(|_| *charset.choose(rng).unwrap() as char)
                .collect()
        } else {
            self.phrases.choose(rng).unwrap().clone()
        }
    }

    pub fn random_figure(&self, rng: &mut impl Rng) -> FigureSpec {
        FigureSpec::random(rng)
    }

    fn background(&self, rng: &mut impl Rng) -> RgbImage {
        let s = self.config.canvas;
        if !self.backgrounds.is_empty() {
            let bg = self.backgrounds.choose(rng).unwrap();
            return resize_rgb(bg, s, s);
        }
        let roll: f32 = rng.random();
        if roll < 0.45 {
            RgbImage::from_pixel(s, s, WHITE)
        } else if roll < 0.65 {
            RgbImage::from_pixel(
                s,
                s,
                Rgb([
                    rng.random_range(200..=255),
                    rng.random_range(200..=255),
                    rng.random_range(200..=255),
                ]),
            )
        } else if roll < 0.75 {
            RgbImage::from_pixel(s, s, Rgb(rng.random()))
        } else if roll < 0.9 {
            let a = Rgb(rng.random::<[u8; 3]>());
            let b = Rgb(rng.random::<[u8; 3]>());
            let vertical = rng.random_bool(0.5);
            let split = rng.random_range(s / 4..3 * s / 4);
            RgbImage::from_fn(s, s, |x, y| {
                let t = if vertical { x } else { y };
                if t < split {
                    a
                } else {
                    b
                }
            })
        } else {
            let a: [u8; 3] = rng.random();
            let b: [u8; 3] = rng.random();
            let vertical = rng.random_bool(0.5);
            RgbImage::from_fn(s, s, |x, y| {
                let t = if vertical { x } else { y } as f32 / (s - 1) as f32;
                Rgb(std::array::from_fn(|c| {
                    (f32::from(a[c]) * (1.0 - t) + f32::from(b[c]) * t).round() as u8
                }))
            })
        }
    }

    fn draw_figure(&self, rng: &mut impl Rng, canvas: &mut RgbImage, region: Rect) {
        if self.figures.is_empty() {
            FigureSpec::random(rng).draw(canvas, region);
            return;
        }
        let source = self.figures.choose(rng).unwrap();
        let side = region.w.min(region.h).max(1.0) as u32;
        let scaled = resize_rgb(source, side, side);
        for (x, y, p) in scaled.enumerate_pixels() {
            if channel_distance(*p, WHITE) < MASK_THRESHOLD {
                continue;
            }
            let (cx, cy) = (region.x as u32 + x, region.y as u32 + y);
            if cx < canvas.width() && cy < canvas.height() {
                canvas.put_pixel(cx, cy, *p);
            }
        }
    }

    fn ink(&self, rng: &mut impl Rng, local_mean: [f32; 3]) -> Rgb<u8> {
        let dark = match self.config.color_policy {
            ColorPolicy::Dark => true,
            ColorPolicy::Random => false,
            ColorPolicy::Mixed { dark_probability } => rng.random_bool(dark_probability as f64),
        };
        let mean = Rgb(local_mean.map(|v| v.round().clamp(0.0, 255.0) as u8));
        for _ in 0..32 {
            let c = if dark {
                let v = rng.random_range(0..48u8);
                Rgb([v, v, v])
            } else {
                Rgb(rng.random::<[u8; 3]>())
            };
            if channel_distance(c, mean) >= self.config.min_contrast {
                return c;
            }
        }
        // background is mid-grey-ish and the draws kept colliding: pick the far extreme
        if local_mean.iter().sum::<f32>() / 3.0 > 127.5 {
            Rgb([0, 0, 0])
        } else {
            WHITE
        }
    }

    /// Draws one phrase centred at `(cx, cy)`. Returns the inked pixel count.
    fn place_text(
        &self,
        rng: &mut impl Rng,
        canvas: &mut RgbImage,
        text: &str,
        px: f32,
        cx: f32,
        cy: f32,
        angle: f32,
    ) -> usize {
        let font = rng.random_range(0..self.glyphs.len());
        let coverage = self.glyphs.render(text, px, font);
        let mean = local_mean(canvas, cx, cy, coverage.width as f32, coverage.height as f32);
        let color = self.ink(rng, mean);
        stamp(canvas, &coverage, cx, cy, angle, color)
    }

    /// Glyph height that makes `text` fit within `max_width`, capped at `px`.
    fn fit_px(&self, text: &str, px: f32, max_width: f32) -> f32 {
        let width = self.glyphs.render(text, px, 0).width as f32;
        if width <= max_width {
            px
        } else {
            (px * max_width / width).max(4.0)
        }
    }

    /// Free-form composite: background, optional figure, scattered text.
    /// Returns `(pre_text, image)`.
    pub(crate) fn scatter(&self, rng: &mut impl Rng) -> Result<(RgbImage, RgbImage)> {
        let s = self.config.canvas as f32;
        let mut canvas = self.background(rng);
        if rng.random_bool(self.config.figure_probability as f64) {
            let side = s * rng.random_range(0.3..0.8);
            let region = Rect {
                x: rng.random_range(0.0..(s - side).max(1.0)),
                y: rng.random_range(0.0..(s - side).max(1.0)),
                w: side,
                h: side,
            };
            self.draw_figure(rng, &mut canvas, region);
        }
        let pre_text = canvas.clone();
        let (lo, hi) = self.config.text_items;
        let items = rng.random_range(lo..=hi);
        for _ in 0..items {
            self.scatter_one(rng, &mut canvas)?;
        }
        Ok((pre_text, canvas))
    }

    fn scatter_one(&self, rng: &mut impl Rng, canvas: &mut RgbImage) -> Result<()> {
        let s = self.config.canvas as f32;
        let (lo, hi) = self.config.font_size;
        let max_rot = self.config.rotation_deg.to_radians();
        for _ in 0..=self.config.max_placement_retries {
            let text = self.random_phrase(rng);
            let px = s * rng.random_range(lo..=hi);
            let px = self.fit_px(&text, px, s * 1.1);
            let angle = if max_rot > 0.0 {
                rng.random_range(-max_rot..=max_rot)
            } else {
                0.0
            };
            let cx = rng.random_range(-0.1 * s..1.1 * s);
            let cy = rng.random_range(-0.1 * s..1.1 * s);
            let mut trial = canvas.clone();
            if self.place_text(rng, &mut trial, &text, px, cx, cy, angle) > 0 {
                *canvas = trial;
                return Ok(());
            }
        }
        Err(Error::InvalidInput(format!(
            "text placement stayed off-canvas after {} retries",
            self.config.max_placement_retries
        )))
    }

    /// Trademark-style composite of the given type on the configured canvas.
    pub fn trademark(&self, rng: &mut impl Rng, label: TypeLabel) -> Result<TrademarkSample> {
        match label {
            TypeLabel::FigureOnly => {
                let figure = self.random_figure(rng);
                Ok(self.clean_figure(rng, &figure))
            }
            TypeLabel::FigureAndText => {
                let figure = self.random_figure(rng);
                self.figure_with_caption(rng, &figure)
            }
            TypeLabel::TextOnly => self.text_only(rng),
        }
    }

    fn plain_background(&self, rng: &mut impl Rng) -> RgbImage {
        let s = self.config.canvas;
        if rng.random_bool(0.8) {
            RgbImage::from_pixel(s, s, WHITE)
        } else {
            RgbImage::from_pixel(
                s,
                s,
                Rgb([
                    rng.random_range(215..=255),
                    rng.random_range(215..=255),
                    rng.random_range(215..=255),
                ]),
            )
        }
    }

    /// The figure alone, filling most of the canvas.
    pub fn clean_figure(&self, rng: &mut impl Rng, figure: &FigureSpec) -> TrademarkSample {
        let s = self.config.canvas as f32;
        let background = RgbImage::from_pixel(self.config.canvas, self.config.canvas, WHITE);
        let mut canvas = background.clone();
        let side = s * rng.random_range(0.85..0.98);
        let region = Rect {
            x: (s - side) / 2.0,
            y: (s - side) / 2.0,
            w: side,
            h: side,
        };
        figure.draw(&mut canvas, region);
        TrademarkSample {
            figure_mask: diff_mask(&background, &canvas),
            text_mask: PixelMask::zeros(canvas.width(), canvas.height()),
            pre_text: canvas.clone(),
            image: canvas,
            label: TypeLabel::FigureOnly,
        }
    }

    /// The figure plus a caption laid out beside it without overlap.
    pub fn figure_with_caption(
        &self,
        rng: &mut impl Rng,
        figure: &FigureSpec,
    ) -> Result<TrademarkSample> {
        let s = self.config.canvas as f32;
        let background = self.plain_background(rng);
        let mut canvas = background.clone();
        let band = s * rng.random_range(0.14..0.24);
        let gap = s * 0.04;
        let side = (s - band - gap - s * 0.04).min(s * 0.9);
        let layout = rng.random_range(0..4);
        let (fig, caption) = match layout {
            // caption below
            0 => (
                Rect { x: (s - side) / 2.0, y: s * 0.02, w: side, h: side },
                Rect { x: s * 0.03, y: s * 0.02 + side + gap, w: s * 0.94, h: band },
            ),
            // caption above
            1 => (
                Rect { x: (s - side) / 2.0, y: s - s * 0.02 - side, w: side, h: side },
                Rect { x: s * 0.03, y: s * 0.02, w: s * 0.94, h: band },
            ),
            // caption right, figure smaller so a word fits beside it
            2 => {
                let side = s * rng.random_range(0.45..0.6);
                (
                    Rect { x: s * 0.02, y: (s - side) / 2.0, w: side, h: side },
                    Rect {
                        x: s * 0.02 + side + gap,
                        y: (s - band) / 2.0,
                        w: s - side - gap - s * 0.04,
                        h: band,
                    },
                )
            }
            _ => {
                let side = s * rng.random_range(0.45..0.6);
                (
                    Rect { x: s - s * 0.02 - side, y: (s - side) / 2.0, w: side, h: side },
                    Rect {
                        x: s * 0.02,
                        y: (s - band) / 2.0,
                        w: s - side - gap - s * 0.04,
                        h: band,
                    },
                )
            }
        };
        figure.draw(&mut canvas, fig);
        let pre_text = canvas.clone();
        let text = self.random_phrase(rng);
        let px = self.fit_px(&text, band * 0.9, caption.w);
        let inked = self.place_text(
            rng,
            &mut canvas,
            &text,
            px,
            caption.x + caption.w / 2.0,
            caption.y + caption.h / 2.0,
            0.0,
        );
        if inked == 0 {
            return Err(Error::InvalidInput("caption rendered no ink".into()));
        }
        Ok(TrademarkSample {
            figure_mask: diff_mask(&background, &pre_text),
            text_mask: diff_mask(&pre_text, &canvas),
            pre_text,
            image: canvas,
            label: TypeLabel::FigureAndText,
        })
    }

    fn text_only(&self, rng: &mut impl Rng) -> Result<TrademarkSample> {
        let s = self.config.canvas as f32;
        let background = self.plain_background(rng);
        let mut canvas = background.clone();
        let lines = rng.random_range(1..=2);
        let px = s * rng.random_range(0.14..0.26);
        let block = lines as f32 * px * 1.2;
        let top = (s - block) / 2.0 + rng.random_range(-0.1..0.1) * s;
        let mut inked = 0;
        for line in 0..lines {
            let text = self.random_phrase(rng);
            let px = self.fit_px(&text, px, s * 0.92);
            let cy = top + (line as f32 + 0.5) * px * 1.2;
            inked += self.place_text(rng, &mut canvas, &text, px, s / 2.0, cy, 0.0);
        }
        if inked == 0 {
            return Err(Error::InvalidInput("text-only mark rendered no ink".into()));
        }
        Ok(TrademarkSample {
            figure_mask: PixelMask::zeros(canvas.width(), canvas.height()),
            text_mask: diff_mask(&background, &canvas),
            pre_text: background,
            image: canvas,
            label: TypeLabel::TextOnly,
        })
    }
}

fn local_mean(canvas: &RgbImage, cx: f32, cy: f32, w: f32, h: f32) -> [f32; 3] {
    let r = w.max(h) / 2.0;
    let x_lo = (cx - r).floor().max(0.0) as u32;
    let y_lo = (cy - r).floor().max(0.0) as u32;
    let x_hi = ((cx + r).ceil().max(0.0) as u32).min(canvas.width());
    let y_hi = ((cy + r).ceil().max(0.0) as u32).min(canvas.height());
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let p = canvas.get_pixel(x, y);
            for c in 0..3 {
                sum[c] += f64::from(p.0[c]);
            }
            n += 1;
        }
    }
    if n == 0 {
        return [255.0; 3];
    }
    sum.map(|v| (v / n as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synth(canvas: u32) -> Synthesizer {
        Synthesizer::new(SynthesisConfig {
            canvas,
            ..SynthesisConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn bitmap_glyph_is_binary() {
        let cov = render_bitmap("A", 16.0);
        assert_eq!((cov.width, cov.height), (16, 16));
        assert!(cov.data.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(cov.data.contains(&1.0));
    }

    #[test]
    fn unrotated_stamp_of_binary_glyph_copies_coverage() {
        let cov = render_bitmap("Hi", 8.0);
        let mut canvas = RgbImage::from_pixel(40, 20, WHITE);
        stamp(&mut canvas, &cov, 20.0, 10.0, 0.0, Rgb([0, 0, 0]));
        let black = canvas.pixels().filter(|p| p.0 == [0, 0, 0]).count();
        let ink = cov.data.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(black, ink);
        assert!(canvas.pixels().all(|p| p.0 == [0, 0, 0] || *p == WHITE));
    }

    #[test]
    fn caption_does_not_touch_figure() {
        let s = synth(120);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let fig = s.random_figure(&mut rng);
            let sample = s.figure_with_caption(&mut rng, &fig).unwrap();
            assert!(sample.text_mask.text_count() > 0);
            assert!(sample.figure_mask.text_count() > 0);
            let overlap = sample
                .text_mask
                .values()
                .iter()
                .zip(sample.figure_mask.values())
                .filter(|(t, f)| **t > 0.5 && **f > 0.5)
                .count();
            assert_eq!(overlap, 0);
        }
    }

    #[test]
    fn text_only_has_no_figure() {
        let s = synth(96);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample = s.trademark(&mut rng, TypeLabel::TextOnly).unwrap();
        assert_eq!(sample.figure_mask.text_count(), 0);
        assert!(sample.text_mask.text_count() > 0);
    }

    #[test]
    fn figure_spec_draws_identically_twice() {
        let s = synth(64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fig = s.random_figure(&mut rng);
        let a = s.clean_figure(&mut ChaCha8Rng::seed_from_u64(5), &fig);
        let b = s.clean_figure(&mut ChaCha8Rng::seed_from_u64(5), &fig);
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn invalid_configs_rejected() {
        let zero = SynthesisConfig {
            count: 0,
            ..SynthesisConfig::default()
        };
        assert!(matches!(zero.validate(), Err(Error::InvalidConfig(_))));
        let inverted = SynthesisConfig {
            font_size: (0.5, 0.2),
            ..SynthesisConfig::default()
        };
        assert!(inverted.validate().is_err());
    }
}
