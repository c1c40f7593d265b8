//! Image composition and PPM encoding for the three diagnostics.

use crate::attrib::AttributionMap;
use crate::env::Action;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::tsne::Embedding;

pub const WHITE: [u8; 3] = [255, 255, 255];

/// Strength of the action tint on t-SNE thumbnails.
pub const TINT_STRENGTH: f32 = 0.6;
/// Opacity of the attribution heat overlay.
pub const HEAT_OPACITY: f32 = 0.5;

pub const GLYPH_CELL: usize = 10;

/// Action colors: Left green, Forward red, Right blue.
pub fn tint(action: Action) -> [u8; 3] {
    match action {
        Action::Left => [0, 255, 0],
        Action::Forward => [255, 0, 0],
        Action::Right => [0, 0, 255],
    }
}

/// Top-left corner (column, row) of each action's glyph cell. The cells
/// form an upside-down T: Forward on top, Left and Right beneath it.
pub fn glyph_cell_origin(action: Action) -> (usize, usize) {
    match action {
        Action::Forward => (12, 2),
        Action::Left => (2, 12),
        Action::Right => (22, 12),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Usage(format!("image dimensions must be positive, got {width}x{height}")));
        }
        Ok(Self {
            width,
            height,
            pixels: color.repeat(width * height),
        })
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != 3 * width * height {
            return shape_err(format!(
                "{} bytes cannot form a {width}x{height} RGB image",
                pixels.len()
            ));
        }
        Ok(Self { width, height, pixels })
    }

    /// Grayscale tensor (`[H,W]` or `[1,H,W]`, values in `[0,1]`) to RGB.
    pub fn from_gray(image: &Tensor) -> Result<Self> {
        let (h, w) = gray_dims(image)?;
        let pixels = image.data().iter().flat_map(|&v| [to_u8(v); 3]).collect();
        Self::from_raw(w, h, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fills a rectangle, clipped to the image.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, rgb: [u8; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set(x, y, rgb);
            }
        }
    }

    /// Copies `src` with its top-left corner at `(x0, y0)`, clipped.
    pub fn blit(&mut self, src: &RgbImage, x0: usize, y0: usize) {
        for y in 0..src.height {
            if y0 + y >= self.height {
                break;
            }
            for x in 0..src.width {
                if x0 + x >= self.width {
                    break;
                }
                self.set(x0 + x, y0 + y, src.get(x, y));
            }
        }
    }

    /// Nearest-neighbor enlargement by an integer factor.
    pub fn scaled(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Usage("scale factor must be positive".into()));
        }
        let mut out = Self::filled(self.width * factor, self.height * factor, WHITE)?;
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        Ok(out)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn gray_dims(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    match s {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        _ => shape_err(format!("expected a grayscale [H,W] or [1,H,W] image, got {s:?}")),
    }
}

/// Binary PPM: `P6\n{w} {h}\n255\n` followed by the raw RGB bytes.
pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::Usage("cannot encode an empty image".into()));
    }
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.pixels);
    Ok(out)
}

/// Source-axis coverage of each target cell for area averaging:
/// `(source index, overlap length)` pairs.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let (a, b) = (t as f64 * ratio, (t + 1) as f64 * ratio);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

/// Area-average resampling of a grayscale image to `dst_h x dst_w`.
pub fn area_resample(image: &Tensor, dst_h: usize, dst_w: usize) -> Result<Vec<f32>> {
    let (h, w) = gray_dims(image)?;
    let wy = area_weights(h, dst_h);
    let wx = area_weights(w, dst_w);
    let src = image.data();
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for row in &wy {
        for col in &wx {
            let mut acc = 0.0f64;
            let mut area = 0.0f64;
            for &(sy, oy) in row {
                for &(sx, ox) in col {
                    acc += oy * ox * src[sy * w + sx] as f64;
                    area += oy * ox;
                }
            }
            out.push((acc / area) as f32);
        }
    }
    Ok(out)
}

/// Gray thumbnail tinted by `action`:
/// `out = 0.4 * gray + 0.6 * gray * tint / 255` per channel.
pub fn tinted_thumbnail(obs: &Tensor, action: Action, thumb: usize) -> Result<RgbImage> {
    let small = area_resample(obs, thumb, thumb)?;
    let t = tint(action);
    let pixels = small
        .iter()
        .flat_map(|&v| {
            let g = to_u8(v) as f32;
            t.map(|c| ((1.0 - TINT_STRENGTH) * g + TINT_STRENGTH * g * c as f32 / 255.0).round() as u8)
        })
        .collect();
    RgbImage::from_raw(thumb, thumb, pixels)
}

/// Maps a normalized coordinate to a thumbnail's top-left offset; one
/// thumbnail of margin is kept on every side.
fn place(t: f64, canvas: usize, thumb: usize) -> usize {
    let span = canvas.saturating_sub(3 * thumb) as f64;
    thumb + (t * span).round() as usize
}

fn normalize(values: impl Iterator<Item = f64> + Clone) -> impl Fn(f64) -> f64 {
    let min = values.clone().fold(f64::INFINITY, f64::min);
    let max = values.fold(f64::NEG_INFINITY, f64::max);
    move |v| if max > min { (v - min) / (max - min) } else { 0.5 }
}

/// Scatter of tinted observation thumbnails at their embedding positions on
/// a white square canvas. Later points are drawn over earlier ones.
pub fn compose_tsne_map(
    embedding: &Embedding,
    observations: &[Tensor],
    canvas: usize,
    thumb: usize,
) -> Result<RgbImage> {
    if embedding.is_empty() {
        return Err(Error::Usage("t-SNE map needs at least one point".into()));
    }
    if observations.len() != embedding.len() {
        return shape_err(format!(
            "{} observations for {} embedded points",
            observations.len(),
            embedding.len()
        ));
    }
    if thumb == 0 || canvas < 3 * thumb {
        return Err(Error::Usage(format!("canvas {canvas} too small for {thumb}px thumbnails")));
    }
    let nx = normalize(embedding.points.iter().map(|p| p[0]));
    let ny = normalize(embedding.points.iter().map(|p| p[1]));
    let mut img = RgbImage::filled(canvas, canvas, WHITE)?;
    for ((p, &action), obs) in embedding.points.iter().zip(&embedding.action_tags).zip(observations) {
        let thumbnail = tinted_thumbnail(obs, action, thumb)?;
        // +y points up on the canvas
        img.blit(&thumbnail, place(nx(p[0]), canvas, thumb), place(1.0 - ny(p[1]), canvas, thumb));
    }
    Ok(img)
}

/// Observation with the attribution heat added into red and green at 50%
/// opacity, enlarged `scale` times, with the probability T-glyph in the
/// top-left corner. Glyph cells are gray at `round(255 * p)`; the taken
/// action's cell is red at that intensity.
pub fn compose_attribution(obs: &Tensor, map: &AttributionMap, scale: usize) -> Result<RgbImage> {
    let (h, w) = gray_dims(obs)?;
    if map.upsampled.shape() != [h, w] {
        return shape_err(format!(
            "attribution {:?} does not match observation {h}x{w}",
            map.upsampled.shape()
        ));
    }
    let pixels = obs
        .data()
        .iter()
        .zip(map.upsampled.data())
        .flat_map(|(&v, &m)| {
            let g = to_u8(v);
            let heat = (g as f32 + HEAT_OPACITY * 255.0 * m.clamp(0.0, 1.0)).round().min(255.0) as u8;
            [heat, heat, g]
        })
        .collect();
    let mut img = RgbImage::from_raw(w, h, pixels)?.scaled(scale)?;
    for action in Action::ALL {
        let v = (255.0 * map.probs[action.index()].clamp(0.0, 1.0)).round() as u8;
        let color = if action == map.taken { [v, 0, 0] } else { [v, v, v] };
        let (x, y) = glyph_cell_origin(action);
        img.fill_rect(x, y, GLYPH_CELL, GLYPH_CELL, color);
    }
    Ok(img)
}

/// Row-major grid of equally sized images separated by white gutters;
/// unused slots stay white.
pub fn compose_grid(images: &[RgbImage], columns: usize, gutter: usize) -> Result<RgbImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::Usage("grid needs at least one image".into()))?;
    if columns == 0 {
        return Err(Error::Usage("grid needs at least one column".into()));
    }
    let (w, h) = (first.width, first.height);
    if images.iter().any(|im| im.width != w || im.height != h) {
        return Err(Error::Usage("grid images must share one size".into()));
    }
    let rows = images.len().div_ceil(columns);
    let mut out = RgbImage::filled(
        columns * w + (columns - 1) * gutter,
        rows * h + (rows - 1) * gutter,
        WHITE,
    )?;
    for (i, im) in images.iter().enumerate() {
        let (r, c) = (i / columns, i % columns);
        out.blit(im, c * (w + gutter), r * (h + gutter));
    }
    Ok(out)
}
