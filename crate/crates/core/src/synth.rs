//! Seeded copy-move forgery synthesis.
//!
//! Backgrounds are procedural (value noise plus solid shapes) so the whole
//! test loop stays hermetic. A forgery copies one region — ellipse or
//! polygon — applies rotation/scale/blur to the copied content, and pastes
//! it elsewhere in the same image. Truth masks are rasterized from the exact
//! geometry, never from pixel comparisons, so labels stay correct even when
//! the paste is visually seamless.
//!
//! Label convention: 0 background, 1 source region, 2 pasted (tampered)
//! region. Mask PNGs encode these as 0/128/255.

use crate::error::{Error, Result};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_SOURCE: u8 = 1;
pub const LABEL_TAMPERED: u8 = 2;

/// Fixed attack ranges; the flags only switch each attack on or off.
pub const ROTATION_MAX_DEGREES: f64 = 30.0;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const BLUR_SIGMA_MAX: f64 = 1.5;
pub const JPEG_QUALITY_RANGE: (u8, u8) = (70, 95);
pub const AREA_FRACTION_RANGE: (f64, f64) = (0.05, 0.20);

const PLACEMENT_RETRIES: usize = 20;
const REGION_REGENERATIONS: usize = 8;

/// Which post-processing attacks the generator may draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttackConfig {
    pub rotate: bool,
    pub scale: bool,
    pub blur: bool,
    pub jpeg: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            rotate: true,
            scale: true,
            blur: true,
            jpeg: true,
        }
    }
}

impl AttackConfig {
    /// Identity transform, no blur, no recompression: the pasted region is
    /// a pixel-exact copy of the source.
    pub fn none() -> Self {
        AttackConfig {
            rotate: false,
            scale: false,
            blur: false,
            jpeg: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SourceShape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        tilt_degrees: f64,
    },
    Polygon {
        points: Vec<[f64; 2]>,
    },
}

impl SourceShape {
    fn centroid(&self) -> [f64; 2] {
        match self {
            SourceShape::Ellipse { cx, cy, .. } => [*cx, *cy],
            SourceShape::Polygon { points } => {
                let n = points.len() as f64;
                let sx: f64 = points.iter().map(|p| p[0]).sum();
                let sy: f64 = points.iter().map(|p| p[1]).sum();
                [sx / n, sy / n]
            }
        }
    }

    /// Max distance from the centroid; bounds the transformed footprint.
    fn reach(&self) -> f64 {
        match self {
            SourceShape::Ellipse { rx, ry, .. } => rx.max(*ry),
            SourceShape::Polygon { points } => {
                let c = self.centroid();
                points
                    .iter()
                    .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt())
                    .fold(0.0, f64::max)
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            SourceShape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                tilt_degrees,
            } => {
                let t = -tilt_degrees.to_radians();
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * t.cos() - dy * t.sin();
                let v = dx * t.sin() + dy * t.cos();
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            SourceShape::Polygon { points } => {
                // Even-odd crossing test.
                let mut inside = false;
                let n = points.len();
                for i in 0..n {
                    let a = points[i];
                    let b = points[(i + 1) % n];
                    if (a[1] > y) != (b[1] > y) {
                        let xi = a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                        if x < xi {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }
}

/// Everything needed to re-render the truth mask and re-apply the paste.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    #[serde(rename = "source-shape")]
    pub source_shape: SourceShape,
    #[serde(rename = "paste-offset")]
    pub paste_offset: [i64; 2],
    #[serde(rename = "rotation-degrees")]
    pub rotation_degrees: f64,
    #[serde(rename = "scale-factor")]
    pub scale_factor: f64,
    #[serde(rename = "blur-sigma")]
    pub blur_sigma: f64,
    #[serde(rename = "jpeg-quality")]
    pub jpeg_quality: Option<u8>,
}

pub struct ForgerySample {
    pub image: RgbImage,
    /// Row-major labels, one of the LABEL_* constants per pixel.
    pub truth: Vec<u8>,
    pub provenance: Provenance,
}

/// Procedural background: two octaves of value noise plus 3..=8 opaque
/// shapes. Byte-deterministic in (seed, size).
pub fn generate_base(seed: u64, size: usize) -> Result<RgbImage> {
    if !(32..=256).contains(&size) {
        return Err(Error::InvalidArgument {
            op: "generate_base",
            reason: format!("size {} outside 32..=256", size),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut canvas = vec![0.0f64; size * size * 3];
    add_value_noise(&mut rng, &mut canvas, size, size / 4, 190.0);
    add_value_noise(&mut rng, &mut canvas, size, size / 10, 65.0);

    let shapes = rng.gen_range(3..=8usize);
    for _ in 0..shapes {
        let color = [
            rng.gen_range(0.0..256.0),
            rng.gen_range(0.0..256.0),
            rng.gen_range(0.0..256.0),
        ];
        let shape = match rng.gen_range(0..3u8) {
            0 => {
                let rx = rng.gen_range(0.05..0.25) * size as f64;
                let ry = rng.gen_range(0.05..0.25) * size as f64;
                SourceShape::Ellipse {
                    cx: rng.gen_range(0.0..size as f64),
                    cy: rng.gen_range(0.0..size as f64),
                    rx,
                    ry,
                    tilt_degrees: rng.gen_range(0.0..180.0),
                }
            }
            1 => {
                // Axis-aligned rectangle as a four-point polygon.
                let w = rng.gen_range(0.1..0.4) * size as f64;
                let h = rng.gen_range(0.1..0.4) * size as f64;
                let x0 = rng.gen_range(-0.1..1.0) * size as f64;
                let y0 = rng.gen_range(-0.1..1.0) * size as f64;
                SourceShape::Polygon {
                    points: vec![
                        [x0, y0],
                        [x0 + w, y0],
                        [x0 + w, y0 + h],
                        [x0, y0 + h],
                    ],
                }
            }
            _ => {
                let c = [
                    rng.gen_range(0.0..size as f64),
                    rng.gen_range(0.0..size as f64),
                ];
                let r = rng.gen_range(0.08..0.3) * size as f64;
                let base = rng.gen_range(0.0..std::f64::consts::TAU);
                let points = (0..3)
                    .map(|k| {
                        let a = base + k as f64 * std::f64::consts::TAU / 3.0
                            + rng.gen_range(-0.3..0.3);
                        let rr = r * rng.gen_range(0.7..1.3);
                        [c[0] + rr * a.cos(), c[1] + rr * a.sin()]
                    })
                    .collect();
                SourceShape::Polygon { points }
            }
        };
        paint_shape(&mut canvas, size, &shape, color);
    }

    let data = canvas
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::from_vec(size as u32, size as u32, data)
        .ok_or_else(|| Error::Image("canvas length mismatch".into()))
}

fn add_value_noise(
    rng: &mut ChaCha20Rng,
    canvas: &mut [f64],
    size: usize,
    cell: usize,
    amplitude: f64,
) {
    let cell = cell.max(2);
    let lattice = size / cell + 2;
    let grid: Vec<f64> = (0..lattice * lattice * 3)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    for y in 0..size {
        for x in 0..size {
            let gx = x as f64 / cell as f64;
            let gy = y as f64 / cell as f64;
            let (ix, iy) = (gx as usize, gy as usize);
            let (tx, ty) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
            for ch in 0..3 {
                let at = |i: usize, j: usize| grid[(j * lattice + i) * 3 + ch];
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                canvas[(y * size + x) * 3 + ch] += amplitude * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
}

fn paint_shape(canvas: &mut [f64], size: usize, shape: &SourceShape, color: [f64; 3]) {
    for y in 0..size {
        for x in 0..size {
            let c = coverage(shape, None, x, y);
            if c > 0.0 {
                for ch in 0..3 {
                    let px = &mut canvas[(y * size + x) * 3 + ch];
                    *px = c * color[ch] + (1.0 - c) * *px;
                }
            }
        }
    }
}

/// Rigid-plus-scale map from source coordinates to paste coordinates:
/// A(u) = s·R(θ)·(u − c) + c + d, with c the region centroid.
#[derive(Clone, Copy, Debug)]
struct PasteMap {
    center: [f64; 2],
    offset: [f64; 2],
    cos: f64,
    sin: f64,
    scale: f64,
}

impl PasteMap {
    fn new(center: [f64; 2], offset: [i64; 2], rotation_degrees: f64, scale: f64) -> Self {
        let r = rotation_degrees.to_radians();
        PasteMap {
            center,
            offset: [offset[0] as f64, offset[1] as f64],
            cos: r.cos(),
            sin: r.sin(),
            scale,
        }
    }

    /// Inverse map: paste coordinates back to source coordinates.
    fn pull(&self, x: f64, y: f64) -> [f64; 2] {
        let dx = (x - self.center[0] - self.offset[0]) / self.scale;
        let dy = (y - self.center[1] - self.offset[1]) / self.scale;
        [
            self.center[0] + dx * self.cos + dy * self.sin,
            self.center[1] - dx * self.sin + dy * self.cos,
        ]
    }
}

/// Supersampled (2x2) coverage of one pixel, optionally through the inverse
/// paste map. Pixel (x, y) owns the square [x, x+1) x [y, y+1).
fn coverage(shape: &SourceShape, map: Option<&PasteMap>, x: usize, y: usize) -> f64 {
    let mut hits = 0;
    for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
        let (px, py) = (x as f64 + sx, y as f64 + sy);
        let [qx, qy] = match map {
            Some(m) => {
                let q = m.pull(px, py);
                [q[0], q[1]]
            }
            None => [px, py],
        };
        if shape.contains(qx, qy) {
            hits += 1;
        }
    }
    hits as f64 / 4.0
}

/// Rasterize the truth labels for a given geometry; the same code path
/// produces the masks stored with each sample, so re-rendering from
/// provenance is exact.
pub fn render_truth(
    shape: &SourceShape,
    paste_offset: [i64; 2],
    rotation_degrees: f64,
    scale_factor: f64,
    size: usize,
) -> Vec<u8> {
    let map = PasteMap::new(shape.centroid(), paste_offset, rotation_degrees, scale_factor);
    let mut truth = vec![LABEL_BACKGROUND; size * size];
    for y in 0..size {
        for x in 0..size {
            if coverage(shape, None, x, y) >= 0.5 {
                truth[y * size + x] = LABEL_SOURCE;
            } else if coverage(shape, Some(&map), x, y) >= 0.5 {
                truth[y * size + x] = LABEL_TAMPERED;
            }
        }
    }
    truth
}

/// Copy one region of `base` elsewhere in the same image, applying the
/// drawn attacks to the copied content. Placement that cannot separate the
/// two regions after the retry and regeneration budget is a structured
/// error, never a silent overlap.
pub fn forge(base: &RgbImage, attacks: &AttackConfig, seed: u64) -> Result<ForgerySample> {
    let size = base.width() as usize;
    if base.height() as usize != size {
        return Err(Error::InvalidArgument {
            op: "forge",
            reason: format!("base image {}x{} is not square", base.width(), base.height()),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    for _ in 0..REGION_REGENERATIONS {
        let rotation = if attacks.rotate {
            rng.gen_range(-ROTATION_MAX_DEGREES..=ROTATION_MAX_DEGREES)
        } else {
            0.0
        };
        let scale = if attacks.scale {
            rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1)
        } else {
            1.0
        };
        let sigma = if attacks.blur {
            rng.gen_range(0.0..=BLUR_SIGMA_MAX)
        } else {
            0.0
        };
        let quality = if attacks.jpeg && rng.gen_bool(0.5) {
            Some(rng.gen_range(JPEG_QUALITY_RANGE.0..=JPEG_QUALITY_RANGE.1))
        } else {
            None
        };

        let Some(shape) = draw_region(&mut rng, size) else {
            continue;
        };
        let c = shape.centroid();
        let reach = shape.reach() * scale + 1.0;
        let (lo, hi) = (reach, size as f64 - reach);
        if lo >= hi {
            continue;
        }

        for _ in 0..PLACEMENT_RETRIES {
            let offset = [
                (rng.gen_range(lo..hi) - c[0]).round() as i64,
                (rng.gen_range(lo..hi) - c[1]).round() as i64,
            ];
            let truth = render_truth(&shape, offset, rotation, scale, size);
            let src = truth.iter().filter(|&&l| l == LABEL_SOURCE).count();
            let tgt = truth.iter().filter(|&&l| l == LABEL_TAMPERED).count();
            if src == 0 || tgt == 0 {
                continue;
            }
            // Disjointness holds by construction (source test wins in
            // render_truth), but an overlapping placement would silently
            // shrink the pasted region; demand the full footprint.
            let map = PasteMap::new(c, offset, rotation, scale);
            let overlap = (0..size * size).any(|i| {
                truth[i] == LABEL_SOURCE
                    && coverage(&shape, Some(&map), i % size, i / size) >= 0.5
            });
            if overlap {
                continue;
            }

            let provenance = Provenance {
                seed,
                source_shape: shape.clone(),
                paste_offset: offset,
                rotation_degrees: rotation,
                scale_factor: scale,
                blur_sigma: sigma,
                jpeg_quality: quality,
            };
            let image = compose(base, &provenance, &truth, size)?;
            return Ok(ForgerySample {
                image,
                truth,
                provenance,
            });
        }
    }
    Err(Error::Placement {
        attempts: REGION_REGENERATIONS * PLACEMENT_RETRIES,
    })
}

/// Generate `count` samples, each from its own base image. Per-sample seeds
/// are decorrelated golden-ratio strides off `seed`, and the forge stream is
/// salted away from the base stream, so samples are independent and any
/// subset can be regenerated without the rest.
pub fn synthesize_dataset(
    seed: u64,
    count: usize,
    size: usize,
    attacks: &AttackConfig,
) -> Result<Vec<ForgerySample>> {
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_add(i.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let base = generate_base(s, size)?;
            forge(&base, attacks, s ^ 0x464f_5247)
        })
        .collect()
}

/// Draw an ellipse or jittered polygon with area fraction in
/// [`AREA_FRACTION_RANGE`], positioned fully inside the canvas.
fn draw_region(rng: &mut ChaCha20Rng, size: usize) -> Option<SourceShape> {
    let area = rng.gen_range(AREA_FRACTION_RANGE.0..=AREA_FRACTION_RANGE.1)
        * (size * size) as f64;
    let ellipse = rng.gen_bool(0.5);
    if ellipse {
        let aspect = rng.gen_range(0.6..1.6);
        let rx = (area * aspect / std::f64::consts::PI).sqrt();
        let ry = (area / (aspect * std::f64::consts::PI)).sqrt();
        let reach = rx.max(ry) + 1.0;
        if reach >= size as f64 - reach {
            return None;
        }
        Some(SourceShape::Ellipse {
            cx: rng.gen_range(reach..size as f64 - reach),
            cy: rng.gen_range(reach..size as f64 - reach),
            rx,
            ry,
            tilt_degrees: rng.gen_range(0.0..180.0),
        })
    } else {
        let n = rng.gen_range(3..=6usize);
        // Regular n-gon of radius r has area (n/2) r^2 sin(2pi/n).
        let r0 = (2.0 * area / (n as f64 * (std::f64::consts::TAU / n as f64).sin())).sqrt();
        let reach = r0 * 1.25 + 1.0;
        if reach >= size as f64 - reach {
            return None;
        }
        let cx = rng.gen_range(reach..size as f64 - reach);
        let cy = rng.gen_range(reach..size as f64 - reach);
        let base = rng.gen_range(0.0..std::f64::consts::TAU);
        let slot = std::f64::consts::TAU / n as f64;
        let points = (0..n)
            .map(|k| {
                let a = base + k as f64 * slot + rng.gen_range(-0.25..0.25) * slot;
                let r = r0 * rng.gen_range(0.85..1.25);
                [cx + r * a.cos(), cy + r * a.sin()]
            })
            .collect();
        Some(SourceShape::Polygon { points })
    }
}

fn compose(
    base: &RgbImage,
    prov: &Provenance,
    truth: &[u8],
    size: usize,
) -> Result<RgbImage> {
    let src: Vec<f64> = base.as_raw().iter().map(|&v| v as f64).collect();
    let mut out = src.clone();
    let map = PasteMap::new(
        prov.source_shape.centroid(),
        prov.paste_offset,
        prov.rotation_degrees,
        prov.scale_factor,
    );

    // Pasted pixels plus a blur-radius margin, so the blur sees real
    // neighborhood content instead of zeros.
    let radius = (3.0 * prov.blur_sigma).ceil() as i64;
    let (mut x0, mut y0, mut x1, mut y1) = (size as i64, size as i64, -1i64, -1i64);
    for y in 0..size {
        for x in 0..size {
            if truth[y * size + x] == LABEL_TAMPERED {
                x0 = x0.min(x as i64 - radius);
                y0 = y0.min(y as i64 - radius);
                x1 = x1.max(x as i64 + radius);
                y1 = y1.max(y as i64 + radius);
            }
        }
    }
    let x0 = x0.max(0) as usize;
    let y0 = y0.max(0) as usize;
    let x1 = x1.min(size as i64 - 1) as usize;
    let y1 = y1.min(size as i64 - 1) as usize;
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);

    let mut patch = vec![0.0f64; bw * bh * 3];
    for py in 0..bh {
        for px in 0..bw {
            let [ux, uy] = map.pull((x0 + px) as f64 + 0.5, (y0 + py) as f64 + 0.5);
            for ch in 0..3 {
                patch[(py * bw + px) * 3 + ch] = bilinear(&src, size, ux, uy, ch);
            }
        }
    }
    if prov.blur_sigma > 0.0 {
        gaussian_blur(&mut patch, bw, bh, prov.blur_sigma);
    }
    for py in 0..bh {
        for px in 0..bw {
            let (x, y) = (x0 + px, y0 + py);
            if truth[y * size + x] == LABEL_TAMPERED {
                for ch in 0..3 {
                    out[(y * size + x) * 3 + ch] = patch[(py * bw + px) * 3 + ch];
                }
            }
        }
    }

    let data: Vec<u8> = out
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = RgbImage::from_vec(size as u32, size as u32, data)
        .ok_or_else(|| Error::Image("composite length mismatch".into()))?;
    match prov.jpeg_quality {
        Some(q) => jpeg_roundtrip(&img, q),
        None => Ok(img),
    }
}

/// Bilinear sample at continuous pixel-center coordinates, edge-clamped.
fn bilinear(data: &[f64], size: usize, x: f64, y: f64, ch: usize) -> f64 {
    let gx = (x - 0.5).clamp(0.0, (size - 1) as f64);
    let gy = (y - 0.5).clamp(0.0, (size - 1) as f64);
    let ix = (gx as usize).min(size - 2);
    let iy = (gy as usize).min(size - 2);
    let (tx, ty) = (gx - ix as f64, gy - iy as f64);
    let at = |i: usize, j: usize| data[(j * size + i) * 3 + ch];
    let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
    let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Separable Gaussian with kernel half-width ceil(3 sigma), edge-clamped.
fn gaussian_blur(data: &mut [f64], w: usize, h: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    if radius == 0 {
        return;
    }
    let weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = weights.iter().sum();
    let mut tmp = vec![0.0f64; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (wi, k) in (-radius..=radius).enumerate() {
                    let sx = (x as i64 + k).clamp(0, w as i64 - 1) as usize;
                    acc += weights[wi] * data[(y * w + sx) * 3 + ch];
                }
                tmp[(y * w + x) * 3 + ch] = acc / norm;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (wi, k) in (-radius..=radius).enumerate() {
                    let sy = (y as i64 + k).clamp(0, h as i64 - 1) as usize;
                    acc += weights[wi] * tmp[(sy * w + x) * 3 + ch];
                }
                data[(y * w + x) * 3 + ch] = acc / norm;
            }
        }
    }
}

fn jpeg_roundtrip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, quality);
    enc.encode_image(img)
        .map_err(|e| Error::Image(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Image(format!("jpeg decode: {e}")))?;
    Ok(decoded.to_rgb8())
}
