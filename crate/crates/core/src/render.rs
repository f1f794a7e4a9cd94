//! Orthographic ray casting: maximum intensity projection and front-to-back
//! compositing.
//!
//! The volume is centered at the origin in physical units (voxel index times
//! spacing). The camera rotates it by `rx`, `ry`, `rz` degrees about the x,
//! y and z axes, in that order, and looks down the rotated -z axis. Image
//! columns follow +x and rows follow +y, matching the row order of the source
//! frames. Rays sample at `t = k * step` for integer `k` so that reversing a
//! ray visits exactly the same points.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedVolume;
use crate::volume::{self, Dims, Lattice, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Rotation about x, y, z in degrees, applied x first.
    pub rotation: [f64; 3],
    pub width: u32,
    pub height: u32,
    /// Physical size of one pixel; `None` fits the volume's bounding sphere.
    #[serde(default)]
    pub pixel_size: Option<f64>,
}

impl Camera {
    pub fn new(rotation: [f64; 3], width: u32, height: u32) -> Self {
        Self { rotation, width, height, pixel_size: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParams(format!(
                "image size must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        if self.rotation.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidParams("rotation must be finite".into()));
        }
        if let Some(p) = self.pixel_size {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::InvalidParams(format!("pixel size must be > 0, got {p}")));
            }
        }
        Ok(())
    }

    /// `Rz * Ry * Rx`, mapping volume coordinates to view coordinates.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.rotation.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        matmul(rz, matmul(ry, rx))
    }
}

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RenderMode {
    /// Grayscale maximum projection.
    #[serde(rename = "mip")]
    Mip,
    /// Color of the most opaque sample, with its opacity as alpha.
    #[serde(rename = "mip-color")]
    MipColor,
    /// Front-to-back alpha compositing.
    #[serde(rename = "composite")]
    Composite,
}

impl RenderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RenderMode::Mip => "mip",
            RenderMode::MipColor => "mip-color",
            RenderMode::Composite => "composite",
        }
    }
}

impl std::str::FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mip" | "mip-gray" => Ok(Self::Mip),
            "mip-color" => Ok(Self::MipColor),
            "composite" => Ok(Self::Composite),
            other => Err(Error::InvalidParams(format!(
                "unknown render mode {other:?} (expected mip, mip-color or composite)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Ray step in voxels of the smallest spacing.
    pub step: f64,
    /// Compositing stops once accumulated alpha exceeds this.
    pub early_termination: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { step: 0.5, early_termination: 0.99 }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::InvalidParams(format!("ray step must be > 0, got {}", self.step)));
        }
        if !(0.0..=1.0).contains(&self.early_termination) {
            return Err(Error::InvalidParams("early termination threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// RGBA raster with straight (non-premultiplied) alpha, channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    width: u32,
    height: u32,
    pixels: Vec<[f32; 4]>,
}

impl RenderedImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[f32; 4]>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::InvalidParams("pixel count must equal width * height".into()));
        }
        if pixels.iter().flatten().any(|c| !(c.is_finite() && (0.0..=1.0).contains(c))) {
            return Err(Error::InvalidParams("pixel channels must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 4]] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 4] {
        self.pixels[(y * self.width + x) as usize]
    }

    /// 8-bit RGBA, each channel `round(c * 255)`.
    pub fn to_rgba8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flatten()
            .map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(
            &self.to_rgba8(),
            self.width,
            self.height,
            image::ExtendedColorType::Rgba8,
        )?;
        Ok(out)
    }
}

pub fn write_png(image: &RenderedImage, path: impl AsRef<Path>) -> Result<()> {
    volume::write_atomic(path.as_ref(), &image.encode_png()?)
}

/// Per-render ray geometry shared by every pixel.
struct Rays {
    inv_spacing: [f64; 3],
    center: [f64; 3],
    half_extent: [f64; 3],
    /// Rows of the inverse rotation: view axes expressed in volume space.
    right: [f64; 3],
    down: [f64; 3],
    forward: [f64; 3],
    width: u32,
    height: u32,
    pixel_size: f64,
    step: f64,
    /// Step length in units of the smallest voxel spacing.
    step_voxels: f64,
}

impl Rays {
    fn new(dims: Dims, spacing: Spacing, camera: &Camera, options: &RenderOptions) -> Result<Self> {
        camera.validate()?;
        options.validate()?;
        let s = spacing.to_array().map(f64::from);
        let half_extent: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64 * s[a] / 2.0);
        let radius = half_extent.iter().map(|e| e * e).sum::<f64>().sqrt();
        let min_spacing = s.iter().copied().fold(f64::INFINITY, f64::min);
        let pixel_size = camera.pixel_size.unwrap_or_else(|| {
            if radius > 0.0 {
                2.0 * radius / camera.width.min(camera.height) as f64
            } else {
                min_spacing
            }
        });
        let r = camera.rotation_matrix();
        // Transpose: column j of R is where volume axis j lands; row i of R^T
        // is view axis i in volume coordinates.
        let col = |i: usize| [r[i][0], r[i][1], r[i][2]];
        Ok(Self {
            inv_spacing: s.map(|v| 1.0 / v),
            center: std::array::from_fn(|a| (dims[a] - 1) as f64 / 2.0),
            half_extent,
            right: col(0),
            down: col(1),
            forward: col(2).map(|v| -v),
            width: camera.width,
            height: camera.height,
            pixel_size,
            step: options.step * min_spacing,
            step_voxels: options.step,
        })
    }

    /// Sample points (voxel coordinates) along the ray through pixel
    /// `(px, py)`, front to back. Returns `None` if the ray misses the
    /// volume's bounding box.
    fn ray(&self, px: u32, py: u32, reverse: bool) -> Option<impl Iterator<Item = [f64; 3]> + '_> {
        let u = (px as f64 + 0.5 - self.width as f64 / 2.0) * self.pixel_size;
        let v = (py as f64 + 0.5 - self.height as f64 / 2.0) * self.pixel_size;
        let origin: [f64; 3] = std::array::from_fn(|a| u * self.right[a] + v * self.down[a]);
        let dir = if reverse { self.forward.map(|d| -d) } else { self.forward };

        // Slab test in physical space; a small tolerance keeps rays that
        // graze a face exactly.
        let eps = 1e-9 * (1.0 + self.pixel_size);
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            let (lo, hi) = (-self.half_extent[a] - eps, self.half_extent[a] + eps);
            if dir[a].abs() < 1e-12 {
                if origin[a] < lo || origin[a] > hi {
                    return None;
                }
            } else {
                let (ta, tb) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t0 > t1 {
            return None;
        }
        // Symmetric lattice k * step: the sample set does not depend on ray direction.
        let k0 = (t0 / self.step).ceil() as i64;
        let k1 = (t1 / self.step).floor() as i64;
        if k0 > k1 {
            return None;
        }
        let last = self.center.map(|c| 2.0 * c);
        Some((k0..=k1).map(move |k| {
            let t = k as f64 * self.step;
            std::array::from_fn(|a| {
                ((origin[a] + t * dir[a]) * self.inv_spacing[a] + self.center[a]).clamp(0.0, last[a])
            })
        }))
    }

    fn covers(&self, px: u32, py: u32) -> bool {
        self.ray(px, py, false).is_some()
    }

    fn render(&self, shade: impl Fn(u32, u32) -> [f32; 4] + Sync) -> RenderedImage {
        // Square tiles keep neighboring rays, which touch the same voxels,
        // close together in time.
        const TILE: u32 = 8;
        let (w, h) = (self.width, self.height);
        let tiles: Vec<(u32, u32)> = (0..h.div_ceil(TILE))
            .flat_map(|ty| (0..w.div_ceil(TILE)).map(move |tx| (tx * TILE, ty * TILE)))
            .collect();
        let shaded: Vec<Vec<[f32; 4]>> = tiles
            .par_iter()
            .map(|&(x0, y0)| {
                let mut out = Vec::with_capacity((TILE * TILE) as usize);
                for py in y0..(y0 + TILE).min(h) {
                    for px in x0..(x0 + TILE).min(w) {
                        out.push(shade(px, py));
                    }
                }
                out
            })
            .collect();
        let mut pixels = vec![[0f32; 4]; w as usize * h as usize];
        for (&(x0, y0), tile) in tiles.iter().zip(&shaded) {
            let tw = ((x0 + TILE).min(w) - x0) as usize;
            for (row, chunk) in tile.chunks(tw).enumerate() {
                let start = (y0 as usize + row) * w as usize + x0 as usize;
                pixels[start..start + tw].copy_from_slice(chunk);
            }
        }
        RenderedImage { width: w, height: h, pixels }
    }
}

/// Grayscale MIP of a raw volume. Covered pixels are opaque; the
/// background is transparent black.
pub fn render_mip(volume: &Volume, camera: &Camera, options: &RenderOptions) -> Result<RenderedImage> {
    render_mip_directed(volume, camera, options, false)
}

fn render_mip_directed(
    volume: &Volume,
    camera: &Camera,
    options: &RenderOptions,
    reverse: bool,
) -> Result<RenderedImage> {
    let rays = Rays::new(volume.dims(), volume.spacing(), camera, options)?;
    Ok(rays.render(|px, py| match rays.ray(px, py, reverse) {
        None => [0.0; 4],
        Some(samples) => {
            let m = samples.map(|p| volume.sample(p)).fold(0f32, f32::max);
            [m, m, m, 1.0]
        }
    }))
}

pub fn render_fused(
    fused: &FusedVolume,
    camera: &Camera,
    mode: RenderMode,
    options: &RenderOptions,
) -> Result<RenderedImage> {
    let rays = Rays::new(fused.dims(), fused.spacing(), camera, options)?;
    let dims = fused.dims();
    let opacity = fused.opacity();
    // Opacity-weighted color next to opacity, so one interpolation gives the
    // associated color. Transparent neighbors then do not darken an opaque
    // voxel's hue.
    let rgba: Vec<[f32; 4]> = match mode {
        RenderMode::Mip => Vec::new(),
        _ => fused
            .color()
            .par_iter()
            .zip(opacity.par_iter())
            .map(|(c, &o)| [c[0] * o, c[1] * o, c[2] * o, o])
            .collect(),
    };
    let lattice = Lattice::new(dims);
    let straight = |a: [f32; 4]| -> [f64; 3] {
        std::array::from_fn(|c| if a[3] > 0.0 { (a[c] as f64 / a[3] as f64).clamp(0.0, 1.0) } else { 0.0 })
    };

    let image = match mode {
        RenderMode::Mip => rays.render(|px, py| match rays.ray(px, py, false) {
            None => [0.0; 4],
            Some(samples) => {
                let m = samples
                    .filter_map(|p| lattice.locate(p))
                    .map(|cell| lattice.interpolate(opacity, cell))
                    .fold(0f32, f32::max);
                [m, m, m, 1.0]
            }
        }),
        RenderMode::MipColor => rays.render(|px, py| {
            let Some(samples) = rays.ray(px, py, false) else {
                return [0.0; 4];
            };
            let mut best = None;
            let mut best_o = 0f32;
            for cell in samples.filter_map(|p| lattice.locate(p)) {
                let o = lattice.interpolate(opacity, cell);
                if o > best_o {
                    best_o = o;
                    best = Some(cell);
                }
            }
            let Some(cell) = best else {
                return [0.0; 4];
            };
            let [r, g, b] = straight(lattice.interpolate4(&rgba, cell));
            [r as f32, g as f32, b as f32, best_o.min(1.0)]
        }),
        RenderMode::Composite => rays.render(|px, py| {
            let Some(samples) = rays.ray(px, py, false) else {
                return [0.0; 4];
            };
            let mut acc = [0f64; 3];
            let mut alpha = 0f64;
            for cell in samples.filter_map(|p| lattice.locate(p)) {
                let v = lattice.interpolate4(&rgba, cell);
                let o = (v[3] as f64).clamp(0.0, 1.0);
                if o <= 0.0 {
                    continue;
                }
                let a = if rays.step_voxels == 1.0 { o } else { 1.0 - (1.0 - o).powf(rays.step_voxels) };
                let c = straight(v);
                let w = (1.0 - alpha) * a;
                for k in 0..3 {
                    acc[k] += w * c[k];
                }
                alpha += w;
                if alpha > options.early_termination {
                    break;
                }
            }
            if alpha <= 0.0 {
                return [0.0; 4];
            }
            let color = acc.map(|c| (c / alpha).clamp(0.0, 1.0) as f32);
            [color[0], color[1], color[2], alpha.min(1.0) as f32]
        }),
    };
    Ok(image)
}

/// Front-to-back accumulation of `(alpha, color)` samples; returns the
/// premultiplied color and the alpha after every sample.
pub fn composite_front_to_back(samples: &[(f64, [f64; 3])]) -> ([f64; 3], Vec<f64>) {
    let mut acc = [0f64; 3];
    let mut alpha = 0f64;
    let mut history = Vec::with_capacity(samples.len());
    for &(a, c) in samples {
        let w = (1.0 - alpha) * a;
        for k in 0..3 {
            acc[k] += w * c[k];
        }
        alpha += w;
        history.push(alpha);
    }
    (acc, history)
}

/// Whether the ray through pixel `(px, py)` takes at least one sample inside
/// the volume.
pub fn pixel_covered(dims: Dims, spacing: Spacing, camera: &Camera, px: u32, py: u32) -> Result<bool> {
    Ok(Rays::new(dims, spacing, camera, &RenderOptions::default())?.covers(px, py))
}
