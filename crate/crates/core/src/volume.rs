//! Dense scalar voxel grids, frame-stack ingestion and the VVOL container.
//!
//! Samples are `f32` in `[0, 1]`, stored x-fastest, then y, then z.

use std::fs;
use std::io::Write;
use std::ops::Index;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VVOL_MAGIC: &[u8; 4] = b"VVOL";
pub const VVOL_VERSION: u8 = 0x01;
pub const VVOL_DTYPE_F32: u8 = 0x00;
/// Magic, version, dtype, reserved, 3 x u32 dims, 3 x f32 spacing.
pub const VVOL_HEADER_LEN: usize = 32;

/// Grid extent in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        (x, y, z)
    }

    /// Linear-index stride of each axis.
    pub const fn strides(&self) -> [usize; 3] {
        [1, self.nx, self.nx * self.ny]
    }

    pub const fn to_array(self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn min_axis(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }
}

impl Index<usize> for Dims {
    type Output = usize;

    fn index(&self, axis: usize) -> &usize {
        match axis {
            0 => &self.nx,
            1 => &self.ny,
            2 => &self.nz,
            _ => panic!("axis {axis} out of range"),
        }
    }
}

impl From<[usize; 3]> for Dims {
    fn from([nx, ny, nz]: [usize; 3]) -> Self {
        Self { nx, ny, nz }
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        d.to_array()
    }
}

/// Physical voxel size in millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 3]", into = "[f32; 3]")]
pub struct Spacing {
    pub sx: f32,
    pub sy: f32,
    pub sz: f32,
}

impl Spacing {
    pub const ISOTROPIC: Spacing = Spacing::new(1.0, 1.0, 1.0);

    pub const fn new(sx: f32, sy: f32, sz: f32) -> Self {
        Self { sx, sy, sz }
    }

    pub const fn to_array(self) -> [f32; 3] {
        [self.sx, self.sy, self.sz]
    }

    fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {:?}",
                self.to_array()
            )))
        }
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::ISOTROPIC
    }
}

impl From<[f32; 3]> for Spacing {
    fn from([sx, sy, sz]: [f32; 3]) -> Self {
        Self { sx, sy, sz }
    }
}

impl From<Spacing> for [f32; 3] {
    fn from(s: Spacing) -> Self {
        s.to_array()
    }
}

/// Immutable scalar volume with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidVolume(format!("empty dims {:?}", dims.to_array())));
        }
        if data.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "data has {} samples, dims {:?} need {}",
                data.len(),
                dims.to_array(),
                dims.len()
            )));
        }
        spacing.validate()?;
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::InvalidVolume(format!(
                "sample {i} = {v} is outside [0, 1]"
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    /// Builds a volume from a function of voxel coordinates; values are
    /// clamped into `[0, 1]`.
    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let data = (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                f(x, y, z).clamp(0.0, 1.0)
            })
            .collect();
        Self::new(dims, spacing, data)
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.len()])
    }

    /// Clamps every sample into `[0, 1]` (NaN becomes 0) and builds a volume.
    pub(crate) fn from_unclamped(dims: Dims, spacing: Spacing, mut data: Vec<f32>) -> Self {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self { dims, spacing, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear interpolation at a continuous voxel-space point; zero outside
    /// `[0, nx-1] x [0, ny-1] x [0, nz-1]`.
    #[inline]
    pub fn sample(&self, point: [f64; 3]) -> f32 {
        Lattice::new(self.dims).sample(&self.data, point)
    }

    /// Reorders axes so that output axis `a` is input axis `perm[a]`.
    pub fn permute_axes(&self, perm: [usize; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return Err(Error::InvalidParams(format!("{perm:?} is not an axis permutation")));
            }
            seen[p] = true;
        }
        let src = self.dims.to_array();
        let sp = self.spacing.to_array();
        let dims = Dims::new(src[perm[0]], src[perm[1]], src[perm[2]]);
        let spacing = Spacing::new(sp[perm[0]], sp[perm[1]], sp[perm[2]]);
        let data = (0..dims.len())
            .map(|i| {
                let (a, b, c) = dims.coords(i);
                let mut s = [0usize; 3];
                s[perm[0]] = a;
                s[perm[1]] = b;
                s[perm[2]] = c;
                self.get(s[0], s[1], s[2])
            })
            .collect();
        Ok(Self { dims, spacing, data })
    }
}

/// Trilinear lookup on an x-fastest grid of the given dims. Points outside
/// `[0, n-1]` on any axis (or NaN) have no sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lattice {
    last: [f64; 3],
    cap: [usize; 3],
    stride: [usize; 3],
    /// Offset to the upper neighbor per axis; 0 on single-sample axes.
    next: [usize; 3],
}

/// A located sample: base index and fractional offsets.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell {
    base: usize,
    frac: [f32; 3],
}

impl Lattice {
    pub(crate) fn new(dims: Dims) -> Self {
        let n = dims.to_array();
        let stride = dims.strides();
        Self {
            last: n.map(|n| (n - 1) as f64),
            cap: n.map(|n| n.saturating_sub(2)),
            stride,
            next: std::array::from_fn(|a| if n[a] > 1 { stride[a] } else { 0 }),
        }
    }

    #[inline]
    pub(crate) fn locate(&self, p: [f64; 3]) -> Option<Cell> {
        let mut base = 0;
        let mut frac = [0f32; 3];
        for a in 0..3 {
            let c = p[a];
            if !(c >= 0.0 && c <= self.last[a]) {
                return None;
            }
            let i = (c as usize).min(self.cap[a]);
            base += i * self.stride[a];
            frac[a] = (c - i as f64) as f32;
        }
        Some(Cell { base, frac })
    }

    #[inline]
    pub(crate) fn interpolate(&self, data: &[f32], cell: Cell) -> f32 {
        let [ox, oy, oz] = self.next;
        let [fx, fy, fz] = cell.frac;
        let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
        let row = |i: usize| lerp(data[i], data[i + ox], fx);
        let b = cell.base;
        let lo = lerp(row(b), row(b + oy), fy);
        let hi = lerp(row(b + oz), row(b + oz + oy), fy);
        lerp(lo, hi, fz)
    }

    #[inline]
    pub(crate) fn interpolate4(&self, data: &[[f32; 4]], cell: Cell) -> [f32; 4] {
        let [ox, oy, oz] = self.next;
        let [fx, fy, fz] = cell.frac;
        let lerp = |a: [f32; 4], b: [f32; 4], t: f32| -> [f32; 4] {
            std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t)
        };
        let row = |i: usize| lerp(data[i], data[i + ox], fx);
        let b = cell.base;
        let lo = lerp(row(b), row(b + oy), fy);
        let hi = lerp(row(b + oz), row(b + oz + oy), fy);
        lerp(lo, hi, fz)
    }

    #[inline]
    pub(crate) fn sample(&self, data: &[f32], p: [f64; 3]) -> f32 {
        self.locate(p).map_or(0.0, |cell| self.interpolate(data, cell))
    }
}

/// Pixel payload of a grayscale frame.
#[derive(Clone, Debug, PartialEq)]
pub enum FramePixels {
    Gray8(Vec<u8>),
    Gray16(Vec<u16>),
}

/// One 2D grayscale image of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: u32,
    height: u32,
    pixels: FramePixels,
}

impl Frame {
    pub fn gray8(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, FramePixels::Gray8(pixels))
    }

    pub fn gray16(width: u32, height: u32, pixels: Vec<u16>) -> Result<Self> {
        Self::new(width, height, FramePixels::Gray16(pixels))
    }

    fn new(width: u32, height: u32, pixels: FramePixels) -> Result<Self> {
        let len = match &pixels {
            FramePixels::Gray8(p) => p.len(),
            FramePixels::Gray16(p) => p.len(),
        };
        if width == 0 || height == 0 || len != width as usize * height as usize {
            return Err(Error::UnsupportedImage(format!(
                "{width}x{height} frame with {len} pixels"
            )));
        }
        Ok(Self { width, height, pixels })
    }

    /// Decodes an 8- or 16-bit grayscale PNG.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Self::from_dynamic(img)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_dynamic(image::open(path)?)
    }

    fn from_dynamic(img: image::DynamicImage) -> Result<Self> {
        use image::DynamicImage;
        let (w, h) = (img.width(), img.height());
        match img {
            DynamicImage::ImageLuma8(buf) => Self::gray8(w, h, buf.into_raw()),
            DynamicImage::ImageLuma16(buf) => Self::gray16(w, h, buf.into_raw()),
            other => Err(Error::UnsupportedImage(format!(
                "expected 8- or 16-bit grayscale, got {:?}",
                other.color()
            ))),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &FramePixels {
        &self.pixels
    }

    fn normalized(&self) -> impl Iterator<Item = f32> + '_ {
        let (p8, p16) = match &self.pixels {
            FramePixels::Gray8(p) => (Some(p), None),
            FramePixels::Gray16(p) => (None, Some(p)),
        };
        let a = p8
            .into_iter()
            .flatten()
            .map(|&v| (v as f64 / u8::MAX as f64) as f32);
        let b = p16
            .into_iter()
            .flatten()
            .map(|&v| (v as f64 / u16::MAX as f64) as f32);
        a.chain(b)
    }
}

/// An ordered sweep of equally sized frames, assumed parallel and equally
/// spaced.
#[derive(Clone, Debug)]
pub struct FrameStack {
    pub frames: Vec<Frame>,
    /// In-plane pixel size (x, y) in millimeters.
    pub pixel_spacing: [f32; 2],
    /// Distance between consecutive frames in millimeters.
    pub slice_spacing: f32,
}

impl FrameStack {
    pub fn new(frames: Vec<Frame>) -> Self {
        Self {
            frames,
            pixel_spacing: [1.0, 1.0],
            slice_spacing: 1.0,
        }
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.pixel_spacing = [spacing.sx, spacing.sy];
        self.slice_spacing = spacing.sz;
        self
    }

    /// Loads every `*.png` in `dir`, ordered by file name. Use zero-padded
    /// names (`frame_007.png`) so that lexical order is acquisition order.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        paths.sort();
        let frames = paths.iter().map(Frame::open).collect::<Result<Vec<_>>>()?;
        Ok(Self::new(frames))
    }
}

/// Stacks frames into a volume: frame `k` becomes z-slice `k`, and pixels are
/// divided by their dtype maximum.
pub fn ingest_frames(stack: &FrameStack) -> Result<Volume> {
    let frames = &stack.frames;
    if frames.len() < 2 {
        return Err(Error::EmptyStack(frames.len()));
    }
    let expected = (frames[0].width, frames[0].height);
    for (index, f) in frames.iter().enumerate() {
        let found = (f.width, f.height);
        if found != expected {
            return Err(Error::MismatchedFrameSize { index, expected, found });
        }
    }
    let dims = Dims::new(expected.0 as usize, expected.1 as usize, frames.len());
    let mut data = Vec::with_capacity(dims.len());
    for f in frames {
        data.extend(f.normalized());
    }
    let spacing = Spacing::new(
        stack.pixel_spacing[0],
        stack.pixel_spacing[1],
        stack.slice_spacing,
    );
    Volume::new(dims, spacing, data)
}

pub fn encode_vvol(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(VVOL_HEADER_LEN + 4 * volume.len());
    out.extend_from_slice(VVOL_MAGIC);
    out.extend_from_slice(&[VVOL_VERSION, VVOL_DTYPE_F32, 0, 0]);
    for n in volume.dims.to_array() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in volume.spacing.to_array() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in &volume.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vvol(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || &bytes[..4] != VVOL_MAGIC {
        let mut magic = [0u8; 4];
        let n = bytes.len().min(4);
        magic[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < VVOL_HEADER_LEN {
        return Err(Error::TruncatedPayload { expected: 0, found: 0 });
    }
    if bytes[4] != VVOL_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    if bytes[5] != VVOL_DTYPE_F32 {
        return Err(Error::UnsupportedDtype(bytes[5]));
    }
    let word = |i: usize| -> [u8; 4] { bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap() };
    let dims = Dims::new(
        u32::from_le_bytes(word(0)) as usize,
        u32::from_le_bytes(word(1)) as usize,
        u32::from_le_bytes(word(2)) as usize,
    );
    let spacing = Spacing::new(
        f32::from_le_bytes(word(3)),
        f32::from_le_bytes(word(4)),
        f32::from_le_bytes(word(5)),
    );
    let payload = &bytes[VVOL_HEADER_LEN..];
    let found = payload.len() / 4;
    if found < dims.len() {
        return Err(Error::TruncatedPayload { expected: dims.len(), found });
    }
    let data = payload
        .chunks_exact(4)
        .take(dims.len())
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, spacing, data)
}

pub fn read_vvol(path: impl AsRef<Path>) -> Result<Volume> {
    decode_vvol(&fs::read(path)?)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so a failed write never leaves a valid-looking VVOL behind.
pub fn write_vvol(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_vvol(volume))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
