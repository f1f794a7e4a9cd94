//! Normalized per-voxel feature volumes.
//!
//! Every feature is divided by its own global maximum so samples land in
//! `[0, 1]`; an all-zero response stays all-zero. Nothing here thresholds.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{self, Boundary};
use crate::error::{Error, Result};
use crate::volume::{self, Dims, Spacing, Volume};

/// Three-component vector field over a voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField3 {
    dims: Dims,
    components: [Vec<f64>; 3],
}

impl VectorField3 {
    pub fn new(dims: Dims, u: Vec<f64>, v: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        for c in [&u, &v, &w] {
            if c.len() != dims.len() {
                return Err(Error::InvalidParams(format!(
                    "component has {} samples, dims need {}",
                    c.len(),
                    dims.len()
                )));
            }
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParams("non-finite vector component".into()));
            }
        }
        Ok(Self { dims, components: [u, v, w] })
    }

    pub fn zeros(dims: Dims) -> Self {
        let z = vec![0.0; dims.len()];
        Self { dims, components: [z.clone(), z.clone(), z] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Component along `axis` (0 = u/x, 1 = v/y, 2 = w/z).
    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub fn at(&self, i: usize) -> [f64; 3] {
        [self.components[0][i], self.components[1][i], self.components[2][i]]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        (0..self.dims.len())
            .into_par_iter()
            .map(|i| {
                let [a, b, c] = self.at(i);
                (a * a + b * b + c * c).sqrt()
            })
            .collect()
    }
}

/// Divides by the global maximum; all-zero input gives an all-zero volume.
pub fn normalize_by_max(values: &[f64], dims: Dims, spacing: Spacing) -> Volume {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let data = if max > 0.0 {
        values.iter().map(|&v| (v / max) as f32).collect()
    } else {
        vec![0.0; values.len()]
    };
    Volume::from_unclamped(dims, spacing, data)
}

fn require_min_axis(dims: Dims, min: usize) -> Result<()> {
    if dims.min_axis() < min {
        Err(Error::VolumeTooSmall { dims: dims.to_array(), min })
    } else {
        Ok(())
    }
}

fn to_f64(volume: &Volume) -> Vec<f64> {
    volume.data().iter().map(|&v| v as f64).collect()
}

const SOBEL_DERIVATIVE: [f64; 3] = [-1.0, 0.0, 1.0];
const SOBEL_SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

/// 3D Sobel gradient (replicated borders) and its max-normalized magnitude.
pub fn sobel_gradient(volume: &Volume) -> Result<(VectorField3, Volume)> {
    let dims = volume.dims();
    require_min_axis(dims, 3)?;
    let src = to_f64(volume);
    let axis_response = |axis: usize| {
        let mut kernels: [&[f64]; 3] = [&SOBEL_SMOOTH; 3];
        kernels[axis] = &SOBEL_DERIVATIVE;
        conv::separable(&src, dims, kernels, Boundary::Replicate)
    };
    let field = VectorField3 {
        dims,
        components: [axis_response(0), axis_response(1), axis_response(2)],
    };
    let magnitude = normalize_by_max(&field.magnitude(), dims, volume.spacing());
    Ok((field, magnitude))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GvfParams {
    /// Smoothness weight of the field.
    pub mu: f64,
    pub iterations: usize,
    /// Explicit Euler time step; must satisfy `dt <= 1 / (6 mu)`.
    pub dt: f64,
}

impl Default for GvfParams {
    fn default() -> Self {
        let mu = 0.2;
        Self { mu, iterations: 80, dt: 0.75 / (6.0 * mu) }
    }
}

impl GvfParams {
    pub fn max_stable_dt(&self) -> f64 {
        1.0 / (6.0 * self.mu)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::InvalidParams(format!("mu must be > 0, got {}", self.mu)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParams("iterations must be >= 1".into()));
        }
        let limit = self.max_stable_dt();
        if !(self.dt.is_finite() && self.dt > 0.0) || self.dt > limit * (1.0 + 1e-12) {
            return Err(Error::UnstableTimestep { dt: self.dt, limit });
        }
        Ok(())
    }
}

/// Central difference along `axis` with replicated borders.
fn central_difference(f: &[f64], dims: Dims, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    conv::convolve_axis(f, &mut out, dims, axis, &[-0.5, 0.0, 0.5], Boundary::Replicate);
    out
}

/// Explicit (Jacobi) gradient vector flow solver.
///
/// Each step evaluates `u += dt * (mu * lap(u) - (u - f_x) * |grad f|^2)` for
/// all three components from the previous iterate. The Laplacian uses
/// Neumann borders, which makes every step a gradient-descent step on
/// [`GvfSolver::energy`].
pub struct GvfSolver {
    dims: Dims,
    params: GvfParams,
    gradient: [Vec<f64>; 3],
    gradient_sq: Vec<f64>,
    field: [Vec<f64>; 3],
}

impl GvfSolver {
    pub fn new(edge_map: &Volume, params: GvfParams) -> Result<Self> {
        params.validate()?;
        let dims = edge_map.dims();
        let f = to_f64(edge_map);
        let gradient = [
            central_difference(&f, dims, 0),
            central_difference(&f, dims, 1),
            central_difference(&f, dims, 2),
        ];
        let gradient_sq = (0..dims.len())
            .map(|i| gradient.iter().map(|g| g[i] * g[i]).sum())
            .collect();
        let field = gradient.clone();
        Ok(Self { dims, params, gradient, gradient_sq, field })
    }

    pub fn step(&mut self) {
        let dims = self.dims;
        let strides = dims.strides();
        let (mu, dt) = (self.params.mu, self.params.dt);
        for c in 0..3 {
            let u = &self.field[c];
            let target = &self.gradient[c];
            let b = &self.gradient_sq;
            let next: Vec<f64> = (0..dims.len())
                .into_par_iter()
                .map(|i| {
                    let (x, y, z) = dims.coords(i);
                    let pos = [x, y, z];
                    let mut lap = 0.0;
                    for axis in 0..3 {
                        let s = strides[axis];
                        let lo = if pos[axis] > 0 { u[i - s] } else { u[i] };
                        let hi = if pos[axis] + 1 < dims[axis] { u[i + s] } else { u[i] };
                        lap += lo + hi - 2.0 * u[i];
                    }
                    u[i] + dt * (mu * lap - (u[i] - target[i]) * b[i])
                })
                .collect();
            self.field[c] = next;
        }
    }

    /// `sum mu * |grad (u,v,w)|^2 + |grad f|^2 * |(u,v,w) - grad f|^2` with
    /// forward differences inside the grid.
    pub fn energy(&self) -> f64 {
        let dims = self.dims;
        let strides = dims.strides();
        let mu = self.params.mu;
        (0..dims.len())
            .into_par_iter()
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                let pos = [x, y, z];
                let mut e = 0.0;
                for c in 0..3 {
                    let u = &self.field[c];
                    for axis in 0..3 {
                        if pos[axis] + 1 < dims[axis] {
                            let d = u[i + strides[axis]] - u[i];
                            e += mu * d * d;
                        }
                    }
                    let r = u[i] - self.gradient[c][i];
                    e += self.gradient_sq[i] * r * r;
                }
                e
            })
            .sum()
    }

    pub fn field(&self) -> VectorField3 {
        VectorField3 { dims: self.dims, components: self.field.clone() }
    }

    pub fn into_field(self) -> VectorField3 {
        VectorField3 { dims: self.dims, components: self.field }
    }
}

/// Runs `params.iterations` GVF steps on `edge_map`, starting from its
/// central-difference gradient.
pub fn gvf_field(edge_map: &Volume, params: &GvfParams) -> Result<VectorField3> {
    let mut solver = GvfSolver::new(edge_map, *params)?;
    for _ in 0..params.iterations {
        solver.step();
    }
    Ok(solver.into_field())
}

/// Normalized GVF magnitude, using the normalized Sobel magnitude as edge map.
pub fn gvf_feature(volume: &Volume, params: &GvfParams) -> Result<Volume> {
    params.validate()?;
    let (_, edge_map) = sobel_gradient(volume)?;
    gvf_feature_from_edge_map(&edge_map, params)
}

fn gvf_feature_from_edge_map(edge_map: &Volume, params: &GvfParams) -> Result<Volume> {
    let field = gvf_field(edge_map, params)?;
    Ok(normalize_by_max(&field.magnitude(), edge_map.dims(), edge_map.spacing()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrangiParams {
    /// Gaussian scales in voxels, strictly ascending.
    pub scales: Vec<f64>,
    /// Plate-versus-line sensitivity (R_A term).
    pub alpha: f64,
    /// Blob sensitivity (R_B term).
    pub beta: f64,
    /// Structureness sensitivity. `None` uses half the largest Hessian
    /// Frobenius norm at each scale.
    pub c: Option<f64>,
    /// Bright tubes on a dark background. When false the input is inverted
    /// first, which suits hypoechoic vessels in B-mode.
    pub bright_vessels: bool,
}

impl Default for FrangiParams {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 2.0, 3.0, 4.0],
            alpha: 0.5,
            beta: 0.5,
            c: None,
            bright_vessels: false,
        }
    }
}

impl FrangiParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidParams(m));
        if self.scales.is_empty() {
            return fail("at least one Frangi scale is required".into());
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return fail(format!("Frangi scales must be positive, got {:?}", self.scales));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return fail(format!("Frangi scales must be strictly ascending, got {:?}", self.scales));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be > 0, got {v}"));
            }
        }
        if let Some(c) = self.c {
            if !(c.is_finite() && c > 0.0) {
                return fail(format!("c must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    fn max_radius(&self) -> usize {
        self.scales.iter().map(|&s| kernel_radius(s)).max().unwrap_or(1)
    }
}

pub(crate) fn kernel_radius(sigma: f64) -> usize {
    ((3.0 * sigma).ceil() as usize).max(1)
}

/// Sampled Gaussian and its first and second derivative kernels, corrected so
/// that polynomials up to cubic are differentiated exactly.
struct GaussianKernels {
    smooth: Vec<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl GaussianKernels {
    fn new(sigma: f64) -> Self {
        let r = kernel_radius(sigma);
        let offsets: Vec<f64> = (-(r as isize)..=r as isize).map(|k| k as f64).collect();
        let mut smooth = conv::gaussian_taps(sigma, r);
        let total: f64 = smooth.iter().sum();
        smooth.iter_mut().for_each(|g| *g /= total);
        let s2 = sigma * sigma;

        // Correlation taps: dst(x) = sum_o k(o) f(x + o).
        let mut first: Vec<f64> = offsets.iter().zip(&smooth).map(|(o, g)| o * g / s2).collect();
        let m1: f64 = offsets.iter().zip(&first).map(|(o, k)| o * k).sum();
        first.iter_mut().for_each(|k| *k /= m1);

        let mut second: Vec<f64> = offsets
            .iter()
            .zip(&smooth)
            .map(|(o, g)| (o * o - s2) / (s2 * s2) * g)
            .collect();
        let m0: f64 = second.iter().sum();
        second.iter_mut().zip(&smooth).for_each(|(k, g)| *k -= m0 * g);
        let m2: f64 = offsets.iter().zip(&second).map(|(o, k)| o * o * k).sum();
        second.iter_mut().for_each(|k| *k *= 2.0 / m2);

        Self { smooth, first, second }
    }
}

/// Hessian components `[xx, yy, zz, xy, xz, yz]` of the volume smoothed at
/// `sigma`, without scale normalization.
#[derive(Clone, Debug)]
pub struct HessianField {
    pub dims: Dims,
    pub components: [Vec<f64>; 6],
}

impl HessianField {
    pub fn at(&self, i: usize) -> [f64; 6] {
        std::array::from_fn(|c| self.components[c][i])
    }
}

/// Gaussian-smoothed copy of the volume (replicated borders).
pub fn gaussian_smooth(volume: &Volume, sigma: f64) -> Vec<f64> {
    let k = GaussianKernels::new(sigma);
    conv::separable(&to_f64(volume), volume.dims(), [&k.smooth; 3], Boundary::Replicate)
}

pub fn hessian(volume: &Volume, sigma: f64) -> HessianField {
    hessian_of(&to_f64(volume), volume.dims(), sigma)
}

fn hessian_of(src: &[f64], dims: Dims, sigma: f64) -> HessianField {
    let k = GaussianKernels::new(sigma);
    let g = k.smooth.as_slice();
    let d1 = k.first.as_slice();
    let d2 = k.second.as_slice();
    let run = |kernels: [&[f64]; 3]| conv::separable(src, dims, kernels, Boundary::Replicate);
    HessianField {
        dims,
        components: [
            run([d2, g, g]),
            run([g, d2, g]),
            run([g, g, d2]),
            run([d1, d1, g]),
            run([d1, g, d1]),
            run([g, d1, d1]),
        ],
    }
}

/// Eigenvalues of the symmetric matrix `[xx, yy, zz, xy, xz, yz]`, ordered by
/// increasing magnitude.
pub fn symmetric_eigenvalues(h: [f64; 6]) -> [f64; 3] {
    let [a11, a22, a33, a12, a13, a23] = h;
    let off = a12 * a12 + a13 * a13 + a23 * a23;
    let mut eig = if off == 0.0 {
        [a11, a22, a33]
    } else {
        let q = (a11 + a22 + a33) / 3.0;
        let (b11, b22, b33) = (a11 - q, a22 - q, a33 - q);
        let p = ((b11 * b11 + b22 * b22 + b33 * b33 + 2.0 * off) / 6.0).sqrt();
        if p == 0.0 {
            [q, q, q]
        } else {
            // det(B / p) / 2, clamped against rounding
            let det = b11 * (b22 * b33 - a23 * a23) - a12 * (a12 * b33 - a23 * a13)
                + a13 * (a12 * a23 - b22 * a13);
            let r = (det / (2.0 * p * p * p)).clamp(-1.0, 1.0);
            let phi = r.acos() / 3.0;
            let e1 = q + 2.0 * p * phi.cos();
            let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
            [e1, 3.0 * q - e1 - e3, e3]
        }
    };
    eig.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    eig
}

/// Frangi vesselness for bright tubes from eigenvalues sorted by magnitude.
pub fn vesselness_from_eigenvalues(l: [f64; 3], alpha: f64, beta: f64, c: f64) -> f64 {
    let [l1, l2, l3] = l;
    if l2 > 0.0 || l3 > 0.0 || l3 == 0.0 || l2 == 0.0 {
        return 0.0;
    }
    let ra = l2.abs() / l3.abs();
    let rb = l1.abs() / (l2 * l3).abs().sqrt();
    let s2 = l1 * l1 + l2 * l2 + l3 * l3;
    (1.0 - (-ra * ra / (2.0 * alpha * alpha)).exp())
        * (-rb * rb / (2.0 * beta * beta)).exp()
        * (1.0 - (-s2 / (2.0 * c * c)).exp())
}

const HESSIAN_FLOOR: f64 = 1e-9;

/// Unnormalized multi-scale vesselness (maximum over scales).
pub fn frangi_response(volume: &Volume, params: &FrangiParams) -> Result<Vec<f64>> {
    params.validate()?;
    let dims = volume.dims();
    require_min_axis(dims, params.max_radius().max(3))?;
    let src: Vec<f64> = if params.bright_vessels {
        to_f64(volume)
    } else {
        volume.data().iter().map(|&v| 1.0 - v as f64).collect()
    };
    let mut best = vec![0.0f64; dims.len()];
    for &sigma in &params.scales {
        let h = hessian_of(&src, dims, sigma);
        let s2 = sigma * sigma;
        let eig: Vec<[f64; 3]> = (0..dims.len())
            .into_par_iter()
            .map(|i| {
                let l = symmetric_eigenvalues(h.at(i).map(|x| x * s2));
                // Rounding residue on flat regions is not structure.
                if l.iter().map(|v| v * v).sum::<f64>() < HESSIAN_FLOOR * HESSIAN_FLOOR {
                    [0.0; 3]
                } else {
                    l
                }
            })
            .collect();
        let c = match params.c {
            Some(c) => c,
            None => {
                let max_norm = eig
                    .par_iter()
                    .map(|l| (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt())
                    .reduce(|| 0.0, f64::max);
                if max_norm == 0.0 {
                    continue;
                }
                0.5 * max_norm
            }
        };
        best.par_iter_mut().zip(eig.par_iter()).for_each(|(b, &l)| {
            let v = vesselness_from_eigenvalues(l, params.alpha, params.beta, c);
            if v > *b {
                *b = v;
            }
        });
    }
    Ok(best)
}

pub fn frangi_vesselness(volume: &Volume, params: &FrangiParams) -> Result<Volume> {
    let raw = frangi_response(volume, params)?;
    Ok(normalize_by_max(&raw, volume.dims(), volume.spacing()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Sobel,
    Gvf,
    Frangi,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Sobel, FeatureKind::Gvf, FeatureKind::Frangi];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Sobel => "sobel",
            FeatureKind::Gvf => "gvf",
            FeatureKind::Frangi => "frangi",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownFeature(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub select: Vec<FeatureKind>,
    pub gvf: GvfParams,
    pub frangi: FrangiParams,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            select: FeatureKind::ALL.to_vec(),
            gvf: GvfParams::default(),
            frangi: FrangiParams::default(),
        }
    }
}

/// Named, normalized feature volumes aligned to one source grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    source_dims: Dims,
    features: Vec<(String, Volume)>,
}

impl FeatureSet {
    pub fn new(source_dims: Dims, features: Vec<(String, Volume)>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidParams("a feature set needs at least one feature".into()));
        }
        for (i, (name, vol)) in features.iter().enumerate() {
            if vol.dims() != source_dims {
                return Err(Error::DimsMismatch {
                    left: source_dims.to_array(),
                    right: vol.dims().to_array(),
                });
            }
            if features[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::InvalidParams(format!("duplicate feature name {name:?}")));
            }
        }
        Ok(Self { source_dims, features })
    }

    pub fn source_dims(&self) -> Dims {
        self.source_dims
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Volume> {
        self.features.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Volume)> {
        self.features.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn volumes(&self) -> impl Iterator<Item = &Volume> {
        self.features.iter().map(|(_, v)| v)
    }
}

/// Computes the selected features in `sobel`, `gvf`, `frangi` order.
pub fn build_feature_set(volume: &Volume, config: &FeatureConfig) -> Result<FeatureSet> {
    if config.select.is_empty() {
        return Err(Error::InvalidParams("no features selected".into()));
    }
    let wants = |k: FeatureKind| config.select.contains(&k);
    if wants(FeatureKind::Gvf) {
        config.gvf.validate()?;
    }
    if wants(FeatureKind::Frangi) {
        config.frangi.validate()?;
    }
    let mut features = Vec::new();
    let sobel = if wants(FeatureKind::Sobel) || wants(FeatureKind::Gvf) {
        Some(sobel_gradient(volume)?.1)
    } else {
        None
    };
    if let Some(edge_map) = &sobel {
        if wants(FeatureKind::Sobel) {
            features.push((FeatureKind::Sobel.name().to_string(), edge_map.clone()));
        }
        if wants(FeatureKind::Gvf) {
            let gvf = gvf_feature_from_edge_map(edge_map, &config.gvf)?;
            features.push((FeatureKind::Gvf.name().to_string(), gvf));
        }
    }
    if wants(FeatureKind::Frangi) {
        let frangi = frangi_vesselness(volume, &config.frangi)?;
        features.push((FeatureKind::Frangi.name().to_string(), frangi));
    }
    FeatureSet::new(volume.dims(), features)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub source_dims: Dims,
    pub features: Vec<FeatureEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub name: String,
    pub path: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `<name>.vvol` per feature plus `manifest.json` into `dir`;
/// returns the manifest path.
pub fn write_feature_set(set: &FeatureSet, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(set.len());
    for (name, vol) in set.iter() {
        let file = PathBuf::from(format!("{name}.vvol"));
        volume::write_vvol(vol, dir.join(&file))?;
        entries.push(FeatureEntry { name: name.to_string(), path: file });
    }
    let manifest = FeatureManifest { source_dims: set.source_dims(), features: entries };
    let path = dir.join(MANIFEST_FILE);
    volume::write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

/// Reads a manifest; relative feature paths resolve against its directory.
pub fn read_feature_set(manifest_path: impl AsRef<Path>) -> Result<FeatureSet> {
    let manifest_path = manifest_path.as_ref();
    let manifest: FeatureManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let features = manifest
        .features
        .into_iter()
        .map(|e| Ok((e.name, volume::read_vvol(base.join(&e.path))?)))
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(manifest.source_dims, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iso(dims: Dims, f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        Volume::from_fn(dims, Spacing::ISOTROPIC, f).unwrap()
    }

    #[test]
    fn sobel_constant_is_zero() {
        let v = Volume::filled(Dims::cube(5), Spacing::ISOTROPIC, 0.7).unwrap();
        let (field, mag) = sobel_gradient(&v).unwrap();
        assert!(field.magnitude().iter().all(|&m| m == 0.0));
        assert!(mag.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn sobel_ramp_scale_and_direction() {
        let n = 8;
        let v = iso(Dims::cube(n), |x, _, _| x as f32 / (n - 1) as f32);
        let (field, mag) = sobel_gradient(&v).unwrap();
        let d = Dims::cube(n);
        // Kernel weight sum 16 times a two-voxel span of slope 1/7.
        let expected = 32.0 / (n - 1) as f64;
        for i in 0..d.len() {
            let (x, _, _) = d.coords(i);
            let [u, vv, w] = field.at(i);
            assert!(vv.abs() < 1e-5 && w.abs() < 1e-5);
            if x > 0 && x < n - 1 {
                assert!((u - expected).abs() < 1e-5);
                assert!((mag.data()[i] - 1.0).abs() < 1e-6);
            } else {
                assert!((mag.data()[i] - 0.5).abs() < 1e-6, "border attenuated to half");
            }
        }
    }

    #[test]
    fn sobel_axis_swap() {
        let n = 6;
        let vx = iso(Dims::cube(n), |x, _, _| x as f32 / 5.0);
        let vz = iso(Dims::cube(n), |_, _, z| z as f32 / 5.0);
        let (fx, mx) = sobel_gradient(&vx).unwrap();
        let (fz, mz) = sobel_gradient(&vz).unwrap();
        let d = Dims::cube(n);
        for i in 0..d.len() {
            let (x, y, z) = d.coords(i);
            let j = d.index(z, y, x);
            assert!((mx.data()[i] - mz.data()[j]).abs() < 1e-6);
            assert!((fx.at(i)[0] - fz.at(j)[2]).abs() < 1e-9);
        }
    }

    #[test]
    fn sobel_rejects_tiny_volume() {
        let v = Volume::filled(Dims::new(2, 5, 5), Spacing::ISOTROPIC, 0.0).unwrap();
        assert!(matches!(sobel_gradient(&v), Err(Error::VolumeTooSmall { min: 3, .. })));
    }

    #[test]
    fn gvf_params_stability_guard() {
        assert!(GvfParams::default().validate().is_ok());
        let p = GvfParams { mu: 0.2, iterations: 5, dt: 1.0 };
        assert!(matches!(p.validate(), Err(Error::UnstableTimestep { .. })));
        let v = Volume::filled(Dims::cube(4), Spacing::ISOTROPIC, 0.0).unwrap();
        assert!(gvf_field(&v, &p).is_err());
    }

    #[test]
    fn gvf_zero_edge_map_stays_zero() {
        let v = Volume::filled(Dims::cube(6), Spacing::ISOTROPIC, 0.0).unwrap();
        let f = gvf_field(&v, &GvfParams { iterations: 25, ..Default::default() }).unwrap();
        assert!(f.magnitude().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn gvf_data_term_dominates_on_strong_edges() {
        // Sharp ridge: |grad f|^2 = 0.25 beside it, and with tiny mu the
        // field barely moves from its initial value there.
        let v = iso(Dims::new(9, 3, 3), |x, _, _| if x == 4 { 1.0 } else { 0.0 });
        let p = GvfParams { mu: 0.001, iterations: 50, dt: 1.0 };
        let f = gvf_field(&v, &p).unwrap();
        let d = v.dims();
        assert!((f.at(d.index(3, 1, 1))[0] - 0.5).abs() < 0.02);
        assert!((f.at(d.index(5, 1, 1))[0] + 0.5).abs() < 0.02);
    }

    /// Minimizes the 1D GVF energy `sum mu (u[i+1]-u[i])^2 + b_i (u_i - g_i)^2`
    /// exactly via its tridiagonal normal equations.
    fn gvf_1d_minimizer(g: &[f64], b: &[f64], mu: f64) -> Vec<f64> {
        let n = g.len();
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n.saturating_sub(1)];
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            diag[i] = b[i];
            rhs[i] = b[i] * g[i];
        }
        for i in 0..n - 1 {
            diag[i] += mu;
            diag[i + 1] += mu;
            off[i] = -mu;
        }
        // Thomas algorithm.
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        c[0] = if n > 1 { off[0] / diag[0] } else { 0.0 };
        d[0] = rhs[0] / diag[0];
        for i in 1..n {
            let m = diag[i] - off[i - 1] * c[i - 1];
            if i < n - 1 {
                c[i] = off[i] / m;
            }
            d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / m;
        }
        let mut u = vec![0.0; n];
        u[n - 1] = d[n - 1];
        for i in (0..n - 1).rev() {
            u[i] = d[i] - c[i] * u[i + 1];
        }
        u
    }

    #[test]
    fn gvf_points_toward_edge_from_both_sides() {
        // Edge map: a smooth ridge at x0 = 12, constant across y and z.
        let n = 25;
        let x0 = 12.0f64;
        let profile: Vec<f64> = (0..n)
            .map(|x| (-((x as f64 - x0).powi(2)) / 2.0).exp())
            .collect();
        let v = iso(Dims::new(n, 3, 3), |x, _, _| profile[x] as f32);
        let params = GvfParams { mu: 0.2, iterations: 4000, dt: 0.75 / 1.2 };
        let field = gvf_field(&v, &params).unwrap();

        let g: Vec<f64> = (0..n)
            .map(|x| {
                let hi = v.get((x + 1).min(n - 1), 1, 1) as f64;
                let lo = v.get(x.saturating_sub(1), 1, 1) as f64;
                (hi - lo) / 2.0
            })
            .collect();
        let b: Vec<f64> = g.iter().map(|x| x * x).collect();
        let oracle = gvf_1d_minimizer(&g, &b, params.mu);

        let d = v.dims();
        for x in 0..n {
            let u = field.at(d.index(x, 1, 1))[0];
            assert!((u - oracle[x]).abs() < 1e-4, "x={x}: {u} vs {}", oracle[x]);
        }
        for x in 6..12 {
            assert!(field.at(d.index(x, 1, 1))[0] > 0.0);
        }
        for x in 13..19 {
            assert!(field.at(d.index(x, 1, 1))[0] < 0.0);
        }
    }

    #[test]
    fn gvf_energy_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = (0..12 * 12 * 12).map(|_| rng.gen::<f32>()).collect();
        let v = Volume::new(Dims::cube(12), Spacing::ISOTROPIC, data).unwrap();
        let mut solver = GvfSolver::new(&v, GvfParams::default()).unwrap();
        let mut prev = solver.energy();
        for _ in 0..30 {
            solver.step();
            let e = solver.energy();
            assert!(e <= prev * (1.0 + 1e-12), "{e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn gvf_feature_normalized() {
        let c = Volume::filled(Dims::cube(6), Spacing::ISOTROPIC, 0.4).unwrap();
        assert!(gvf_feature(&c, &GvfParams::default()).unwrap().data().iter().all(|&s| s == 0.0));
        let s = phantom::sphere(Dims::cube(12), 3.0, 1.0, 0.0).unwrap();
        let f = gvf_feature(&s, &GvfParams { iterations: 10, ..Default::default() }).unwrap();
        let (lo, hi) = f.min_max();
        assert!(lo >= 0.0 && hi == 1.0);
    }

    #[test]
    fn eigenvalues_match_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let h: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            let m = nalgebra::Matrix3::new(h[0], h[3], h[4], h[3], h[1], h[5], h[4], h[5], h[2]);
            let mut want: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
            want.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
            let got = symmetric_eigenvalues(h);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "{got:?} vs {want:?}");
            }
        }
        assert_eq!(symmetric_eigenvalues([1.0, -3.0, 2.0, 0.0, 0.0, 0.0]), [1.0, 2.0, -3.0]);
        assert_eq!(symmetric_eigenvalues([0.0; 6]), [0.0; 3]);
    }

    #[test]
    fn vesselness_shape_terms() {
        // Ideal line: one zero eigenvalue, two equal negative ones.
        let line = vesselness_from_eigenvalues([0.0, -1.0, -1.0], 0.5, 0.5, 0.5);
        let blob = vesselness_from_eigenvalues([-1.0, -1.0, -1.0], 0.5, 0.5, 0.5);
        let wrong_sign = vesselness_from_eigenvalues([0.0, 1.0, -1.0], 0.5, 0.5, 0.5);
        assert!(line > 0.5 && blob < 0.2 * line && wrong_sign == 0.0);
    }

    #[test]
    fn frangi_constant_is_zero() {
        let v = Volume::filled(Dims::cube(12), Spacing::ISOTROPIC, 0.6).unwrap();
        let out = frangi_vesselness(&v, &FrangiParams { scales: vec![1.0, 2.0], ..Default::default() }).unwrap();
        assert!(out.data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn frangi_params_validation() {
        let mut p = FrangiParams::default();
        assert!(p.validate().is_ok());
        p.scales = vec![2.0, 1.0];
        assert!(p.validate().is_err());
        p.scales = vec![];
        assert!(p.validate().is_err());
        let p = FrangiParams { alpha: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
        let v = Volume::filled(Dims::cube(8), Spacing::ISOTROPIC, 0.0).unwrap();
        assert!(matches!(
            frangi_vesselness(&v, &FrangiParams::default()),
            Err(Error::VolumeTooSmall { .. })
        ));
    }

    #[test]
    fn derivative_kernels_are_exact_on_cubics() {
        for sigma in [0.7, 1.0, 2.5] {
            let k = GaussianKernels::new(sigma);
            let r = (k.smooth.len() / 2) as f64;
            let apply = |taps: &[f64], f: &dyn Fn(f64) -> f64, x: f64| -> f64 {
                taps.iter().enumerate().map(|(i, t)| t * f(x + i as f64 - r)).sum()
            };
            let f = |x: f64| 0.3 * x * x * x - x * x + 2.0 * x + 1.0;
            let x = 1.5;
            // Smoothed cubic: f + 3 * 0.3 * var * x - var
            let var: f64 = k.smooth.iter().enumerate().map(|(i, t)| t * (i as f64 - r).powi(2)).sum();
            assert!((apply(&k.smooth, &f, x) - (f(x) + 0.9 * var * x - var)).abs() < 1e-9);
            assert!((apply(&k.second, &f, x) - (1.8 * x - 2.0)).abs() < 1e-9);
            let q = |x: f64| 2.0 * x * x - 3.0 * x;
            assert!((apply(&k.first, &q, x) - (4.0 * x - 3.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_set_invariants() {
        let v = Volume::filled(Dims::cube(3), Spacing::ISOTROPIC, 0.0).unwrap();
        let w = Volume::filled(Dims::cube(4), Spacing::ISOTROPIC, 0.0).unwrap();
        assert!(FeatureSet::new(Dims::cube(3), vec![]).is_err());
        assert!(FeatureSet::new(Dims::cube(3), vec![("a".into(), w)]).is_err());
        assert!(FeatureSet::new(Dims::cube(3), vec![("a".into(), v.clone()), ("a".into(), v.clone())]).is_err());
        assert!(FeatureSet::new(Dims::cube(3), vec![("a".into(), v)]).is_ok());
        assert_eq!("Frangi".parse::<FeatureKind>().unwrap(), FeatureKind::Frangi);
        assert!("hough".parse::<FeatureKind>().is_err());
    }

    #[test]
    fn feature_subset_and_manifest_round_trip() {
        let v = phantom::cylinder(Dims::cube(16), 3.0, 2, 1.0, 0.0).unwrap();
        let config = FeatureConfig {
            select: vec![FeatureKind::Frangi],
            frangi: FrangiParams { scales: vec![1.0, 2.0], bright_vessels: true, ..Default::default() },
            ..Default::default()
        };
        let set = build_feature_set(&v, &config).unwrap();
        assert_eq!(set.names().collect::<Vec<_>>(), ["frangi"]);

        let dir = tempfile::tempdir().unwrap();
        let manifest = write_feature_set(&set, dir.path()).unwrap();
        let json: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
        assert_eq!(json["source_dims"], serde_json::json!([16, 16, 16]));
        assert_eq!(json["features"][0]["name"], "frangi");
        assert_eq!(read_feature_set(&manifest).unwrap(), set);
    }
}
