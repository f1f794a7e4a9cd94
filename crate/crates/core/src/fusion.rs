//! Transfer-function-free classification by feature fusion.
//!
//! For `n` features with user weights `k_j` (summing to 1) and feature values
//! `X_j(s)` at voxel `s`:
//!
//! * importance `k(s) = sum_j X_j(s) (n k_j)^2 / sum_j X_j(s)`
//! * color: with `w_j(s) = X_j(s) (n k_j)^2`, saturation is the `w`-weighted
//!   mean of feature saturations and hue the `w * saturation`-weighted mean of
//!   feature hues; lightness is the voxel intensity. HSL is converted to RGB.
//! * opacity: `O_d(s) = intensity(s) * gradient(s)` and
//!   `O_e(s) = clamp(O_d(s) * (1 + K ln(n k(s) + 1)), 0, 1)` for gain `K`.
//!
//! Voxels where every feature is zero get importance 0 and no color.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, FeatureSet};
use crate::volume::{self, Dims, Spacing, Volume};

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Hue in degrees and saturation in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureColor {
    #[serde(rename = "h")]
    pub hue: f64,
    #[serde(rename = "s")]
    pub saturation: f64,
}

impl FeatureColor {
    pub const ACHROMATIC: FeatureColor = FeatureColor { hue: 0.0, saturation: 0.0 };

    pub const fn new(hue: f64, saturation: f64) -> Self {
        Self { hue, saturation }
    }

    /// Default palette: vessels red, gradient edges cyan, GVF yellow.
    pub fn default_for(feature: &str) -> Self {
        match feature {
            "frangi" => Self::new(0.0, 0.9),
            "sobel" => Self::new(180.0, 0.7),
            "gvf" => Self::new(60.0, 0.7),
            _ => Self::ACHROMATIC,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.hue.is_finite() && (0.0..360.0).contains(&self.hue)) {
            return Err(Error::InvalidParams(format!(
                "colors.{name}.h must be in [0, 360), got {}",
                self.hue
            )));
        }
        if !(0.0..=1.0).contains(&self.saturation) {
            return Err(Error::InvalidParams(format!(
                "colors.{name}.s must be in [0, 1], got {}",
                self.saturation
            )));
        }
        Ok(())
    }
}

/// User-steered fusion knobs. Deserializing normalizes the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFusionParams")]
pub struct FusionParams {
    /// Per-feature weights by name, summing to 1.
    pub weights: BTreeMap<String, f64>,
    pub colors: BTreeMap<String, FeatureColor>,
    /// Opacity gain `K >= 0`; 0 leaves the base opacity unchanged.
    pub gain: f64,
}

#[derive(Deserialize)]
struct RawFusionParams {
    #[serde(default)]
    weights: BTreeMap<String, f64>,
    #[serde(default)]
    colors: BTreeMap<String, FeatureColor>,
    #[serde(default = "default_gain")]
    gain: f64,
}

fn default_gain() -> f64 {
    1.0
}

impl TryFrom<RawFusionParams> for FusionParams {
    type Error = Error;

    fn try_from(raw: RawFusionParams) -> Result<Self> {
        Self::new(raw.weights, raw.colors, raw.gain)
    }
}

impl Default for FusionParams {
    fn default() -> Self {
        let names = ["sobel", "gvf", "frangi"];
        Self {
            weights: names.iter().map(|n| (n.to_string(), 1.0 / 3.0)).collect(),
            colors: names
                .iter()
                .map(|n| (n.to_string(), FeatureColor::default_for(n)))
                .collect(),
            gain: 1.0,
        }
    }
}

impl FusionParams {
    /// Validates colors and gain and normalizes raw weights.
    pub fn new(
        raw_weights: BTreeMap<String, f64>,
        colors: BTreeMap<String, FeatureColor>,
        gain: f64,
    ) -> Result<Self> {
        if !gain.is_finite() || gain < 0.0 {
            return Err(Error::NegativeGain(gain));
        }
        for (name, c) in &colors {
            c.validate(name)?;
        }
        let raw: Vec<f64> = raw_weights.values().copied().collect();
        let weights = raw_weights
            .keys()
            .cloned()
            .zip(normalize_weights(&raw)?)
            .collect();
        Ok(Self { weights, colors, gain })
    }

    /// Uniform weights over `names` with the default palette.
    pub fn uniform<'a>(names: impl IntoIterator<Item = &'a str>, gain: f64) -> Result<Self> {
        let names: Vec<&str> = names.into_iter().collect();
        Self::new(
            names.iter().map(|n| (n.to_string(), 1.0)).collect(),
            names.iter().map(|n| (n.to_string(), FeatureColor::default_for(n))).collect(),
            gain,
        )
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Weights aligned to the feature order of `features`; unnamed features
    /// get weight 0.
    pub fn weights_for(&self, features: &FeatureSet) -> Result<Vec<f64>> {
        if let Some(unknown) = self.weights.keys().find(|k| features.get(k).is_none()) {
            return Err(Error::UnknownFeature(unknown.clone()));
        }
        let raw: Vec<f64> = features
            .names()
            .map(|n| self.weights.get(n).copied().unwrap_or(0.0))
            .collect();
        normalize_weights(&raw)
    }

    /// Colors aligned to `features`, falling back to the default palette.
    pub fn colors_for(&self, features: &FeatureSet) -> Vec<FeatureColor> {
        features
            .names()
            .map(|n| self.colors.get(n).copied().unwrap_or_else(|| FeatureColor::default_for(n)))
            .collect()
    }
}

/// Scales non-negative raw weights to sum to 1.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = raw.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidParams(format!(
            "weights must be finite and non-negative, got {bad}"
        )));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllZeroWeights);
    }
    Ok(raw.iter().map(|w| w / total).collect())
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::InvalidParams(format!(
            "{} weights for {n} features",
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::InvalidParams(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

fn check_dims(expected: Dims, found: Dims) -> Result<()> {
    if expected != found {
        Err(Error::DimsMismatch { left: expected.to_array(), right: found.to_array() })
    } else {
        Ok(())
    }
}

/// `(n k_j)^2` per feature.
pub fn significance(weights: &[f64]) -> Vec<f64> {
    let n = weights.len() as f64;
    weights.iter().map(|k| (n * k).powi(2)).collect()
}

/// Importance at one voxel from its feature values.
#[inline]
pub fn voxel_importance(values: &[f64], significance: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, s) in values.iter().zip(significance) {
        num += x * s;
        den += x;
    }
    if den > 0.0 { num / den } else { 0.0 }
}

/// Per-voxel importance `k(s)`.
pub fn importance(features: &FeatureSet, weights: &[f64]) -> Result<Vec<f64>> {
    check_weights(weights, features.len())?;
    let sig = significance(weights);
    let vols: Vec<&[f32]> = features.volumes().map(|v| v.data()).collect();
    Ok((0..features.source_dims().len())
        .into_par_iter()
        .map_init(
            || vec![0.0; vols.len()],
            |x, i| {
                for (xj, v) in x.iter_mut().zip(&vols) {
                    *xj = v[i] as f64;
                }
                voxel_importance(x, &sig)
            },
        )
        .collect())
}

/// Fused `(hue, saturation)` at one voxel; `(0, 0)` without support.
#[inline]
pub fn voxel_hue_saturation(
    values: &[f64],
    significance: &[f64],
    colors: &[FeatureColor],
) -> (f64, f64) {
    let mut w_sum = 0.0;
    let mut ws_sum = 0.0;
    let mut wsh_sum = 0.0;
    for ((x, sig), c) in values.iter().zip(significance).zip(colors) {
        let w = x * sig;
        w_sum += w;
        ws_sum += w * c.saturation;
        wsh_sum += w * c.saturation * c.hue;
    }
    if w_sum <= 0.0 {
        return (0.0, 0.0);
    }
    let hue = if ws_sum > 0.0 { wsh_sum / ws_sum } else { 0.0 };
    (hue, ws_sum / w_sum)
}

/// HSL (hue in degrees) to RGB, all channels in `[0, 1]`.
pub fn hsl_to_rgb(hue: f64, saturation: f64, lightness: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = (1.0 - (2.0 * lightness - 1.0).abs()) * saturation;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = lightness - c / 2.0;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m].map(|v| v.clamp(0.0, 1.0))
}

/// Per-voxel RGB from fused hue/saturation with lightness from `base`.
pub fn combine_color(
    features: &FeatureSet,
    params: &FusionParams,
    base: &Volume,
) -> Result<Vec<[f32; 3]>> {
    check_dims(features.source_dims(), base.dims())?;
    let weights = params.weights_for(features)?;
    let colors = params.colors_for(features);
    let sig = significance(&weights);
    let vols: Vec<&[f32]> = features.volumes().map(|v| v.data()).collect();
    let light = base.data();
    Ok((0..light.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; vols.len()],
            |x, i| {
                for (xj, v) in x.iter_mut().zip(&vols) {
                    *xj = v[i] as f64;
                }
                let (h, s) = voxel_hue_saturation(x, &sig, &colors);
                hsl_to_rgb(h, s, light[i] as f64).map(|c| c as f32)
            },
        )
        .collect())
}

/// Base opacity `O_d = intensity * gradient magnitude`.
pub fn base_opacity(base: &Volume, gradient_magnitude: &Volume) -> Result<Vec<f64>> {
    check_dims(base.dims(), gradient_magnitude.dims())?;
    Ok(base
        .data()
        .par_iter()
        .zip(gradient_magnitude.data().par_iter())
        .map(|(&i, &g)| i as f64 * g as f64)
        .collect())
}

/// Importance-modulated opacity for one voxel.
#[inline]
pub fn modulate_opacity(base_opacity: f64, importance: f64, feature_count: usize, gain: f64) -> f64 {
    let boost = 1.0 + gain * (feature_count as f64 * importance + 1.0).ln();
    (base_opacity * boost).clamp(0.0, 1.0)
}

/// `O_e = clamp(O_d * (1 + K ln(n k(s) + 1)))` per voxel.
pub fn opacity(
    base: &Volume,
    gradient_magnitude: &Volume,
    importance: &[f64],
    feature_count: usize,
    gain: f64,
) -> Result<Vec<f32>> {
    if !gain.is_finite() || gain < 0.0 {
        return Err(Error::NegativeGain(gain));
    }
    if importance.len() != base.len() {
        return Err(Error::InvalidParams(format!(
            "importance grid has {} samples, volume has {}",
            importance.len(),
            base.len()
        )));
    }
    let od = base_opacity(base, gradient_magnitude)?;
    Ok(od
        .par_iter()
        .zip(importance.par_iter())
        .map(|(&o, &k)| modulate_opacity(o, k, feature_count, gain) as f32)
        .collect())
}

/// Per-voxel optical properties ready for projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedVolume {
    dims: Dims,
    spacing: Spacing,
    importance: Vec<f64>,
    opacity: Vec<f32>,
    color: Vec<[f32; 3]>,
}

impl FusedVolume {
    pub fn new(
        dims: Dims,
        spacing: Spacing,
        importance: Vec<f64>,
        opacity: Vec<f32>,
        color: Vec<[f32; 3]>,
    ) -> Result<Self> {
        let n = dims.len();
        if importance.len() != n || opacity.len() != n || color.len() != n {
            return Err(Error::InvalidParams("fused grids must match dims".into()));
        }
        if importance.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
            return Err(Error::InvalidParams("importance must be finite and >= 0".into()));
        }
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        if !opacity.iter().copied().all(unit) || !color.iter().flatten().copied().all(unit) {
            return Err(Error::InvalidParams("opacity and color must lie in [0, 1]".into()));
        }
        Ok(Self { dims, spacing, importance, opacity, color })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn importance(&self) -> &[f64] {
        &self.importance
    }

    pub fn opacity(&self) -> &[f32] {
        &self.opacity
    }

    pub fn color(&self) -> &[[f32; 3]] {
        &self.color
    }

    /// One RGB channel as a flat grid.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.color.iter().map(|rgb| rgb[c]).collect()
    }
}

/// Runs importance, color and opacity. The gradient magnitude comes from the
/// `sobel` feature, or is computed from `volume` when that feature is absent.
pub fn fuse(volume: &Volume, features: &FeatureSet, params: &FusionParams) -> Result<FusedVolume> {
    check_dims(volume.dims(), features.source_dims())?;
    let weights = params.weights_for(features)?;
    let importance = importance(features, &weights)?;
    let color = combine_color(features, params, volume)?;
    let computed;
    let gm = match features.get("sobel") {
        Some(g) => g,
        None => {
            computed = features::sobel_gradient(volume)?.1;
            &computed
        }
    };
    let opacity = opacity(volume, gm, &importance, features.len(), params.gain)?;
    FusedVolume::new(volume.dims(), volume.spacing(), importance, opacity, color)
}

#[derive(Debug, Serialize, Deserialize)]
struct FusedManifest {
    dims: Dims,
    spacing: Spacing,
    /// `importance.vvol` holds `k(s) / importance_scale`.
    importance_scale: f64,
    opacity: PathBuf,
    importance: PathBuf,
    red: PathBuf,
    green: PathBuf,
    blue: PathBuf,
}

pub const FUSED_MANIFEST_FILE: &str = "fused.json";

/// Writes opacity, importance and RGB channels as VVOLs plus `fused.json`.
pub fn write_fused(fused: &FusedVolume, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (dims, spacing) = (fused.dims, fused.spacing);
    let scale = fused.importance.iter().copied().fold(1.0, f64::max);
    let write = |name: &str, data: Vec<f32>| -> Result<PathBuf> {
        let file = PathBuf::from(name);
        volume::write_vvol(&Volume::new(dims, spacing, data)?, dir.join(&file))?;
        Ok(file)
    };
    let manifest = FusedManifest {
        dims,
        spacing,
        importance_scale: scale,
        opacity: write("opacity.vvol", fused.opacity.clone())?,
        importance: write(
            "importance.vvol",
            fused.importance.iter().map(|k| (k / scale) as f32).collect(),
        )?,
        red: write("red.vvol", fused.channel(0))?,
        green: write("green.vvol", fused.channel(1))?,
        blue: write("blue.vvol", fused.channel(2))?,
    };
    let path = dir.join(FUSED_MANIFEST_FILE);
    volume::write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

pub fn read_fused(manifest_path: impl AsRef<Path>) -> Result<FusedVolume> {
    let manifest_path = manifest_path.as_ref();
    let m: FusedManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let read = |p: &Path| -> Result<Vec<f32>> {
        let v = volume::read_vvol(base.join(p))?;
        check_dims(m.dims, v.dims())?;
        Ok(v.into_data())
    };
    let importance = read(&m.importance)?
        .into_iter()
        .map(|k| k as f64 * m.importance_scale)
        .collect();
    let (r, g, b) = (read(&m.red)?, read(&m.green)?, read(&m.blue)?);
    let color = r.iter().zip(&g).zip(&b).map(|((&r, &g), &b)| [r, g, b]).collect();
    FusedVolume::new(m.dims, m.spacing, importance, read(&m.opacity)?, color)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set_of(values: &[&[f32]]) -> FeatureSet {
        let dims = Dims::new(values[0].len(), 1, 1);
        let names = ["a", "b", "c", "d", "e"];
        FeatureSet::new(
            dims,
            values
                .iter()
                .zip(names)
                .map(|(v, n)| (n.to_string(), Volume::new(dims, Spacing::ISOTROPIC, v.to_vec()).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_weights(&[2.0, 1.0, 1.0]).unwrap(), vec![0.5, 0.25, 0.25]);
        assert_eq!(normalize_weights(&[1.0]).unwrap(), vec![1.0]);
        assert!(matches!(normalize_weights(&[0.0, 0.0, 0.0]), Err(Error::AllZeroWeights)));
        assert!(normalize_weights(&[-1.0, 2.0]).is_err());
    }

    #[test]
    fn importance_examples() {
        let set = set_of(&[&[0.5], &[0.2], &[0.9]]);
        let k = importance(&set, &[1.0 / 3.0; 3]).unwrap();
        assert!((k[0] - 1.0).abs() < 1e-12);

        let set = set_of(&[&[1.0], &[0.0]]);
        assert!((importance(&set, &[0.75, 0.25]).unwrap()[0] - 2.25).abs() < 1e-12);

        // Independent scalar evaluation of the ratio.
        let set = set_of(&[&[0.5], &[0.5]]);
        let expected = (0.5 * (2.0f64 * 0.6).powi(2) + 0.5 * (2.0f64 * 0.4).powi(2)) / 1.0;
        let got = importance(&set, &[0.6, 0.4]).unwrap()[0];
        assert!((got - expected).abs() < 1e-12 && (got - 1.04).abs() < 1e-12);

        let set = set_of(&[&[0.0], &[0.0]]);
        assert_eq!(importance(&set, &[0.5, 0.5]).unwrap()[0], 0.0);
        assert!(importance(&set, &[0.5, 0.6]).is_err());
        assert!(importance(&set, &[1.0]).is_err());
    }

    #[test]
    fn hue_saturation_examples() {
        let red = FeatureColor::new(0.0, 1.0);
        let sig = significance(&[0.5, 0.5]);
        assert_eq!(voxel_hue_saturation(&[0.3, 0.8], &sig, &[red, red]), (0.0, 1.0));

        let c = [FeatureColor::new(10.0, 0.4), FeatureColor::new(10.0, 0.8)];
        let (_, s) = voxel_hue_saturation(&[0.5, 0.5], &sig, &c);
        assert!((s - 0.6).abs() < 1e-12);

        let c = [FeatureColor::new(100.0, 0.5), FeatureColor::new(200.0, 0.5)];
        let (h, _) = voxel_hue_saturation(&[0.5, 0.5], &sig, &c);
        // sum(w s h) / sum(w s) with equal w and s
        let oracle = (0.5 * 0.5 * 100.0 + 0.5 * 0.5 * 200.0) / (0.5 * 0.5 + 0.5 * 0.5);
        assert!((h - oracle).abs() < 1e-12 && (h - 150.0).abs() < 1e-12);

        assert_eq!(voxel_hue_saturation(&[0.0, 0.0], &sig, &c), (0.0, 0.0));
        let gray = [FeatureColor::ACHROMATIC; 2];
        assert_eq!(voxel_hue_saturation(&[0.5, 0.1], &sig, &gray), (0.0, 0.0));
    }

    #[test]
    fn hsl_conversion() {
        assert_eq!(hsl_to_rgb(0.0, 1.0, 0.5), [1.0, 0.0, 0.0]);
        assert_eq!(hsl_to_rgb(120.0, 1.0, 0.5), [0.0, 1.0, 0.0]);
        assert_eq!(hsl_to_rgb(240.0, 1.0, 0.5), [0.0, 0.0, 1.0]);
        assert_eq!(hsl_to_rgb(180.0, 0.0, 0.3), [0.3, 0.3, 0.3]);
        let [r, g, b] = hsl_to_rgb(60.0, 1.0, 0.25);
        assert!((r - 0.5).abs() < 1e-12 && (g - 0.5).abs() < 1e-12 && b == 0.0);
    }

    #[test]
    fn opacity_examples() {
        assert_eq!(modulate_opacity(0.3, 5.0, 3, 0.0), 0.3);
        assert_eq!(modulate_opacity(0.3, 0.0, 3, 2.0), 0.3);
        // n k(s) = e - 1 with n = 1
        let o = modulate_opacity(0.2, std::f64::consts::E - 1.0, 1, 1.0);
        assert!((o - 0.4).abs() < 1e-12);
        assert_eq!(modulate_opacity(0.9, 9.0, 3, 3.0), 1.0);

        let v = Volume::filled(Dims::cube(2), Spacing::ISOTROPIC, 0.5).unwrap();
        assert!(matches!(opacity(&v, &v, &[0.0; 8], 1, -1.0), Err(Error::NegativeGain(_))));
        let w = Volume::filled(Dims::cube(3), Spacing::ISOTROPIC, 0.5).unwrap();
        assert!(matches!(opacity(&v, &w, &[0.0; 8], 1, 1.0), Err(Error::DimsMismatch { .. })));
    }

    #[test]
    fn params_json_normalizes_on_load() {
        let p = FusionParams::from_json(
            r#"{"weights": {"frangi": 8, "sobel": 1, "gvf": 1},
                "colors": {"frangi": {"h": 0, "s": 0.9}}, "gain": 2}"#,
        )
        .unwrap();
        assert!((p.weights["frangi"] - 0.8).abs() < 1e-12);
        assert_eq!(p.gain, 2.0);
        let back = FusionParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back.colors, p.colors);
        assert!(matches!(
            FusionParams::from_json(r#"{"weights": {"frangi": 0}}"#),
            Err(Error::Json(e)) if e.to_string().contains("all feature weights are zero")
        ));
        assert!(FusionParams::from_json(r#"{"weights": {"a": 1}, "gain": -1}"#).is_err());
        assert!(FusionParams::from_json(r#"{"weights": {"a": 1}, "colors": {"a": {"h": 400, "s": 1}}}"#).is_err());
        assert_eq!(FusionParams::from_json(r#"{"weights": {"a": 1}}"#).unwrap().gain, 1.0);
    }

    #[test]
    fn weights_align_to_feature_order() {
        let set = set_of(&[&[0.1], &[0.2], &[0.3]]);
        let p = FusionParams::from_json(r#"{"weights": {"c": 3, "a": 1}}"#).unwrap();
        assert_eq!(p.weights_for(&set).unwrap(), vec![0.25, 0.0, 0.75]);
        let p = FusionParams::from_json(r#"{"weights": {"zzz": 1}}"#).unwrap();
        assert!(matches!(p.weights_for(&set), Err(Error::UnknownFeature(_))));
    }

    #[test]
    fn fuse_gain_zero_achromatic() {
        let dims = Dims::cube(6);
        let vol = crate::phantom::sphere(dims, 2.0, 0.8, 0.1).unwrap();
        let set = crate::features::build_feature_set(
            &vol,
            &crate::features::FeatureConfig {
                select: vec![crate::features::FeatureKind::Sobel],
                ..Default::default()
            },
        )
        .unwrap();
        let mut p = FusionParams::uniform(["sobel"], 0.0).unwrap();
        p.colors.insert("sobel".into(), FeatureColor::ACHROMATIC);
        let fused = fuse(&vol, &set, &p).unwrap();
        let od = base_opacity(&vol, set.get("sobel").unwrap()).unwrap();
        for i in 0..dims.len() {
            assert_eq!(fused.opacity()[i], od[i] as f32);
            let [r, g, b] = fused.color()[i];
            assert!(r == g && g == b && (r - vol.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn fused_disk_round_trip() {
        let dims = Dims::new(3, 2, 1);
        let f = FusedVolume::new(
            dims,
            Spacing::ISOTROPIC,
            vec![0.0, 1.0, 2.25, 0.5, 9.0, 1.0],
            vec![0.0, 0.1, 0.2, 0.3, 0.4, 1.0],
            vec![[0.5, 0.25, 1.0]; 6],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_fused(&f, dir.path()).unwrap();
        let back = read_fused(path).unwrap();
        assert_eq!(back.opacity(), f.opacity());
        assert_eq!(back.color(), f.color());
        for (a, b) in back.importance().iter().zip(f.importance()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<f64>, f64)> {
        (1usize..5).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::collection::vec(0.0f32..=1.0, 8), n),
                prop::collection::vec(0.0f64..10.0, n),
                0.0f64..5.0,
            )
        })
    }

    proptest! {
        #[test]
        fn fused_ranges_hold((values, raw, gain) in arb_case(), base in prop::collection::vec(0.0f32..=1.0, 8)) {
            prop_assume!(raw.iter().sum::<f64>() > 0.0);
            let refs: Vec<&[f32]> = values.iter().map(|v| v.as_slice()).collect();
            let set = set_of(&refs);
            let names: Vec<String> = set.names().map(String::from).collect();
            let colors = names.iter().enumerate()
                .map(|(j, n)| (n.clone(), FeatureColor::new(j as f64 * 70.0, 1.0 / (j + 1) as f64)))
                .collect();
            let p = FusionParams::new(names.iter().cloned().zip(raw.iter().copied()).collect(), colors, gain).unwrap();
            let w = p.weights_for(&set).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);

            let vol = Volume::new(set.source_dims(), Spacing::ISOTROPIC, base).unwrap();
            let sig = significance(&w);
            let max_sig = sig.iter().copied().fold(0.0, f64::max);
            let k = importance(&set, &w).unwrap();
            prop_assert!(k.iter().all(|&k| (0.0..=max_sig + 1e-12).contains(&k)));

            let gm = set.volumes().next().unwrap().clone();
            let fused = FusedVolume::new(
                vol.dims(), vol.spacing(), k.clone(),
                opacity(&vol, &gm, &k, set.len(), gain).unwrap(),
                combine_color(&set, &p, &vol).unwrap(),
            );
            prop_assert!(fused.is_ok());
        }

        #[test]
        fn uniform_weights_give_unit_importance(values in prop::collection::vec(prop::collection::vec(0.0f32..=1.0, 6), 1..5)) {
            let refs: Vec<&[f32]> = values.iter().map(|v| v.as_slice()).collect();
            let set = set_of(&refs);
            let n = set.len();
            let k = importance(&set, &vec![1.0 / n as f64; n]).unwrap();
            for (i, &ki) in k.iter().enumerate() {
                let support: f32 = values.iter().map(|v| v[i]).sum();
                let expected = if support > 0.0 { 1.0 } else { 0.0 };
                prop_assert!((ki - expected).abs() < 1e-9);
            }
        }

        #[test]
        fn raising_one_weight_lowers_the_others(raw in prop::collection::vec(0.1f64..10.0, 2..6), j in 0usize..6, bump in 0.01f64..5.0) {
            let j = j % raw.len();
            let before = normalize_weights(&raw).unwrap();
            let mut raised = raw.clone();
            raised[j] += bump;
            let after = normalize_weights(&raised).unwrap();
            for i in 0..raw.len() {
                if i != j {
                    prop_assert!(after[i] < before[i]);
                }
            }
        }

        #[test]
        fn opacity_monotone_in_importance(od in 0.0f64..1.0, k1 in 0.0f64..10.0, dk in 0.0f64..10.0, n in 1usize..5, gain in 0.01f64..3.0) {
            let a = modulate_opacity(od, k1, n, gain);
            let b = modulate_opacity(od, k1 + dk, n, gain);
            prop_assert!(b >= a);
        }

        #[test]
        fn single_feature_keeps_its_color(x in 0.001f64..1.0, h in 0.0f64..360.0, s in 0.0f64..=1.0) {
            let c = [FeatureColor::new(h, s)];
            let (fh, fs) = voxel_hue_saturation(&[x], &significance(&[1.0]), &c);
            prop_assert!((fs - s).abs() < 1e-12);
            if s > 0.0 {
                prop_assert!((fh - h).abs() < 1e-9);
            }
        }
    }
}
