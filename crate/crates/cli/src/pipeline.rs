//! Stage functions and the batch pipeline built from them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use usvis_core::features::{read_feature_set, write_feature_set};
use usvis_core::filters::psnr_from_mse;
use usvis_core::fusion::{read_fused, write_fused};
use usvis_core::{
    bilateral_fast, build_feature_set, fuse, ingest_frames, mse, read_vvol, render_fused,
    render_mip, write_png, write_vvol, BilateralParams, FeatureConfig, FeatureSet, FrameStack,
    FusedVolume, FusionParams, RenderMode, RenderedImage, Spacing, Volume,
};

use crate::config::{PipelineConfig, RenderConfig};
use crate::error::{AtStage, Stage, StageError};

/// Reads a `.vvol` file, or ingests a directory of PNG frames.
pub fn load_volume(path: &Path, spacing: Option<Spacing>, stage: Stage) -> Result<Volume, StageError> {
    let fail = |e: usvis_core::Error| StageError::msg(stage, format!("{}: {e}", path.display()));
    if !path.exists() {
        return Err(StageError::msg(stage, format!("{} does not exist", path.display())));
    }
    if path.is_dir() {
        let stack = FrameStack::from_dir(path).map_err(fail)?;
        ingest_frames(&stack.with_spacing(spacing.unwrap_or_default())).map_err(fail)
    } else {
        let volume = read_vvol(path).map_err(fail)?;
        match spacing {
            Some(s) => volume.with_spacing(s).map_err(fail),
            None => Ok(volume),
        }
    }
}

/// Reconstruction error of `volume` against a clean reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fidelity {
    pub mse: f64,
    pub psnr: f64,
}

impl Fidelity {
    pub fn measure(volume: &Volume, reference: &Volume) -> Result<Self, StageError> {
        let mse = mse(volume, reference).at(Stage::Reference)?;
        Ok(Self { mse, psnr: psnr_from_mse(mse) })
    }
}

pub fn filter(volume: &Volume, params: &BilateralParams) -> Result<Volume, StageError> {
    bilateral_fast(volume, params).at(Stage::Filter)
}

pub fn extract_features(volume: &Volume, config: &FeatureConfig) -> Result<FeatureSet, StageError> {
    build_feature_set(volume, config).at(Stage::Features)
}

pub fn fuse_features(
    volume: &Volume,
    features: &FeatureSet,
    params: &FusionParams,
) -> Result<FusedVolume, StageError> {
    fuse(volume, features, params).at(Stage::Fuse)
}

pub fn render(fused: &FusedVolume, config: &RenderConfig) -> Result<RenderedImage, StageError> {
    render_fused(fused, &config.camera(), config.mode, &config.options).at(Stage::Render)
}

/// Grayscale MIP of a plain scalar volume.
pub fn render_scalar(volume: &Volume, config: &RenderConfig) -> Result<RenderedImage, StageError> {
    if config.mode != RenderMode::Mip {
        return Err(StageError::msg(
            Stage::Render,
            format!("a scalar volume renders only as mip, not {}", config.mode.as_str()),
        ));
    }
    render_mip(volume, &config.camera(), &config.options).at(Stage::Render)
}

/// Renders either a fused manifest (`fused.json`) or a scalar `.vvol`.
pub fn render_path(input: &Path, config: &RenderConfig) -> Result<RenderedImage, StageError> {
    let is_json = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let fused = read_fused(input)
            .map_err(|e| StageError::msg(Stage::Input, format!("{}: {e}", input.display())))?;
        render(&fused, config)
    } else {
        render_scalar(&load_volume(input, None, Stage::Input)?, config)
    }
}

pub fn save_volume(volume: &Volume, path: &Path, stage: Stage) -> Result<(), StageError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(stage)?;
    }
    write_vvol(volume, path).at(stage)
}

pub fn save_features(set: &FeatureSet, dir: &Path) -> Result<PathBuf, StageError> {
    write_feature_set(set, dir).at(Stage::Features)
}

pub fn load_features(manifest: &Path) -> Result<FeatureSet, StageError> {
    read_feature_set(manifest)
        .map_err(|e| StageError::msg(Stage::Input, format!("{}: {e}", manifest.display())))
}

pub fn save_fused(fused: &FusedVolume, dir: &Path) -> Result<PathBuf, StageError> {
    write_fused(fused, dir).at(Stage::Fuse)
}

pub fn save_png(image: &RenderedImage, path: &Path) -> Result<(), StageError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(Stage::Render)?;
    }
    write_png(image, path).at(Stage::Render)
}

/// Files written by [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub filtered: PathBuf,
    pub features_manifest: PathBuf,
    pub image: PathBuf,
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub artifacts: Artifacts,
    /// Input and filtered volume against the reference, when one is given.
    pub fidelity: Option<(Fidelity, Fidelity)>,
    pub timings: Vec<(Stage, Duration)>,
    pub fused: FusedVolume,
}

pub const FILTERED_FILE: &str = "filtered.vvol";
pub const FEATURES_DIR: &str = "features";
pub const IMAGE_FILE: &str = "render.png";

/// Ingest, filter, extract features, fuse and render. Writes
/// `filtered.vvol`, `features/` and `render.png` under `config.output`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport, StageError> {
    config.validate()?;
    let mut timings = Vec::new();
    let mut timed = |stage: Stage, start: Instant| timings.push((stage, start.elapsed()));

    let t = Instant::now();
    let volume = load_volume(&config.input, config.spacing, Stage::Input)?;
    timed(Stage::Input, t);
    let reference = match &config.reference {
        Some(path) => Some(load_volume(path, None, Stage::Reference)?),
        None => None,
    };
    fs::create_dir_all(&config.output)
        .map_err(|e| StageError::msg(Stage::Config, format!("{}: {e}", config.output.display())))?;

    let t = Instant::now();
    let filtered = filter(&volume, &config.bilateral)?;
    let filtered_path = config.output.join(FILTERED_FILE);
    save_volume(&filtered, &filtered_path, Stage::Filter)?;
    timed(Stage::Filter, t);

    let fidelity = match &reference {
        Some(r) => Some((Fidelity::measure(&volume, r)?, Fidelity::measure(&filtered, r)?)),
        None => None,
    };

    let t = Instant::now();
    let features = extract_features(&filtered, &config.features)?;
    let features_manifest = save_features(&features, &config.output.join(FEATURES_DIR))?;
    timed(Stage::Features, t);

    let t = Instant::now();
    let fused = fuse_features(&filtered, &features, &config.fusion)?;
    timed(Stage::Fuse, t);

    let t = Instant::now();
    let image = render(&fused, &config.render)?;
    let image_path = config.output.join(IMAGE_FILE);
    save_png(&image, &image_path)?;
    timed(Stage::Render, t);

    Ok(PipelineReport {
        artifacts: Artifacts { filtered: filtered_path, features_manifest, image: image_path },
        fidelity,
        timings,
        fused,
    })
}
