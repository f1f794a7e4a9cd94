//! Command-line surface.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use usvis_core::phantom::PhantomKind;
use usvis_core::{
    BilateralParams, Dims, FeatureConfig, FeatureKind, FusionParams, RenderMode, Spacing,
};

use crate::config::RenderConfig;
use crate::error::{AtStage, Stage, StageError};

#[derive(Debug, Parser)]
#[command(name = "usvis", version, about = "Feature-fusion volume rendering for 3D ultrasound")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stack a directory of PNG frames into a VVOL volume.
    Ingest(IngestArgs),
    /// Bilateral speckle filtering.
    Filter(FilterArgs),
    /// Extract normalized feature volumes and a manifest.
    Features(FeaturesArgs),
    /// Fuse features into opacity, importance and color volumes.
    Fuse(FuseArgs),
    /// Render a fused volume (fused.json) or a scalar VVOL to PNG.
    Render(RenderArgs),
    /// Run every stage from a config file and flags.
    Pipeline(PipelineArgs),
    /// Write an analytic test volume.
    Phantom(PhantomArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of PNG frames, ordered by file name.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Voxel spacing sx,sy,sz in millimeters.
    #[arg(long, value_parser = parse_spacing)]
    pub spacing: Option<Spacing>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// VVOL file or frame directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Pipeline config supplying defaults for the bilateral parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Clean volume; prints MSE and PSNR before and after filtering.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub bilateral: BilateralFlags,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for `<name>.vvol` files and `manifest.json`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub features: FeatureFlags,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Filtered volume the features were computed from.
    #[arg(long)]
    pub input: PathBuf,
    /// Feature manifest written by `usvis features`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the fused channels and `fused.json`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub fusion: FusionFlags,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// `fused.json` from `usvis fuse`, or a scalar VVOL (mip only).
    #[arg(long)]
    pub input: PathBuf,
    /// PNG path.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub render: RenderFlags,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// JSON pipeline config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// VVOL file or frame directory.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, value_parser = parse_spacing)]
    pub spacing: Option<Spacing>,
    #[command(flatten)]
    pub bilateral: BilateralFlags,
    #[command(flatten)]
    pub features: FeatureFlags,
    #[command(flatten)]
    pub fusion: FusionFlags,
    #[command(flatten)]
    pub render: RenderFlags,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value = "cylinder")]
    pub kind: PhantomKind,
    /// Geometry under the speckle of a noisy phantom.
    #[arg(long)]
    pub base: Option<PhantomKind>,
    /// `N` for a cube or `NXxNYxNZ`.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<Dims>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Cylinder axis, ramp direction or step normal: 0, 1 or 2.
    #[arg(long)]
    pub axis: Option<usize>,
    /// Step plane position along the axis.
    #[arg(long)]
    pub position: Option<usize>,
    #[arg(long)]
    pub foreground: Option<f32>,
    #[arg(long)]
    pub background: Option<f32>,
    /// Speckle amplitude for noisy phantoms.
    #[arg(long)]
    pub noise: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_spacing)]
    pub spacing: Option<Spacing>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = usvis_service::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Pipeline config supplying default filter and feature parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Upload size cap in MiB.
    #[arg(long, default_value_t = 256)]
    pub max_upload_mib: usize,
    /// Number of volumes kept in memory.
    #[arg(long, default_value_t = 4)]
    pub sessions: usize,
    #[command(flatten)]
    pub bilateral: BilateralFlags,
    #[command(flatten)]
    pub features: FeatureFlags,
}

#[derive(Debug, Default, Args)]
pub struct BilateralFlags {
    /// Spatial sigma in voxels; also sets the window radius to ceil(2 sigma).
    #[arg(long)]
    pub sigma_spatial: Option<f64>,
    /// Range sigma in normalized intensity.
    #[arg(long)]
    pub sigma_range: Option<f64>,
    #[arg(long)]
    pub window_radius: Option<usize>,
}

impl BilateralFlags {
    pub fn apply(&self, p: &mut BilateralParams) {
        if let Some(s) = self.sigma_spatial {
            p.sigma_spatial = s;
            if self.window_radius.is_none() {
                p.window_radius = BilateralParams::with_sigmas(s, p.sigma_range).window_radius;
            }
        }
        if let Some(s) = self.sigma_range {
            p.sigma_range = s;
        }
        if let Some(r) = self.window_radius {
            p.window_radius = r;
        }
    }
}

#[derive(Debug, Default, Args)]
pub struct FeatureFlags {
    /// Frangi scales in voxels, ascending.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    /// Features to extract: sobel, gvf, frangi.
    #[arg(long = "features", value_delimiter = ',')]
    pub select: Option<Vec<FeatureKind>>,
    /// Look for bright tubes instead of dark ones.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub bright_vessels: Option<bool>,
    #[arg(long)]
    pub gvf_mu: Option<f64>,
    #[arg(long)]
    pub gvf_iterations: Option<usize>,
    #[arg(long)]
    pub gvf_dt: Option<f64>,
}

impl FeatureFlags {
    pub fn apply(&self, c: &mut FeatureConfig) {
        if let Some(s) = &self.scales {
            c.frangi.scales = s.clone();
        }
        if let Some(s) = &self.select {
            c.select = s.clone();
        }
        if let Some(b) = self.bright_vessels {
            c.frangi.bright_vessels = b;
        }
        if let Some(mu) = self.gvf_mu {
            c.gvf.mu = mu;
        }
        if let Some(n) = self.gvf_iterations {
            c.gvf.iterations = n;
        }
        if let Some(dt) = self.gvf_dt {
            c.gvf.dt = dt;
        }
    }
}

#[derive(Debug, Default, Args)]
pub struct FusionFlags {
    /// Raw feature weights `name=k,...`; replaces the configured weights and
    /// is normalized to sum to 1.
    #[arg(long, value_parser = parse_weights)]
    pub weights: Option<BTreeMap<String, f64>>,
    /// Opacity gain K >= 0.
    #[arg(long)]
    pub gain: Option<f64>,
}

impl FusionFlags {
    pub fn apply(&self, p: &mut FusionParams) -> Result<(), StageError> {
        if self.weights.is_none() && self.gain.is_none() {
            return Ok(());
        }
        let weights = self.weights.clone().unwrap_or_else(|| p.weights.clone());
        *p = FusionParams::new(weights, p.colors.clone(), self.gain.unwrap_or(p.gain)).at(Stage::Config)?;
        Ok(())
    }
}

#[derive(Debug, Default, Args)]
pub struct RenderFlags {
    #[arg(long)]
    pub mode: Option<RenderMode>,
    /// Degrees about x, y and z: `rx,ry,rz`.
    #[arg(long, value_parser = parse_rotation, allow_hyphen_values = true)]
    pub rotation: Option<[f64; 3]>,
    /// Output size `WxH`.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(u32, u32)>,
    /// Ray step in voxels.
    #[arg(long)]
    pub step: Option<f64>,
}

impl RenderFlags {
    pub fn apply(&self, r: &mut RenderConfig) {
        if let Some(m) = self.mode {
            r.mode = m;
        }
        if let Some(rot) = self.rotation {
            r.rotation = rot;
        }
        if let Some((w, h)) = self.size {
            r.width = w;
            r.height = h;
        }
        if let Some(s) = self.step {
            r.options.step = s;
        }
    }
}

fn parse_floats<const N: usize>(text: &str) -> Result<[f64; N], String> {
    let values: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("{s:?} is not a number")))
        .collect::<Result<_, _>>()?;
    values.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated values, got {}", v.len()))
}

pub fn parse_rotation(text: &str) -> Result<[f64; 3], String> {
    let r = parse_floats::<3>(text)?;
    if r.iter().all(|v| v.is_finite()) {
        Ok(r)
    } else {
        Err("rotation must be finite".into())
    }
}

pub fn parse_spacing(text: &str) -> Result<Spacing, String> {
    let s = parse_floats::<3>(text)?;
    if s.iter().all(|v| v.is_finite() && *v > 0.0) {
        Ok(Spacing::new(s[0] as f32, s[1] as f32, s[2] as f32))
    } else {
        Err("spacing must be positive".into())
    }
}

pub fn parse_size(text: &str) -> Result<(u32, u32), String> {
    let (w, h) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {text:?}"))?;
    let side = |s: &str| match s.trim().parse::<u32>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("{s:?} is not a positive integer")),
    };
    Ok((side(w)?, side(h)?))
}

pub fn parse_dims(text: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = text
        .split(['x', 'X'])
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("{s:?} is not a size")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        &[n] => Ok(Dims::cube(n)),
        &[x, y, z] => Ok(Dims::new(x, y, z)),
        _ => Err(format!("expected N or NXxNYxNZ, got {text:?}")),
    }
}

pub fn parse_weights(text: &str) -> Result<BTreeMap<String, f64>, String> {
    text.split(',')
        .map(|pair| {
            let (name, k) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected name=k, got {pair:?}"))?;
            let name = name.trim().parse::<FeatureKind>().map_err(|e| e.to_string())?;
            let k = k.trim().parse::<f64>().map_err(|_| format!("{k:?} is not a number"))?;
            Ok((name.name().to_string(), k))
        })
        .collect()
}
