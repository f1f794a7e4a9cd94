//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use usvis_core::{
    BilateralParams, Camera, FeatureConfig, FusionParams, RenderMode, RenderOptions, Spacing,
};

use crate::error::{Stage, StageError};

/// Everything one batch run needs. Loaded from JSON; fields left out take
/// their defaults, and the `fusion` block uses the same schema as the
/// service's render requests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory of PNG frames or a `.vvol` file.
    pub input: PathBuf,
    /// Voxel spacing for frame directories; VVOL inputs carry their own.
    pub spacing: Option<Spacing>,
    /// Clean volume to report MSE and PSNR against.
    pub reference: Option<PathBuf>,
    pub bilateral: BilateralParams,
    pub features: FeatureConfig,
    pub fusion: FusionParams,
    pub render: RenderConfig,
    /// Directory receiving all artifacts.
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            spacing: None,
            reference: None,
            bilateral: BilateralParams::default(),
            features: FeatureConfig::default(),
            fusion: FusionParams::default(),
            render: RenderConfig::default(),
            output: PathBuf::from("usvis-out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub mode: RenderMode,
    /// Degrees about x, y, z.
    pub rotation: [f64; 3],
    pub width: u32,
    pub height: u32,
    #[serde(flatten)]
    pub options: RenderOptions,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            mode: RenderMode::MipColor,
            rotation: [0.0; 3],
            width: 256,
            height: 256,
            options: RenderOptions::default(),
        }
    }
}

impl RenderConfig {
    pub fn camera(&self) -> Camera {
        Camera::new(self.rotation, self.width, self.height)
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, StageError> {
        serde_json::from_str(text).map_err(|e| StageError::new(Stage::Config, e))
    }

    pub fn load(path: &Path) -> Result<Self, StageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StageError::msg(Stage::Config, format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks parameters against their module invariants.
    pub fn validate(&self) -> Result<(), StageError> {
        let config = |e| StageError::new(Stage::Config, e);
        if self.input.as_os_str().is_empty() {
            return Err(StageError::msg(Stage::Config, "no input given"));
        }
        self.bilateral.validate().map_err(config)?;
        self.features.frangi.validate().map_err(config)?;
        self.features.gvf.validate().map_err(config)?;
        if self.features.select.is_empty() {
            return Err(StageError::msg(Stage::Config, "select at least one feature"));
        }
        self.render.camera().validate().map_err(config)?;
        self.render.options.validate().map_err(config)?;
        Ok(())
    }
}
