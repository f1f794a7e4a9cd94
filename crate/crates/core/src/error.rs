use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("frame stack needs at least 2 frames, got {0}")]
    EmptyStack(usize),
    #[error("frame {index} is {found:?}, expected {expected:?} (width, height)")]
    MismatchedFrameSize {
        index: usize,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("not a VVOL file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported VVOL version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported VVOL dtype 0x{0:02x}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: expected {expected} samples, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimsMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("volume {dims:?} too small: every axis needs at least {min} voxels")]
    VolumeTooSmall { dims: [usize; 3], min: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("time step {dt} exceeds the stability bound {limit}")]
    UnstableTimestep { dt: f64, limit: f64 },
    #[error("all feature weights are zero")]
    AllZeroWeights,
    #[error("gain must be non-negative, got {0}")]
    NegativeGain(f64),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("bad phantom geometry: {0}")]
    BadGeometry(String),
    #[error("unsupported image: {0}")]
    UnsupportedImage(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}
