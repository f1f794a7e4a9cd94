//! Analytic test volumes.
//!
//! Geometry is centered at voxel `(nx/2, ny/2, nz/2)` (integer division), so a
//! 32^3 cylinder along z has its axis through voxels `(16, 16, k)`. A voxel is
//! inside when its center lies within `radius` of the axis or center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Cylinder,
    Sphere,
    Ramp,
    Step,
    /// `base` geometry with multiplicative speckle.
    Noisy,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cylinder" => Ok(Self::Cylinder),
            "sphere" => Ok(Self::Sphere),
            "ramp" => Ok(Self::Ramp),
            "step" => Ok(Self::Step),
            "noisy" => Ok(Self::Noisy),
            other => Err(Error::BadGeometry(format!("unknown phantom kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// Geometry under the speckle of a `Noisy` phantom.
    pub base: PhantomKind,
    pub dims: Dims,
    /// Cylinder or sphere radius in voxels.
    pub radius: f64,
    /// Cylinder axis, ramp direction or step normal (0 = x, 1 = y, 2 = z).
    pub axis: usize,
    /// Step plane: voxels with coordinate `>= position` along `axis` are foreground.
    pub position: Option<usize>,
    pub foreground: f32,
    pub background: f32,
    /// Speckle amplitude `a`: samples become `I * (1 + eta)`, `eta ~ U[-a, a]`.
    pub noise: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            kind: PhantomKind::Cylinder,
            base: PhantomKind::Cylinder,
            dims: Dims::cube(32),
            radius: 3.0,
            axis: 2,
            position: None,
            foreground: 1.0,
            background: 0.0,
            noise: 0.3,
            seed: 1,
        }
    }
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume> {
    let d = spec.dims;
    let (fg, bg) = (spec.foreground, spec.background);
    for v in [fg, bg] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::BadGeometry(format!("intensity {v} outside [0, 1]")));
        }
    }
    let geometry = match spec.kind {
        PhantomKind::Noisy => spec.base,
        k => k,
    };
    let clean = match geometry {
        PhantomKind::Cylinder => cylinder(d, spec.radius, spec.axis, fg, bg)?,
        PhantomKind::Sphere => sphere(d, spec.radius, fg, bg)?,
        PhantomKind::Ramp => ramp(d, spec.axis)?,
        PhantomKind::Step => {
            check_axis(spec.axis)?;
            let pos = spec.position.unwrap_or(d[spec.axis] / 2);
            step(d, spec.axis, pos, bg, fg)?
        }
        PhantomKind::Noisy => {
            return Err(Error::BadGeometry("noisy phantom needs a non-noisy base".into()))
        }
    };
    match spec.kind {
        PhantomKind::Noisy => speckle(&clean, spec.noise, spec.seed),
        _ => Ok(clean),
    }
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.is_empty() {
        Err(Error::BadGeometry(format!("empty dims {:?}", dims.to_array())))
    } else {
        Ok(())
    }
}

fn check_axis(axis: usize) -> Result<()> {
    if axis > 2 {
        Err(Error::BadGeometry(format!("axis {axis} is not 0, 1 or 2")))
    } else {
        Ok(())
    }
}

fn check_radius(radius: f64) -> Result<()> {
    if radius.is_finite() && radius > 0.0 {
        Ok(())
    } else {
        Err(Error::BadGeometry(format!("radius must be positive, got {radius}")))
    }
}

fn center(dims: Dims) -> [f64; 3] {
    [(dims.nx / 2) as f64, (dims.ny / 2) as f64, (dims.nz / 2) as f64]
}

pub fn cylinder(dims: Dims, radius: f64, axis: usize, fg: f32, bg: f32) -> Result<Volume> {
    check_dims(dims)?;
    check_axis(axis)?;
    check_radius(radius)?;
    let c = center(dims);
    Volume::from_fn(dims, Spacing::ISOTROPIC, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let d2: f64 = (0..3)
            .filter(|&a| a != axis)
            .map(|a| (p[a] - c[a]).powi(2))
            .sum();
        if d2 <= radius * radius { fg } else { bg }
    })
}

pub fn sphere(dims: Dims, radius: f64, fg: f32, bg: f32) -> Result<Volume> {
    check_dims(dims)?;
    check_radius(radius)?;
    let c = center(dims);
    Volume::from_fn(dims, Spacing::ISOTROPIC, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
        if d2 <= radius * radius { fg } else { bg }
    })
}

/// Linear ramp from 0 to 1 along `axis`.
pub fn ramp(dims: Dims, axis: usize) -> Result<Volume> {
    check_dims(dims)?;
    check_axis(axis)?;
    let n = dims[axis];
    if n < 2 {
        return Err(Error::BadGeometry("ramp axis needs at least 2 voxels".into()));
    }
    Volume::from_fn(dims, Spacing::ISOTROPIC, |x, y, z| {
        [x, y, z][axis] as f32 / (n - 1) as f32
    })
}

/// `lo` below `position` along `axis`, `hi` from `position` on.
pub fn step(dims: Dims, axis: usize, position: usize, lo: f32, hi: f32) -> Result<Volume> {
    check_dims(dims)?;
    check_axis(axis)?;
    if position == 0 || position >= dims[axis] {
        return Err(Error::BadGeometry(format!(
            "step position {position} must lie strictly inside 0..{}",
            dims[axis]
        )));
    }
    Volume::from_fn(dims, Spacing::ISOTROPIC, |x, y, z| {
        if [x, y, z][axis] < position { lo } else { hi }
    })
}

/// Multiplicative speckle `I * (1 + eta)`, `eta ~ U[-amplitude, amplitude]`,
/// clamped to `[0, 1]`. Deterministic in `seed`.
pub fn speckle(volume: &Volume, amplitude: f32, seed: u64) -> Result<Volume> {
    if !(0.0..1.0).contains(&amplitude) {
        return Err(Error::BadGeometry(format!(
            "speckle amplitude must be in [0, 1), got {amplitude}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = volume
        .data()
        .iter()
        .map(|&v| {
            let eta: f32 = if amplitude > 0.0 { rng.gen_range(-amplitude..=amplitude) } else { 0.0 };
            (v * (1.0 + eta)).clamp(0.0, 1.0)
        })
        .collect();
    Volume::new(volume.dims(), volume.spacing(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cylinder_geometry() {
        let v = make_phantom(&PhantomSpec::default()).unwrap();
        for k in 0..32 {
            assert_eq!(v.get(16, 16, k), 1.0);
            assert_eq!(v.get(19, 16, k), 1.0);
            assert_eq!(v.get(20, 16, k), 0.0);
        }
        assert_eq!(v.get(0, 0, 0), 0.0);
    }

    #[test]
    fn sphere_geometry() {
        let v = sphere(Dims::cube(32), 3.0, 1.0, 0.0).unwrap();
        assert_eq!(v.get(16, 16, 16), 1.0);
        assert_eq!(v.get(16, 16, 19), 1.0);
        assert_eq!(v.get(16, 16, 20), 0.0);
        assert_eq!(v.get(0, 0, 0), 0.0);
        assert_eq!(v.get(31, 31, 31), 0.0);
    }

    #[test]
    fn ramp_and_step() {
        let r = ramp(Dims::new(4, 2, 2), 0).unwrap();
        assert_eq!(r.get(3, 1, 1), 1.0);
        assert!((r.get(1, 0, 0) - 1.0 / 3.0).abs() < 1e-7);
        let s = step(Dims::new(8, 2, 2), 0, 4, 0.1, 0.9).unwrap();
        assert_eq!(s.get(3, 0, 0), 0.1);
        assert_eq!(s.get(4, 0, 0), 0.9);
    }

    #[test]
    fn noisy_is_seeded() {
        let spec = PhantomSpec {
            kind: PhantomKind::Noisy,
            background: 0.3,
            foreground: 0.8,
            dims: Dims::cube(12),
            ..Default::default()
        };
        let a = make_phantom(&spec).unwrap();
        let b = make_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let c = make_phantom(&PhantomSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a, c);
        // Multiplicative: relative deviation bounded by the amplitude.
        assert!(a.data().iter().all(|&v| (v - 0.3).abs() <= 0.09 + 1e-6 || (v - 0.8).abs() <= 0.24 + 1e-6));
    }

    #[test]
    fn bad_geometry() {
        let bad = |spec: PhantomSpec| matches!(make_phantom(&spec), Err(Error::BadGeometry(_)));
        assert!(bad(PhantomSpec { radius: 0.0, ..Default::default() }));
        assert!(bad(PhantomSpec { axis: 3, ..Default::default() }));
        assert!(bad(PhantomSpec { dims: Dims::new(0, 4, 4), ..Default::default() }));
        assert!(bad(PhantomSpec { kind: PhantomKind::Noisy, noise: 1.5, ..Default::default() }));
        assert!(bad(PhantomSpec { kind: PhantomKind::Step, position: Some(40), ..Default::default() }));
        assert!(bad(PhantomSpec { foreground: 2.0, ..Default::default() }));
        assert!("torus".parse::<PhantomKind>().is_err());
    }
}
