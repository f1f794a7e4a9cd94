//! Shared inputs for the benchmarks.

use usvis_core::phantom::{make_phantom, PhantomKind, PhantomSpec};
use usvis_core::{
    bilateral_fast, build_feature_set, BilateralParams, Dims, FeatureConfig, FeatureSet, Volume,
};

/// Speckled bright cylinder along z, radius `n / 8`.
pub fn noisy_cylinder(n: usize) -> Volume {
    make_phantom(&PhantomSpec {
        kind: PhantomKind::Noisy,
        base: PhantomKind::Cylinder,
        dims: Dims::cube(n),
        radius: n as f64 / 8.0,
        foreground: 0.9,
        background: 0.1,
        noise: 0.3,
        seed: 1,
        ..Default::default()
    })
    .expect("valid phantom")
}

/// Filtered volume and its default feature set, ready for fusion.
pub fn prepared(n: usize) -> (Volume, FeatureSet) {
    let filtered = bilateral_fast(&noisy_cylinder(n), &BilateralParams::default()).expect("filter");
    let mut config = FeatureConfig::default();
    config.frangi.bright_vessels = true;
    let features = build_feature_set(&filtered, &config).expect("features");
    (filtered, features)
}
