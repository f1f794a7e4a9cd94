//! Vesselness and Hessian checked against a brute-force evaluation built
//! from finite differences of the smoothed volume and a general eigensolver.

use nalgebra::{Matrix3, SymmetricEigen};
use usvis_core::features::{
    frangi_response, frangi_vesselness, gaussian_smooth, hessian, sobel_gradient, FrangiParams,
};
use usvis_core::phantom::{cylinder, sphere};
use usvis_core::volume::{Dims, Spacing, Volume};

fn fd_hessian(s: &[f64], d: Dims, (x, y, z): (usize, usize, usize)) -> Matrix3<f64> {
    let at = |dx: isize, dy: isize, dz: isize| {
        s[d.index(
            (x as isize + dx) as usize,
            (y as isize + dy) as usize,
            (z as isize + dz) as usize,
        )]
    };
    let c = at(0, 0, 0);
    let xx = at(1, 0, 0) - 2.0 * c + at(-1, 0, 0);
    let yy = at(0, 1, 0) - 2.0 * c + at(0, -1, 0);
    let zz = at(0, 0, 1) - 2.0 * c + at(0, 0, -1);
    let xy = (at(1, 1, 0) - at(1, -1, 0) - at(-1, 1, 0) + at(-1, -1, 0)) / 4.0;
    let xz = (at(1, 0, 1) - at(1, 0, -1) - at(-1, 0, 1) + at(-1, 0, -1)) / 4.0;
    let yz = (at(0, 1, 1) - at(0, 1, -1) - at(0, -1, 1) + at(0, -1, -1)) / 4.0;
    Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
}

/// Frangi's measure written out directly from sorted eigenvalues.
fn oracle_vesselness(h: Matrix3<f64>, alpha: f64, beta: f64, c: f64) -> f64 {
    let mut l: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
    l.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    let (l1, l2, l3) = (l[0], l[1], l[2]);
    if l2 >= 0.0 || l3 >= 0.0 {
        return 0.0;
    }
    let ra2 = (l2 / l3).powi(2);
    let rb2 = l1 * l1 / (l2 * l3).abs();
    let s2 = l1 * l1 + l2 * l2 + l3 * l3;
    (1.0 - (-ra2 / (2.0 * alpha * alpha)).exp())
        * (-rb2 / (2.0 * beta * beta)).exp()
        * (1.0 - (-s2 / (2.0 * c * c)).exp())
}

fn oracle_probe(v: &Volume, p: &FrangiParams, probe: (usize, usize, usize)) -> f64 {
    let c = p.c.expect("oracle needs a fixed c");
    p.scales
        .iter()
        .map(|&sigma| {
            let s = gaussian_smooth(v, sigma);
            oracle_vesselness(fd_hessian(&s, v.dims(), probe) * (sigma * sigma), p.alpha, p.beta, c)
        })
        .fold(0.0, f64::max)
}

fn bright(c: Option<f64>) -> FrangiParams {
    FrangiParams { bright_vessels: true, c, ..Default::default() }
}

#[test]
fn cylinder_axis_dominates_background_and_sphere() {
    let d = Dims::cube(32);
    let cyl = cylinder(d, 3.0, 2, 1.0, 0.0).unwrap();
    let sph = sphere(d, 3.0, 1.0, 0.0).unwrap();
    let p = bright(Some(0.25));

    let axis = (16, 16, 16);
    let o_axis = oracle_probe(&cyl, &p, axis);
    let o_bg = oracle_probe(&cyl, &p, (24, 16, 16)).max(oracle_probe(&cyl, &p, (5, 26, 9)));
    let o_sphere = oracle_probe(&sph, &p, axis);
    assert!(o_axis >= 5.0 * o_bg, "oracle axis {o_axis} vs background {o_bg}");
    assert!(o_axis >= 2.0 * o_sphere, "oracle axis {o_axis} vs sphere {o_sphere}");

    let rc = frangi_response(&cyl, &p).unwrap();
    let rs = frangi_response(&sph, &p).unwrap();
    let i = d.index(axis.0, axis.1, axis.2);
    // Finite differences and derivative-of-Gaussian kernels differ at O(h^2).
    assert!((rc[i] - o_axis).abs() < 0.05, "{} vs {o_axis}", rc[i]);
    assert!((rs[i] - o_sphere).abs() < 0.05, "{} vs {o_sphere}", rs[i]);

    let mut background_max: f64 = 0.0;
    for z in 0..32 {
        for y in 0..32 {
            for x in 0..32 {
                let r = ((x as f64 - 16.0).powi(2) + (y as f64 - 16.0).powi(2)).sqrt();
                if r >= 3.0 + 4.0 {
                    background_max = background_max.max(rc[d.index(x, y, z)]);
                }
            }
        }
    }
    assert!(rc[i] >= 5.0 * background_max);
    assert!(rc[i] >= 2.0 * rs[i]);
}

#[test]
fn default_structureness_still_discriminates() {
    let d = Dims::cube(32);
    let cyl = frangi_response(&cylinder(d, 3.0, 2, 1.0, 0.0).unwrap(), &bright(None)).unwrap();
    let sph = frangi_response(&sphere(d, 3.0, 1.0, 0.0).unwrap(), &bright(None)).unwrap();
    let i = d.index(16, 16, 16);
    assert!(cyl[i] > 0.5);
    assert!(cyl[i] >= 2.0 * sph[i]);
}

#[test]
fn dark_vessels_are_found_after_inversion() {
    let d = Dims::cube(24);
    let dark = cylinder(d, 3.0, 0, 0.1, 0.9).unwrap();
    let v = frangi_vesselness(&dark, &FrangiParams { scales: vec![1.0, 2.0], ..Default::default() }).unwrap();
    assert!(v.get(5, 12, 12) > 0.5);
    assert_eq!(v.get(12, 2, 2), 0.0);
}

/// Per-variable degree at most 2 in mixed terms, pure cubics otherwise, so
/// that central differences are exact on the smoothed polynomial.
fn polynomial_phantom(n: usize) -> Volume {
    let c = (n - 1) as f64 / 2.0;
    Volume::from_fn(Dims::cube(n), Spacing::ISOTROPIC, |x, y, z| {
        let (x, y, z) = ((x as f64 - c) / c, (y as f64 - c) / c, (z as f64 - c) / c);
        let p = 0.5 + 0.08 * x * x * x - 0.05 * y * y * y + 0.04 * z * z * z + 0.06 * x * x * y
            - 0.05 * x * y * y * z + 0.04 * y * y * z * z - 0.07 * x * z + 0.03 * x * x - 0.02 * z;
        p as f32
    })
    .unwrap()
}

#[test]
fn hessian_matches_finite_differences() {
    let v = polynomial_phantom(16);
    let d = v.dims();
    let (lo, hi) = v.min_max();
    assert!(lo > 0.0 && hi < 1.0);
    for sigma in [1.0, 1.5] {
        let margin = (3.0 * sigma as f64).ceil() as usize + 1;
        let s = gaussian_smooth(&v, sigma);
        let h = hessian(&v, sigma);
        let mut worst: f64 = 0.0;
        for z in margin..16 - margin {
            for y in margin..16 - margin {
                for x in margin..16 - margin {
                    let fd = fd_hessian(&s, d, (x, y, z));
                    let an = h.at(d.index(x, y, z));
                    let fd = [fd[(0, 0)], fd[(1, 1)], fd[(2, 2)], fd[(0, 1)], fd[(0, 2)], fd[(1, 2)]];
                    for k in 0..6 {
                        worst = worst.max((fd[k] - an[k]).abs());
                    }
                }
            }
        }
        assert!(worst <= 1e-4, "sigma {sigma}: {worst}");
    }
}

fn asymmetric(d: Dims) -> Volume {
    Volume::from_fn(d, Spacing::ISOTROPIC, |x, y, z| {
        let (x, y, z) = (x as f32, y as f32, z as f32);
        let tube = if (y - 7.0).powi(2) + (z - 9.0).powi(2) <= 5.0 { 0.9 } else { 0.1 };
        let blob = 0.5 * (-((x - 12.0).powi(2) + (y - 11.0).powi(2) + (z - 5.0).powi(2)) / 6.0).exp();
        tube + blob * (1.0 - tube)
    })
    .unwrap()
}

fn max_abs_diff(a: &Volume, b: &Volume) -> f32 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max)
}

#[test]
fn features_commute_with_axis_permutations() {
    let v = asymmetric(Dims::new(18, 16, 14));
    let p = FrangiParams { scales: vec![1.0, 2.0], bright_vessels: true, ..Default::default() };
    let f = frangi_vesselness(&v, &p).unwrap();
    let (_, s) = sobel_gradient(&v).unwrap();
    for perm in [[1, 0, 2], [2, 1, 0], [0, 2, 1], [1, 2, 0], [2, 0, 1]] {
        let pv = v.permute_axes(perm).unwrap();
        let pf = frangi_vesselness(&pv, &p).unwrap();
        assert!(max_abs_diff(&pf, &f.permute_axes(perm).unwrap()) < 1e-5, "frangi {perm:?}");
        let (_, ps) = sobel_gradient(&pv).unwrap();
        assert!(max_abs_diff(&ps, &s.permute_axes(perm).unwrap()) < 1e-6, "sobel {perm:?}");
    }
}

#[test]
fn vesselness_ignores_constant_offset() {
    let d = Dims::cube(24);
    let p = FrangiParams { scales: vec![1.0, 2.0, 3.0], bright_vessels: true, ..Default::default() };
    let a = frangi_vesselness(&cylinder(d, 3.0, 1, 0.7, 0.0).unwrap(), &p).unwrap();
    let b = frangi_vesselness(&cylinder(d, 3.0, 1, 0.9, 0.2).unwrap(), &p).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-4);
}
