//! Separable 1D convolution along one axis of an x-fastest `f64` grid.

use rayon::prelude::*;

use crate::volume::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Boundary {
    /// Out-of-range taps are dropped (no renormalization).
    Truncate,
    /// Out-of-range taps read the nearest edge sample.
    Replicate,
}

/// Correlates `src` with `kernel` (odd length, centered) along `axis`:
/// `dst[i] = sum_k kernel[k] * src[i + k - r]`.
pub(crate) fn convolve_axis(
    src: &[f64],
    dst: &mut [f64],
    dims: Dims,
    axis: usize,
    kernel: &[f64],
    boundary: Boundary,
) {
    debug_assert_eq!(kernel.len() % 2, 1);
    debug_assert_eq!(src.len(), dims.len());
    let r = kernel.len() / 2;
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    let slice_len = nx * ny;
    // Source line index read by tap `k` at `pos`, or `None` if dropped.
    let source = |pos: usize, k: usize, n: usize| -> Option<usize> {
        let q = pos as isize + k as isize - r as isize;
        if (0..n as isize).contains(&q) {
            Some(q as usize)
        } else {
            match boundary {
                Boundary::Truncate => None,
                Boundary::Replicate => Some(q.clamp(0, n as isize - 1) as usize),
            }
        }
    };
    let axpy = |out: &mut [f64], w: f64, line: &[f64]| {
        for (o, &v) in out.iter_mut().zip(line) {
            *o += w * v;
        }
    };

    dst.par_chunks_mut(slice_len).enumerate().for_each(|(z, out)| match axis {
        2 => {
            out.fill(0.0);
            for (k, &w) in kernel.iter().enumerate() {
                if let Some(q) = source(z, k, nz) {
                    axpy(out, w, &src[q * slice_len..(q + 1) * slice_len]);
                }
            }
        }
        1 => {
            let slice = &src[z * slice_len..(z + 1) * slice_len];
            for (y, row) in out.chunks_mut(nx).enumerate() {
                row.fill(0.0);
                for (k, &w) in kernel.iter().enumerate() {
                    if let Some(q) = source(y, k, ny) {
                        axpy(row, w, &slice[q * nx..(q + 1) * nx]);
                    }
                }
            }
        }
        _ => {
            let mut padded = vec![0.0; nx + 2 * r];
            for (y, row) in out.chunks_mut(nx).enumerate() {
                let line = &src[z * slice_len + y * nx..][..nx];
                for (j, p) in padded.iter_mut().enumerate() {
                    *p = source(j, 0, nx).map_or(0.0, |q| line[q]);
                }
                for (x, o) in row.iter_mut().enumerate() {
                    *o = kernel.iter().zip(&padded[x..]).map(|(w, v)| w * v).sum();
                }
            }
        }
    });
}

/// Applies one kernel per axis (x, then y, then z).
pub(crate) fn separable(
    src: &[f64],
    dims: Dims,
    kernels: [&[f64]; 3],
    boundary: Boundary,
) -> Vec<f64> {
    let mut a = src.to_vec();
    let mut b = vec![0.0; src.len()];
    for (axis, k) in kernels.iter().enumerate() {
        convolve_axis(&a, &mut b, dims, axis, k, boundary);
        std::mem::swap(&mut a, &mut b);
    }
    a
}

/// Unnormalized sampled Gaussian `exp(-k^2 / (2 sigma^2))` for `k` in `-radius..=radius`.
pub(crate) fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}
