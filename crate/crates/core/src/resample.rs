//! Trilinear resampling onto a fixed voxel grid, and spacing statistics
//! over a set of scans.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volio::{MetaHeader, Spacing, Volume};

/// Grid every scan is resampled to before patch extraction.
pub const DEFAULT_TARGET_SPACING: Spacing = Spacing {
    dx: 0.7,
    dy: 0.7,
    dz: 1.0,
};

/// Output extent for one axis: `round(n * spacing / target)`, at least 1.
pub fn resampled_extent(n: usize, spacing: f64, target: f64) -> usize {
    ((n as f64 * spacing / target).round() as usize).max(1)
}

/// Interpolates `v000..v111` at fractional offsets `(fx, fy, fz)` in `[0, 1]`.
#[inline]
pub fn trilerp<T: Scalar>(corners: [T; 8], fx: T, fy: T, fz: T) -> T {
    let one = T::one();
    let [c000, c100, c010, c110, c001, c101, c011, c111] = corners;
    let c00 = c000 * (one - fx) + c100 * fx;
    let c10 = c010 * (one - fx) + c110 * fx;
    let c01 = c001 * (one - fx) + c101 * fx;
    let c11 = c011 * (one - fx) + c111 * fx;
    let c0 = c00 * (one - fy) + c10 * fy;
    let c1 = c01 * (one - fy) + c11 * fy;
    c0 * (one - fz) + c1 * fz
}

/// Splits a clamped source coordinate into lower index, upper index and fraction.
#[inline]
fn axis_sample(coord: f64, n: usize) -> (usize, usize, f64) {
    let c = coord.clamp(0.0, (n - 1) as f64);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, c - lo as f64)
}

/// Samples `volume` at continuous voxel coordinates, replicating edge voxels.
pub fn sample_trilinear(volume: &Volume, coord: [f64; 3]) -> f64 {
    let [nx, ny, nz] = volume.dims();
    let (x0, x1, fx) = axis_sample(coord[0], nx);
    let (y0, y1, fy) = axis_sample(coord[1], ny);
    let (z0, z1, fz) = axis_sample(coord[2], nz);
    let g = |i, j, k| volume.get(i, j, k) as f64;
    trilerp(
        [
            g(x0, y0, z0),
            g(x1, y0, z0),
            g(x0, y1, z0),
            g(x1, y1, z0),
            g(x0, y0, z1),
            g(x1, y0, z1),
            g(x0, y1, z1),
            g(x1, y1, z1),
        ],
        fx,
        fy,
        fz,
    )
}

/// Resamples `volume` onto `target` spacing, keeping its origin.
///
/// Output voxel `n` along an axis samples the source at `n * target / spacing`,
/// clamped to the source grid.
pub fn resample_trilinear(volume: &Volume, target: Spacing) -> Result<Volume> {
    let target = Spacing::new(target.dx, target.dy, target.dz)?;
    let src_dims = volume.dims();
    let src_sp = volume.spacing().as_array();
    let tgt = target.as_array();
    let out_dims: [usize; 3] =
        std::array::from_fn(|a| resampled_extent(src_dims[a], src_sp[a], tgt[a]));
    let ratio: [f64; 3] = std::array::from_fn(|a| tgt[a] / src_sp[a]);

    let [ox, oy, oz] = out_dims;
    let mut data = vec![0f32; ox * oy * oz];
    data.par_chunks_mut(ox * oy)
        .enumerate()
        .for_each(|(k, slice)| {
            let sz = k as f64 * ratio[2];
            for j in 0..oy {
                let sy = j as f64 * ratio[1];
                for i in 0..ox {
                    let sx = i as f64 * ratio[0];
                    slice[i + ox * j] = sample_trilinear(volume, [sx, sy, sz]) as f32;
                }
            }
        });
    Volume::new(out_dims, target, volume.origin(), data)
}

/// Histogram of one axis' spacing plus its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisHistogram {
    /// `counts.len() + 1` ascending bin edges in millimeters.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
}

/// Per-axis spacing statistics over a set of volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpacingStats {
    pub axes: [AxisHistogram; 3],
}

/// Bins covering `[0, 3]` mm by default; the range extends to hold larger spacings.
pub fn analyze_spacing(spacings: &[Spacing], bin_width: f64) -> Result<SpacingStats> {
    if spacings.is_empty() {
        return Err(Error::invalid("spacing statistics need at least one volume"));
    }
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(Error::invalid(format!("bin width must be positive, got {bin_width}")));
    }
    let axes = std::array::from_fn(|a| {
        let values: Vec<f64> = spacings.iter().map(|s| s.as_array()[a]).collect();
        let bin_of = |v: f64| (v / bin_width + 1e-9).floor() as usize;
        let max_bin = values.iter().map(|&v| bin_of(v)).max().unwrap_or(0);
        let n_bins = ((3.0 / bin_width - 1e-9).ceil() as usize).max(max_bin + 1);
        let mut counts = vec![0usize; n_bins];
        for &v in &values {
            counts[bin_of(v)] += 1;
        }
        let edges = (0..=n_bins).map(|i| i as f64 * bin_width).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        AxisHistogram { edges, counts, mean }
    });
    Ok(SpacingStats { axes })
}

pub fn analyze_headers(headers: &[MetaHeader], bin_width: f64) -> Result<SpacingStats> {
    let spacings: Vec<Spacing> = headers.iter().map(|h| h.spacing).collect();
    analyze_spacing(&spacings, bin_width)
}

impl SpacingStats {
    /// CSV with `axis,bin_lo,bin_hi,count` rows followed by `axis,mean` rows.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let names = ["x", "y", "z"];
        let mut out = String::from("axis,bin_lo,bin_hi,count\n");
        for (name, h) in names.iter().zip(&self.axes) {
            for (i, c) in h.counts.iter().enumerate() {
                let _ = writeln!(out, "{name},{:.4},{:.4},{c}", h.edges[i], h.edges[i + 1]);
            }
        }
        out.push_str("axis,mean\n");
        for (name, h) in names.iter().zip(&self.axes) {
            let _ = writeln!(out, "{name},{:.6}", h.mean);
        }
        out
    }
}
