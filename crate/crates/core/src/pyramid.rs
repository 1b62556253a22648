//! Gaussian smoothing, resampling and multi-resolution pyramids.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::spline::{mirror_index, prefilter_cubic, SampleScratch};
use crate::volume::{Grid, Volume};

/// How pyramid levels are derived from the native image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PyramidStrategy {
    /// Gaussian smoothing followed by resampling to the level spacing.
    Full,
    /// Resampling to the level spacing without smoothing.
    DownsampleOnly,
    /// Smoothing matched to the level spacing, kept on the native grid.
    SmoothOnly,
    /// Every level is the native image.
    None,
}

impl PyramidStrategy {
    pub const ALL: [PyramidStrategy; 4] = [
        PyramidStrategy::Full,
        PyramidStrategy::DownsampleOnly,
        PyramidStrategy::SmoothOnly,
        PyramidStrategy::None,
    ];

    fn smooths(self) -> bool {
        matches!(self, PyramidStrategy::Full | PyramidStrategy::SmoothOnly)
    }

    fn resamples(self) -> bool {
        matches!(self, PyramidStrategy::Full | PyramidStrategy::DownsampleOnly)
    }
}

impl fmt::Display for PyramidStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PyramidStrategy::Full => "full",
            PyramidStrategy::DownsampleOnly => "downsample",
            PyramidStrategy::SmoothOnly => "smooth",
            PyramidStrategy::None => "none",
        })
    }
}

impl FromStr for PyramidStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(PyramidStrategy::Full),
            "downsample" | "downsample-only" => Ok(PyramidStrategy::DownsampleOnly),
            "smooth" | "smooth-only" => Ok(PyramidStrategy::SmoothOnly),
            "none" => Ok(PyramidStrategy::None),
            _ => Err(Error::Choice {
                key: "PyramidStrategy".into(),
                choices: "full, downsample, smooth, none".into(),
                found: s.into(),
            }),
        }
    }
}

/// Normalized, truncated Gaussian kernel with `sigma` in samples.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian smoothing with per-axis `sigma` in voxels and mirror
/// boundaries. Axes with `sigma <= 0` are left untouched.
pub fn gaussian_smooth(vol: &Volume, sigma: [f64; 3]) -> Volume {
    let grid = vol.grid;
    let nc = vol.channels;
    let [nx, ny, _] = grid.dims;
    let stride = [nc, nx * nc, nx * ny * nc];
    let mut work: Vec<f64> = vol.data.iter().map(|&v| v as f64).collect();
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = grid.dims[axis];
        if sigma[axis] <= 0.0 || n < 2 {
            continue;
        }
        let kernel = gaussian_kernel(sigma[axis]);
        let radius = (kernel.len() / 2) as isize;
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..grid.dims[ob] {
            for a in 0..grid.dims[oa] {
                for c in 0..nc {
                    let start = a * stride[oa] + b * stride[ob] + c;
                    line.clear();
                    line.extend((0..n).map(|i| work[start + i * stride[axis]]));
                    for i in 0..n {
                        let mut s = 0.0;
                        for (t, kv) in kernel.iter().enumerate() {
                            let src = mirror_index(i as isize + t as isize - radius, n);
                            s += kv * line[src];
                        }
                        work[start + i * stride[axis]] = s;
                    }
                }
            }
        }
    }
    Volume {
        grid,
        channels: nc,
        data: work.into_iter().map(|v| v as f32).collect(),
    }
}

/// Grid with the requested spacing covering the same physical extent as
/// `grid`, centered on it.
pub fn grid_with_spacing(grid: &Grid, spacing: [f64; 3]) -> Grid {
    let extent = grid.extent();
    let mut dims = [1usize; 3];
    let mut origin = grid.origin;
    for a in 0..3 {
        dims[a] = (extent[a] / spacing[a] + 1e-9).floor() as usize + 1;
        origin[a] = grid.origin[a] + 0.5 * (extent[a] - (dims[a] - 1) as f64 * spacing[a]);
    }
    Grid {
        dims,
        spacing,
        origin,
    }
}

/// Resamples a volume onto `target` by cubic B-spline interpolation.
/// Target points outside the source bounds take `background`.
pub fn resample(vol: &Volume, target: Grid, background: f32) -> Result<Volume> {
    if target == vol.grid {
        return Ok(vol.clone());
    }
    let coeffs = prefilter_cubic(vol)?;
    let mut scratch = SampleScratch::default();
    let mut values = Vec::new();
    let mut data = Vec::with_capacity(target.len() * vol.channels);
    for k in 0..target.dims[2] {
        for j in 0..target.dims[1] {
            for i in 0..target.dims[0] {
                let p = target.world(i, j, k);
                match coeffs.sample_value_with(&mut scratch, p, &mut values) {
                    Ok(()) => data.extend(values.iter().map(|&v| v as f32)),
                    Err(_) => data.extend(std::iter::repeat(background).take(vol.channels)),
                }
            }
        }
    }
    Volume::new(target, vol.channels, data)
}

/// Smoothing sigma (voxels) matched to a spacing change.
pub fn matched_sigma(native: [f64; 3], target: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| {
        let factor = target[a] / native[a];
        if factor > 1.0 {
            0.5 * factor
        } else {
            0.0
        }
    })
}

/// Builds one level per entry of `schedule` (isotropic target spacing in mm,
/// coarse to fine).
pub fn build_pyramid(vol: &Volume, schedule: &[f64], strategy: PyramidStrategy) -> Result<Vec<Volume>> {
    if schedule.is_empty() {
        return Err(Error::Config("pyramid schedule is empty".into()));
    }
    if let Some(s) = schedule.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Config(format!("pyramid spacing must be positive, found {s}")));
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!(
            "pyramid schedule must be strictly decreasing: {schedule:?}"
        )));
    }
    schedule
        .iter()
        .map(|&s| build_level(vol, [s; 3], strategy))
        .collect()
}

/// A single pyramid level at an explicit (possibly anisotropic) spacing.
pub fn build_level(vol: &Volume, spacing: [f64; 3], strategy: PyramidStrategy) -> Result<Volume> {
    let native = vol.grid.spacing;
    let smoothed = if strategy.smooths() {
        gaussian_smooth(vol, matched_sigma(native, spacing))
    } else {
        vol.clone()
    };
    if strategy.resamples() {
        resample(&smoothed, grid_with_spacing(&vol.grid, spacing), 0.0)
    } else {
        Ok(smoothed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, s: f64) -> Grid {
        Grid::new([n; 3], [s; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn empty_and_non_decreasing_schedules_are_rejected() {
        let v = Volume::filled(grid(4, 1.0), 1, 1.0);
        assert!(build_pyramid(&v, &[], PyramidStrategy::Full).is_err());
        assert!(build_pyramid(&v, &[1.0, 2.0], PyramidStrategy::Full).is_err());
    }

    #[test]
    fn native_schedule_without_smoothing_is_identity() {
        let v = Volume::from_fn(grid(6, 1.5), |p| (p[0] * p[1] - p[2]) as f32);
        let levels = build_pyramid(&v, &[1.5], PyramidStrategy::DownsampleOnly).unwrap();
        assert_eq!(levels[0], v);
    }

    #[test]
    fn constants_survive_every_strategy() {
        let v = Volume::filled(grid(20, 1.0), 1, 3.5);
        for strategy in PyramidStrategy::ALL {
            for level in build_pyramid(&v, &[6.0, 3.0, 1.5, 1.0], strategy).unwrap() {
                assert!(level.data.iter().all(|&x| (x - 3.5).abs() < 1e-5), "{strategy}");
            }
        }
    }

    #[test]
    fn level_sizes_follow_extent() {
        let v = Volume::filled(grid(61, 1.0), 1, 0.0);
        let levels = build_pyramid(&v, &[6.0, 3.0, 1.5, 1.0], PyramidStrategy::Full).unwrap();
        let dims: Vec<usize> = levels.iter().map(|l| l.grid.dims[0]).collect();
        assert_eq!(dims, vec![11, 21, 41, 61]);
        for l in &levels {
            let c = l.grid.center();
            assert!((c[0] - 30.0).abs() < 1e-9);
        }
    }

    #[test]
    fn smooth_only_keeps_native_grid() {
        let v = Volume::from_fn(grid(12, 1.0), |p| p[0] as f32);
        let l = build_level(&v, [4.0; 3], PyramidStrategy::SmoothOnly).unwrap();
        assert_eq!(l.grid, v.grid);
        assert_ne!(l.data, v.data);
    }

    #[test]
    fn kernel_is_normalized() {
        for s in [0.5, 1.0, 3.0] {
            assert!((gaussian_kernel(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
