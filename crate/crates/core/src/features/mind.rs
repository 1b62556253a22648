//! Modality independent neighbourhood descriptor (six-neighbourhood variant).
//!
//! For a center voxel `c` and each of the six axis-aligned offsets `o` of
//! length `d`, the patch distance `D_o` is the weighted sum of squared
//! differences between the dilated `(2r+1)^3` patches around `c` and `c + o`.
//! The descriptor is `exp(-(D_o - min D) / V)` with `V` the mean of the six
//! distances, floored at `1e-6 * range^2`. `range` is the dynamic range of the
//! whole image when the kernel knows it (see [`MindKernel::with_intensity_range`])
//! and otherwise the span of the voxels the descriptor reads. The subtraction of `min D` normalizes the largest channel
//! to exactly one.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MIND_CHANNELS: usize = 6;

const VARIANCE_FLOOR: f64 = 1e-6;
const ABSOLUTE_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchWeighting {
    Box,
    Gaussian,
}

impl fmt::Display for PatchWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchWeighting::Box => "box",
            PatchWeighting::Gaussian => "gaussian",
        })
    }
}

impl FromStr for PatchWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "box" => Ok(PatchWeighting::Box),
            "gaussian" => Ok(PatchWeighting::Gaussian),
            _ => Err(Error::Choice {
                key: "MindPatchWeighting".into(),
                choices: "box, gaussian".into(),
                found: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MindConfig {
    pub radius: usize,
    pub dilation: usize,
    pub weighting: PatchWeighting,
}

impl Default for MindConfig {
    fn default() -> Self {
        MindConfig {
            radius: 1,
            dilation: 1,
            weighting: PatchWeighting::Box,
        }
    }
}

impl MindConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 || self.dilation < 1 {
            return Err(Error::Config(format!(
                "MIND radius and dilation must be >= 1, found r={} d={}",
                self.radius, self.dilation
            )));
        }
        Ok(())
    }

    /// Extent of the dilated comparison patch, `2rd + 1`.
    pub fn field_of_view(&self) -> usize {
        2 * self.radius * self.dilation + 1
    }

    /// Largest distance (voxels) from the center read by the descriptor.
    pub fn reach(&self) -> usize {
        self.radius * self.dilation + self.dilation
    }

    /// Smallest patch extent per axis that fits the descriptor at its center.
    pub fn min_patch_extent(&self) -> usize {
        self.field_of_view() + 2 * self.dilation
    }
}

/// Precomputed offsets and weights for one configuration.
#[derive(Debug, Clone)]
pub struct MindKernel {
    config: MindConfig,
    taps: Vec<([isize; 3], f64)>,
    neighbours: [[isize; 3]; MIND_CHANNELS],
    range: Option<f64>,
}

/// A dense local array the descriptor reads from (x fastest, channel interleaved).
#[derive(Debug, Clone, Copy)]
pub struct LocalView<'a> {
    pub data: &'a [f64],
    pub dims: [usize; 3],
    pub channels: usize,
}

impl LocalView<'_> {
    #[inline]
    fn offset(&self, p: [isize; 3]) -> usize {
        debug_assert!((0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a]));
        (((p[2] as usize) * self.dims[1] + p[1] as usize) * self.dims[0] + p[0] as usize) * self.channels
    }
}

/// Intermediate results of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
struct Forward {
    distances: [f64; MIND_CHANNELS],
    descriptor: [f64; MIND_CHANNELS],
    variance: f64,
    argmin: usize,
    floor: Floor,
}

#[derive(Debug, Clone, Copy)]
enum Floor {
    /// `V` is the mean distance.
    Mean,
    /// `V = 1e-6 * (max - min)^2`, with the offsets of the extreme values.
    Range { max_at: usize, min_at: usize, range: f64 },
    /// `V = 1e-6 * range^2` with a range fixed in advance.
    Constant,
    Absolute,
}

impl MindKernel {
    pub fn new(config: MindConfig) -> Result<Self> {
        config.validate()?;
        let r = config.radius as isize;
        let d = config.dilation as isize;
        let mut taps = Vec::new();
        let sigma = (config.radius * config.dilation) as f64;
        for k in -r..=r {
            for j in -r..=r {
                for i in -r..=r {
                    let q = [i * d, j * d, k * d];
                    let w = match config.weighting {
                        PatchWeighting::Box => 1.0,
                        PatchWeighting::Gaussian => {
                            let r2 = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]) as f64;
                            (-0.5 * r2 / (sigma * sigma)).exp()
                        }
                    };
                    taps.push((q, w));
                }
            }
        }
        let total: f64 = taps.iter().map(|t| t.1).sum();
        for t in &mut taps {
            t.1 /= total;
        }
        let neighbours = [
            [d, 0, 0],
            [-d, 0, 0],
            [0, d, 0],
            [0, -d, 0],
            [0, 0, d],
            [0, 0, -d],
        ];
        Ok(MindKernel {
            config,
            taps,
            neighbours,
            range: None,
        })
    }

    /// Uses the dynamic range of the whole image for the variance floor.
    /// Without it a nearly flat patch (interpolation round-off only) would be
    /// normalized by its own noise and yield an arbitrary descriptor.
    pub fn with_intensity_range(mut self, range: f64) -> Self {
        self.range = (range.is_finite() && range > 0.0).then_some(range);
        self
    }

    pub fn intensity_range(&self) -> Option<f64> {
        self.range
    }

    pub fn config(&self) -> &MindConfig {
        &self.config
    }

    /// Checks that a patch of the given size holds the descriptor of its center.
    pub fn check_patch_size(&self, size: [usize; 3]) -> Result<()> {
        let need = self.config.min_patch_extent();
        for (a, &s) in size.iter().enumerate() {
            if s % 2 == 0 {
                return Err(Error::Config(format!(
                    "MIND patch extent must be odd, axis {a} has {s}"
                )));
            }
            if s < need {
                return Err(Error::Config(format!(
                    "patch extent {s} along axis {a} is too small for MIND r={} d={} (needs {need})",
                    self.config.radius, self.config.dilation
                )));
            }
        }
        Ok(())
    }

    fn forward(&self, view: &LocalView<'_>, center: [isize; 3]) -> Forward {
        let nc = view.channels;
        let base = view.offset(center);
        let mut distances = [0.0; MIND_CHANNELS];
        let (mut vmax, mut vmin) = (f64::NEG_INFINITY, f64::INFINITY);
        let (mut max_at, mut min_at) = (base, base);
        let mut track = |idx: usize, v: f64| {
            if v > vmax {
                vmax = v;
                max_at = idx;
            }
            if v < vmin {
                vmin = v;
                min_at = idx;
            }
        };
        for (n, o) in self.neighbours.iter().enumerate() {
            let mut dist = 0.0;
            for (q, w) in &self.taps {
                let a = view.offset([center[0] + q[0], center[1] + q[1], center[2] + q[2]]);
                let b = view.offset([center[0] + q[0] + o[0], center[1] + q[1] + o[1], center[2] + q[2] + o[2]]);
                let mut s = 0.0;
                for c in 0..nc {
                    let va = view.data[a + c];
                    let vb = view.data[b + c];
                    if n == 0 {
                        track(a + c, va);
                    }
                    track(b + c, vb);
                    let diff = va - vb;
                    s += diff * diff;
                }
                dist += w * s;
            }
            distances[n] = dist;
        }
        let mean = distances.iter().sum::<f64>() / MIND_CHANNELS as f64;
        let range = self.range.unwrap_or(vmax - vmin);
        let range_floor = VARIANCE_FLOOR * range * range;
        let (variance, floor) = if mean >= range_floor && mean > ABSOLUTE_FLOOR {
            (mean, Floor::Mean)
        } else if self.range.is_some() && range_floor > ABSOLUTE_FLOOR {
            (range_floor, Floor::Constant)
        } else if range_floor > ABSOLUTE_FLOOR {
            (
                range_floor,
                Floor::Range {
                    max_at,
                    min_at,
                    range,
                },
            )
        } else {
            (ABSOLUTE_FLOOR, Floor::Absolute)
        };
        let mut argmin = 0;
        for n in 1..MIND_CHANNELS {
            if distances[n] < distances[argmin] {
                argmin = n;
            }
        }
        let dmin = distances[argmin];
        let descriptor = std::array::from_fn(|n| (-(distances[n] - dmin) / variance).exp());
        Forward {
            distances,
            descriptor,
            variance,
            argmin,
            floor,
        }
    }

    /// Descriptor at `center` of a local array.
    pub fn descriptor(&self, view: &LocalView<'_>, center: [isize; 3]) -> [f64; MIND_CHANNELS] {
        self.forward(view, center).descriptor
    }

    /// Accumulates `d(upstream . descriptor) / d(view)` into `grad`
    /// (same layout as `view.data`).
    pub fn backward(
        &self,
        view: &LocalView<'_>,
        center: [isize; 3],
        upstream: &[f64],
        grad: &mut [f64],
    ) -> [f64; MIND_CHANNELS] {
        let fwd = self.forward(view, center);
        let v = fwd.variance;
        let dmin = fwd.distances[fwd.argmin];
        let mut sum_ge = 0.0;
        let mut sum_gea = 0.0;
        for n in 0..MIND_CHANNELS {
            let ge = upstream[n] * fwd.descriptor[n];
            sum_ge += ge;
            sum_gea += ge * (fwd.distances[n] - dmin) / v;
        }
        // Sensitivity of the loss to each patch distance and to V.
        let mut d_dist = [0.0; MIND_CHANNELS];
        for n in 0..MIND_CHANNELS {
            d_dist[n] = -upstream[n] * fwd.descriptor[n] / v;
        }
        d_dist[fwd.argmin] += sum_ge / v;
        let d_var = sum_gea / v;
        match fwd.floor {
            Floor::Mean => {
                for d in &mut d_dist {
                    *d += d_var / MIND_CHANNELS as f64;
                }
            }
            Floor::Range {
                max_at,
                min_at,
                range,
            } => {
                let g = d_var * 2.0 * VARIANCE_FLOOR * range;
                grad[max_at] += g;
                grad[min_at] -= g;
            }
            Floor::Constant | Floor::Absolute => {}
        }
        let nc = view.channels;
        for (n, o) in self.neighbours.iter().enumerate() {
            let dd = d_dist[n];
            if dd == 0.0 {
                continue;
            }
            for (q, w) in &self.taps {
                let a = view.offset([center[0] + q[0], center[1] + q[1], center[2] + q[2]]);
                let b = view.offset([center[0] + q[0] + o[0], center[1] + q[1] + o[1], center[2] + q[2] + o[2]]);
                for c in 0..nc {
                    let diff = view.data[a + c] - view.data[b + c];
                    let g = 2.0 * w * diff * dd;
                    grad[a + c] += g;
                    grad[b + c] -= g;
                }
            }
        }
        fwd.descriptor
    }
}
