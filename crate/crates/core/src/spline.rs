//! Cubic B-spline interpolation of volumes.
//!
//! A [`SplineCoefficientVolume`] holds interpolation coefficients obtained by
//! recursive prefiltering with whole-sample mirror boundaries. Evaluation is
//! done on tensor grids of points (one coordinate list per axis) so that a
//! regular patch costs three separable 1D passes instead of 64 taps per point;
//! a single point is the 1x1x1 special case and shares the exact arithmetic.

use std::fmt;

use crate::error::{Error, Result};
use crate::volume::{Grid, Point3, Volume};

/// Pole of the cubic B-spline interpolation filter, `sqrt(3) - 2`.
const POLE: f64 = -0.267_949_192_431_122_7;

/// Cubic B-spline weights for the four taps `floor(u)-1 ..= floor(u)+2`,
/// where `t = u - floor(u)`.
#[inline]
pub fn cubic_weights(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    let t2 = t * t;
    let t3 = t2 * t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// First derivative of [`cubic_weights`] with respect to `t`.
#[inline]
pub fn cubic_weights_d1(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    let t2 = t * t;
    [
        -0.5 * s * s,
        1.5 * t2 - 2.0 * t,
        -1.5 * t2 + t + 0.5,
        0.5 * t2,
    ]
}

/// Second derivative of [`cubic_weights`] with respect to `t`.
#[inline]
pub fn cubic_weights_d2(t: f64) -> [f64; 4] {
    [1.0 - t, 3.0 * t - 2.0, -3.0 * t + 1.0, t]
}

/// Centered cubic B-spline `B3(x)`.
pub fn cubic_bspline(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let s = 2.0 - a;
        s * s * s / 6.0
    } else {
        0.0
    }
}

/// Whole-sample symmetric extension of an index into `0..n`.
#[inline]
pub fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Signals that an interpolation point lies outside the volume's physical bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutOfDomain {
    pub point: Point3,
}

impl fmt::Display for OutOfDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "point {:?} lies outside the volume bounds", self.point)
    }
}

impl std::error::Error for OutOfDomain {}

/// In-place interpolation prefilter of one line of samples.
pub fn prefilter_line(line: &mut [f64]) {
    let n = line.len();
    if n < 2 {
        return;
    }
    let z = POLE;
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    for v in line.iter_mut() {
        *v *= gain;
    }
    // Causal initialization over the full mirrored period.
    let period = 2 * n - 2;
    let mut sum = 0.0;
    let mut zk = 1.0;
    for k in 0..period {
        sum += zk * line[mirror_index(k as isize, n)];
        zk *= z;
    }
    line[0] = sum / (1.0 - zk);
    for k in 1..n {
        line[k] += z * line[k - 1];
    }
    line[n - 1] = (z / (z * z - 1.0)) * (line[n - 1] + z * line[n - 2]);
    for k in (0..n - 1).rev() {
        line[k] = z * (line[k + 1] - line[k]);
    }
}

/// Cubic B-spline coefficients of a volume, ready for continuous sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCoefficientVolume {
    pub grid: Grid,
    pub channels: usize,
    pub coeffs: Vec<f32>,
}

/// Interpolation prefilter: computes coefficients whose cubic B-spline
/// reconstruction passes through every voxel value.
pub fn prefilter_cubic(vol: &Volume) -> Result<SplineCoefficientVolume> {
    vol.check_finite()
        .map_err(|e| Error::InvalidData(format!("cannot prefilter volume: {e}")))?;
    let grid = vol.grid;
    let nc = vol.channels;
    let [nx, ny, _] = grid.dims;
    let mut work: Vec<f64> = vol.data.iter().map(|&v| v as f64).collect();
    let mut line = Vec::new();
    let stride = [nc, nx * nc, nx * ny * nc];
    for axis in 0..3 {
        let n = grid.dims[axis];
        if n < 2 {
            continue;
        }
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
                    prefilter_line(&mut line);
                    for (i, &v) in line.iter().enumerate() {
                        work[start + i * stride[axis]] = v;
                    }
                }
            }
        }
    }
    Ok(SplineCoefficientVolume {
        grid,
        channels: nc,
        coeffs: work.into_iter().map(|v| v as f32).collect(),
    })
}

/// Taps along one axis for a list of continuous indices.
#[derive(Debug, Default, Clone)]
struct AxisTaps {
    base: Vec<isize>,
    w: Vec<[f64; 4]>,
    dw: Vec<[f64; 4]>,
    lo: isize,
    len: usize,
}

impl AxisTaps {
    fn fill(&mut self, u: &[f64], derivative: bool) {
        self.base.clear();
        self.w.clear();
        self.dw.clear();
        let mut lo = isize::MAX;
        let mut hi = isize::MIN;
        for &ui in u {
            let f = ui.floor();
            let t = ui - f;
            let b = f as isize - 1;
            lo = lo.min(b);
            hi = hi.max(b + 3);
            self.base.push(b);
            self.w.push(cubic_weights(t));
            if derivative {
                self.dw.push(cubic_weights_d1(t));
            }
        }
        self.lo = lo;
        self.len = (hi - lo + 1) as usize;
    }
}

/// Reusable buffers for tensor-grid evaluation.
#[derive(Debug, Default, Clone)]
pub struct SampleScratch {
    taps: [AxisTaps; 3],
    block: Vec<f64>,
    mirror: [Vec<usize>; 3],
    vx: Vec<f64>,
    dvx: Vec<f64>,
    vxy: Vec<f64>,
    dxy: Vec<f64>,
    xdy: Vec<f64>,
    coords: [Vec<f64>; 3],
}

/// Axis-aligned regular patch geometry: `size` points per axis spaced by
/// `resolution` mm, centered on the patch center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchGeometry {
    pub size: [usize; 3],
    pub resolution: [f64; 3],
}

impl PatchGeometry {
    pub fn single() -> Self {
        PatchGeometry {
            size: [1, 1, 1],
            resolution: [1.0; 3],
        }
    }

    pub fn len(&self) -> usize {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset (mm) of patch index `j` along `axis` from the center.
    #[inline]
    pub fn offset(&self, axis: usize, j: usize) -> f64 {
        (j as f64 - (self.size[axis] - 1) as f64 * 0.5) * self.resolution[axis]
    }

    /// Half extent of the patch along each axis (mm).
    pub fn half_extent(&self) -> [f64; 3] {
        [
            self.offset(0, self.size[0] - 1),
            self.offset(1, self.size[1] - 1),
            self.offset(2, self.size[2] - 1),
        ]
    }

    /// World coordinates of every patch point, x fastest.
    pub fn points(&self, center: Point3) -> Vec<Point3> {
        let mut out = Vec::with_capacity(self.len());
        for k in 0..self.size[2] {
            for j in 0..self.size[1] {
                for i in 0..self.size[0] {
                    out.push([
                        center[0] + self.offset(0, i),
                        center[1] + self.offset(1, j),
                        center[2] + self.offset(2, k),
                    ]);
                }
            }
        }
        out
    }
}

/// A resampled patch: values on a regular grid, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn new(size: [usize; 3], channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), size[0] * size[1] * size[2] * channels);
        Patch {
            size,
            channels,
            data,
        }
    }

    pub fn voxels(&self) -> usize {
        self.size[0] * self.size[1] * self.size[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.size[1] + j) * self.size[0] + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, c: usize) -> f64 {
        self.data[self.index(i, j, k) * self.channels + c]
    }
}

impl SplineCoefficientVolume {
    /// Evaluates the spline on the tensor grid `ux x uy x uz` of continuous
    /// indices. All coordinates must already be inside the lattice.
    pub fn eval_tensor(
        &self,
        scratch: &mut SampleScratch,
        u: [&[f64]; 3],
        gradient: bool,
        out_values: &mut Vec<f64>,
        out_gradients: &mut Vec<f64>,
    ) {
        let nc = self.channels;
        let dims = self.grid.dims;
        let [px, py, pz] = [u[0].len(), u[1].len(), u[2].len()];
        for a in 0..3 {
            scratch.taps[a].fill(u[a], gradient);
            let taps = &scratch.taps[a];
            let m = &mut scratch.mirror[a];
            m.clear();
            m.extend((0..taps.len).map(|i| mirror_index(taps.lo + i as isize, dims[a])));
        }
        let [bx, by, bz] = [scratch.taps[0].len, scratch.taps[1].len, scratch.taps[2].len];

        scratch.block.clear();
        scratch.block.reserve(bx * by * bz * nc);
        for z in 0..bz {
            let kz = scratch.mirror[2][z];
            for y in 0..by {
                let jy = scratch.mirror[1][y];
                let row = (kz * dims[1] + jy) * dims[0];
                for x in 0..bx {
                    let base = (row + scratch.mirror[0][x]) * nc;
                    scratch
                        .block
                        .extend(self.coeffs[base..base + nc].iter().map(|&v| v as f64));
                }
            }
        }

        // Pass along x.
        let tx = &scratch.taps[0];
        scratch.vx.clear();
        scratch.vx.resize(bz * by * px * nc, 0.0);
        if gradient {
            scratch.dvx.clear();
            scratch.dvx.resize(bz * by * px * nc, 0.0);
        }
        for zy in 0..bz * by {
            let row = zy * bx * nc;
            for jx in 0..px {
                let off = (tx.base[jx] - tx.lo) as usize;
                let w = &tx.w[jx];
                let dst = (zy * px + jx) * nc;
                for c in 0..nc {
                    let mut s = 0.0;
                    for (a, wa) in w.iter().enumerate() {
                        s += wa * scratch.block[row + (off + a) * nc + c];
                    }
                    scratch.vx[dst + c] = s;
                }
                if gradient {
                    let dw = &tx.dw[jx];
                    for c in 0..nc {
                        let mut s = 0.0;
                        for (a, wa) in dw.iter().enumerate() {
                            s += wa * scratch.block[row + (off + a) * nc + c];
                        }
                        scratch.dvx[dst + c] = s;
                    }
                }
            }
        }

        // Pass along y.
        let ty = &scratch.taps[1];
        let plane = py * px * nc;
        scratch.vxy.clear();
        scratch.vxy.resize(bz * plane, 0.0);
        if gradient {
            scratch.dxy.clear();
            scratch.dxy.resize(bz * plane, 0.0);
            scratch.xdy.clear();
            scratch.xdy.resize(bz * plane, 0.0);
        }
        for z in 0..bz {
            for jy in 0..py {
                let off = (ty.base[jy] - ty.lo) as usize;
                let w = &ty.w[jy];
                for jx in 0..px {
                    let dst = z * plane + (jy * px + jx) * nc;
                    for c in 0..nc {
                        let mut s = 0.0;
                        for (b, wb) in w.iter().enumerate() {
                            s += wb * scratch.vx[((z * by + off + b) * px + jx) * nc + c];
                        }
                        scratch.vxy[dst + c] = s;
                    }
                    if gradient {
                        let dw = &ty.dw[jy];
                        for c in 0..nc {
                            let mut s = 0.0;
                            let mut s2 = 0.0;
                            for b in 0..4 {
                                let idx = ((z * by + off + b) * px + jx) * nc + c;
                                s += w[b] * scratch.dvx[idx];
                                s2 += dw[b] * scratch.vx[idx];
                            }
                            scratch.dxy[dst + c] = s;
                            scratch.xdy[dst + c] = s2;
                        }
                    }
                }
            }
        }

        // Pass along z.
        let tz = &scratch.taps[2];
        let n_out = pz * plane;
        out_values.clear();
        out_values.resize(n_out, 0.0);
        if gradient {
            out_gradients.clear();
            out_gradients.resize(n_out * 3, 0.0);
        }
        let inv = [
            1.0 / self.grid.spacing[0],
            1.0 / self.grid.spacing[1],
            1.0 / self.grid.spacing[2],
        ];
        for jz in 0..pz {
            let off = (tz.base[jz] - tz.lo) as usize;
            let w = &tz.w[jz];
            for e in 0..plane {
                let mut s = 0.0;
                for (c, wc) in w.iter().enumerate() {
                    s += wc * scratch.vxy[(off + c) * plane + e];
                }
                out_values[jz * plane + e] = s;
            }
            if gradient {
                let dw = &tz.dw[jz];
                for e in 0..plane {
                    let (mut gx, mut gy, mut gz) = (0.0, 0.0, 0.0);
                    for c in 0..4 {
                        let idx = (off + c) * plane + e;
                        gx += w[c] * scratch.dxy[idx];
                        gy += w[c] * scratch.xdy[idx];
                        gz += dw[c] * scratch.vxy[idx];
                    }
                    let o = (jz * plane + e) * 3;
                    out_gradients[o] = gx * inv[0];
                    out_gradients[o + 1] = gy * inv[1];
                    out_gradients[o + 2] = gz * inv[2];
                }
            }
        }
    }

    fn check_point(&self, p: Point3) -> std::result::Result<[f64; 3], OutOfDomain> {
        let u = self.grid.continuous_index(p);
        if self.grid.index_in_bounds(u) {
            Ok(clamp_index(u, &self.grid))
        } else {
            Err(OutOfDomain { point: p })
        }
    }

    /// Interpolated value of every channel at a world point.
    pub fn sample_value(&self, p: Point3) -> std::result::Result<Vec<f64>, OutOfDomain> {
        let mut scratch = SampleScratch::default();
        let mut values = Vec::new();
        self.sample_value_with(&mut scratch, p, &mut values)?;
        Ok(values)
    }

    pub fn sample_value_with(
        &self,
        scratch: &mut SampleScratch,
        p: Point3,
        values: &mut Vec<f64>,
    ) -> std::result::Result<(), OutOfDomain> {
        let u = self.check_point(p)?;
        let mut unused = Vec::new();
        self.eval_tensor(scratch, [&[u[0]], &[u[1]], &[u[2]]], false, values, &mut unused);
        Ok(())
    }

    /// Spatial gradient (value per mm) of every channel at a world point,
    /// three components per channel.
    pub fn sample_gradient(&self, p: Point3) -> std::result::Result<Vec<f64>, OutOfDomain> {
        let mut scratch = SampleScratch::default();
        let (mut v, mut g) = (Vec::new(), Vec::new());
        self.sample_value_gradient_with(&mut scratch, p, &mut v, &mut g)?;
        Ok(g)
    }

    pub fn sample_value_gradient_with(
        &self,
        scratch: &mut SampleScratch,
        p: Point3,
        values: &mut Vec<f64>,
        gradients: &mut Vec<f64>,
    ) -> std::result::Result<(), OutOfDomain> {
        let u = self.check_point(p)?;
        self.eval_tensor(scratch, [&[u[0]], &[u[1]], &[u[2]]], true, values, gradients);
        Ok(())
    }

    /// Whether every point of a patch centered at `center` is inside the bounds.
    pub fn patch_in_bounds(&self, center: Point3, geom: &PatchGeometry) -> bool {
        let h = geom.half_extent();
        self.grid.contains([center[0] - h[0], center[1] - h[1], center[2] - h[2]])
            && self.grid.contains([center[0] + h[0], center[1] + h[1], center[2] + h[2]])
    }

    /// Resamples a regular patch; the gradient buffer is filled only when
    /// `gradient` is set.
    pub fn resample_patch_with(
        &self,
        scratch: &mut SampleScratch,
        center: Point3,
        geom: &PatchGeometry,
        gradient: bool,
        gradients: &mut Vec<f64>,
    ) -> std::result::Result<Patch, OutOfDomain> {
        if !self.patch_in_bounds(center, geom) {
            return Err(OutOfDomain { point: center });
        }
        let mut coords = std::mem::take(&mut scratch.coords);
        for a in 0..3 {
            coords[a].clear();
            for j in 0..geom.size[a] {
                let u = (center[a] + geom.offset(a, j) - self.grid.origin[a]) / self.grid.spacing[a];
                coords[a].push(u.clamp(0.0, (self.grid.dims[a] - 1) as f64));
            }
        }
        let mut values = Vec::new();
        self.eval_tensor(
            scratch,
            [&coords[0], &coords[1], &coords[2]],
            gradient,
            &mut values,
            gradients,
        );
        scratch.coords = coords;
        Ok(Patch::new(geom.size, self.channels, values))
    }

    pub fn resample_patch(
        &self,
        center: Point3,
        geom: &PatchGeometry,
    ) -> std::result::Result<Patch, OutOfDomain> {
        let mut scratch = SampleScratch::default();
        let mut unused = Vec::new();
        self.resample_patch_with(&mut scratch, center, geom, false, &mut unused)
    }

    /// Values of every voxel center reconstructed from the coefficients.
    pub fn reconstruct(&self) -> Volume {
        let mut scratch = SampleScratch::default();
        let coords: [Vec<f64>; 3] =
            std::array::from_fn(|a| (0..self.grid.dims[a]).map(|i| i as f64).collect());
        let mut values = Vec::new();
        let mut unused = Vec::new();
        self.eval_tensor(
            &mut scratch,
            [&coords[0], &coords[1], &coords[2]],
            false,
            &mut values,
            &mut unused,
        );
        Volume {
            grid: self.grid,
            channels: self.channels,
            data: values.into_iter().map(|v| v as f32).collect(),
        }
    }
}

#[inline]
fn clamp_index(u: [f64; 3], grid: &Grid) -> [f64; 3] {
    [
        u[0].clamp(0.0, (grid.dims[0] - 1) as f64),
        u[1].clamp(0.0, (grid.dims[1] - 1) as f64),
        u[2].clamp(0.0, (grid.dims[2] - 1) as f64),
    ]
}
