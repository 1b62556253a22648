//! Physically calibrated voxel grids, scalar/multi-channel volumes and binary masks.
//!
//! Geometry is axis-aligned: `world = origin + index * spacing`, component-wise.
//! Voxel data is stored x-fastest, then y, then z, with channels interleaved
//! (the channel index varies fastest of all).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or vector in world coordinates (mm).
pub type Point3 = [f64; 3];

/// Relative slack applied when testing whether a point lies inside the grid bounds.
const BOUNDS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        for axis in 0..3 {
            if dims[axis] == 0 {
                return Err(Error::InvalidData(format!("grid dimension {axis} is zero")));
            }
            if !(spacing[axis] > 0.0 && spacing[axis].is_finite()) {
                return Err(Error::InvalidData(format!(
                    "grid spacing along axis {axis} must be positive, found {}",
                    spacing[axis]
                )));
            }
            if !origin[axis].is_finite() {
                return Err(Error::InvalidData(format!("grid origin along axis {axis} is not finite")));
            }
        }
        Ok(Grid {
            dims,
            spacing,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn voxel_of_linear(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> Point3 {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinates of a world point.
    #[inline]
    pub fn continuous_index(&self, p: Point3) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Extent of the voxel-center lattice, `(dims - 1) * spacing`.
    pub fn extent(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    /// Physical bounds spanned by the voxel centers.
    pub fn bounds(&self) -> (Point3, Point3) {
        let e = self.extent();
        (
            self.origin,
            [self.origin[0] + e[0], self.origin[1] + e[1], self.origin[2] + e[2]],
        )
    }

    pub fn center(&self) -> Point3 {
        let (lo, hi) = self.bounds();
        [(lo[0] + hi[0]) * 0.5, (lo[1] + hi[1]) * 0.5, (lo[2] + hi[2]) * 0.5]
    }

    /// Whether a continuous index lies inside the voxel-center lattice.
    #[inline]
    pub fn index_in_bounds(&self, u: [f64; 3]) -> bool {
        (0..3).all(|a| {
            let tol = BOUNDS_EPS * (self.dims[a] as f64).max(1.0);
            u[a] >= -tol && u[a] <= (self.dims[a] - 1) as f64 + tol
        })
    }

    #[inline]
    pub fn contains(&self, p: Point3) -> bool {
        self.index_in_bounds(self.continuous_index(p))
    }

    /// Nearest voxel of a world point, `None` when the point is outside the
    /// half-voxel padded lattice.
    #[inline]
    pub fn nearest_voxel(&self, p: Point3) -> Option<[usize; 3]> {
        let u = self.continuous_index(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = u[a].round();
            if r < 0.0 || r > (self.dims[a] - 1) as f64 || r.is_nan() {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    /// The 8 corner points of the physical bounds.
    pub fn corners(&self) -> [Point3; 8] {
        let (lo, hi) = self.bounds();
        let mut out = [[0.0; 3]; 8];
        for (c, corner) in out.iter_mut().enumerate() {
            for a in 0..3 {
                corner[a] = if c >> a & 1 == 1 { hi[a] } else { lo[a] };
            }
        }
        out
    }
}

/// A scalar or multi-channel volume with 32-bit storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidData("volume must have at least one channel".into()));
        }
        let expected = grid.len() * channels;
        if data.len() != expected {
            return Err(Error::InvalidData(format!(
                "volume data length {} does not match dims {:?} x {channels} channels ({expected})",
                data.len(),
                grid.dims
            )));
        }
        Ok(Volume {
            grid,
            channels,
            data,
        })
    }

    pub fn filled(grid: Grid, channels: usize, value: f32) -> Self {
        Volume {
            grid,
            channels,
            data: vec![value; grid.len() * channels],
        }
    }

    /// Builds a single-channel volume by evaluating `f` at every voxel center.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(Point3) -> f32) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(grid.world(i, j, k)));
                }
            }
        }
        Volume {
            grid,
            channels: 1,
            data,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, c: usize) -> f32 {
        self.data[self.grid.linear_index(i, j, k) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, c: usize, v: f32) {
        let idx = self.grid.linear_index(i, j, k) * self.channels + c;
        self.data[idx] = v;
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            let voxel = self.grid.voxel_of_linear(pos / self.channels);
            return Err(Error::InvalidData(format!(
                "non-finite value {} at voxel {:?} channel {}",
                self.data[pos],
                voxel,
                pos % self.channels
            )));
        }
        Ok(())
    }

    /// Minimum and maximum over all channels.
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Extracts one channel as a scalar volume.
    pub fn channel(&self, c: usize) -> Volume {
        Volume {
            grid: self.grid,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }
}

/// Binary mask on a voxel grid; nonzero voxels are inside.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: Grid,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidData(format!(
                "mask data length {} does not match grid of {} voxels",
                data.len(),
                grid.len()
            )));
        }
        Ok(BinaryMask {
            grid,
            data: data.into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }

    pub fn full(grid: Grid) -> Self {
        BinaryMask {
            grid,
            data: vec![1; grid.len()],
        }
    }

    pub fn empty(grid: Grid) -> Self {
        BinaryMask {
            grid,
            data: vec![0; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(Point3) -> bool) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(grid.world(i, j, k)) as u8);
                }
            }
        }
        BinaryMask { grid, data }
    }

    /// Thresholds a volume's first channel: voxels with value > 0.5 are inside.
    pub fn from_volume(vol: &Volume) -> Self {
        BinaryMask {
            grid: vol.grid,
            data: (0..vol.grid.len())
                .map(|i| (vol.data[i * vol.channels] > 0.5) as u8)
                .collect(),
        }
    }

    /// Voxels equal to `label` (after rounding) in a label volume.
    pub fn from_label(vol: &Volume, label: i64) -> Self {
        BinaryMask {
            grid: vol.grid,
            data: (0..vol.grid.len())
                .map(|i| (vol.data[i * vol.channels].round() as i64 == label) as u8)
                .collect(),
        }
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid,
            channels: 1,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.grid.linear_index(i, j, k)] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Whether the voxel nearest to `p` is inside the mask; points off the
    /// lattice are outside.
    #[inline]
    pub fn contains_world(&self, p: Point3) -> bool {
        match self.grid.nearest_voxel(p) {
            Some([i, j, k]) => self.get(i, j, k),
            None => false,
        }
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if self.grid != *grid {
            return Err(Error::InvalidData(format!(
                "mask grid {:?} does not match image grid {:?}",
                self.grid, grid
            )));
        }
        Ok(())
    }
}
