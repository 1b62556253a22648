//! Registration quality measures: landmark TRE, Dice overlap, 95th
//! percentile Hausdorff distance and Jacobian-determinant plausibility.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::similarity::quantile;
use crate::transform::{det3, Transform};
use crate::volume::{BinaryMask, Grid, Point3, Volume};

/// Per-pair target registration errors and their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct TreStats {
    pub distances: Vec<f64>,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub mean: f64,
    /// Sample standard deviation (zero for a single pair).
    pub sd: f64,
    pub max: f64,
}

impl TreStats {
    pub fn from_distances(distances: Vec<f64>) -> Result<Self> {
        if distances.is_empty() {
            return Err(Error::InvalidData("TRE of an empty landmark set".into()));
        }
        let n = distances.len() as f64;
        let mean = distances.iter().sum::<f64>() / n;
        let sd = if distances.len() > 1 {
            (distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = distances.clone();
        Ok(TreStats {
            q25: quantile(&mut sorted, 0.25),
            median: quantile(&mut sorted, 0.5),
            q75: quantile(&mut sorted, 0.75),
            max: sorted[sorted.len() - 1],
            mean,
            sd,
            distances,
        })
    }
}

/// `|T(x_j) - y_j|` for fixed landmarks `x` and moving landmarks `y`.
pub fn tre(fixed: &[Point3], moving: &[Point3], transform: &dyn Transform) -> Result<TreStats> {
    if fixed.len() != moving.len() {
        return Err(Error::InvalidData(format!(
            "landmark sets differ in size: {} fixed, {} moving",
            fixed.len(),
            moving.len()
        )));
    }
    let d = fixed
        .iter()
        .zip(moving)
        .map(|(&x, y)| {
            let t = transform.apply(x);
            ((t[0] - y[0]).powi(2) + (t[1] - y[1]).powi(2) + (t[2] - y[2]).powi(2)).sqrt()
        })
        .collect();
    TreStats::from_distances(d)
}

/// `2|A and B| / (|A| + |B|)`; two empty masks count as a perfect match.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_grid(&b.grid)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        log::warn!("Dice of two empty masks is taken as 1");
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mask voxels with at least one 6-neighbour outside the mask (or outside
/// the grid).
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let g = mask.grid;
    let [nx, ny, nz] = g.dims;
    let inside = |i: isize, j: isize, k: isize| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < nx
            && (j as usize) < ny
            && (k as usize) < nz
            && mask.get(i as usize, j as usize, k as usize)
    };
    BinaryMask {
        grid: g,
        data: (0..g.len())
            .map(|idx| {
                let [i, j, k] = g.voxel_of_linear(idx).map(|v| v as isize);
                let on = mask.data[idx] != 0
                    && [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                        .iter()
                        .any(|&(a, b, c)| !inside(i + a, j + b, k + c));
                u8::from(on)
            })
            .collect(),
    }
}

/// One-dimensional squared distance transform (lower envelope of parabolas)
/// with sample spacing `h`. `f` holds squared distances, `inf` for none.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * h;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let p = v[k];
        *o = (x - pos(p)).powi(2) + f[p];
    }
}

/// Exact Euclidean distance in mm from every voxel to the nearest voxel of
/// `mask` (zero inside it).
pub fn distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let g = mask.grid;
    let [nx, ny, nz] = g.dims;
    let mut d: Vec<f64> = mask
        .data
        .iter()
        .map(|&b| if b != 0 { 0.0 } else { f64::INFINITY })
        .collect();
    let pass = |axis: usize, d: &mut Vec<f64>| {
        let n = g.dims[axis];
        let (a, b) = match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        };
        let lines: Vec<(usize, Vec<f64>)> = (0..a * b)
            .into_par_iter()
            .map_init(
                || (vec![0.0; n], vec![0.0; n], Vec::new(), Vec::new()),
                |(line, out, v, z), l| {
                    let (p, q) = (l % a, l / a);
                    let index = |t: usize| match axis {
                        0 => g.linear_index(t, p, q),
                        1 => g.linear_index(p, t, q),
                        _ => g.linear_index(p, q, t),
                    };
                    for (t, x) in line.iter_mut().enumerate() {
                        *x = d[index(t)];
                    }
                    edt_1d(line, g.spacing[axis], out, v, z);
                    (l, out.clone())
                },
            )
            .collect();
        for (l, out) in lines {
            let (p, q) = (l % a, l / a);
            for (t, x) in out.into_iter().enumerate() {
                let idx = match axis {
                    0 => g.linear_index(t, p, q),
                    1 => g.linear_index(p, t, q),
                    _ => g.linear_index(p, q, t),
                };
                d[idx] = x;
            }
        }
    };
    for axis in 0..3 {
        pass(axis, &mut d);
    }
    d.iter().map(|v| v.sqrt()).collect()
}

fn surface_distances(from: &BinaryMask, to_dt: &[f64]) -> Vec<f64> {
    from.data
        .iter()
        .zip(to_dt)
        .filter(|(&b, _)| b != 0)
        .map(|(_, &d)| d)
        .collect()
}

/// Symmetric boundary-to-boundary distances between two masks on one grid.
pub fn symmetric_surface_distances(a: &BinaryMask, b: &BinaryMask) -> Result<Vec<f64>> {
    a.check_grid(&b.grid)?;
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::InvalidData(format!(
            "surface distance needs nonempty masks ({} and {} voxels)",
            a.count(),
            b.count()
        )));
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let mut d = surface_distances(&ba, &distance_transform(&bb));
    d.extend(surface_distances(&bb, &distance_transform(&ba)));
    Ok(d)
}

/// 95th percentile of the symmetric surface distances, in mm.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let mut d = symmetric_surface_distances(a, b)?;
    Ok(quantile(&mut d, 0.95))
}

/// Summary of a Jacobian-determinant map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub fraction_nonpositive: f64,
}

/// `det(dT/dx)` at every voxel of `grid`, from the analytic transform
/// derivatives.
pub fn jacobian_determinant_map(transform: &dyn Transform, grid: &Grid) -> (Volume, JacobianSummary) {
    let dets: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.voxel_of_linear(idx);
            det3(&transform.spatial_jacobian(grid.world(i, j, k)))
        })
        .collect();
    let n = dets.len() as f64;
    let summary = JacobianSummary {
        min: dets.iter().cloned().fold(f64::INFINITY, f64::min),
        max: dets.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean: dets.iter().sum::<f64>() / n,
        fraction_nonpositive: dets.iter().filter(|&&d| d <= 0.0).count() as f64 / n,
    };
    let vol = Volume::new(*grid, 1, dets.iter().map(|&d| d as f32).collect()).expect("one value per voxel");
    (vol, summary)
}
