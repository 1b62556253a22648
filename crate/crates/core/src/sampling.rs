//! Mask-restricted stochastic sampling of fixed-frame points.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::spline::PatchGeometry;
use crate::transform::Transform;
use crate::volume::{BinaryMask, Grid, Point3};

/// Default retry budget per requested sample.
pub const RETRY_FACTOR: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Uniform in physical coordinates over the admissible region.
    Continuous,
    /// Uniform over admissible voxel centers of the fixed mask grid.
    VoxelCenter,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Continuous => "Random",
            SamplerKind::VoxelCenter => "RandomVoxel",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" | "randomcoordinate" | "continuous" => Ok(SamplerKind::Continuous),
            "randomvoxel" | "voxel" => Ok(SamplerKind::VoxelCenter),
            _ => Err(Error::Choice {
                key: "ImageSampler".into(),
                choices: "Random, RandomVoxel".into(),
                found: s.into(),
            }),
        }
    }
}

/// Stochastic point sampler configuration for one resolution level.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub samples: usize,
    pub fixed_mask: Option<BinaryMask>,
    pub moving_mask: Option<BinaryMask>,
    /// Patch compared around each fixed point and around its image.
    pub patch: PatchGeometry,
    pub retry_budget: usize,
    pub kind: SamplerKind,
    fixed_voxels: Vec<u32>,
}

impl SamplingPlan {
    pub fn new(
        samples: usize,
        fixed_mask: Option<BinaryMask>,
        moving_mask: Option<BinaryMask>,
        patch: PatchGeometry,
        kind: SamplerKind,
    ) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Config("NumberOfSpatialSamples must be >= 1".into()));
        }
        let fixed_voxels = match &fixed_mask {
            Some(m) => {
                let v: Vec<u32> = m
                    .data
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b != 0)
                    .map(|(i, _)| i as u32)
                    .collect();
                if v.is_empty() {
                    return Err(Error::Sampling("fixed mask is empty".into()));
                }
                v
            }
            None => Vec::new(),
        };
        if moving_mask.as_ref().is_some_and(|m| m.count() == 0) {
            return Err(Error::Sampling("moving mask is empty".into()));
        }
        Ok(SamplingPlan {
            samples,
            fixed_mask,
            moving_mask,
            patch,
            retry_budget: RETRY_FACTOR * samples,
            kind,
            fixed_voxels,
        })
    }

    fn candidate<R: Rng + ?Sized>(&self, fixed: &Grid, rng: &mut R) -> Point3 {
        let jitter = self.kind == SamplerKind::Continuous;
        match &self.fixed_mask {
            Some(m) => {
                let idx = self.fixed_voxels[rng.gen_range(0..self.fixed_voxels.len())] as usize;
                let [i, j, k] = m.grid.voxel_of_linear(idx);
                let mut p = m.grid.world(i, j, k);
                if jitter {
                    for (a, pa) in p.iter_mut().enumerate() {
                        *pa += (rng.gen::<f64>() - 0.5) * m.grid.spacing[a];
                    }
                }
                p
            }
            None => {
                if jitter {
                    let (lo, hi) = fixed.bounds();
                    std::array::from_fn(|a| lo[a] + rng.gen::<f64>() * (hi[a] - lo[a]))
                } else {
                    let idx = rng.gen_range(0..fixed.len());
                    let [i, j, k] = fixed.voxel_of_linear(idx);
                    fixed.world(i, j, k)
                }
            }
        }
    }

    fn patch_inside(&self, center: Point3, grid: &Grid, mask: Option<&BinaryMask>) -> bool {
        let h = self.patch.half_extent();
        let lo = [center[0] - h[0], center[1] - h[1], center[2] - h[2]];
        let hi = [center[0] + h[0], center[1] + h[1], center[2] + h[2]];
        if !grid.contains(lo) || !grid.contains(hi) {
            return false;
        }
        match mask {
            None => true,
            Some(m) if self.patch.len() == 1 => m.contains_world(center),
            Some(m) => {
                let g = &self.patch;
                for k in 0..g.size[2] {
                    for j in 0..g.size[1] {
                        for i in 0..g.size[0] {
                            let p = [
                                center[0] + g.offset(0, i),
                                center[1] + g.offset(1, j),
                                center[2] + g.offset(2, k),
                            ];
                            if !m.contains_world(p) {
                                return false;
                            }
                        }
                    }
                }
                true
            }
        }
    }

    /// Whether `x` is an admissible sample under `transform`.
    pub fn admissible(&self, x: Point3, fixed: &Grid, moving: &Grid, transform: &dyn Transform) -> bool {
        self.patch_inside(x, fixed, self.fixed_mask.as_ref())
            && self.patch_inside(transform.apply(x), moving, self.moving_mask.as_ref())
    }
}

/// Accepted points plus acceptance bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub points: Vec<Point3>,
    pub attempts: usize,
    pub rejected: usize,
}

/// Draws `plan.samples` admissible fixed-frame points: the fixed patch lies in
/// the fixed domain and mask, and the patch around its image under
/// `transform` lies in the moving domain and mask.
pub fn sample_points<R: Rng + ?Sized>(
    plan: &SamplingPlan,
    fixed: &Grid,
    moving: &Grid,
    transform: &dyn Transform,
    rng: &mut R,
) -> Result<SampleSet> {
    let mut set = SampleSet {
        points: Vec::with_capacity(plan.samples),
        ..Default::default()
    };
    while set.points.len() < plan.samples {
        if set.attempts >= plan.retry_budget {
            let candidates = match &plan.fixed_mask {
                Some(m) => format!("{} fixed-mask voxels", m.count()),
                None => format!("{} fixed-domain voxels", fixed.len()),
            };
            let moving_cov = plan
                .moving_mask
                .as_ref()
                .map_or("no moving mask".to_string(), |m| format!("{} moving-mask voxels", m.count()));
            return Err(Error::Sampling(format!(
                "placed {} of {} samples after {} attempts (acceptance {:.4}); {candidates}, {moving_cov}, patch {:?} at {:?} mm",
                set.points.len(),
                plan.samples,
                set.attempts,
                set.points.len() as f64 / set.attempts.max(1) as f64,
                plan.patch.size,
                plan.patch.resolution,
            )));
        }
        set.attempts += 1;
        let x = plan.candidate(fixed, rng);
        if plan.admissible(x, fixed, moving, transform) {
            debug_assert!(plan.fixed_mask.as_ref().map_or(true, |m| m.contains_world(x)));
            set.points.push(x);
        } else {
            set.rejected += 1;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::BSplineTransform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap()
    }

    fn identity(g: &Grid) -> BSplineTransform {
        BSplineTransform::for_domain(g, [4.0; 3]).unwrap()
    }

    #[test]
    fn full_domain_points_are_inside() {
        let g = grid();
        let plan = SamplingPlan::new(500, None, None, PatchGeometry::single(), SamplerKind::Continuous).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = sample_points(&plan, &g, &g, &identity(&g), &mut rng).unwrap();
        assert_eq!(set.points.len(), 500);
        assert_eq!(set.rejected, 0);
        assert!(set.points.iter().all(|p| g.contains(*p)));
        let mean_x = set.points.iter().map(|p| p[0]).sum::<f64>() / 500.0;
        assert!((mean_x - 4.5).abs() < 0.4);
    }

    #[test]
    fn single_voxel_mask_repeats_that_point() {
        let g = grid();
        let mask = BinaryMask::from_fn(g, |p| p == [3.0, 4.0, 5.0]);
        let plan = SamplingPlan::new(3, Some(mask), None, PatchGeometry::single(), SamplerKind::VoxelCenter).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = sample_points(&plan, &g, &g, &identity(&g), &mut rng).unwrap();
        assert_eq!(set.points, vec![[3.0, 4.0, 5.0]; 3]);
    }

    #[test]
    fn starvation_is_an_error() {
        let g = grid();
        let fixed = BinaryMask::from_fn(g, |p| p[0] < 2.0);
        let moving = BinaryMask::from_fn(g, |p| p[0] > 7.0);
        let plan = SamplingPlan::new(10, Some(fixed), Some(moving), PatchGeometry::single(), SamplerKind::Continuous).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = sample_points(&plan, &g, &g, &identity(&g), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)), "{err}");
        assert!(err.to_string().contains("500 attempts"), "{err}");
    }

    #[test]
    fn patches_respect_both_masks() {
        let g = grid();
        let fixed = BinaryMask::from_fn(g, |p| p[1] >= 2.0);
        let moving = BinaryMask::from_fn(g, |p| p[2] <= 6.0);
        let geom = PatchGeometry {
            size: [3, 3, 3],
            resolution: [1.0; 3],
        };
        let plan = SamplingPlan::new(200, Some(fixed.clone()), Some(moving.clone()), geom, SamplerKind::Continuous).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = sample_points(&plan, &g, &g, &identity(&g), &mut rng).unwrap();
        for p in &set.points {
            for q in geom.points(*p) {
                assert!(fixed.contains_world(q) && moving.contains_world(q));
            }
        }
        assert!(set.rejected > 0);
    }
}
