use serde::{Deserialize, Serialize};

use super::{mat_mul, AffineTransform, BSplineTransform, Mat3, ParamJacobian, Transform};
use crate::volume::{Grid, Point3};

/// `T(x) = T_bspline(T_affine(x))`; only the B-spline parameters are exposed
/// to the optimizer, the affine part is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeTransform {
    pub affine: Option<AffineTransform>,
    pub bspline: BSplineTransform,
}

impl CompositeTransform {
    pub fn new(affine: Option<AffineTransform>, bspline: BSplineTransform) -> Self {
        CompositeTransform { affine, bspline }
    }

    #[inline]
    pub fn pre(&self, x: Point3) -> Point3 {
        match &self.affine {
            Some(a) => a.apply(x),
            None => x,
        }
    }

    /// Bounding box of the fixed domain after the affine stage.
    pub fn mapped_bounds(affine: Option<&AffineTransform>, domain: &Grid) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in domain.corners() {
            let y = affine.map_or(c, |a| a.apply(c));
            for d in 0..3 {
                lo[d] = lo[d].min(y[d]);
                hi[d] = hi[d].max(y[d]);
            }
        }
        (lo, hi)
    }
}

impl Transform for CompositeTransform {
    fn apply(&self, x: Point3) -> Point3 {
        self.bspline.apply(self.pre(x))
    }

    fn num_params(&self) -> usize {
        self.bspline.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.bspline.params()
    }

    fn set_params(&mut self, params: &[f64]) {
        self.bspline.set_params(params)
    }

    fn param_jacobian(&self, x: Point3) -> ParamJacobian {
        self.bspline.param_jacobian(self.pre(x))
    }

    fn spatial_jacobian(&self, x: Point3) -> Mat3 {
        let y = self.pre(x);
        let jb = self.bspline.spatial_jacobian(y);
        match &self.affine {
            Some(a) => mat_mul(&jb, &a.matrix),
            None => jb,
        }
    }

    fn max_step_displacement(&self, step: &[f64], domain: &Grid) -> f64 {
        self.bspline.max_step_displacement(step, domain)
    }

    fn bending_energy(&self, points: &[Point3]) -> Option<(f64, Vec<f64>)> {
        let mapped: Vec<Point3> = points.iter().map(|&x| self.pre(x)).collect();
        Some(BSplineTransform::bending_energy(&self.bspline, &mapped))
    }

    fn clone_box(&self) -> Box<dyn Transform> {
        Box::new(self.clone())
    }
}
