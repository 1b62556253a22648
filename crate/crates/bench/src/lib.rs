//! Fixtures shared by the benchmarks in `benches/`.

use featreg_core::phantom::{build_case, PhantomCase, PhantomCaseConfig};
use featreg_core::sampling::{sample_points, SamplerKind, SamplingPlan};
use featreg_core::similarity::LevelMetric;
use featreg_core::{BSplineTransform, Point3, Transform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Phantom pair of `extent` mm at 1 mm with a 4 mm ground-truth field.
pub fn phantom(extent: f64) -> PhantomCase {
    build_case(&PhantomCaseConfig {
        extent: [extent; 3],
        spacing: [1.0; 3],
        max_displacement: 4.0,
        seed: 7,
        ..Default::default()
    })
    .expect("phantom case")
}

/// Half of the case's ground-truth field, so moving samples fall off the grid.
pub fn half_field(case: &PhantomCase) -> BSplineTransform {
    let mut t = case.field.clone();
    let half: Vec<f64> = t.params().iter().map(|p| 0.5 * p).collect();
    t.set_params(&half);
    t
}

/// `n` admissible continuous sample points with per-sample seeds.
pub fn samples(metric: &LevelMetric, t: &dyn Transform, n: usize) -> (Vec<Point3>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plan = SamplingPlan::new(n, None, None, metric.patch(), SamplerKind::Continuous).expect("plan");
    let set = sample_points(&plan, &metric.fixed_domain(), &metric.moving_domain(), t, &mut rng).expect("samples");
    let seeds = (0..set.points.len()).map(|_| rng.gen()).collect();
    (set.points, seeds)
}
