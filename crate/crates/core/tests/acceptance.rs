//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; pass criterion numbers to run a subset,
//! e.g. `cargo test -p featreg-core --test acceptance -- 1 2 3`. Failing
//! criteria are reported, not turned into a failing exit status.

use std::collections::HashMap;
use std::time::Instant;

use featreg_core::config::RegistrationConfig;
use featreg_core::evaluation::{dice, hd95, tre};
use featreg_core::features::{compute_static_features, FeatureExtractor, MindConfig, Mode, PadPolicy, StaticFeatureMap};
use featreg_core::io::{self, ParameterMap, RunReport};
use featreg_core::phantom::{build_case, ModalitySim, PhantomCase, PhantomCaseConfig};
use featreg_core::pipeline::{register, Masks};
use featreg_core::pyramid::PyramidStrategy;
use featreg_core::sampling::{sample_points, SamplerKind, SamplingPlan};
use featreg_core::similarity::{distance_eval, quantile, DistanceKind, LevelMetric, MetricKind};
use featreg_core::spline::cubic_weights;
use featreg_core::transform::{BSplineTransform, CompositeTransform, Transform};
use featreg_core::{Grid, PatchGeometry, Point3, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| picked.is_empty() || picked.contains(&n);
    let mut cases = Cases::default();
    let mut results = Vec::new();
    let criteria: [(usize, &str); 10] = [
        (1, "gradient correctness"),
        (2, "IMPACT(identity, L2) reduces to MSE"),
        (3, "Static and Jacobian modes agree"),
        (4, "mono-modal phantom recovery"),
        (5, "cross-modality phantom recovery"),
        (6, "pyramid strategy ordering"),
        (7, "convergence at 200 iterations"),
        (8, "runtime linear in samples"),
        (9, "determinism"),
        (10, "invariant suites"),
    ];
    for (n, name) in criteria {
        if !run(n) {
            continue;
        }
        let started = Instant::now();
        let o = match n {
            1 => gradients(),
            2 => reduction(),
            3 => mode_equivalence(),
            4 => mono_recovery(&mut cases),
            5 => cross_recovery(&mut cases),
            6 => pyramid_ordering(&mut cases),
            7 => convergence(&mut cases),
            8 => complexity(),
            9 => determinism(),
            _ => invariants(),
        };
        println!(
            "criterion {n:>2} {}  {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
        results.push(o.pass);
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
}

// ---------------------------------------------------------------- helpers

fn smooth_image(n: usize, shift: f64) -> Volume {
    let grid = Grid::new([n; 3], [1.0; 3], [0.0; 3]).unwrap();
    Volume::from_fn(grid, |p| {
        let x = p[0] - shift;
        (50.0 + 20.0 * (0.4 * x).sin() * (0.3 * p[1]).cos() + 10.0 * (0.25 * p[2] + 0.1 * x).sin()) as f32
    })
}

fn three_channel(shift: f64) -> Volume {
    let grid = Grid::new([16; 3], [1.0; 3], [0.0; 3]).unwrap();
    let mut data = Vec::with_capacity(3 * grid.len());
    for idx in 0..grid.len() {
        let [i, j, k] = grid.voxel_of_linear(idx);
        let p = grid.world(i, j, k);
        let x = p[0] - shift;
        data.push((10.0 + 3.0 * (0.4 * x).sin() * (0.3 * p[1]).cos()) as f32);
        data.push((5.0 + 2.0 * (0.25 * p[2] + 0.1 * x).sin()) as f32);
        data.push((8.0 + 2.5 * (0.35 * p[1] - 0.2 * x).cos() * (0.2 * p[2]).sin()) as f32);
    }
    Volume::new(grid, 3, data).unwrap()
}

fn random_transform(grid: &Grid, spacing: f64, amp: f64, rng: &mut ChaCha8Rng) -> BSplineTransform {
    let mut t = BSplineTransform::for_domain(grid, [spacing; 3]).unwrap();
    let p: Vec<f64> = (0..t.num_params()).map(|_| rng.gen_range(-amp..amp)).collect();
    t.set_params(&p);
    t
}

fn samples(metric: &LevelMetric, t: &dyn Transform, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Point3>, Vec<u64>) {
    let plan = SamplingPlan::new(n, None, None, metric.patch(), SamplerKind::Continuous).unwrap();
    let set = sample_points(&plan, &metric.fixed_domain(), &metric.moving_domain(), t, rng).unwrap();
    let seeds = (0..set.points.len()).map(|_| rng.gen()).collect();
    (set.points, seeds)
}

fn median(mut v: Vec<f64>) -> f64 {
    quantile(&mut v, 0.5)
}

fn fmt_list(v: &[f64]) -> String {
    let s: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", s.join(", "))
}

// ------------------------------------------------------ 1. gradient suite

/// Largest relative error over 20 random active coordinates, relative to
/// `max(|analytic|, 1% of the largest gradient component)`.
fn gradient_error(metric: &LevelMetric, t: &BSplineTransform, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pts, seeds) = samples(metric, t, 300, &mut rng);
    let eval = metric.evaluate(t, &pts, &seeds, true).unwrap();
    let base = t.params();
    let scale = eval.gradient.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let active: Vec<usize> = (0..base.len()).filter(|&i| eval.gradient[i].abs() > 1e-3 * scale).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = active[rng.gen_range(0..active.len())];
        // Smaller than the smoothing width of the L1 distance, so the central
        // difference stays inside its quadratic region.
        let h = 1e-6;
        let mut tp = t.clone();
        let mut p = base.clone();
        p[i] += h;
        tp.set_params(&p);
        let vp = metric.evaluate(&tp, &pts, &seeds, false).unwrap().value;
        p[i] -= 2.0 * h;
        tp.set_params(&p);
        let vm = metric.evaluate(&tp, &pts, &seeds, false).unwrap().value;
        let fd = (vp - vm) / (2.0 * h);
        worst = worst.max((fd - eval.gradient[i]).abs() / eval.gradient[i].abs().max(1e-2 * scale));
    }
    worst
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let fixed = smooth_image(16, 0.0);
    let moving = smooth_image(16, 0.7);
    let geom = |n: usize| PatchGeometry { size: [n; 3], resolution: [1.0; 3] };
    let mind = FeatureExtractor::mind(MindConfig::default(), geom(5), 1).unwrap();
    let (fixed3, moving3) = (three_channel(0.0), three_channel(0.7));
    let ident = FeatureExtractor::identity(geom(3), 1);
    // Per-voxel identity features of a single channel are scalars, for which
    // NCC and cosine distances are degenerate; three channels keep them
    // meaningful.
    let ident1 = FeatureExtractor::identity(PatchGeometry::single(), 3);
    let mind_maps = (
        compute_static_features(&mind, &fixed, 48, 8).unwrap(),
        compute_static_features(&mind, &moving, 48, 8).unwrap(),
    );
    let ident_maps = (
        StaticFeatureMap::single(fixed3.clone()).unwrap(),
        StaticFeatureMap::single(moving3.clone()).unwrap(),
    );
    let mut combos: Vec<(String, LevelMetric, f64)> = vec![
        ("MSE".into(), LevelMetric::mse(&fixed, &moving).unwrap(), 1e-4),
        ("NCC".into(), LevelMetric::ncc(&fixed, &moving).unwrap(), 1e-4),
        ("NMI".into(), LevelMetric::nmi(&fixed, &moving, 32, (None, None)).unwrap(), 1e-3),
    ];
    for d in DistanceKind::ALL {
        let jm = LevelMetric::impact_jacobian(&fixed, &moving, mind.clone(), d, 32, PadPolicy::Duplicate).unwrap();
        combos.push((format!("jacobian/mind/{d}"), jm, 1e-3));
        let ji = LevelMetric::impact_jacobian(&fixed, &moving, ident.clone(), d, 32, PadPolicy::Duplicate).unwrap();
        combos.push((format!("jacobian/identity-patch/{d}"), ji, 1e-4));
        let ji1 =
            LevelMetric::impact_jacobian(&fixed3, &moving3, ident1.clone(), d, 32, PadPolicy::Duplicate).unwrap();
        combos.push((format!("jacobian/identity-voxel/{d}"), ji1, 1e-4));
        let sm = LevelMetric::impact_static(mind_maps.0.clone(), mind_maps.1.clone(), d, 32).unwrap();
        combos.push((format!("static/mind/{d}"), sm, 1e-3));
        let si = LevelMetric::impact_static(ident_maps.0.clone(), ident_maps.1.clone(), d, 32).unwrap();
        combos.push((format!("static/identity/{d}"), si, 1e-4));
    }
    let mut failures = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for (name, metric, tol) in &combos {
        for &seed in &SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            // 4x4x4 control points over the 16^3 image.
            let t = random_transform(&fixed.grid, 15.0, 0.4, &mut rng);
            let err = gradient_error(metric, &t, seed);
            worst_ratio = worst_ratio.max(err / tol);
            if !(err < *tol) {
                failures.push(format!("{name} seed {seed}: {err:.2e}"));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 120.0;
    outcome(
        pass,
        format!(
            "{} combinations x {} seeds x 20 coordinates, worst error/tolerance {worst_ratio:.3}, {secs:.1}s{}",
            combos.len(),
            SEEDS.len(),
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join("; ")) }
        ),
    )
}

// ----------------------------------------------------- 2. reduction oracle

fn reduction() -> Outcome {
    let mut worst: f64 = 0.0;
    for c in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + c);
        let n = rng.gen_range(10..20);
        let grid = Grid::new([n; 3], [rng.gen_range(0.8..2.0); 3], [rng.gen_range(-5.0..5.0); 3]).unwrap();
        let waves: Vec<[f64; 4]> = (0..6)
            .map(|_| [rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6), rng.gen_range(0.0..6.0)])
            .collect();
        let img = |shift: f64, gain: f64| {
            Volume::from_fn(grid, |p| {
                let s: f64 = waves.iter().map(|w| (w[0] * (p[0] - shift) + w[1] * p[1] + w[2] * p[2] + w[3]).sin()).sum();
                (gain * (10.0 + s)) as f32
            })
        };
        let fixed = img(0.0, 1.0);
        let moving = img(rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.0));
        let spacing = rng.gen_range(4.0..8.0) * grid.spacing[0];
        let t = random_transform(&grid, spacing, 0.3 * grid.spacing[0], &mut rng);
        let mse = LevelMetric::mse(&fixed, &moving).unwrap();
        let ident = FeatureExtractor::identity(PatchGeometry::single(), 1);
        let imp = LevelMetric::impact_jacobian(&fixed, &moving, ident, DistanceKind::L2, 1, PadPolicy::Duplicate).unwrap();
        let count = rng.gen_range(50..500);
        let (pts, seeds) = samples(&mse, &t, count, &mut rng);
        let a = mse.evaluate(&t, &pts, &seeds, false).unwrap().value;
        let b = imp.evaluate(&t, &pts, &seeds, false).unwrap().value;
        worst = worst.max((a - b).abs() / a.abs().max(f64::MIN_POSITIVE));
    }
    outcome(worst < 1e-10, format!("100 configurations, max relative difference {worst:.2e} (< 1e-10)"))
}

// ----------------------------------------------------- 3. mode equivalence

fn mode_equivalence() -> Outcome {
    let cfg = PhantomCaseConfig {
        extent: [64.0; 3],
        spacing: [1.0; 3],
        max_displacement: 4.0,
        seed: 9,
        ..Default::default()
    };
    let case = build_case(&cfg).unwrap();
    let (f, m) = (&case.fixed.image, &case.moving.image);
    let geom = |n: usize| PatchGeometry { size: [n; 3], resolution: [1.0; 3] };
    let extractors = [
        ("mind", FeatureExtractor::mind(MindConfig::default(), geom(5), 1).unwrap()),
        ("identity", FeatureExtractor::identity(PatchGeometry::single(), 1)),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, ex) in extractors {
        let jac = LevelMetric::impact_jacobian(f, m, ex.clone(), DistanceKind::L2, 32, PadPolicy::Duplicate).unwrap();
        let fm = compute_static_features(&ex, f, 48, 8).unwrap();
        let mm = compute_static_features(&ex, m, 48, 8).unwrap();
        let stat = LevelMetric::impact_static(fm, mm, DistanceKind::L2, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Half of the true field keeps the moving samples off the voxel grid.
        let mut t = case.field.clone();
        let half: Vec<f64> = t.params().iter().map(|p| 0.5 * p).collect();
        t.set_params(&half);
        let (pts, seeds) = samples(&jac, &t, 2000, &mut rng);
        let cj = jac.evaluate(&t, &pts, &seeds, false).unwrap().value;
        let cs = stat.evaluate(&t, &pts, &seeds, false).unwrap().value;
        let rel = (cs - cj).abs() / cj.abs();
        pass &= rel < 1e-3;
        // Diagnostic only: with both samples on voxel centers the feature maps
        // are not interpolated, so any remaining gap would be an implementation bug.
        let ident = BSplineTransform::for_domain(&f.grid, [16.0; 3]).unwrap();
        let mut centers = Vec::new();
        for k in (8..56).step_by(4) {
            for j in (8..56).step_by(4) {
                for i in (8..56).step_by(4) {
                    centers.push(f.grid.world(i, j, k));
                }
            }
        }
        let cseeds = vec![0u64; centers.len()];
        let vj = jac.evaluate(&ident, &centers, &cseeds, false).unwrap().value;
        let vs = stat.evaluate(&ident, &centers, &cseeds, false).unwrap().value;
        parts.push(format!("{name} rel {rel:.2e} (voxel centers {:.1e})", (vs - vj).abs() / vj.abs()));
    }
    outcome(pass, format!("{} at 2000 continuous samples (< 1e-3)", parts.join(", ")))
}

// ------------------------------------------------------- phantom runs

struct Run {
    tre: Vec<f64>,
    seconds: f64,
    failed: Option<String>,
}

impl Run {
    fn median(&self) -> f64 {
        median(self.tre.clone())
    }
}

/// Phantom cases and registration results shared between criteria.
#[derive(Default)]
struct Cases {
    cases: HashMap<(u64, bool), PhantomCase>,
    runs: HashMap<(u64, bool, String), Run>,
}

impl Cases {
    fn case(&mut self, seed: u64, cross: bool) -> &PhantomCase {
        self.cases.entry((seed, cross)).or_insert_with(|| {
            let cfg = PhantomCaseConfig {
                seed,
                modality: cross.then(ModalitySim::cross_modality),
                ..Default::default()
            };
            build_case(&cfg).unwrap()
        })
    }

    /// Registers the fixed phantom to the moving one, keyed by the config
    /// echo so identical settings run once.
    fn run(&mut self, seed: u64, cross: bool, config: &RegistrationConfig) -> &Run {
        let key = (seed, cross, config.to_parameters().to_string());
        if !self.runs.contains_key(&key) {
            let case = self.case(seed, cross);
            let started = Instant::now();
            let masks = Masks { fixed: None, moving: cross.then_some(&case.moving_mask) };
            let reg = register(&case.fixed.image, &case.moving.image, masks, config);
            let seconds = started.elapsed().as_secs_f64();
            let s = tre(&case.fixed.landmarks, &case.moving.landmarks, &reg.transform).unwrap();
            let run = Run { tre: s.distances, seconds, failed: reg.error.map(|e| e.to_string()) };
            self.runs.insert(key.clone(), run);
        }
        &self.runs[&key]
    }

    /// Per-seed medians, pooled median, slowest run and errors.
    fn sweep(&mut self, cross: bool, config: impl Fn(u64) -> RegistrationConfig) -> Sweep {
        let mut out = Sweep::default();
        let mut pooled = Vec::new();
        for &seed in &SEEDS {
            let r = self.run(seed, cross, &config(seed));
            out.medians.push(r.median());
            out.slowest = out.slowest.max(r.seconds);
            pooled.extend(r.tre.iter().copied());
            out.errors.extend(r.failed.clone());
        }
        out.pooled = median(pooled);
        out
    }
}

#[derive(Default)]
struct Sweep {
    medians: Vec<f64>,
    pooled: f64,
    slowest: f64,
    errors: Vec<String>,
}

fn phantom_config(metric: MetricKind, seed: u64) -> RegistrationConfig {
    let mut map = ParameterMap::new();
    map.set_one("Profile", "paper-experiments");
    map.set_one("Metric", metric);
    map.set_one("RandomSeed", seed);
    RegistrationConfig::from_parameters(&map).unwrap().0
}

fn errors_note(errors: &[String]) -> String {
    if errors.is_empty() {
        String::new()
    } else {
        format!("; errors: {}", errors.join("; "))
    }
}

// ----------------------------------------------------- 4. mono-modal

fn mono_recovery(cases: &mut Cases) -> Outcome {
    let initial: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let case = cases.case(s, false);
            {
                let id = BSplineTransform::for_domain(&case.fixed.image.grid, [16.0; 3]).unwrap();
                tre(&case.fixed.landmarks, &case.moving.landmarks, &id).unwrap().median
            }
        })
        .collect();
    let impact = cases.sweep(false, |s| phantom_config(MetricKind::Impact, s));
    let mse = cases.sweep(false, |s| phantom_config(MetricKind::Mse, s));
    let slowest = impact.slowest.max(mse.slowest);
    let errors = [impact.errors, mse.errors].concat();
    let pass = errors.is_empty() && impact.medians.iter().chain(&mse.medians).all(|&m| m < 1.0) && slowest < 600.0;
    outcome(
        pass,
        format!(
            "median TRE initial {} IMPACT-MIND {} MSE {} (< 1.0 mm), slowest run {slowest:.0}s (< 600s){}",
            fmt_list(&initial),
            fmt_list(&impact.medians),
            fmt_list(&mse.medians),
            errors_note(&errors)
        ),
    )
}

// -------------------------------------------------- 5. cross-modality

fn cross_recovery(cases: &mut Cases) -> Outcome {
    let impact = cases.sweep(true, |s| phantom_config(MetricKind::Impact, s));
    let mse = cases.sweep(true, |s| phantom_config(MetricKind::Mse, s));
    let below = impact.medians.iter().all(|&m| m < 2.0);
    let ordered = impact.medians.iter().zip(&mse.medians).all(|(a, b)| a < b);
    let errors = [impact.errors, mse.errors].concat();
    outcome(
        errors.is_empty() && below && ordered,
        format!(
            "median TRE IMPACT-MIND {} (all < 2.0 mm: {below}) vs MSE {} (IMPACT lower on every seed: {ordered}){}",
            fmt_list(&impact.medians),
            fmt_list(&mse.medians),
            errors_note(&errors)
        ),
    )
}

// ------------------------------------------------- 6. pyramid ordering

fn pyramid_ordering(cases: &mut Cases) -> Outcome {
    let mut pooled = Vec::new();
    let mut errors = Vec::new();
    for strategy in PyramidStrategy::ALL {
        let sweep = cases.sweep(true, |s| {
            let mut c = phantom_config(MetricKind::Impact, s);
            c.pyramid_strategy = strategy;
            c
        });
        pooled.push(sweep.pooled);
        errors.extend(sweep.errors);
    }
    // Ties within 0.05 mm count as ordered.
    let ordered = pooled.windows(2).all(|w| w[0] <= w[1] + 0.05);
    let names: Vec<String> = PyramidStrategy::ALL
        .iter()
        .zip(&pooled)
        .map(|(s, m)| format!("{s} {m:.3}"))
        .collect();
    outcome(
        errors.is_empty() && ordered,
        format!("pooled median TRE {} (non-decreasing within 0.05 mm){}", names.join(" <= "), errors_note(&errors)),
    )
}

// ------------------------------------------------- 7. convergence speed

fn convergence(cases: &mut Cases) -> Outcome {
    let at200 = |metric: MetricKind, mode: Mode| {
        move |s: u64| {
            let mut c = phantom_config(metric, s);
            c.iterations = vec![200];
            c.mode = mode;
            c
        }
    };
    let jac = cases.sweep(true, at200(MetricKind::Impact, Mode::Jacobian));
    let stat = cases.sweep(true, at200(MetricKind::Impact, Mode::Static));
    let ncc = cases.sweep(true, at200(MetricKind::Ncc, Mode::Jacobian));
    let ordered = jac.pooled <= stat.pooled && stat.pooled <= ncc.pooled;
    let errors = [jac.errors, stat.errors, ncc.errors].concat();
    outcome(
        errors.is_empty() && ordered,
        format!(
            "pooled median TRE Jacobian {:.3} <= Static {:.3} <= NCC {:.3}: {ordered}; per-seed Jacobian {} Static {} NCC {}{}",
            jac.pooled,
            stat.pooled,
            ncc.pooled,
            fmt_list(&jac.medians),
            fmt_list(&stat.medians),
            fmt_list(&ncc.medians),
            errors_note(&errors)
        ),
    )
}

// ------------------------------------------------ 8. complexity law

fn complexity() -> Outcome {
    let cfg = PhantomCaseConfig { extent: [64.0; 3], max_displacement: 4.0, seed: 8, ..Default::default() };
    let case = build_case(&cfg).unwrap();
    let sizes = [500usize, 1000, 2000];
    let mut times = Vec::new();
    for &samples in &sizes {
        let mut c = RegistrationConfig { resolutions: 1, iterations: vec![100], samples, ..Default::default() };
        c.seed = 8;
        // Best of two runs damps scheduler noise.
        let t = (0..2)
            .map(|_| {
                let started = Instant::now();
                let reg = register(&case.fixed.image, &case.moving.image, Masks::default(), &c);
                assert!(reg.error.is_none(), "{:?}", reg.error);
                started.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min);
        times.push(t);
    }
    // Time per sample relative to the smallest size.
    let ratios: Vec<f64> = sizes
        .iter()
        .zip(&times)
        .map(|(&s, &t)| (t / s as f64) / (times[0] / sizes[0] as f64))
        .collect();
    let pass = ratios.iter().all(|r| (0.75..=1.25).contains(r));
    outcome(
        pass,
        format!(
            "IMPACT-MIND, 100 iterations, S = {sizes:?}: wall time {} s, per-sample time ratio {} (within 0.75..1.25)",
            fmt_list(&times),
            fmt_list(&ratios)
        ),
    )
}

// --------------------------------------------------- 9. determinism

fn determinism() -> Outcome {
    let cfg = PhantomCaseConfig {
        extent: [48.0; 3],
        spacing: [1.5; 3],
        max_displacement: 4.0,
        seed: 5,
        ..Default::default()
    };
    let case = build_case(&cfg).unwrap();
    let config = RegistrationConfig { resolutions: 2, iterations: vec![60], seed: 5, ..Default::default() };
    let run = |threads: usize| -> RunReport {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| register(&case.fixed.image, &case.moving.image, Masks::default(), &config)).report
    };
    let a = run(1);
    let b = run(1);
    let c = run(4);
    let identical = a.to_jsonl() == b.to_jsonl() && a.status == "ok";
    let costs = |r: &RunReport| -> Vec<f64> { r.levels.iter().flat_map(|l| l.trace.iter().map(|i| i.cost)).collect() };
    let (ca, cc) = (costs(&a), costs(&c));
    let worst = if ca.len() == cc.len() {
        ca.iter().zip(&cc).map(|(x, y)| (x - y).abs() / x.abs().max(f64::MIN_POSITIVE)).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    outcome(
        identical && worst <= 1e-12,
        format!(
            "two single-thread reports byte-identical: {identical}; 4 threads vs 1: max relative cost difference {worst:.1e} over {} iterations (<= 1e-12)",
            ca.len()
        ),
    )
}

// ------------------------------------------------- 10. invariant suites

struct Checks {
    failed: Vec<String>,
    count: usize,
}

impl Checks {
    fn check(&mut self, name: &str, ok: bool, detail: impl std::fmt::Display) {
        self.count += 1;
        if !ok {
            self.failed.push(format!("{name} ({detail})"));
        }
    }
}

fn invariants() -> Outcome {
    let mut c = Checks { failed: Vec::new(), count: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    image_core_invariants(&mut c, &mut rng);
    transform_invariants(&mut c, &mut rng);
    feature_invariants(&mut c, &mut rng);
    similarity_invariants(&mut c, &mut rng);
    pipeline_invariants(&mut c);
    evaluation_invariants(&mut c);
    io_invariants(&mut c, &mut rng);
    outcome(
        c.failed.is_empty(),
        format!("{} checks{}", c.count, if c.failed.is_empty() { String::new() } else { format!("; failed: {}", c.failed.join("; ")) }),
    )
}

fn image_core_invariants(c: &mut Checks, rng: &mut ChaCha8Rng) {
    use featreg_core::pyramid::{build_level, PyramidStrategy};
    use featreg_core::prefilter_cubic;
    let vol = smooth_image(16, 0.3);
    let coeffs = prefilter_cubic(&vol).unwrap();
    let (lo, hi) = vol.min_max();
    let range = f64::from(hi - lo);
    let mut worst: f64 = 0.0;
    for idx in 0..vol.grid.len() {
        let [i, j, k] = vol.grid.voxel_of_linear(idx);
        let v = coeffs.sample_value(vol.grid.world(i, j, k)).unwrap()[0];
        worst = worst.max((v - f64::from(vol.data[idx])).abs());
    }
    c.check("interpolation property", worst < 1e-6 * range, format!("{worst:.2e}"));

    let flat = prefilter_cubic(&Volume::filled(vol.grid, 1, 3.25)).unwrap();
    let mut worst: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for _ in 0..1000 {
        let p = [rng.gen_range(2.0..13.0), rng.gen_range(2.0..13.0), rng.gen_range(2.0..13.0)];
        worst = worst.max((flat.sample_value(p).unwrap()[0] - 3.25).abs());
        let g = coeffs.sample_gradient(p).unwrap();
        let h = 1e-3;
        for a in 0..3 {
            let (mut pp, mut pm) = (p, p);
            pp[a] += h;
            pm[a] -= h;
            let fd = (coeffs.sample_value(pp).unwrap()[0] - coeffs.sample_value(pm).unwrap()[0]) / (2.0 * h);
            let norm = g.iter().map(|x| x.abs()).fold(0.0, f64::max);
            worst_grad = worst_grad.max((fd - g[a]).abs() / norm.max(1e-12));
        }
    }
    c.check("constant reproduction", worst < 1e-9, format!("{worst:.2e}"));
    c.check("sample_gradient vs finite differences", worst_grad < 1e-4, format!("{worst_grad:.2e}"));

    let big = Volume::from_fn(Grid::new([40; 3], [1.0; 3], [0.0; 3]).unwrap(), |p| {
        (10.0 + 3.0 * (0.3 * p[0]).sin() + 2.0 * (0.2 * p[1] + 0.1 * p[2]).cos()) as f32
    });
    let level = build_level(&big, [4.0; 3], PyramidStrategy::Full).unwrap();
    let interior = |v: &Volume, margin: f64| {
        let mut acc = (0.0, 0usize);
        for idx in 0..v.grid.len() {
            let [i, j, k] = v.grid.voxel_of_linear(idx);
            let p = v.grid.world(i, j, k);
            if (0..3).all(|a| p[a] >= margin && p[a] <= 39.0 - margin) {
                acc.0 += f64::from(v.data[idx]);
                acc.1 += 1;
            }
        }
        acc.0 / acc.1 as f64
    };
    let (m0, m1) = (interior(&big, 10.0), interior(&level, 10.0));
    c.check("pyramid preserves mean", ((m1 - m0) / m0).abs() < 0.01, format!("{m0:.4} vs {m1:.4}"));

    let single = PatchGeometry::single();
    let mut exact = true;
    for _ in 0..200 {
        let p = [rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0)];
        exact &= coeffs.resample_patch(p, &single).unwrap().data == coeffs.sample_value(p).unwrap();
    }
    c.check("unit patch equals point sample", exact, "bitwise");
}

fn transform_invariants(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let grid = Grid::new([20; 3], [1.5; 3], [0.0; 3]).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let w = cubic_weights(rng.gen_range(0.0..1.0));
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    c.check("partition of unity", worst < 1e-12, format!("{worst:.2e}"));

    let zero = BSplineTransform::for_domain(&grid, [7.0; 3]).unwrap();
    let mut identity = true;
    let mut support = 0;
    for _ in 0..100 {
        let p = [rng.gen_range(0.0..28.5), rng.gen_range(0.0..28.5), rng.gen_range(0.0..28.5)];
        identity &= zero.apply(p) == p;
        support = support.max(zero.param_jacobian(p).nonzero_params());
    }
    c.check("zero coefficients give identity", identity && support <= 3 * 64, format!("support {support}"));

    let t = random_transform(&grid, 7.0, 2.0, rng);
    let fine = t.refine_grid();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = [rng.gen_range(0.0..28.5), rng.gen_range(0.0..28.5), rng.gen_range(0.0..28.5)];
        let (a, b) = (t.apply(p), fine.apply(p));
        worst = worst.max((0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max));
    }
    c.check("refine_grid preserves the field", worst <= 1e-6, format!("{worst:.2e} mm"));

    let pts: Vec<Point3> =
        (0..200).map(|_| [rng.gen_range(0.0..28.5), rng.gen_range(0.0..28.5), rng.gen_range(0.0..28.5)]).collect();
    let (e0, _) = t.bending_energy(&pts);
    let mut shifted = t.clone();
    shifted.set_from_fn(|_| [0.0; 3]);
    let moved: Vec<f64> = t.params().iter().enumerate().map(|(i, v)| v + [1.5, -2.0, 0.7][i * 3 / t.num_params()]).collect();
    shifted.set_params(&moved);
    let (e1, _) = shifted.bending_energy(&pts);
    c.check("bending energy ignores translation", (e1 - e0).abs() <= 1e-9 * e0.abs().max(1.0), format!("{e0} vs {e1}"));
}

fn feature_invariants(c: &mut Checks, rng: &mut ChaCha8Rng) {
    use featreg_core::features::{mind_extract, pca_reduce};
    use featreg_core::Patch;
    let cfg = MindConfig::default();
    let mut worst: f64 = 0.0;
    let mut in_range = true;
    for _ in 0..100 {
        let data: Vec<f64> = (0..125).map(|_| rng.gen_range(0.0..1.0)).collect();
        let base = mind_extract(&Patch::new([5; 3], 1, data.clone()), cfg).unwrap();
        in_range &= base.iter().all(|&v| v > 0.0 && v <= 1.0) && base.iter().any(|&v| v == 1.0);
        for (a, b) in [(0.1, 5.0), (10.0, -3.0), (2.5, 0.0)] {
            let scaled = Patch::new([5; 3], 1, data.iter().map(|v| a * v + b).collect());
            let d = mind_extract(&scaled, cfg).unwrap();
            worst = worst.max(base.iter().zip(&d).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    c.check("MIND affine intensity invariance", worst < 1e-5, format!("{worst:.2e}"));
    c.check("MIND range (0, 1] with max 1", in_range, "");

    let vol = smooth_image(16, 0.2);
    let mind = FeatureExtractor::mind(cfg, PatchGeometry { size: [5; 3], resolution: [1.0; 3] }, 1).unwrap();
    let dense = compute_static_features(&mind, &vol, 8, 4).unwrap();
    let map = &dense.layers[0].map;
    let mut exact = true;
    for (i, j, k) in [(2, 2, 2), (7, 9, 4), (13, 13, 13), (5, 11, 8)] {
        let mut patch = Vec::with_capacity(125);
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    patch.push(f64::from(vol.get(i + x - 2, j + y - 2, k + z - 2, 0)));
                }
            }
        }
        let d = mind_extract(&Patch::new([5; 3], 1, patch), cfg).unwrap();
        exact &= (0..6).all(|ch| map.get(i, j, k, ch) == d[ch] as f32);
    }
    c.check("dense MIND equals patch MIND at voxel centers", exact, "");

    let (pf, _) = pca_reduce(&dense, &dense, 4, None).unwrap();
    let m = &pf.layers[0].map;
    let var: Vec<f64> = (0..m.channels)
        .map(|ch| {
            let vals: Vec<f64> = (0..m.grid.len()).map(|i| f64::from(m.data[i * m.channels + ch])).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
        })
        .collect();
    c.check("PCA variances non-increasing", var.windows(2).all(|w| w[0] >= w[1] * (1.0 - 1e-6)), fmt_list(&var));
}

fn similarity_invariants(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let mut worst_cos: f64 = 0.0;
    let mut worst_ncc: f64 = 0.0;
    for _ in 0..100 {
        let f: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = rng.gen_range(0.5..2.0);
        let b = rng.gen_range(-1.0..1.0);
        let (c0, _) = distance_eval(DistanceKind::Cosine, &f, &m);
        let scaled: Vec<f64> = m.iter().map(|v| s * v).collect();
        worst_cos = worst_cos.max((distance_eval(DistanceKind::Cosine, &f, &scaled).0 - c0).abs());
        let (n0, _) = distance_eval(DistanceKind::Ncc, &f, &m);
        let remapped: Vec<f64> = m.iter().map(|v| s * v + b).collect();
        worst_ncc = worst_ncc.max((distance_eval(DistanceKind::Ncc, &f, &remapped).0 - n0).abs());
    }
    c.check("cosine distance scale invariance", worst_cos < 1e-9, format!("{worst_cos:.2e}"));
    c.check("NCC distance affine invariance", worst_ncc < 1e-9, format!("{worst_ncc:.2e}"));

    let fixed = smooth_image(16, 0.0);
    let moving = smooth_image(16, 0.6);
    let t = random_transform(&fixed.grid, 5.0, 0.3, rng);
    let mind = FeatureExtractor::mind(MindConfig::default(), PatchGeometry { size: [5; 3], resolution: [1.0; 3] }, 1)
        .unwrap();
    let metrics = [
        LevelMetric::mse(&fixed, &moving).unwrap(),
        LevelMetric::ncc(&fixed, &moving).unwrap(),
        LevelMetric::nmi(&fixed, &moving, 32, (None, None)).unwrap(),
        LevelMetric::impact_jacobian(&fixed, &moving, mind, DistanceKind::L2, 32, PadPolicy::Duplicate).unwrap(),
    ];
    let mut worst: f64 = 0.0;
    for metric in &metrics {
        let (pts, seeds) = samples(metric, &t, 400, rng);
        let a = metric.evaluate(&t, &pts, &seeds, false).unwrap().value;
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.reverse();
        order.rotate_left(37);
        let p2: Vec<Point3> = order.iter().map(|&i| pts[i]).collect();
        let s2: Vec<u64> = order.iter().map(|&i| seeds[i]).collect();
        let b = metric.evaluate(&t, &p2, &s2, false).unwrap().value;
        worst = worst.max((a - b).abs() / a.abs());
    }
    c.check("sample order does not change the cost", worst < 1e-10, format!("{worst:.2e}"));
}

fn pipeline_invariants(c: &mut Checks) {
    use featreg_core::optimizer::GainSchedule;
    let config = RegistrationConfig { resolutions: 3, iterations: vec![20], ..Default::default() };
    let exact = (0..3).all(|l| config.grid_spacing_at(l) == config.final_grid_spacing.map(|s| s * f64::from(1 << (2 - l))));
    c.check("grid spacing schedule", exact, "");

    let mut g = GainSchedule::new(0.5, 20.0, 0.602).unwrap();
    let mut prev = g.gain();
    let mut decreasing = true;
    for _ in 0..50 {
        g.advance(-1.0);
        let now = g.gain();
        decreasing &= now < prev && now > 0.0;
        prev = now;
    }
    c.check("gain positive and decaying in time", decreasing, "");

    let cfg = PhantomCaseConfig { extent: [48.0; 3], spacing: [1.5; 3], max_displacement: 3.0, seed: 4, ..Default::default() };
    let case = build_case(&cfg).unwrap();
    let fixed_mask = case.fixed.foreground();
    let masks = Masks { fixed: Some(&fixed_mask), moving: None };
    let reg = register(&case.fixed.image, &case.moving.image, masks, &config);
    let evals = reg.report.metric("cost_evaluations").unwrap_or(f64::NAN);
    c.check("iterations x resolutions cost evaluations", reg.error.is_none() && evals == 60.0, format!("{evals}"));
    let gt = tre(&case.fixed.landmarks, &case.moving.landmarks, &case.field).unwrap();
    c.check("ground-truth TRE", gt.max < 0.01, format!("{:.2e}", gt.max));
    let (_, jac) = featreg_core::evaluation::jacobian_determinant_map(&case.field, &case.fixed.image.grid);
    c.check("ground-truth field does not fold", jac.min > 0.2, format!("{:.3}", jac.min));
    let sim = ModalitySim::cross_modality();
    let mut ranks = featreg_core::phantom::PhantomSpec::standard([48.0; 3], [1.5; 3], 4)
        .structures
        .iter()
        .map(|s| s.intensity)
        .collect::<Vec<_>>();
    ranks.sort_by(f64::total_cmp);
    c.check("remap keeps structure order", ranks.windows(2).all(|w| w[0] == w[1] || sim.remap(w[0]) < sim.remap(w[1])), "");
}

fn evaluation_invariants(c: &mut Checks) {
    use featreg_core::BinaryMask;
    let grid = Grid::new([24; 3], [1.0, 1.5, 2.0], [0.0; 3]).unwrap();
    let ball = |center: Point3, r: f64| {
        BinaryMask::from_fn(grid, move |p| (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>() <= r * r)
    };
    let a = ball([10.0, 15.0, 20.0], 7.0);
    let b = ball([13.0, 17.0, 22.0], 6.0);
    c.check("dice symmetric", dice(&a, &b).unwrap() == dice(&b, &a).unwrap(), "");
    c.check("dice(a, a) = 1", dice(&a, &a).unwrap() == 1.0, "");
    let h = hd95(&a, &b).unwrap();
    let mut d = featreg_core::evaluation::symmetric_surface_distances(&a, &b).unwrap();
    let full = quantile(&mut d, 1.0);
    c.check("hd95 symmetric and below Hausdorff", h == hd95(&b, &a).unwrap() && h <= full, format!("{h} vs {full}"));
}

fn io_invariants(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::new([7, 5, 4], [0.8, 1.2, 2.5], [-3.0, 4.0, 1.5]).unwrap();
    let data: Vec<f32> = (0..grid.len() * 2).map(|_| rng.gen_range(-100.0..100.0)).collect();
    let vol = Volume::new(grid, 2, data).unwrap();
    for name in ["v.mha", "v.nii"] {
        let path = dir.path().join(name);
        io::write_volume(&vol, &path).unwrap();
        c.check(&format!("{name} round trip"), io::read_volume(&path).unwrap() == vol, "");
    }
    let t = CompositeTransform::new(None, random_transform(&grid, 4.0, 1.0, rng));
    let path = dir.path().join("t.json");
    io::write_transform(&t, &path).unwrap();
    let back = io::read_transform(&path).unwrap();
    let p = [1.0, 2.0, 3.0];
    c.check("transform round trip", back.apply(p) == t.apply(p) && back.params() == t.params(), "");

    let text = "(Metric \"mse\")\n(NumberOfResolutions 2)\n// note\n(FinalGridSpacingInPhysicalUnits 8 8 8)\n";
    let swapped = "(FinalGridSpacingInPhysicalUnits 8 8 8)\n(NumberOfResolutions 2)\n(Metric \"mse\")\n";
    let a = ParameterMap::parse(text).unwrap();
    let b = ParameterMap::parse(swapped).unwrap();
    let again = ParameterMap::parse(&a.to_string()).unwrap();
    let same = |x: &ParameterMap, y: &ParameterMap| x.keys().all(|k| x.get(k) == y.get(k)) && x.keys().count() == y.keys().count();
    c.check("parameter parsing order-insensitive and idempotent", same(&a, &b) && same(&a, &again), "");

    let mut report = RunReport::new(3, a);
    report.status = "ok".into();
    report.set_metric("x", 0.1);
    let parsed = RunReport::from_jsonl(&report.to_jsonl()).unwrap();
    c.check("report round trip", parsed.to_jsonl() == report.to_jsonl(), "");
}
