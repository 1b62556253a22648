//! End-to-end registration: pyramid, optional affine stage, then B-spline
//! levels from coarse to fine with the control grid halved between levels.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ExtractorChoice, RegistrationConfig};
use crate::error::{Error, Result};
use crate::features::{
    compute_static_features, load_static_features, pca_reduce, FeatureExtractor, Mode, StaticFeatureMap,
};
use crate::io::{LevelRecord, RunReport};
use crate::optimizer::{run_resolution, AsgdSettings, LevelOutcome, ResolutionProblem};
use crate::pyramid::{build_level, grid_with_spacing, resample};
use crate::sampling::SamplingPlan;
use crate::similarity::{LevelMetric, MetricKind};
use crate::spline::{prefilter_cubic, PatchGeometry, SampleScratch};
use crate::transform::{AffineTransform, BSplineTransform, CompositeTransform, Transform};
use crate::volume::{BinaryMask, Grid, Volume};

/// Optional region-of-interest masks restricting where samples may fall.
#[derive(Debug, Clone, Copy, Default)]
pub struct Masks<'a> {
    pub fixed: Option<&'a BinaryMask>,
    pub moving: Option<&'a BinaryMask>,
}

/// Result of [`register`]. On failure `error` is set, the report carries the
/// partial traces and `transform` is the last valid estimate.
#[derive(Debug)]
pub struct Registration {
    pub transform: CompositeTransform,
    pub report: RunReport,
    pub error: Option<Error>,
}

/// Assembles the similarity metric of one level.
pub fn level_metric(
    config: &RegistrationConfig,
    level: usize,
    fixed: &Volume,
    moving: &Volume,
    masks: Masks<'_>,
    native_frame: &Grid,
) -> Result<LevelMetric> {
    match config.metric {
        MetricKind::Mse => LevelMetric::mse(fixed, moving),
        MetricKind::Ncc => LevelMetric::ncc(fixed, moving),
        MetricKind::Nmi => LevelMetric::nmi(fixed, moving, config.histogram_bins, (masks.fixed, masks.moving)),
        MetricKind::Impact => {
            let mut metric = match config.mode {
                Mode::Jacobian => {
                    let extractor = builtin_extractor(config, level)?;
                    LevelMetric::impact_jacobian(
                        fixed,
                        moving,
                        extractor,
                        config.loss,
                        config.subset_features,
                        config.pad,
                    )?
                }
                Mode::Static => {
                    let (f, m) = static_maps(config, level, fixed, moving, masks, native_frame)?;
                    LevelMetric::impact_static(f, m, config.loss, config.subset_features)?
                }
            };
            // SubsetFeatures larger than a layer means "all of its channels".
            metric.subset = config.subset_features;
            Ok(metric)
        }
    }
}

fn builtin_extractor(config: &RegistrationConfig, level: usize) -> Result<FeatureExtractor> {
    let patch = PatchGeometry {
        size: config.patch_size,
        resolution: config.voxel_size_at(level),
    };
    let extractor = match &config.extractor {
        ExtractorChoice::Identity => FeatureExtractor::identity(patch, config.input_channels),
        ExtractorChoice::Mind => FeatureExtractor::mind(config.mind, patch, config.input_channels)?,
        ExtractorChoice::External(name) => FeatureExtractor::external(name, &config.feature_channels),
    };
    Ok(extractor.with_layers(&config.layers_mask, &config.layers_weight))
}

/// Dense feature maps for Static mode. Built-in extractors run on the level
/// images resampled to the patch resolution; external maps are read from
/// disk in the native frame.
pub fn static_maps(
    config: &RegistrationConfig,
    level: usize,
    fixed: &Volume,
    moving: &Volume,
    masks: Masks<'_>,
    native_frame: &Grid,
) -> Result<(StaticFeatureMap, StaticFeatureMap)> {
    let extractor = builtin_extractor(config, level)?;
    extractor.validate(Mode::Static)?;
    let (f, m) = match &config.extractor {
        ExtractorChoice::External(_) => {
            let enabled = config.layer_enabled(config.feature_channels.len());
            let weights = config.layer_weights(config.feature_channels.len());
            let pick = |xs: &[std::path::PathBuf]| -> Vec<std::path::PathBuf> {
                xs.iter().zip(&enabled).filter(|(_, &e)| e).map(|(p, _)| p.clone()).collect()
            };
            let chans: Vec<usize> = config
                .feature_channels
                .iter()
                .zip(&enabled)
                .filter(|(_, &e)| e)
                .map(|(c, _)| *c)
                .collect();
            let w: Vec<f64> = weights.iter().zip(&enabled).filter(|(_, &e)| e).map(|(w, _)| *w).collect();
            let f = load_static_features(&pick(&config.fixed_feature_maps), native_frame, &chans, &w)?;
            let m = load_static_features(&pick(&config.moving_feature_maps), &moving.grid, &chans, &w)?;
            (f, m)
        }
        _ => {
            let r = config.voxel_size_at(level);
            let fr = resample(fixed, grid_with_spacing(&fixed.grid, r), config.background)?;
            let mr = resample(moving, grid_with_spacing(&moving.grid, r), config.background)?;
            let f = compute_static_features(&extractor, &fr, config.tile, config.tile_overlap)?;
            let m = compute_static_features(&extractor, &mr, config.tile, config.tile_overlap)?;
            (f, m)
        }
    };
    if config.pca > 0 {
        pca_reduce(&f, &m, config.pca, masks.fixed)
    } else {
        Ok((f, m))
    }
}

fn level_seed(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const AFFINE_STREAM: u64 = 1 << 32;

fn check_inputs(fixed: &Volume, moving: &Volume, masks: Masks<'_>) -> Result<()> {
    fixed.check_finite()?;
    moving.check_finite()?;
    if fixed.channels != moving.channels {
        return Err(Error::InvalidData(format!(
            "fixed image has {} channels, moving has {}",
            fixed.channels, moving.channels
        )));
    }
    if let Some(m) = masks.fixed {
        m.check_grid(&fixed.grid)?;
    }
    if let Some(m) = masks.moving {
        m.check_grid(&moving.grid)?;
    }
    Ok(())
}

/// Registers `moving` onto `fixed`.
pub fn register(fixed: &Volume, moving: &Volume, masks: Masks<'_>, config: &RegistrationConfig) -> Registration {
    let mut report = RunReport::new(config.seed, config.to_parameters());
    if let Err(e) = config.validate().and_then(|_| check_inputs(fixed, moving, masks)) {
        return fail(report, placeholder(fixed), e);
    }
    let mut transform = match BSplineTransform::for_domain(&fixed.grid, config.grid_spacing_at(0)) {
        Ok(b) => CompositeTransform::new(None, b),
        Err(e) => return fail(report, placeholder(fixed), e),
    };
    let started = Instant::now();
    let spacings = config.image_spacings(fixed.grid.spacing);
    let moving_spacings = match &config.pyramid_schedule {
        Some(_) => spacings.clone(),
        None => config.image_spacings(moving.grid.spacing),
    };
    let mut evaluations = 0usize;
    let mut map_updates = 0usize;

    if config.affine && config.affine_iterations > 0 {
        let t0 = Instant::now();
        let mut affine = AffineTransform::for_domain(&fixed.grid);
        let result = (|| -> Result<LevelOutcome> {
            let f = build_level(fixed, spacings[0], config.pyramid_strategy)?;
            let m = build_level(moving, moving_spacings[0], config.pyramid_strategy)?;
            let metric = level_metric(config, 0, &f, &m, masks, &fixed.grid)?;
            let plan = plan(config, masks, &metric)?;
            let mut problem = ResolutionProblem::new(metric, plan);
            // Affine steps are bounded by the coarsest image spacing.
            let settings = asgd(config, config.affine_iterations, 4.0 * min_of(spacings[0]));
            let mut rng = level_seed(config.seed, AFFINE_STREAM);
            let mut outcome = LevelOutcome::default();
            let r = run_resolution(&settings, 0, &mut problem, &mut affine, &mut rng, &mut outcome);
            record(&mut report, "affine", 0, spacings[0], [0.0; 3], &outcome);
            r.map(|_| outcome)
        })();
        report.timings.push(("affine".into(), t0.elapsed().as_secs_f64()));
        match result {
            Ok(o) => evaluations += o.trace.len(),
            Err(e) => return fail(report, transform, e),
        }
        transform.affine = Some(affine.clone());
        let (lo, hi) = CompositeTransform::mapped_bounds(Some(&affine), &fixed.grid);
        match BSplineTransform::covering(lo, hi, config.grid_spacing_at(0)) {
            Ok(b) => transform.bspline = b,
            Err(e) => return fail(report, transform, e),
        }
    }

    for level in 0..config.resolutions {
        let t0 = Instant::now();
        if level > 0 {
            transform.bspline = transform.bspline.refine_grid();
        }
        let result = (|| -> Result<LevelOutcome> {
            let f = build_level(fixed, spacings[level], config.pyramid_strategy)?;
            let m = build_level(moving, moving_spacings[level], config.pyramid_strategy)?;
            let metric = level_metric(config, level, &f, &m, masks, &fixed.grid)?;
            let plan = plan(config, masks, &metric)?;
            let mut problem = ResolutionProblem::new(metric, plan);
            problem.bending_weight = config.bending_weight;
            if config.metric == MetricKind::Impact && config.mode == Mode::Static && config.feature_update_interval > 0 {
                problem.update_interval = config.feature_update_interval as usize;
                let (f, m) = (f.clone(), m.clone());
                problem.refresh = Some(Box::new(move |metric: &mut LevelMetric| {
                    // The level images do not change, so a rebuild reproduces
                    // the same maps for the built-in extractors.
                    let (fm, mm) = static_maps(config, level, &f, &m, masks, &fixed.grid)?;
                    *metric = LevelMetric::impact_static(fm, mm, config.loss, config.subset_features)?;
                    Ok(())
                }));
            }
            let grid = config.grid_spacing_at(level);
            let settings = asgd(config, config.iterations_at(level), min_of(grid));
            let mut rng = level_seed(config.seed, level as u64);
            let mut outcome = LevelOutcome::default();
            let r = run_resolution(&settings, level, &mut problem, &mut transform, &mut rng, &mut outcome);
            record(&mut report, "bspline", level, spacings[level], grid, &outcome);
            r.map(|_| outcome)
        })();
        report.timings.push((format!("level{level}"), t0.elapsed().as_secs_f64()));
        match result {
            Ok(o) => {
                evaluations += o.trace.len();
                map_updates += o.map_updates;
            }
            Err(e) => return fail(report, transform, e),
        }
    }
    report.timings.push(("total".into(), started.elapsed().as_secs_f64()));
    report.set_metric("cost_evaluations", evaluations as f64);
    report.set_metric("feature_map_updates", map_updates as f64);
    let (mean, max) = displacement_stats(&transform, &fixed.grid);
    report.set_metric("mean_displacement_mm", mean);
    report.set_metric("max_displacement_mm", max);
    report.status = "ok".into();
    Registration {
        transform,
        report,
        error: None,
    }
}

fn placeholder(fixed: &Volume) -> CompositeTransform {
    let bs = BSplineTransform::new(fixed.grid.origin, [1.0; 3], [4; 3]).expect("valid placeholder grid");
    CompositeTransform::new(None, bs)
}

fn fail(mut report: RunReport, transform: CompositeTransform, error: Error) -> Registration {
    log::error!("registration failed: {error}");
    report.status = "failed".into();
    report.error = Some(error.to_string());
    Registration {
        transform,
        report,
        error: Some(error),
    }
}

fn min_of(v: [f64; 3]) -> f64 {
    v.iter().cloned().fold(f64::MAX, f64::min)
}

fn plan(config: &RegistrationConfig, masks: Masks<'_>, metric: &LevelMetric) -> Result<SamplingPlan> {
    SamplingPlan::new(
        config.samples,
        masks.fixed.cloned(),
        masks.moving.cloned(),
        metric.patch(),
        config.sampler,
    )
}

fn asgd(config: &RegistrationConfig, iterations: usize, grid_spacing: f64) -> AsgdSettings {
    let mut s = AsgdSettings::new(iterations, config.max_step.unwrap_or(grid_spacing / 4.0));
    s.base_gain = config.base_gain;
    s.big_a = config.sp_big_a;
    s.alpha = config.sp_alpha;
    s.gain_trials = config.gain_trials;
    s
}

fn record(report: &mut RunReport, stage: &str, level: usize, image: [f64; 3], grid: [f64; 3], o: &LevelOutcome) {
    report.levels.push(LevelRecord {
        stage: stage.into(),
        level,
        image_spacing: image,
        grid_spacing: grid,
        iterations: o.trace.len(),
        base_gain: o.base_gain,
        initial_cost: o.trace.first().map(|r| r.cost),
        final_cost: o.trace.last().map(|r| r.cost),
        rejected: o.rejected,
        trace: o.trace.clone(),
    });
}

/// Mean and maximum displacement magnitude `|T(x) - x|` over `grid`.
pub fn displacement_stats(transform: &dyn Transform, grid: &Grid) -> (f64, f64) {
    let field = displacement_field(transform, grid);
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for d in field.data.chunks_exact(3) {
        let n = (f64::from(d[0]).powi(2) + f64::from(d[1]).powi(2) + f64::from(d[2]).powi(2)).sqrt();
        sum += n;
        max = max.max(n);
    }
    (sum / grid.len() as f64, max)
}

/// Dense displacement `T(x) - x` on `grid` as a 3-channel volume.
pub fn displacement_field(transform: &dyn Transform, grid: &Grid) -> Volume {
    let [nx, ny, nz] = grid.dims;
    let slices: Vec<Vec<f32>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::with_capacity(nx * ny * 3);
            for j in 0..ny {
                for i in 0..nx {
                    let x = grid.world(i, j, k);
                    let y = transform.apply(x);
                    out.extend((0..3).map(|a| (y[a] - x[a]) as f32));
                }
            }
            out
        })
        .collect();
    Volume::new(*grid, 3, slices.concat()).expect("field size matches grid")
}

/// Resamples `moving` onto `fixed_grid` through `transform` with cubic
/// interpolation. Voxels mapping outside the moving domain get `background`
/// and a zero in the returned validity mask.
pub fn warp_image(
    moving: &Volume,
    transform: &dyn Transform,
    fixed_grid: &Grid,
    background: f32,
) -> Result<(Volume, BinaryMask)> {
    let coeffs = prefilter_cubic(moving)?;
    let nc = moving.channels;
    let [nx, ny, nz] = fixed_grid.dims;
    let slices: Vec<(Vec<f32>, Vec<u8>)> = (0..nz)
        .into_par_iter()
        .map_init(
            || (SampleScratch::default(), Vec::new()),
            |(scratch, vals), k| {
                let mut data = Vec::with_capacity(nx * ny * nc);
                let mut valid = Vec::with_capacity(nx * ny);
                for j in 0..ny {
                    for i in 0..nx {
                        let y = transform.apply(fixed_grid.world(i, j, k));
                        if coeffs.sample_value_with(scratch, y, vals).is_ok() {
                            data.extend(vals.iter().map(|&v| v as f32));
                            valid.push(1);
                        } else {
                            data.extend(std::iter::repeat(background).take(nc));
                            valid.push(0);
                        }
                    }
                }
                (data, valid)
            },
        )
        .collect();
    let mut data = Vec::with_capacity(fixed_grid.len() * nc);
    let mut valid = Vec::with_capacity(fixed_grid.len());
    for (d, v) in slices {
        data.extend(d);
        valid.extend(v);
    }
    Ok((Volume::new(*fixed_grid, nc, data)?, BinaryMask::new(*fixed_grid, valid)?))
}

/// Nearest-neighbour resampling of a label volume through `transform`.
/// Voxels mapping outside the moving domain get label 0.
pub fn warp_labels(labels: &Volume, transform: &dyn Transform, fixed_grid: &Grid) -> Result<Volume> {
    if labels.channels != 1 {
        return Err(Error::InvalidData(format!("label volume has {} channels", labels.channels)));
    }
    let data: Vec<f32> = (0..fixed_grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = fixed_grid.voxel_of_linear(idx);
            let y = transform.apply(fixed_grid.world(i, j, k));
            labels.grid.nearest_voxel(y).map_or(0.0, |[a, b, c]| labels.get(a, b, c, 0))
        })
        .collect();
    Volume::new(*fixed_grid, 1, data)
}
