//! Adaptive stochastic gradient descent with a fixed iteration budget.
//!
//! The gain is `a / (A + t)^alpha` where the adaptive time `t` moves with the
//! inner product of consecutive gradients: it shrinks while successive
//! directions agree (larger steps) and grows when they oscillate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::IterationRecord;
use crate::sampling::{sample_points, SamplingPlan};
use crate::similarity::LevelMetric;
use crate::transform::Transform;
use crate::volume::Grid;

/// Gain sequence `a / (A + t)^alpha` with sigmoid-driven adaptive time.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub a: f64,
    pub big_a: f64,
    pub alpha: f64,
    pub t: f64,
    pub f_max: f64,
    pub f_min: f64,
    /// Sigmoid width; tracks the running mean of `|<g_i, g_{i-1}>|`.
    pub omega: f64,
    updates: usize,
}

impl GainSchedule {
    pub fn new(a: f64, big_a: f64, alpha: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Config(format!("base gain must be positive, got {a}")));
        }
        if !(big_a >= 1.0) {
            return Err(Error::Config(format!("SP_A must be >= 1, got {big_a}")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("SP_alpha must lie in (0, 1], got {alpha}")));
        }
        Ok(GainSchedule {
            a,
            big_a,
            alpha,
            t: 0.0,
            f_max: 1.0,
            f_min: -0.8,
            omega: 0.0,
            updates: 0,
        })
    }

    pub fn gain(&self) -> f64 {
        self.gain_at(self.t)
    }

    pub fn gain_at(&self, t: f64) -> f64 {
        self.a / (self.big_a + t).powf(self.alpha)
    }

    /// Bounded sigmoid with `f(0) = 0`, `f(+inf) = f_max`, `f(-inf) = f_min`.
    pub fn sigmoid(&self, x: f64) -> f64 {
        let z = x / self.omega.max(f64::MIN_POSITIVE);
        let z = if z.is_nan() { 0.0 } else { z };
        self.f_min + (self.f_max - self.f_min) / (1.0 - (self.f_max / self.f_min) * (-z).exp())
    }

    /// Advances `t` given the inner product of the last two gradients.
    pub fn advance(&mut self, inner: f64) {
        self.updates += 1;
        self.omega += (inner.abs() - self.omega) / self.updates as f64;
        self.t = (self.t + self.sigmoid(-inner)).max(0.0);
    }
}

/// Cost value, parameter gradient and sampler bookkeeping of one evaluation.
#[derive(Debug, Clone, Default)]
pub struct StepEvaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub rejected: u64,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub level: usize,
    pub iteration: usize,
    pub params: Vec<f64>,
    pub previous_gradient: Option<Vec<f64>>,
    pub schedule: GainSchedule,
    pub trace: Vec<IterationRecord>,
    pub rejected: u64,
    /// Steps shortened by a step-length cap.
    pub clamped: usize,
}

impl OptimizerState {
    pub fn new(level: usize, params: Vec<f64>, schedule: GainSchedule) -> Self {
        OptimizerState {
            level,
            iteration: 0,
            params,
            previous_gradient: None,
            schedule,
            trace: Vec::new(),
            rejected: 0,
            clamped: 0,
        }
    }
}

fn finite(e: &StepEvaluation) -> bool {
    e.value.is_finite() && e.gradient.iter().all(|g| g.is_finite())
}

/// One ASGD iteration: evaluate at the current parameters, step along the
/// negative gradient, then update the adaptive time.
///
/// A non-finite evaluation halves the base gain and is retried once; a
/// second failure leaves the parameters untouched and returns an error.
pub fn asgd_step(
    state: &mut OptimizerState,
    cost_and_grad: &mut dyn FnMut(&[f64]) -> Result<StepEvaluation>,
) -> Result<()> {
    asgd_step_limited(state, cost_and_grad, None)
}

/// Step length bound: a displacement measure of a parameter step and its cap.
pub type StepLimit<'a> = (&'a dyn Fn(&[f64]) -> f64, f64);

/// [`asgd_step`] with an optional cap on the displacement of the step. A
/// step exceeding the cap is scaled down onto it; the gain sequence and the
/// adaptive time are unaffected.
pub fn asgd_step_limited(
    state: &mut OptimizerState,
    cost_and_grad: &mut dyn FnMut(&[f64]) -> Result<StepEvaluation>,
    limit: Option<StepLimit<'_>>,
) -> Result<()> {
    let mut eval = cost_and_grad(&state.params)?;
    if !finite(&eval) {
        state.schedule.a *= 0.5;
        log::warn!(
            "level {} iteration {}: non-finite cost or gradient, halving gain to {:.4e} and retrying",
            state.level,
            state.iteration,
            state.schedule.a
        );
        state.rejected += eval.rejected;
        eval = cost_and_grad(&state.params)?;
        if !finite(&eval) {
            return Err(Error::Numerical(format!(
                "non-finite cost or gradient at level {} iteration {} after retry (cost {}, {} completed iterations)",
                state.level,
                state.iteration,
                eval.value,
                state.trace.len()
            )));
        }
    }
    let gain = state.schedule.gain();
    let mut scale = gain;
    if let Some((measure, cap)) = limit {
        let step: Vec<f64> = eval.gradient.iter().map(|g| gain * g).collect();
        let d = measure(&step);
        if d > cap {
            scale = gain * cap / d;
            state.clamped += 1;
        }
    }
    for (p, g) in state.params.iter_mut().zip(&eval.gradient) {
        *p -= scale * g;
    }
    if let Some(prev) = &state.previous_gradient {
        let inner: f64 = prev.iter().zip(&eval.gradient).map(|(a, b)| a * b).sum();
        state.schedule.advance(inner);
    }
    state.rejected += eval.rejected;
    state.trace.push(IterationRecord {
        level: state.level,
        iteration: state.iteration,
        cost: eval.value,
        gain,
        time: state.schedule.t,
        rejected: eval.rejected,
    });
    log::debug!(
        "level {} it {:4} cost {:.6e} gain {:.4e} t {:.3} rejected {}",
        state.level,
        state.iteration,
        eval.value,
        gain,
        state.schedule.t,
        eval.rejected
    );
    state.previous_gradient = Some(eval.gradient);
    state.iteration += 1;
    Ok(())
}

/// Base gain such that the first step (at `t = 0`) of any of the trial
/// gradients moves no point by more than `delta_max`. Returns `None` when
/// every trial gradient is zero.
pub fn estimate_base_gain(
    gradients: &[Vec<f64>],
    transform: &dyn Transform,
    domain: &Grid,
    big_a: f64,
    alpha: f64,
    delta_max: f64,
) -> Result<Option<f64>> {
    if !(delta_max > 0.0) {
        return Err(Error::Config(format!("maximum step length must be positive, got {delta_max}")));
    }
    let worst = gradients
        .iter()
        .map(|g| transform.max_step_displacement(g, domain))
        .fold(0.0, f64::max);
    if !(worst > 0.0) || !worst.is_finite() {
        return Ok(None);
    }
    Ok(Some(delta_max * big_a.powf(alpha) / worst))
}

/// Optimizer settings of one resolution level.
#[derive(Debug, Clone, PartialEq)]
pub struct AsgdSettings {
    pub iterations: usize,
    /// Fixed base gain; estimated from `gain_trials` gradients when `None`.
    pub base_gain: Option<f64>,
    pub big_a: f64,
    pub alpha: f64,
    pub gain_trials: usize,
    /// Largest displacement of the first step, in mm.
    pub delta_max: f64,
    /// Cap on the displacement of every step, in units of `delta_max`.
    pub step_cap: Option<f64>,
}

impl AsgdSettings {
    pub fn new(iterations: usize, delta_max: f64) -> Self {
        AsgdSettings {
            iterations,
            base_gain: None,
            big_a: 20.0,
            alpha: 0.602,
            gain_trials: 5,
            delta_max,
            step_cap: Some(1.0),
        }
    }
}

type Refresh<'a> = Box<dyn FnMut(&mut LevelMetric) -> Result<()> + 'a>;

/// Metric, sampler and penalty of one resolution level.
pub struct ResolutionProblem<'a> {
    pub metric: LevelMetric,
    pub plan: SamplingPlan,
    /// Weight of the bending-energy penalty.
    pub bending_weight: f64,
    /// Rebuild static feature maps every this many iterations (0 = never).
    pub update_interval: usize,
    pub refresh: Option<Refresh<'a>>,
}

impl<'a> ResolutionProblem<'a> {
    pub fn new(metric: LevelMetric, plan: SamplingPlan) -> Self {
        ResolutionProblem {
            metric,
            plan,
            bending_weight: 0.0,
            update_interval: 0,
            refresh: None,
        }
    }
}

/// Draws a fresh sample set and evaluates `metric + weight * bending`.
pub fn evaluate_cost(
    problem: &ResolutionProblem<'_>,
    transform: &dyn Transform,
    rng: &mut ChaCha8Rng,
    gradient: bool,
) -> Result<StepEvaluation> {
    let metric = &problem.metric;
    let set = sample_points(&problem.plan, &metric.fixed_domain(), &metric.moving_domain(), transform, rng)?;
    let seeds: Vec<u64> = (0..set.points.len()).map(|_| rng.gen()).collect();
    let eval = metric.evaluate(transform, &set.points, &seeds, gradient)?;
    let mut out = StepEvaluation {
        value: eval.value,
        gradient: eval.gradient,
        rejected: set.rejected as u64,
    };
    if problem.bending_weight > 0.0 {
        if let Some((p, gp)) = transform.bending_energy(&set.points) {
            out.value += problem.bending_weight * p;
            if gradient {
                for (g, d) in out.gradient.iter_mut().zip(gp) {
                    *g += problem.bending_weight * d;
                }
            }
        }
    }
    Ok(out)
}

/// What a resolution level produced, filled in even when it fails midway.
#[derive(Debug, Clone, Default)]
pub struct LevelOutcome {
    pub trace: Vec<IterationRecord>,
    pub base_gain: f64,
    pub rejected: u64,
    /// Static feature-map rebuilds performed during the level.
    pub map_updates: usize,
    /// Gradient evaluations spent on estimating the base gain.
    pub estimation_evaluations: usize,
    pub clamped_steps: usize,
}

/// Runs exactly `settings.iterations` ASGD steps on `transform`.
pub fn run_resolution(
    settings: &AsgdSettings,
    level: usize,
    problem: &mut ResolutionProblem<'_>,
    transform: &mut dyn Transform,
    rng: &mut ChaCha8Rng,
    outcome: &mut LevelOutcome,
) -> Result<()> {
    if settings.iterations == 0 {
        return Ok(());
    }
    let a = match settings.base_gain {
        Some(a) => a,
        None => {
            // Gradients are measured at random perturbations of about
            // `delta_max` around the start, so the estimate reflects the
            // cost curvature even when the level starts near an optimum.
            let theta0 = transform.params();
            let normal = Normal::new(0.0, settings.delta_max / 3f64.sqrt()).expect("finite sigma");
            let mut grads = Vec::with_capacity(settings.gain_trials);
            let mut trial = || -> Result<()> {
                for _ in 0..settings.gain_trials.max(1) {
                    let p: Vec<f64> = theta0.iter().map(|v| v + normal.sample(rng)).collect();
                    transform.set_params(&p);
                    let e = evaluate_cost(problem, transform, rng, true)?;
                    outcome.estimation_evaluations += 1;
                    outcome.rejected += e.rejected;
                    if finite(&e) {
                        grads.push(e.gradient);
                    }
                }
                Ok(())
            };
            let r = trial();
            transform.set_params(&theta0);
            r?;
            let domain = problem.metric.fixed_domain();
            match estimate_base_gain(&grads, transform, &domain, settings.big_a, settings.alpha, settings.delta_max)? {
                Some(a) => a,
                None => {
                    let a = settings.delta_max * settings.big_a.powf(settings.alpha);
                    log::warn!("level {level}: zero gradients during gain estimation, using fallback gain {a:.4e}");
                    a
                }
            }
        }
    };
    outcome.base_gain = a;
    let schedule = GainSchedule::new(a, settings.big_a, settings.alpha)?;
    let mut state = OptimizerState::new(level, transform.params(), schedule);
    // Step bounds are linear in the step and independent of the current
    // parameters, so one snapshot of the transform serves the whole level.
    let probe = transform.clone_box();
    let domain = problem.metric.fixed_domain();
    let measure = |step: &[f64]| probe.max_step_displacement(step, &domain);
    let result = (|| {
        for i in 0..settings.iterations {
            if problem.update_interval > 0 && i > 0 && i % problem.update_interval == 0 {
                if let Some(refresh) = problem.refresh.as_mut() {
                    refresh(&mut problem.metric)?;
                    outcome.map_updates += 1;
                }
            }
            let problem = &*problem;
            let limit = settings.step_cap.map(|c| (&measure as &dyn Fn(&[f64]) -> f64, c * settings.delta_max));
            let mut eval = |p: &[f64]| {
                transform.set_params(p);
                evaluate_cost(problem, &*transform, rng, true)
            };
            asgd_step_limited(&mut state, &mut eval, limit)?;
        }
        Ok(())
    })();
    // Leave the transform at the last accepted parameters.
    transform.set_params(&state.params);
    outcome.trace = state.trace;
    outcome.rejected += state.rejected;
    outcome.clamped_steps = state.clamped;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_limits() {
        let mut s = GainSchedule::new(1.0, 20.0, 0.602).unwrap();
        s.omega = 1.0;
        assert!(s.sigmoid(0.0).abs() < 1e-15);
        assert!((s.sigmoid(50.0) - 1.0).abs() < 1e-12);
        assert!((s.sigmoid(-50.0) + 0.8).abs() < 1e-12);
        assert!(s.sigmoid(1.0) > 0.0 && s.sigmoid(-1.0) < 0.0);
    }

    #[test]
    fn gain_decreases_in_time() {
        let s = GainSchedule::new(2.0, 20.0, 0.602).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..100 {
            let g = s.gain_at(i as f64 * 0.7);
            assert!(g > 0.0 && g < last);
            last = g;
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(GainSchedule::new(0.0, 20.0, 0.6).is_err());
        assert!(GainSchedule::new(1.0, 0.5, 0.6).is_err());
        assert!(GainSchedule::new(1.0, 20.0, 1.5).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = OptimizerState::new(0, vec![1.0, -2.0], GainSchedule::new(1.0, 20.0, 0.602).unwrap());
        st.schedule.t = 3.0;
        let mut f = |_: &[f64]| {
            Ok(StepEvaluation {
                value: 0.0,
                gradient: vec![0.0; 2],
                rejected: 0,
            })
        };
        for _ in 0..5 {
            let t0 = st.schedule.t;
            asgd_step(&mut st, &mut f).unwrap();
            assert!(st.schedule.t <= t0 && t0 - st.schedule.t <= 0.8);
        }
        assert_eq!(st.params, vec![1.0, -2.0]);
        assert_eq!(st.trace.len(), 5);
    }

    #[test]
    fn constant_direction_drives_time_to_zero() {
        let mut st = OptimizerState::new(0, vec![0.0; 3], GainSchedule::new(0.1, 20.0, 0.602).unwrap());
        st.schedule.t = 10.0;
        let mut f = |_: &[f64]| {
            Ok(StepEvaluation {
                value: 1.0,
                gradient: vec![1.0, 0.5, -0.2],
                rejected: 0,
            })
        };
        // Scalar replay of the recursion: every inner product is equal, so
        // omega equals it and each update subtracts |f(-1)|.
        let mut oracle_t: f64 = 10.0;
        let step = {
            let mut s = st.schedule.clone();
            s.omega = 1.0;
            s.sigmoid(-1.0)
        };
        for i in 0..40 {
            asgd_step(&mut st, &mut f).unwrap();
            if i > 0 {
                oracle_t = (oracle_t + step).max(0.0);
            }
            assert!((st.schedule.t - oracle_t).abs() < 1e-12);
        }
        assert_eq!(st.schedule.t, 0.0);
        assert!((st.schedule.gain() - 0.1 / 20f64.powf(0.602)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let target = [3.0, -1.0, 0.5, 2.0];
        let mut st = OptimizerState::new(0, vec![0.0; 4], GainSchedule::new(0.5, 20.0, 0.602).unwrap());
        let mut f = |p: &[f64]| {
            let g: Vec<f64> = p.iter().zip(&target).map(|(a, b)| a - b).collect();
            Ok(StepEvaluation {
                value: 0.5 * g.iter().map(|v| v * v).sum::<f64>(),
                gradient: g,
                rejected: 0,
            })
        };
        let dist = |p: &[f64]| p.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let start = dist(&st.params);
        let mut last = start;
        for _ in 0..100 {
            asgd_step(&mut st, &mut f).unwrap();
            let d = dist(&st.params);
            assert!(d < last);
            last = d;
        }
        // Scalar oracle: the gain settles at 0.5 / 20^0.602, contracting by (1 - gain).
        let gain = 0.5 / 20f64.powf(0.602);
        assert!((last - start * (1.0 - gain).powi(100)).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_retries_once() {
        let mut st = OptimizerState::new(0, vec![0.0], GainSchedule::new(1.0, 20.0, 0.602).unwrap());
        let mut calls = 0;
        let mut f = |_: &[f64]| {
            calls += 1;
            Ok(StepEvaluation {
                value: 1.0,
                gradient: vec![if calls == 1 { f64::NAN } else { 1.0 }],
                rejected: 0,
            })
        };
        asgd_step(&mut st, &mut f).unwrap();
        assert_eq!(st.schedule.a, 0.5);
        let mut g = |_: &[f64]| {
            Ok(StepEvaluation {
                value: f64::INFINITY,
                gradient: vec![1.0],
                rejected: 0,
            })
        };
        let before = st.params.clone();
        assert!(matches!(asgd_step(&mut st, &mut g), Err(Error::Numerical(_))));
        assert_eq!(st.params, before);
    }

    #[test]
    fn base_gain_scales_inversely_with_gradient() {
        let grid = Grid::new([10; 3], [1.0; 3], [0.0; 3]).unwrap();
        let t = crate::transform::BSplineTransform::for_domain(&grid, [4.0; 3]).unwrap();
        let g: Vec<f64> = (0..t.num_params()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let a1 = estimate_base_gain(&[g], &t, &grid, 20.0, 0.602, 1.0).unwrap().unwrap();
        let a2 = estimate_base_gain(&[g2], &t, &grid, 20.0, 0.602, 1.0).unwrap().unwrap();
        assert!((a1 / a2 - 2.0).abs() < 1e-12);
        assert!(estimate_base_gain(&[vec![0.0; t.num_params()]], &t, &grid, 20.0, 0.602, 1.0)
            .unwrap()
            .is_none());
        assert!(matches!(
            estimate_base_gain(&[], &t, &grid, 20.0, 0.602, 0.0),
            Err(Error::Config(_))
        ));
    }
}
