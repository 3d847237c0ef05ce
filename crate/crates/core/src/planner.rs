//! Stochastic approximate-kernel functional gradient planner.
//!
//! Each iteration draws a mini-batch of `(t, u)` pairs uniformly over the whole
//! time domain and the body points, queries the occupancy at `x(xi_n(t), u)`, and
//! updates the path weights with the samples whose occupancy is at most `p_safe`:
//!
//! ```text
//! W <- W - eta_n * sum_i (g_obs(t_i) + lambda g_dyn(t_i)) (M^{-1} phi(t_i))^T
//! ```
//!
//! After the update the boundary weights are corrected until both endpoints are
//! pinned, and the learning rate follows `eta_n = eta_0 / (1 + n / tau)^p`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::objective::{
    evaluate_objective, sample_gradient, BodyModel, GradientSample, ObjectiveOptions,
    ObjectiveValue,
};
use crate::occupancy::HilbertMap;
use crate::path::{endpoint_features, MetricSpec, Offset, Path};

/// Robbins-Monro learning-rate schedule `eta_0 / (1 + n / tau)^power`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub eta0: f64,
    pub tau: f64,
    pub power: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            eta0: 0.5,
            tau: 1.0,
            power: 1.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0) || !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs eta0 > 0 and tau > 0, got {self:?}"
            )));
        }
        if !(self.power > 0.5 && self.power <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule power must lie in (0.5, 1] for sum eta = inf and sum eta^2 < inf, got {}",
                self.power
            )));
        }
        Ok(())
    }

    pub fn rate(&self, n: u64) -> f64 {
        learning_rate(self, n)
    }
}

/// `eta_0 / (1 + n / tau)^p`.
pub fn learning_rate(schedule: &Schedule, n: u64) -> f64 {
    schedule.eta0 / (1.0 + n as f64 / schedule.tau).powf(schedule.power)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// Relative Frobenius weight change `|dW| / |W|` that counts as settled.
    pub weight_tol: f64,
    /// Consecutive settled-and-safe iterations required.
    pub patience: usize,
    /// Times checked per iteration for the maximum occupancy along the path.
    pub resolution: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence {
            weight_tol: 1e-3,
            patience: 10,
            resolution: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// Pin the endpoints once after each mini-batch update.
    #[default]
    PerBatch,
    /// Apply accepted samples one at a time, pinning after each.
    PerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub p_safe: f64,
    pub batch: usize,
    pub lambda: f64,
    pub schedule: Schedule,
    pub max_iters: usize,
    pub convergence: Convergence,
    pub seed: u64,
    /// Endpoint tolerance after boundary enforcement (map units).
    pub boundary_tol: f64,
    /// Cap on boundary correction sweeps per enforcement.
    pub boundary_max_steps: usize,
    pub boundary_mode: BoundaryMode,
    /// Lengthscale of the endpoint correction features; defaults to
    /// `min(path lengthscale, 0.25)`.
    pub boundary_lengthscale: Option<f64>,
    pub metric: MetricSpec,
    /// Record a diagnostic objective snapshot every this many iterations (0 = never).
    pub objective_every: usize,
    pub objective_resolution: usize,
    pub dyn_cost_relative_to_offset: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            p_safe: 0.55,
            batch: 20,
            lambda: 3e-4,
            schedule: Schedule::default(),
            max_iters: 300,
            convergence: Convergence::default(),
            seed: 0,
            boundary_tol: 1e-6,
            boundary_max_steps: 10,
            boundary_mode: BoundaryMode::PerBatch,
            boundary_lengthscale: None,
            metric: MetricSpec::Identity,
            objective_every: 0,
            objective_resolution: 200,
            dyn_cost_relative_to_offset: false,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_safe > 0.0 && self.p_safe < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "p_safe must lie in (0, 1), got {}",
                self.p_safe
            )));
        }
        if self.batch == 0 || self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "batch and max_iters must be at least 1".into(),
            ));
        }
        if !(self.lambda >= 0.0) || !(self.boundary_tol > 0.0) {
            return Err(Error::InvalidArgument(
                "lambda must be >= 0 and boundary_tol > 0".into(),
            ));
        }
        if self.convergence.patience == 0 || self.convergence.resolution < 2 {
            return Err(Error::InvalidArgument(
                "convergence needs patience >= 1 and resolution >= 2".into(),
            ));
        }
        self.schedule.validate()
    }
}

/// Applies one occupancy-gated weight update. Rejected samples contribute nothing.
///
/// The whole update is computed before anything is written, so a non-finite
/// gradient leaves the path untouched.
pub fn sgd_step(path: &mut Path, samples: &[GradientSample], eta: f64, lambda: f64) -> Result<()> {
    let d = path.dim();
    let m = path.features().len();
    let mut delta = DMatrix::<f64>::zeros(d, m);
    let mut phi = DVector::<f64>::zeros(m);
    for s in samples.iter().filter(|s| s.accepted) {
        let g_obs = s.g_obs.as_ref().ok_or_else(|| {
            Error::Numerical(format!("accepted sample at t={} has no obstacle gradient", s.t))
        })?;
        let g: DVector<f64> = g_obs + &s.g_dyn * lambda;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient at t={}; update aborted",
                s.t
            )));
        }
        path.features().eval_time_into(s.t, 0, phi.as_mut_slice())?;
        path.metric().precondition(&mut phi);
        delta.ger(-eta, &g, &phi, 1.0);
    }
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite weight update; update aborted".into()));
    }
    *path.weights_mut() += delta;
    Ok(())
}

/// Outcome of a boundary enforcement loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryOutcome {
    pub residual: f64,
    pub steps: usize,
}

/// Corrects the boundary weights until both endpoints are within `tol` of the
/// desired configurations:
/// `W_b <- W_b - dx_b(t_b) phi_b(t_b)^T` for `t_b` in `{0, 1}`, repeated.
pub fn enforce_boundary(
    path: &mut Path,
    start: &[f64],
    goal: &[f64],
    tol: f64,
    max_steps: usize,
) -> Result<BoundaryOutcome> {
    let targets = [(0.0, DVector::from_column_slice(start)), (1.0, DVector::from_column_slice(goal))];
    let mut steps = 0;
    loop {
        let residual = path.endpoint_residual(start, goal);
        if residual <= tol {
            return Ok(BoundaryOutcome { residual, steps });
        }
        if !residual.is_finite() || steps >= max_steps {
            return Err(Error::Numerical(format!(
                "boundary residual {residual:.3e} above {tol:.1e} after {steps} corrections"
            )));
        }
        for (tb, target) in &targets {
            let phi_b = path.boundary_features().eval_features(*tb, 0)?;
            if phi_b.norm_squared() <= f64::EPSILON {
                return Err(Error::Numerical(format!(
                    "boundary features vanish at t={tb}; endpoint cannot be corrected"
                )));
            }
            let dx = path.position(*tb) - target;
            path.boundary_weights_mut().ger(-1.0, &dx, &phi_b, 1.0);
        }
        steps += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanStatus {
    Converged,
    MaxIters,
    InfeasibleBoundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub t: f64,
    pub body: usize,
    pub occupancy: f64,
    pub accepted: bool,
}

/// Diagnostics of one planner iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub eta: f64,
    pub samples: Vec<SampleRecord>,
    pub accepted: usize,
    /// `|W_{n+1} - W_n|_F / |W_{n+1}|_F`.
    pub weight_change: f64,
    pub boundary_residual: f64,
    pub boundary_steps: usize,
    /// Maximum occupancy over the dense convergence sweep after the update.
    pub max_occupancy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveValue>,
}

/// Configuration echo, per-iteration diagnostics and totals of one planning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRun {
    pub config: PlannerConfig,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    pub records: Vec<IterationRecord>,
    pub iterations: usize,
    pub samples_drawn: usize,
    pub samples_accepted: usize,
    pub status: PlanStatus,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl PlanRun {
    pub fn final_max_occupancy(&self) -> Option<f64> {
        self.records.last().map(|r| r.max_occupancy)
    }
}

/// Maximum occupancy over `resolution` uniform times and every body point.
pub fn max_occupancy(path: &Path, map: &HilbertMap, body: &BodyModel, resolution: usize) -> f64 {
    let n = resolution.max(2);
    (0..n)
        .flat_map(|k| {
            let c = path.position(k as f64 / (n - 1) as f64);
            (0..body.len()).map(move |u| (c.clone(), u))
        })
        .map(|(c, u)| map.query(&body.workspace_point(&c, u)))
        .fold(0.0, f64::max)
}

fn check_endpoint(map: &HilbertMap, body: &BodyModel, x: &[f64], p_safe: f64, which: &str) -> Result<()> {
    let c = DVector::from_column_slice(x);
    for u in 0..body.len() {
        let p = map.query(&body.workspace_point(&c, u));
        if p > p_safe {
            return Err(Error::InvalidEndpoint(format!(
                "{which} {x:?} has occupancy {p:.3} above p_safe {p_safe}"
            )));
        }
    }
    Ok(())
}

/// Plans from `start` to `goal` starting at the straight line between them.
pub fn plan(
    map: &HilbertMap,
    start: &[f64],
    goal: &[f64],
    body: &BodyModel,
    features: FeatureMap,
    cfg: &PlannerConfig,
) -> Result<(Path, PlanRun)> {
    let offset = Offset::Line {
        start: start.to_vec(),
        goal: goal.to_vec(),
    };
    plan_with_offset(map, start, goal, body, features, offset, cfg)
}

/// Plans from `start` to `goal` deforming an arbitrary offset path.
pub fn plan_with_offset(
    map: &HilbertMap,
    start: &[f64],
    goal: &[f64],
    body: &BodyModel,
    features: FeatureMap,
    offset: Offset,
    cfg: &PlannerConfig,
) -> Result<(Path, PlanRun)> {
    cfg.validate()?;
    if start.len() != map.dim() || goal.len() != map.dim() || body.dim() != map.dim() {
        return Err(Error::InvalidArgument(format!(
            "start/goal/body dimensions must match the {}-D map",
            map.dim()
        )));
    }
    check_endpoint(map, body, start, cfg.p_safe, "start")?;
    check_endpoint(map, body, goal, cfg.p_safe, "goal")?;
    let lb = cfg
        .boundary_lengthscale
        .unwrap_or_else(|| features.lengthscale().min(0.25));
    let boundary = endpoint_features(lb)?;
    let mut path = Path::new(features, boundary, offset, cfg.metric.clone())?;

    let mut run = PlanRun {
        config: cfg.clone(),
        start: start.to_vec(),
        goal: goal.to_vec(),
        records: Vec::new(),
        iterations: 0,
        samples_drawn: 0,
        samples_accepted: 0,
        status: PlanStatus::MaxIters,
        warnings: Vec::new(),
    };
    if enforce_boundary(&mut path, start, goal, cfg.boundary_tol, cfg.boundary_max_steps).is_err() {
        run.status = PlanStatus::InfeasibleBoundary;
        return Ok((path, run));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut streak = 0;
    let mut stalled_reported = false;
    let objective_opts = ObjectiveOptions {
        lambda: cfg.lambda,
        resolution: cfg.objective_resolution.max(2),
        dyn_cost_relative_to_offset: cfg.dyn_cost_relative_to_offset,
    };

    for n in 0..cfg.max_iters {
        let eta = learning_rate(&cfg.schedule, n as u64);
        let draws: Vec<(f64, usize)> = (0..cfg.batch)
            .map(|_| {
                let t: f64 = rng.random_range(0.0..=1.0);
                let u = rng.random_range(0..body.len());
                (t, u)
            })
            .collect();
        let samples = draws
            .iter()
            .map(|&(t, u)| sample_gradient(&path, map, body, t, u, cfg.p_safe))
            .collect::<Result<Vec<_>>>()?;

        let before = path.weights().clone();
        let mut outcome = BoundaryOutcome {
            residual: 0.0,
            steps: 0,
        };
        let mut boundary_failed = false;
        match cfg.boundary_mode {
            BoundaryMode::PerBatch => {
                sgd_step(&mut path, &samples, eta, cfg.lambda)?;
                match enforce_boundary(&mut path, start, goal, cfg.boundary_tol, cfg.boundary_max_steps) {
                    Ok(o) => outcome = o,
                    Err(_) => boundary_failed = true,
                }
            }
            BoundaryMode::PerSample => {
                for s in samples.iter().filter(|s| s.accepted) {
                    sgd_step(&mut path, std::slice::from_ref(s), eta, cfg.lambda)?;
                    match enforce_boundary(&mut path, start, goal, cfg.boundary_tol, cfg.boundary_max_steps) {
                        Ok(o) => {
                            outcome.residual = o.residual;
                            outcome.steps += o.steps;
                        }
                        Err(_) => {
                            boundary_failed = true;
                            break;
                        }
                    }
                }
            }
        }

        let accepted = samples.iter().filter(|s| s.accepted).count();
        let change_norm = (path.weights() - &before).norm();
        let w_norm = path.weights().norm();
        let weight_change = if change_norm == 0.0 {
            0.0
        } else if w_norm == 0.0 {
            f64::INFINITY
        } else {
            change_norm / w_norm
        };
        let max_occ = max_occupancy(&path, map, body, cfg.convergence.resolution);
        let objective = if cfg.objective_every > 0 && n % cfg.objective_every == 0 {
            Some(evaluate_objective(&path, map, body, &objective_opts)?)
        } else {
            None
        };
        run.samples_drawn += samples.len();
        run.samples_accepted += accepted;
        run.iterations = n + 1;
        run.records.push(IterationRecord {
            iteration: n,
            eta,
            samples: samples
                .iter()
                .map(|s| SampleRecord {
                    t: s.t,
                    body: s.body_index,
                    occupancy: s.occupancy,
                    accepted: s.accepted,
                })
                .collect(),
            accepted,
            weight_change,
            boundary_residual: if boundary_failed {
                path.endpoint_residual(start, goal)
            } else {
                outcome.residual
            },
            boundary_steps: outcome.steps,
            max_occupancy: max_occ,
            objective,
        });

        if boundary_failed {
            run.status = PlanStatus::InfeasibleBoundary;
            break;
        }

        if !stalled_reported && run.records.len() >= 50 {
            let window = &run.records[run.records.len() - 50..];
            let drawn: usize = window.iter().map(|r| r.samples.len()).sum();
            let acc: usize = window.iter().map(|r| r.accepted).sum();
            if (acc as f64) < 0.01 * drawn as f64 {
                let msg = format!(
                    "stalled: {acc} of {drawn} samples accepted over iterations {}..={n}",
                    n + 1 - 50
                );
                log::warn!("{msg}");
                run.warnings.push(msg);
                stalled_reported = true;
            }
        }

        if max_occ <= cfg.p_safe && weight_change < cfg.convergence.weight_tol {
            streak += 1;
        } else {
            streak = 0;
        }
        if streak >= cfg.convergence.patience {
            run.status = PlanStatus::Converged;
            break;
        }
    }
    Ok((path, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMap;

    fn sched(p: f64) -> Schedule {
        Schedule {
            eta0: 0.5,
            tau: 1.0,
            power: p,
        }
    }

    #[test]
    fn rate_at_zero_is_eta0_and_decreasing() {
        let s = Schedule::default();
        assert_eq!(learning_rate(&s, 0), s.eta0);
        for n in 0..1000 {
            assert!(learning_rate(&s, n + 1) < learning_rate(&s, n));
        }
    }

    #[test]
    fn harmonic_schedule_partial_sums() {
        // p = 1, tau = 1: eta_n = eta0 / (n + 1), a scaled harmonic series.
        let s = sched(1.0);
        let n = 100_000u64;
        let sum: f64 = (0..n).map(|k| learning_rate(&s, k)).sum();
        let harmonic = s.eta0 * ((n as f64).ln() + 0.577_215_664_901_532_9);
        assert!((sum - harmonic).abs() / harmonic < 0.01);
        let sq: f64 = (0..n).map(|k| learning_rate(&s, k).powi(2)).sum();
        assert!(sq <= s.eta0 * s.eta0 * std::f64::consts::PI.powi(2) / 6.0);
    }

    #[test]
    fn schedule_power_must_satisfy_robbins_monro() {
        assert!(sched(0.5).validate().is_err());
        assert!(sched(1.2).validate().is_err());
        assert!(sched(0.51).validate().is_ok());
        assert!(sched(1.0).validate().is_ok());
    }

    fn path_1d(m: usize) -> Path {
        Path::straight_line(FeatureMap::rff(m, 0.2, 3).unwrap(), &[0.0], &[1.0]).unwrap()
    }

    fn sample(t: f64, g: f64, accepted: bool) -> GradientSample {
        GradientSample {
            t,
            body_index: 0,
            occupancy: if accepted { 0.1 } else { 0.9 },
            g_obs: accepted.then(|| DVector::from_element(1, g)),
            g_dyn: DVector::from_element(1, 0.0),
            accepted,
        }
    }

    #[test]
    fn rejected_samples_leave_weights_bit_identical() {
        let mut p = path_1d(8);
        p.set_weights(DMatrix::from_fn(1, 8, |_, j| j as f64 * 0.1)).unwrap();
        let before = p.weights().clone();
        sgd_step(&mut p, &[sample(0.3, 5.0, false), sample(0.6, -2.0, false)], 0.1, 0.01).unwrap();
        assert_eq!(p.weights(), &before);
        sgd_step(&mut p, &[sample(0.3, 5.0, true)], 0.0, 0.01).unwrap();
        assert_eq!(p.weights(), &before);
    }

    #[test]
    fn single_sample_update_by_hand() {
        let mut p = path_1d(6);
        let (t, g, eta) = (0.37, 1.7, 0.05);
        sgd_step(&mut p, &[sample(t, g, true)], eta, 0.0).unwrap();
        let phi = p.features().eval(&[t]);
        for j in 0..6 {
            let expect = -eta * g * phi[j];
            assert!((p.weights()[(0, j)] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = path_1d(6);
        let before = p.weights().clone();
        let r = sgd_step(&mut p, &[sample(0.2, 1.0, true), sample(0.4, f64::NAN, true)], 0.1, 0.0);
        assert!(matches!(r, Err(Error::Numerical(_))));
        assert_eq!(p.weights(), &before);
    }

    #[test]
    fn boundary_enforcement() {
        let mut p = Path::straight_line(FeatureMap::rff(40, 0.15, 2).unwrap(), &[0.0, 0.0], &[4.0, 1.0])
            .unwrap();
        let o = enforce_boundary(&mut p, &[0.0, 0.0], &[4.0, 1.0], 1e-6, 10).unwrap();
        assert_eq!(o.steps, 0);
        assert_eq!(p.boundary_weights(), &DMatrix::zeros(2, 2));
        p.set_weights(DMatrix::from_fn(2, 40, |i, j| ((3 * i + j) as f64).sin())).unwrap();
        assert!(p.endpoint_residual(&[0.0, 0.0], &[4.0, 1.0]) > 1e-2);
        let o = enforce_boundary(&mut p, &[0.0, 0.0], &[4.0, 1.0], 1e-6, 10).unwrap();
        assert!(o.residual <= 1e-6 && o.steps <= 10);
        assert!(p.endpoint_residual(&[0.0, 0.0], &[4.0, 1.0]) <= 1e-6);
    }

    fn free_map() -> HilbertMap {
        let f = FeatureMap::rff_spatial(10, 1.0, 1, vec![-1.0, -1.0], vec![6.0, 6.0]).unwrap();
        HilbertMap::with_weights(f, vec![0.0; 10], -3.0).unwrap()
    }

    #[test]
    fn occupied_endpoint_is_rejected() {
        let f = FeatureMap::rff_spatial(10, 1.0, 1, vec![-1.0, -1.0], vec![6.0, 6.0]).unwrap();
        let map = HilbertMap::with_weights(f, vec![0.0; 10], 3.0).unwrap();
        let r = plan(
            &map,
            &[0.0, 0.0],
            &[5.0, 5.0],
            &BodyModel::point(2),
            FeatureMap::rff(20, 0.1, 0).unwrap(),
            &PlannerConfig::default(),
        );
        assert!(matches!(r, Err(Error::InvalidEndpoint(_))));
    }

    #[test]
    fn free_space_run_keeps_straight_line() {
        let cfg = PlannerConfig {
            max_iters: 40,
            ..PlannerConfig::default()
        };
        let (path, run) = plan(
            &free_map(),
            &[0.0, 0.0],
            &[5.0, 5.0],
            &BodyModel::point(2),
            FeatureMap::rff(50, 0.1, 0).unwrap(),
            &cfg,
        )
        .unwrap();
        assert_eq!(run.status, PlanStatus::Converged);
        assert!(path.length(1000) <= 1.02 * 50f64.sqrt());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = PlannerConfig {
            p_safe: 1.0,
            ..PlannerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PlannerConfig {
            batch: 0,
            ..PlannerConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
