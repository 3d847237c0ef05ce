//! Obstacle and dynamics functionals and their sampled functional gradients.
//!
//! The obstacle cost is the occupancy probability at workspace points
//! `x(xi(t), u) = xi(t) + u`; its functional gradient at `(t, u)` is the spatial
//! occupancy gradient (the kinematic Jacobian is the identity for a translating
//! rigid body). The dynamics cost is the path energy `1/2 int |xi'|^2 dt`, whose
//! functional gradient is `-xi''(t)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occupancy::HilbertMap;
use crate::path::{trapezoid, Path};

/// Body points of a rigidly translating robot, as workspace offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyModel {
    points: Vec<Vec<f64>>,
}

impl BodyModel {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("body needs at least one point".into()));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument(
                "body points must be finite and share a dimension".into(),
            ));
        }
        Ok(BodyModel { points })
    }

    /// A point robot at the configuration itself.
    pub fn point(dim: usize) -> Self {
        BodyModel {
            points: vec![vec![0.0; dim]],
        }
    }

    /// Center plus `n` points evenly spaced on a circle of radius `radius` (2-D).
    pub fn disc(radius: f64, n: usize) -> Result<Self> {
        let mut points = vec![vec![0.0, 0.0]];
        for k in 0..n {
            let a = k as f64 * std::f64::consts::TAU / n as f64;
            points.push(vec![radius * a.cos(), radius * a.sin()]);
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Forward kinematics `x(config, u) = config + u`.
    pub fn workspace_point(&self, config: &DVector<f64>, index: usize) -> Vec<f64> {
        config
            .iter()
            .zip(&self.points[index])
            .map(|(c, u)| c + u)
            .collect()
    }
}

/// One stochastic gradient observation at `(t, u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSample {
    pub t: f64,
    pub body_index: usize,
    /// Occupancy at the sampled workspace point.
    pub occupancy: f64,
    /// Obstacle gradient; `None` for rejected samples.
    pub g_obs: Option<DVector<f64>>,
    /// Dynamics gradient `-xi''(t)`.
    pub g_dyn: DVector<f64>,
    pub accepted: bool,
}

fn check_dims(path: &Path, map: &HilbertMap, body: &BodyModel) -> Result<()> {
    if path.dim() != map.dim() || body.dim() != map.dim() {
        return Err(Error::InvalidArgument(format!(
            "path ({}), body ({}) and map ({}) dimensions differ",
            path.dim(),
            body.dim(),
            map.dim()
        )));
    }
    Ok(())
}

/// `J^T grad c` at `x(xi(t), u)`, with `J = I`.
pub fn obstacle_gradient(
    path: &Path,
    map: &HilbertMap,
    body: &BodyModel,
    t: f64,
    body_index: usize,
) -> Result<DVector<f64>> {
    check_dims(path, map, body)?;
    let x = body.workspace_point(&path.eval(t, 0)?, body_index);
    Ok(DVector::from_vec(map.gradient(&x)))
}

/// `-xi''(t)`.
pub fn dynamics_gradient(path: &Path, t: f64) -> Result<DVector<f64>> {
    Ok(-path.eval(t, 2)?)
}

/// Evaluates occupancy and both gradients at `(t, u)` and applies the `p_safe` gate.
pub fn sample_gradient(
    path: &Path,
    map: &HilbertMap,
    body: &BodyModel,
    t: f64,
    body_index: usize,
    p_safe: f64,
) -> Result<GradientSample> {
    check_dims(path, map, body)?;
    let x = body.workspace_point(&path.eval(t, 0)?, body_index);
    let (occupancy, grad) = map.query_with_gradient(&x);
    let accepted = occupancy <= p_safe;
    Ok(GradientSample {
        t,
        body_index,
        occupancy,
        g_obs: accepted.then(|| DVector::from_vec(grad)),
        g_dyn: dynamics_gradient(path, t)?,
        accepted,
    })
}

/// Objective value split into its terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub obstacle: f64,
    pub dynamics: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    pub lambda: f64,
    pub resolution: usize,
    /// Measure path energy of `xi' - xi_o'` instead of `xi'`, so the offset line
    /// itself costs nothing.
    pub dyn_cost_relative_to_offset: bool,
}

/// Diagnostic objective: mean occupancy over a uniform `(t, u)` grid plus
/// `lambda` times the trapezoidal path energy.
pub fn evaluate_objective(
    path: &Path,
    map: &HilbertMap,
    body: &BodyModel,
    opts: &ObjectiveOptions,
) -> Result<ObjectiveValue> {
    check_dims(path, map, body)?;
    if opts.resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "objective resolution must be at least 2, got {}",
            opts.resolution
        )));
    }
    if !(opts.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative, got {}",
            opts.lambda
        )));
    }
    let n = opts.resolution;
    let h = 1.0 / (n - 1) as f64;
    let mut occ_sum = 0.0;
    let mut energy = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * h;
        let config = path.eval(t, 0)?;
        for u in 0..body.len() {
            occ_sum += map.query(&body.workspace_point(&config, u));
        }
        let mut v = path.eval(t, 1)?;
        if opts.dyn_cost_relative_to_offset {
            v -= path.offset_eval(t, 1)?;
        }
        energy.push(0.5 * v.norm_squared());
    }
    let obstacle = occ_sum / (n * body.len()) as f64;
    let dynamics = trapezoid(&energy, h);
    Ok(ObjectiveValue {
        obstacle,
        dynamics,
        total: obstacle + opts.lambda * dynamics,
    })
}
