//! Finite feature maps approximating the squared-exponential (RBF) kernel.
//!
//! A [`FeatureMap`] turns an input (a time `t` in `[0,1]` or a workspace point) into an
//! `M`-vector `phi(x)` such that `phi(x) . phi(y)` approximates
//! `exp(-|x - y|^2 / (2 l^2))`. Two constructions are supported:
//!
//! * random Fourier features: `phi_j(x) = sqrt(2/M) cos(w_j . x + b_j)` with
//!   `w_j ~ N(0, I / l^2)` and `b_j ~ U[0, 2 pi)`;
//! * Nystrom features: `phi(x) = L^{-1} k(landmarks, x)` where `L L^T` is the jittered
//!   landmark Gram matrix.
//!
//! Maps are fully described by their [`FeatureSpec`]; rebuilding from a spec is
//! bit-identical, which is what the serialized path and map documents rely on.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest jitter tried when the landmark Gram matrix refuses to factor.
const MAX_JITTER: f64 = 1e-3;

/// Exact RBF kernel between two points of equal dimension.
pub fn rbf_kernel(lengthscale: f64, x: &[f64], y: &[f64]) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sq / (2.0 * lengthscale * lengthscale)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Rff,
    Nystrom,
}

/// Input domain of a feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Domain {
    /// The normalized time interval `[0, 1]`.
    Time,
    /// Axis-aligned workspace box.
    Box { min: Vec<f64>, max: Vec<f64> },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Time => 1,
            Domain::Box { min, .. } => min.len(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Domain::Time => (0.0..=1.0).contains(&x[0]),
            Domain::Box { min, max } => x
                .iter()
                .zip(min.iter().zip(max))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi),
        }
    }
}

/// Everything needed to rebuild a feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub count: usize,
    pub lengthscale: f64,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
}

#[derive(Clone, Debug)]
enum Inner {
    Rff {
        /// Row-major `count x dim` frequency matrix.
        freqs: Vec<f64>,
        phases: Vec<f64>,
        scale: f64,
    },
    Nystrom {
        /// Row-major `count x dim` landmark coordinates.
        landmarks: Vec<f64>,
        /// Lower Cholesky factor of the jittered Gram matrix.
        lower: DMatrix<f64>,
        jitter_used: f64,
    },
}

/// A finite feature set approximating an RBF kernel.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "FeatureSpec", into = "FeatureSpec")]
pub struct FeatureMap {
    spec: FeatureSpec,
    inner: Inner,
}

impl PartialEq for FeatureMap {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl From<FeatureMap> for FeatureSpec {
    fn from(map: FeatureMap) -> Self {
        map.spec
    }
}

impl TryFrom<FeatureSpec> for FeatureMap {
    type Error = Error;

    fn try_from(spec: FeatureSpec) -> Result<Self> {
        FeatureMap::from_spec(spec)
    }
}

fn check_lengthscale(lengthscale: f64) -> Result<()> {
    if lengthscale.is_nan() || lengthscale <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lengthscale must be positive, got {lengthscale}"
        )));
    }
    Ok(())
}

impl FeatureMap {
    /// Random Fourier features over the time interval.
    pub fn rff(count: usize, lengthscale: f64, seed: u64) -> Result<Self> {
        Self::from_spec(FeatureSpec {
            kind: FeatureKind::Rff,
            count,
            lengthscale,
            domain: Domain::Time,
            seed: Some(seed),
            landmarks: None,
            jitter: None,
        })
    }

    /// Random Fourier features over a workspace box.
    pub fn rff_spatial(
        count: usize,
        lengthscale: f64,
        seed: u64,
        min: Vec<f64>,
        max: Vec<f64>,
    ) -> Result<Self> {
        Self::from_spec(FeatureSpec {
            kind: FeatureKind::Rff,
            count,
            lengthscale,
            domain: Domain::Box { min, max },
            seed: Some(seed),
            landmarks: None,
            jitter: None,
        })
    }

    /// Nystrom features over the time interval with the given landmark times.
    pub fn nystrom(landmarks: &[f64], lengthscale: f64, jitter: f64) -> Result<Self> {
        Self::from_spec(FeatureSpec {
            kind: FeatureKind::Nystrom,
            count: landmarks.len(),
            lengthscale,
            domain: Domain::Time,
            seed: None,
            landmarks: Some(landmarks.iter().map(|&t| vec![t]).collect()),
            jitter: Some(jitter),
        })
    }

    /// Nystrom features over a workspace box.
    pub fn nystrom_spatial(
        landmarks: Vec<Vec<f64>>,
        lengthscale: f64,
        jitter: f64,
        min: Vec<f64>,
        max: Vec<f64>,
    ) -> Result<Self> {
        Self::from_spec(FeatureSpec {
            kind: FeatureKind::Nystrom,
            count: landmarks.len(),
            lengthscale,
            domain: Domain::Box { min, max },
            seed: None,
            landmarks: Some(landmarks),
            jitter: Some(jitter),
        })
    }

    pub fn from_spec(spec: FeatureSpec) -> Result<Self> {
        check_lengthscale(spec.lengthscale)?;
        if let Domain::Box { min, max } = &spec.domain {
            if min.is_empty() || min.len() != max.len() {
                return Err(Error::InvalidArgument(
                    "workspace box needs matching, non-empty min/max corners".into(),
                ));
            }
            if min.iter().zip(max).any(|(lo, hi)| !(lo < hi)) {
                return Err(Error::InvalidArgument(format!(
                    "degenerate workspace box {min:?}..{max:?}"
                )));
            }
        }
        let inner = match spec.kind {
            FeatureKind::Rff => build_rff_inner(&spec)?,
            FeatureKind::Nystrom => build_nystrom_inner(&spec)?,
        };
        Ok(FeatureMap { spec, inner })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn kind(&self) -> FeatureKind {
        self.spec.kind
    }

    /// Number of features `M`.
    pub fn len(&self) -> usize {
        self.spec.count
    }

    pub fn is_empty(&self) -> bool {
        self.spec.count == 0
    }

    pub fn input_dim(&self) -> usize {
        self.spec.domain.dim()
    }

    pub fn lengthscale(&self) -> f64 {
        self.spec.lengthscale
    }

    /// Jitter actually added to the Gram diagonal (Nystrom only).
    pub fn jitter_used(&self) -> Option<f64> {
        match &self.inner {
            Inner::Nystrom { jitter_used, .. } => Some(*jitter_used),
            Inner::Rff { .. } => None,
        }
    }

    /// Frequency vector of feature `j` (RFF only).
    pub fn frequency(&self, j: usize) -> Option<&[f64]> {
        match &self.inner {
            Inner::Rff { freqs, .. } => {
                let d = self.input_dim();
                Some(&freqs[j * d..(j + 1) * d])
            }
            Inner::Nystrom { .. } => None,
        }
    }

    /// Phase of feature `j` (RFF only).
    pub fn phase(&self, j: usize) -> Option<f64> {
        match &self.inner {
            Inner::Rff { phases, .. } => Some(phases[j]),
            Inner::Nystrom { .. } => None,
        }
    }

    /// Feature vector at an arbitrary input point, written into `out`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_dim());
        debug_assert_eq!(out.len(), self.len());
        let d = self.input_dim();
        match &self.inner {
            Inner::Rff {
                freqs,
                phases,
                scale,
            } => {
                for (j, o) in out.iter_mut().enumerate() {
                    let arg = dot(&freqs[j * d..(j + 1) * d], x) + phases[j];
                    *o = scale * arg.cos();
                }
            }
            Inner::Nystrom {
                landmarks, lower, ..
            } => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = rbf_kernel(self.spec.lengthscale, &landmarks[j * d..(j + 1) * d], x);
                }
                forward_substitute(lower, out);
            }
        }
    }

    /// Feature vector at an arbitrary input point.
    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        self.eval_into(x, out.as_mut_slice());
        out
    }

    /// Time-domain features or their exact derivatives, written into `out`.
    ///
    /// `t` is used as given; callers wanting clamping go through [`Self::eval_features`].
    pub fn eval_time_into(&self, t: f64, order: usize, out: &mut [f64]) -> Result<()> {
        if order > 2 {
            return Err(Error::UnsupportedOrder(order));
        }
        if self.input_dim() != 1 {
            return Err(Error::InvalidArgument(
                "time derivatives need a one-dimensional feature map".into(),
            ));
        }
        match &self.inner {
            Inner::Rff {
                freqs,
                phases,
                scale,
            } => {
                for (j, o) in out.iter_mut().enumerate() {
                    let w = freqs[j];
                    let arg = w * t + phases[j];
                    *o = match order {
                        0 => scale * arg.cos(),
                        1 => -scale * w * arg.sin(),
                        _ => -scale * w * w * arg.cos(),
                    };
                }
            }
            Inner::Nystrom {
                landmarks, lower, ..
            } => {
                let l2 = self.spec.lengthscale * self.spec.lengthscale;
                for (j, o) in out.iter_mut().enumerate() {
                    let diff = t - landmarks[j];
                    let k = (-diff * diff / (2.0 * l2)).exp();
                    *o = match order {
                        0 => k,
                        1 => -diff / l2 * k,
                        _ => (diff * diff / (l2 * l2) - 1.0 / l2) * k,
                    };
                }
                forward_substitute(lower, out);
            }
        }
        Ok(())
    }

    /// Time-domain features (order 0) or their first/second time derivatives.
    ///
    /// Times outside `[0, 1]` are clamped and logged.
    pub fn eval_features(&self, t: f64, order: usize) -> Result<DVector<f64>> {
        let t = clamp_time(t);
        let mut out = DVector::zeros(self.len());
        self.eval_time_into(t, order, out.as_mut_slice())?;
        Ok(out)
    }

    /// Approximate kernel `phi(x) . phi(y)`.
    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        let fx = self.eval(x);
        let fy = self.eval(y);
        fx.dot(&fy)
    }

    /// `M x d` Jacobian of the feature vector with respect to the input.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.input_dim();
        let m = self.len();
        let mut jac = DMatrix::zeros(m, d);
        match &self.inner {
            Inner::Rff {
                freqs,
                phases,
                scale,
            } => {
                for j in 0..m {
                    let w = &freqs[j * d..(j + 1) * d];
                    let s = -scale * (dot(w, x) + phases[j]).sin();
                    for k in 0..d {
                        jac[(j, k)] = s * w[k];
                    }
                }
            }
            Inner::Nystrom {
                landmarks, lower, ..
            } => {
                let l2 = self.spec.lengthscale * self.spec.lengthscale;
                for j in 0..m {
                    let lm = &landmarks[j * d..(j + 1) * d];
                    let k = rbf_kernel(self.spec.lengthscale, lm, x);
                    for c in 0..d {
                        jac[(j, c)] = -(x[c] - lm[c]) / l2 * k;
                    }
                }
                for c in 0..d {
                    let mut col: Vec<f64> = jac.column(c).iter().copied().collect();
                    forward_substitute(lower, &mut col);
                    jac.column_mut(c).copy_from_slice(&col);
                }
            }
        }
        jac
    }

    /// Returns `weights . phi(x)` and its input gradient `J(x)^T weights`.
    pub fn weighted_value_and_gradient(&self, x: &[f64], weights: &[f64]) -> (f64, Vec<f64>) {
        let d = self.input_dim();
        match &self.inner {
            Inner::Rff {
                freqs,
                phases,
                scale,
            } => {
                let mut value = 0.0;
                let mut grad = vec![0.0; d];
                for (j, &wj) in weights.iter().enumerate() {
                    let w = &freqs[j * d..(j + 1) * d];
                    let (s, c) = (dot(w, x) + phases[j]).sin_cos();
                    value += wj * scale * c;
                    let gs = -wj * scale * s;
                    for k in 0..d {
                        grad[k] += gs * w[k];
                    }
                }
                (value, grad)
            }
            Inner::Nystrom { .. } => {
                let value = self.eval(x).as_slice().iter().zip(weights).map(|(a, b)| a * b).sum();
                let jac = self.jacobian(x);
                let grad = jac.transpose() * DVector::from_column_slice(weights);
                (value, grad.as_slice().to_vec())
            }
        }
    }

    /// `weights . phi(x)` without the gradient.
    pub fn weighted_value(&self, x: &[f64], weights: &[f64]) -> f64 {
        let d = self.input_dim();
        match &self.inner {
            Inner::Rff {
                freqs,
                phases,
                scale,
            } => weights
                .iter()
                .enumerate()
                .map(|(j, wj)| wj * scale * (dot(&freqs[j * d..(j + 1) * d], x) + phases[j]).cos())
                .sum(),
            Inner::Nystrom { .. } => self.eval(x).as_slice().iter().zip(weights).map(|(a, b)| a * b).sum(),
        }
    }

    /// Upper bound on `sup_x |d phi_j / dx|` summed in quadrature over features,
    /// i.e. a bound on the spectral norm of the Jacobian (RFF only).
    pub fn jacobian_bound(&self) -> Option<f64> {
        match &self.inner {
            Inner::Rff { freqs, scale, .. } => {
                let sq: f64 = freqs.iter().map(|w| w * w).sum();
                Some(scale * sq.sqrt())
            }
            Inner::Nystrom { .. } => None,
        }
    }
}

pub(crate) fn clamp_time(t: f64) -> f64 {
    if (0.0..=1.0).contains(&t) {
        t
    } else {
        let c = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        log::warn!("time {t} outside [0, 1], clamped to {c}");
        c
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place solve of `L y = b` for lower-triangular `L`.
fn forward_substitute(lower: &DMatrix<f64>, b: &mut [f64]) {
    let n = b.len();
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= lower[(i, k)] * b[k];
        }
        b[i] = acc / lower[(i, i)];
    }
}

fn build_rff_inner(spec: &FeatureSpec) -> Result<Inner> {
    if spec.count == 0 {
        return Err(Error::InvalidArgument(
            "feature count must be at least 1".into(),
        ));
    }
    let seed = spec
        .seed
        .ok_or_else(|| Error::InvalidArgument("random Fourier features need a seed".into()))?;
    let d = spec.domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_l = 1.0 / spec.lengthscale;
    let freqs: Vec<f64> = (0..spec.count * d)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * inv_l
        })
        .collect();
    let phases: Vec<f64> = (0..spec.count)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    Ok(Inner::Rff {
        freqs,
        phases,
        scale: (2.0 / spec.count as f64).sqrt(),
    })
}

fn build_nystrom_inner(spec: &FeatureSpec) -> Result<Inner> {
    let landmarks = spec
        .landmarks
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("Nystrom features need landmarks".into()))?;
    if landmarks.is_empty() {
        return Err(Error::InvalidArgument(
            "Nystrom features need at least one landmark".into(),
        ));
    }
    if landmarks.len() != spec.count {
        return Err(Error::InvalidArgument(format!(
            "feature count {} does not match {} landmarks",
            spec.count,
            landmarks.len()
        )));
    }
    let d = spec.domain.dim();
    for (i, lm) in landmarks.iter().enumerate() {
        if lm.len() != d || lm.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "landmark {i} is not a finite {d}-dimensional point"
            )));
        }
        if !spec.domain.contains(lm) {
            return Err(Error::InvalidArgument(format!(
                "landmark {i} {lm:?} lies outside the feature domain"
            )));
        }
    }
    for i in 0..landmarks.len() {
        for j in 0..i {
            if landmarks[i] == landmarks[j] {
                return Err(Error::InvalidArgument(format!(
                    "landmarks {j} and {i} coincide at {:?}",
                    landmarks[i]
                )));
            }
        }
    }
    let jitter = spec.jitter.unwrap_or(1e-8);
    if jitter.is_nan() || jitter < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "jitter must be non-negative, got {jitter}"
        )));
    }
    let n = landmarks.len();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        rbf_kernel(spec.lengthscale, &landmarks[i], &landmarks[j])
    });
    let mut current = jitter;
    loop {
        let mut jittered = gram.clone();
        for i in 0..n {
            jittered[(i, i)] += current;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(Inner::Nystrom {
                landmarks: landmarks.iter().flatten().copied().collect(),
                lower: chol.unpack(),
                jitter_used: current,
            });
        }
        if current >= MAX_JITTER {
            let min_gap = min_pairwise_distance(landmarks);
            return Err(Error::Numerical(format!(
                "landmark Gram matrix ({n} landmarks, lengthscale {}, closest pair {min_gap:.3e} apart) \
                 is not positive definite even with jitter {current:.1e}",
                spec.lengthscale
            )));
        }
        current = if current == 0.0 { 1e-12 } else { current * 10.0 };
        log::debug!("escalating Nystrom jitter to {current:.1e}");
    }
}

fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in 0..i {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn rff_rejects_bad_arguments() {
        assert!(matches!(FeatureMap::rff(0, 0.1, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(FeatureMap::rff(10, 0.0, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(FeatureMap::rff(10, -1.0, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rff_seeded_determinism() {
        let a = FeatureMap::rff(64, 0.2, 7).unwrap();
        let b = FeatureMap::rff(64, 0.2, 7).unwrap();
        for j in 0..64 {
            assert_eq!(a.frequency(j).unwrap()[0].to_bits(), b.frequency(j).unwrap()[0].to_bits());
            assert_eq!(a.phase(j).unwrap().to_bits(), b.phase(j).unwrap().to_bits());
        }
        let c = FeatureMap::rff(64, 0.2, 8).unwrap();
        assert_ne!(a.phase(0), c.phase(0));
    }

    #[test]
    fn rff_matches_exact_kernel_on_grid() {
        // Oracle: closed-form RBF kernel on a 50x50 grid.
        let f = FeatureMap::rff(2000, 0.1, 7).unwrap();
        let ts = grid(50);
        let feats: Vec<_> = ts.iter().map(|&t| f.eval(&[t])).collect();
        let mut worst: f64 = 0.0;
        for (i, &a) in ts.iter().enumerate() {
            for (j, &b) in ts.iter().enumerate() {
                let exact = rbf_kernel(0.1, &[a], &[b]);
                worst = worst.max((feats[i].dot(&feats[j]) - exact).abs());
            }
        }
        assert!(worst <= 0.08, "sup error {worst}");
    }

    #[test]
    fn rff_self_kernel_approaches_one() {
        let f = FeatureMap::rff(20_000, 0.3, 3).unwrap();
        for t in [0.0, 0.37, 1.0] {
            let k = f.kernel(&[t], &[t]);
            assert!((k - 1.0).abs() < 0.03, "k({t},{t}) = {k}");
        }
    }

    #[test]
    fn constant_feature_map_has_zero_derivative() {
        let f = FeatureMap::rff(16, f64::INFINITY, 1).unwrap();
        let d1 = f.eval_features(0.4, 1).unwrap();
        assert!(d1.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rff_second_derivative_is_scaled_value() {
        let f = FeatureMap::rff(32, 0.2, 11).unwrap();
        let v = f.eval_features(0.3, 0).unwrap();
        let d2 = f.eval_features(0.3, 2).unwrap();
        for j in 0..32 {
            let w = f.frequency(j).unwrap()[0];
            assert!((d2[j] + w * w * v[j]).abs() <= 1e-12 * (1.0 + w * w));
        }
    }

    #[test]
    fn unsupported_order() {
        let f = FeatureMap::rff(8, 0.2, 1).unwrap();
        assert!(matches!(f.eval_features(0.5, 3), Err(Error::UnsupportedOrder(3))));
    }

    #[test]
    fn out_of_domain_time_is_clamped() {
        let f = FeatureMap::rff(8, 0.2, 1).unwrap();
        assert_eq!(f.eval_features(1.5, 0).unwrap(), f.eval_features(1.0, 0).unwrap());
        assert_eq!(f.eval_features(-0.2, 1).unwrap(), f.eval_features(0.0, 1).unwrap());
    }

    #[test]
    fn nystrom_single_landmark_self_similarity() {
        let f = FeatureMap::nystrom(&[0.5], 0.2, 1e-8).unwrap();
        assert!((f.kernel(&[0.5], &[0.5]) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn nystrom_interpolates_exact_kernel_on_landmarks() {
        let ts = grid(30);
        let f = FeatureMap::nystrom(&ts, 0.1, 1e-8).unwrap();
        for &a in &ts {
            for &b in &ts {
                let err = (f.kernel(&[a], &[b]) - rbf_kernel(0.1, &[a], &[b])).abs();
                assert!(err <= 1e-6, "error {err} at ({a},{b})");
            }
        }
    }

    #[test]
    fn nystrom_dense_grid_error() {
        // 15 uniform landmarks, exact kernel checked on a 100-point grid.
        let f = FeatureMap::nystrom(&grid(15), 0.15, 1e-8).unwrap();
        let ts = grid(100);
        let mut worst: f64 = 0.0;
        for &a in &ts {
            for &b in &ts {
                worst = worst.max((f.kernel(&[a], &[b]) - rbf_kernel(0.15, &[a], &[b])).abs());
            }
        }
        assert!(worst <= 0.02, "sup error {worst}");
    }

    #[test]
    fn nystrom_rejects_bad_landmarks() {
        assert!(FeatureMap::nystrom(&[], 0.1, 1e-8).is_err());
        assert!(FeatureMap::nystrom(&[0.2, 0.2], 0.1, 1e-8).is_err());
        assert!(FeatureMap::nystrom(&[1.2], 0.1, 1e-8).is_err());
        assert!(FeatureMap::nystrom(&[0.2], 0.1, -1.0).is_err());
    }

    #[test]
    fn nystrom_escalates_jitter_for_near_duplicates() {
        let f = FeatureMap::nystrom(&[0.5, 0.5 + 1e-9], 1.0, 0.0).unwrap();
        assert!(f.jitter_used().unwrap() > 0.0);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps = [
            FeatureMap::rff(50, 0.2, 3).unwrap(),
            FeatureMap::nystrom(&grid(12), 0.2, 1e-8).unwrap(),
        ];
        let h = 1e-5;
        for f in &maps {
            for _ in 0..20 {
                let t: f64 = rng.random_range(0.05..0.95);
                for order in [1, 2] {
                    let lo = f.eval_features(t - h, order - 1).unwrap();
                    let hi = f.eval_features(t + h, order - 1).unwrap();
                    let fd = (hi - lo) / (2.0 * h);
                    let an = f.eval_features(t, order).unwrap();
                    let rel = (&fd - &an).norm() / an.norm().max(1e-12);
                    assert!(rel <= 1e-5, "{:?} order {order}: rel {rel}", f.kind());
                }
            }
        }
    }

    #[test]
    fn spatial_jacobian_matches_finite_differences() {
        let rff = FeatureMap::rff_spatial(40, 0.5, 2, vec![0.0, 0.0], vec![4.0, 4.0]).unwrap();
        let lms = vec![vec![1.0, 1.0], vec![2.0, 3.0], vec![3.0, 1.5]];
        let nys =
            FeatureMap::nystrom_spatial(lms, 0.8, 1e-8, vec![0.0, 0.0], vec![4.0, 4.0]).unwrap();
        let h = 1e-6;
        for f in [&rff, &nys] {
            let x = [1.3, 2.1];
            let jac = f.jacobian(&x);
            for c in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[c] += h;
                xm[c] -= h;
                let fd = (f.eval(&xp) - f.eval(&xm)) / (2.0 * h);
                let err = (fd - jac.column(c)).norm();
                assert!(err < 1e-6, "{:?}: {err}", f.kind());
            }
            let w: Vec<f64> = (0..f.len()).map(|j| (j as f64).sin()).collect();
            let (v, g) = f.weighted_value_and_gradient(&x, &w);
            let direct: f64 = f.eval(&x).iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((v - direct).abs() < 1e-12);
            assert!((v - f.weighted_value(&x, &w)).abs() < 1e-12);
            let jg = jac.transpose() * DVector::from_vec(w.clone());
            assert!((jg[0] - g[0]).abs() < 1e-10 && (jg[1] - g[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn spec_round_trip_is_bit_identical() {
        let f = FeatureMap::rff(16, 0.25, 99).unwrap();
        let g = FeatureMap::from_spec(f.spec().clone()).unwrap();
        for t in grid(7) {
            let a = f.eval(&[t]);
            let b = g.eval(&[t]);
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let json = serde_json::to_string(&f).unwrap();
        let h: FeatureMap = serde_json::from_str(&json).unwrap();
        assert_eq!(h.eval(&[0.3]), f.eval(&[0.3]));
    }
}
