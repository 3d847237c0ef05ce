//! Approximate-kernel path model.
//!
//! A path maps normalized time `t in [0,1]` to a `D`-dimensional configuration:
//!
//! ```text
//! xi(t) = offset(t) + W_b . phi_b(t) + W . phi(t)
//! ```
//!
//! where `phi` are the path features, `phi_b` the boundary-correction features and
//! the offset is a straight line (or an injected polyline) between the endpoints.
//! The model is linear in `(W, W_b)` for fixed features and offset.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{clamp_time, FeatureMap, FeatureSpec};

pub const PATH_FORMAT: &str = "occplan.path";
pub const PATH_VERSION: u32 = 1;

/// Nystrom boundary features with landmarks at both endpoints.
pub fn endpoint_features(lengthscale: f64) -> Result<FeatureMap> {
    FeatureMap::nystrom(&[0.0, 1.0], lengthscale, 1e-8)
}

/// Offset path the optimized deformation is added to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Offset {
    /// `start + t (goal - start)`.
    Line { start: Vec<f64>, goal: Vec<f64> },
    /// Polyline through the given vertices, parameterized by normalized arc length.
    Polyline { points: Vec<Vec<f64>> },
}

impl Offset {
    fn dim(&self) -> usize {
        match self {
            Offset::Line { start, .. } => start.len(),
            Offset::Polyline { points } => points[0].len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Offset::Line { start, goal } => {
                if start.is_empty() || start.len() != goal.len() {
                    return Err(Error::InvalidArgument(
                        "start and goal must share a non-zero dimension".into(),
                    ));
                }
                if start.iter().chain(goal).any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("non-finite endpoint".into()));
                }
            }
            Offset::Polyline { points } => {
                if points.len() < 2 {
                    return Err(Error::InvalidArgument(
                        "offset polyline needs at least two vertices".into(),
                    ));
                }
                let d = points[0].len();
                if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
                    return Err(Error::InvalidArgument(
                        "offset polyline vertices must be finite and share a dimension".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Cached evaluation data for a polyline offset.
#[derive(Clone, Debug)]
struct PolylineKnots {
    /// Normalized cumulative arc length at each vertex.
    knots: Vec<f64>,
}

impl PolylineKnots {
    fn new(points: &[Vec<f64>]) -> Self {
        let mut acc = vec![0.0];
        for w in points.windows(2) {
            let seg: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
            acc.push(acc.last().unwrap() + seg);
        }
        let total = *acc.last().unwrap();
        let n = points.len();
        let knots = if total > 0.0 {
            acc.iter().map(|s| s / total).collect()
        } else {
            (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
        };
        PolylineKnots { knots }
    }

    fn segment(&self, t: f64) -> usize {
        let last = self.knots.len() - 2;
        match self.knots.iter().rposition(|&k| k <= t) {
            Some(i) => i.min(last),
            None => 0,
        }
    }
}

/// Which metric tensor preconditions weight updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MetricSpec {
    #[default]
    Identity,
    /// `G = (1/N) sum_k phi(t_k) phi(t_k)^T + ridge I` over `N` uniform times.
    Gram { grid: usize, ridge: f64 },
}

/// Factorized metric tensor used to precondition feature-space updates.
#[derive(Clone, Debug)]
pub struct Metric {
    spec: MetricSpec,
    factor: Option<Cholesky<f64, Dyn>>,
}

impl Metric {
    pub fn identity() -> Self {
        Metric {
            spec: MetricSpec::Identity,
            factor: None,
        }
    }

    pub fn build(spec: &MetricSpec, features: &FeatureMap) -> Result<Self> {
        match spec {
            MetricSpec::Identity => Ok(Self::identity()),
            MetricSpec::Gram { grid, ridge } => {
                if *grid < 2 || !(*ridge > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "Gram metric needs grid >= 2 and ridge > 0 (got {grid}, {ridge})"
                    )));
                }
                let m = features.len();
                let mut gram = DMatrix::zeros(m, m);
                let mut phi = vec![0.0; m];
                for k in 0..*grid {
                    let t = k as f64 / (*grid - 1) as f64;
                    features.eval_time_into(t, 0, &mut phi)?;
                    let v = DVector::from_column_slice(&phi);
                    gram += &v * v.transpose();
                }
                gram /= *grid as f64;
                for i in 0..m {
                    gram[(i, i)] += ridge;
                }
                let factor = Cholesky::new(gram).ok_or_else(|| {
                    Error::Numerical("Gram metric is not positive definite".into())
                })?;
                Ok(Metric {
                    spec: spec.clone(),
                    factor: Some(factor),
                })
            }
        }
    }

    pub fn spec(&self) -> &MetricSpec {
        &self.spec
    }

    /// Applies `M^{-1}` in place.
    pub fn precondition(&self, v: &mut DVector<f64>) {
        if let Some(f) = &self.factor {
            f.solve_mut(v);
        }
    }
}

/// A path represented by approximate-kernel features.
#[derive(Clone, Debug)]
pub struct Path {
    features: FeatureMap,
    weights: DMatrix<f64>,
    boundary_features: FeatureMap,
    boundary_weights: DMatrix<f64>,
    offset: Offset,
    knots: Option<PolylineKnots>,
    metric: Metric,
}

impl Path {
    /// Zero-weight path over a straight-line offset with endpoint boundary features
    /// sharing the path features' lengthscale (capped at 0.25 so corrections stay local).
    pub fn straight_line(features: FeatureMap, start: &[f64], goal: &[f64]) -> Result<Self> {
        let boundary = endpoint_features(default_boundary_lengthscale(&features))?;
        Self::new(
            features,
            boundary,
            Offset::Line {
                start: start.to_vec(),
                goal: goal.to_vec(),
            },
            MetricSpec::Identity,
        )
    }

    pub fn new(
        features: FeatureMap,
        boundary_features: FeatureMap,
        offset: Offset,
        metric: MetricSpec,
    ) -> Result<Self> {
        offset.validate()?;
        if features.input_dim() != 1 || boundary_features.input_dim() != 1 {
            return Err(Error::InvalidArgument(
                "path features must be defined over time".into(),
            ));
        }
        let d = offset.dim();
        let knots = match &offset {
            Offset::Polyline { points } => Some(PolylineKnots::new(points)),
            Offset::Line { .. } => None,
        };
        let metric = Metric::build(&metric, &features)?;
        Ok(Path {
            weights: DMatrix::zeros(d, features.len()),
            boundary_weights: DMatrix::zeros(d, boundary_features.len()),
            features,
            boundary_features,
            offset,
            knots,
            metric,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn boundary_features(&self) -> &FeatureMap {
        &self.boundary_features
    }

    pub fn offset(&self) -> &Offset {
        &self.offset
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    /// `D x M` feature weights.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// `D x M_b` boundary weights.
    pub fn boundary_weights(&self) -> &DMatrix<f64> {
        &self.boundary_weights
    }

    pub fn set_weights(&mut self, weights: DMatrix<f64>) -> Result<()> {
        check_shape("weights", &weights, self.dim(), self.features.len())?;
        self.weights = weights;
        Ok(())
    }

    pub fn set_boundary_weights(&mut self, weights: DMatrix<f64>) -> Result<()> {
        check_shape(
            "boundary weights",
            &weights,
            self.dim(),
            self.boundary_features.len(),
        )?;
        self.boundary_weights = weights;
        Ok(())
    }

    pub(crate) fn weights_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.weights
    }

    pub(crate) fn boundary_weights_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.boundary_weights
    }

    /// Configuration at the path's first and last vertex of the offset.
    pub fn offset_endpoints(&self) -> (DVector<f64>, DVector<f64>) {
        match &self.offset {
            Offset::Line { start, goal } => (
                DVector::from_column_slice(start),
                DVector::from_column_slice(goal),
            ),
            Offset::Polyline { points } => (
                DVector::from_column_slice(&points[0]),
                DVector::from_column_slice(points.last().unwrap()),
            ),
        }
    }

    /// Offset term or its time derivative.
    pub fn offset_eval(&self, t: f64, order: usize) -> Result<DVector<f64>> {
        if order > 2 {
            return Err(Error::UnsupportedOrder(order));
        }
        let t = clamp_time(t);
        let d = self.dim();
        if order == 2 {
            return Ok(DVector::zeros(d));
        }
        Ok(match &self.offset {
            Offset::Line { start, goal } => DVector::from_fn(d, |i, _| {
                let delta = goal[i] - start[i];
                if order == 0 {
                    start[i] + t * delta
                } else {
                    delta
                }
            }),
            Offset::Polyline { points } => {
                let knots = &self.knots.as_ref().unwrap().knots;
                let seg = self.knots.as_ref().unwrap().segment(t);
                let (k0, k1) = (knots[seg], knots[seg + 1]);
                let span = k1 - k0;
                let (a, b) = (&points[seg], &points[seg + 1]);
                DVector::from_fn(d, |i, _| {
                    if span <= 0.0 {
                        if order == 0 {
                            a[i]
                        } else {
                            0.0
                        }
                    } else if order == 0 {
                        a[i] + (t - k0) / span * (b[i] - a[i])
                    } else {
                        (b[i] - a[i]) / span
                    }
                })
            }
        })
    }

    /// `W . phi^(order)(t)`, the optimized part of the path.
    pub fn weight_contribution(&self, t: f64, order: usize) -> Result<DVector<f64>> {
        let phi = self.features.eval_features(t, order)?;
        Ok(&self.weights * phi)
    }

    /// `W_b . phi_b^(order)(t)`, the boundary-correction term.
    pub fn boundary_contribution(&self, t: f64, order: usize) -> Result<DVector<f64>> {
        let phi = self.boundary_features.eval_features(t, order)?;
        Ok(&self.boundary_weights * phi)
    }

    /// Configuration (order 0), velocity (1) or acceleration (2) at time `t`.
    pub fn eval(&self, t: f64, order: usize) -> Result<DVector<f64>> {
        let t = clamp_time(t);
        let mut out = self.offset_eval(t, order)?;
        out += self.boundary_contribution(t, order)?;
        out += self.weight_contribution(t, order)?;
        Ok(out)
    }

    /// Configuration at `t`; `t` must already lie in `[0, 1]`.
    pub fn position(&self, t: f64) -> DVector<f64> {
        self.eval(t, 0).expect("order 0 is always supported")
    }

    /// Largest distance between the path endpoints and the desired ones.
    pub fn endpoint_residual(&self, start: &[f64], goal: &[f64]) -> f64 {
        let a = self.position(0.0) - DVector::from_column_slice(start);
        let b = self.position(1.0) - DVector::from_column_slice(goal);
        a.norm().max(b.norm())
    }

    /// `resolution` configurations at uniformly spaced times including both ends.
    pub fn sample(&self, resolution: usize) -> Vec<DVector<f64>> {
        let n = resolution.max(2);
        (0..n)
            .map(|k| self.position(k as f64 / (n - 1) as f64))
            .collect()
    }

    /// Trapezoidal estimate of `int_0^1 |xi'(t)| dt`.
    pub fn length(&self, resolution: usize) -> f64 {
        let n = resolution.max(2);
        let h = 1.0 / (n - 1) as f64;
        let speeds: Vec<f64> = (0..n)
            .map(|k| self.eval(k as f64 * h, 1).unwrap().norm())
            .collect();
        trapezoid(&speeds, h)
    }

    /// Writes `t,x_1..x_D` rows at `resolution` uniform times.
    pub fn write_csv<W: Write>(&self, mut out: W, resolution: usize) -> std::io::Result<()> {
        let n = resolution.max(2);
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.dim()).map(|i| format!("x_{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for k in 0..n {
            let t = k as f64 / (n - 1) as f64;
            let p = self.position(t);
            let row: Vec<String> = std::iter::once(t.to_string())
                .chain(p.iter().map(|v| v.to_string()))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_document(&self) -> PathDocument {
        PathDocument {
            format: PATH_FORMAT.to_string(),
            version: PATH_VERSION,
            dim: self.dim(),
            features: self.features.spec().clone(),
            weights: rows(&self.weights),
            boundary_features: self.boundary_features.spec().clone(),
            boundary_weights: rows(&self.boundary_weights),
            offset: self.offset.clone(),
            metric: self.metric.spec().clone(),
        }
    }

    pub fn from_document(doc: PathDocument) -> Result<Self> {
        if doc.format != PATH_FORMAT {
            return Err(Error::Format(format!(
                "expected format {PATH_FORMAT:?}, found {:?}",
                doc.format
            )));
        }
        if doc.version != PATH_VERSION {
            return Err(Error::Format(format!(
                "unsupported path document version {}",
                doc.version
            )));
        }
        let features = FeatureMap::from_spec(doc.features)?;
        let boundary = FeatureMap::from_spec(doc.boundary_features)?;
        let mut path = Path::new(features, boundary, doc.offset, doc.metric)?;
        if path.dim() != doc.dim {
            return Err(Error::Format(format!(
                "document declares dimension {} but its offset has {}",
                doc.dim,
                path.dim()
            )));
        }
        let w = from_rows(&doc.weights, path.dim(), path.features.len(), "weights")?;
        let wb = from_rows(
            &doc.boundary_weights,
            path.dim(),
            path.boundary_features.len(),
            "boundary weights",
        )?;
        path.weights = w;
        path.boundary_weights = wb;
        Ok(path)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

fn default_boundary_lengthscale(features: &FeatureMap) -> f64 {
    features.lengthscale().min(0.25)
}

/// Versioned serialized form of a [`Path`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathDocument {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub features: FeatureSpec,
    pub weights: Vec<Vec<f64>>,
    pub boundary_features: FeatureSpec,
    pub boundary_weights: Vec<Vec<f64>>,
    pub offset: Offset,
    #[serde(default)]
    pub metric: MetricSpec,
}

pub(crate) fn trapezoid(values: &[f64], h: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    h * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

fn check_shape(what: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::InvalidArgument(format!(
            "{what} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(data: &[Vec<f64>], rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if data.len() != rows || data.iter().any(|r| r.len() != cols) {
        return Err(Error::Format(format!("{what} must be {rows}x{cols}")));
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| data[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rff_path(m: usize) -> Path {
        let f = FeatureMap::rff(m, 0.15, 4).unwrap();
        Path::straight_line(f, &[0.0, 1.0], &[3.0, -1.0]).unwrap()
    }

    fn random_weights(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_reproduce_offset_line() {
        let p = rff_path(20);
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let x = p.eval(t, 0).unwrap();
            assert_eq!(x[0], 0.0 + t * 3.0);
            assert_eq!(x[1], 1.0 + t * -2.0);
            assert!(p.eval(t, 2).unwrap().iter().all(|v| *v == 0.0));
        }
        assert_eq!(p.endpoint_residual(&[0.0, 1.0], &[3.0, -1.0]), 0.0);
    }

    #[test]
    fn random_weights_recompose_independently() {
        let mut p = rff_path(30);
        let w = random_weights(2, 30, 1);
        p.set_weights(w.clone()).unwrap();
        let wb = random_weights(2, 2, 2);
        p.set_boundary_weights(wb.clone()).unwrap();
        for t in [0.0, 0.13, 0.5, 0.91] {
            let phi = p.features().eval(&[t]);
            let phib = p.boundary_features().eval(&[t]);
            let expect = DVector::from_vec(vec![3.0 * t, 1.0 - 2.0 * t]) + &wb * phib + &w * phi;
            let got = p.eval(t, 0).unwrap();
            assert!((got - expect).amax() <= 1e-12);
        }
    }

    #[test]
    fn path_derivatives_match_finite_differences() {
        let mut p = rff_path(40);
        p.set_weights(random_weights(2, 40, 9)).unwrap();
        p.set_boundary_weights(random_weights(2, 2, 10)).unwrap();
        let h = 1e-5;
        for t in [0.2, 0.45, 0.8] {
            for order in [1, 2] {
                let fd = (p.eval(t + h, order - 1).unwrap() - p.eval(t - h, order - 1).unwrap())
                    / (2.0 * h);
                let an = p.eval(t, order).unwrap();
                assert!((&fd - &an).norm() / an.norm() <= 1e-4);
            }
        }
    }

    #[test]
    fn shape_checks() {
        let mut p = rff_path(10);
        assert!(p.set_weights(DMatrix::zeros(2, 9)).is_err());
        assert!(p.set_boundary_weights(DMatrix::zeros(3, 2)).is_err());
        assert!(p.eval(0.5, 3).is_err());
    }

    #[test]
    fn polyline_offset_interpolates_by_arc_length() {
        let f = FeatureMap::rff(10, 0.2, 1).unwrap();
        let b = endpoint_features(0.2).unwrap();
        let offset = Offset::Polyline {
            points: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 3.0]],
        };
        let p = Path::new(f, b, offset, MetricSpec::Identity).unwrap();
        let mid = p.eval(0.25, 0).unwrap();
        assert!((mid[0] - 1.0).abs() < 1e-12 && mid[1].abs() < 1e-12);
        let end = p.eval(1.0, 0).unwrap();
        assert!((end[0] - 1.0).abs() < 1e-12 && (end[1] - 3.0).abs() < 1e-12);
        let v = p.eval(0.5, 1).unwrap();
        assert!((v[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn straight_line_length() {
        let p = rff_path(10);
        assert!((p.length(100) - 13.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gram_metric_preconditions() {
        let f = FeatureMap::rff(20, 0.2, 1).unwrap();
        let b = endpoint_features(0.2).unwrap();
        let offset = Offset::Line {
            start: vec![0.0],
            goal: vec![1.0],
        };
        let p = Path::new(f, b, offset, MetricSpec::Gram { grid: 50, ridge: 1e-3 }).unwrap();
        let mut v = DVector::from_element(20, 1.0);
        p.metric().precondition(&mut v);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v.iter().any(|x| (x - 1.0).abs() > 1e-6));
    }

    #[test]
    fn csv_export_shape() {
        let p = rff_path(10);
        let mut buf = Vec::new();
        p.write_csv(&mut buf, 5).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,x_1,x_2");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[5], "1,3,-1");
    }

    #[test]
    fn document_version_is_checked() {
        let p = rff_path(5);
        let mut doc = p.to_document();
        doc.version = 99;
        assert!(matches!(Path::from_document(doc), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(seed in 0u64..1000, m in 1usize..40) {
            let f = FeatureMap::rff(m, 0.1 + (seed % 7) as f64 * 0.05, seed).unwrap();
            let mut p = Path::straight_line(f, &[0.5, -2.0], &[1.0, 4.0]).unwrap();
            p.set_weights(random_weights(2, m, seed)).unwrap();
            p.set_boundary_weights(random_weights(2, 2, seed + 1)).unwrap();
            let back = Path::from_json(&p.to_json().unwrap()).unwrap();
            prop_assert_eq!(back.weights(), p.weights());
            prop_assert_eq!(back.boundary_weights(), p.boundary_weights());
            for t in [0.0, 0.3, 1.0] {
                let a = p.eval(t, 0).unwrap();
                let b = back.eval(t, 0).unwrap();
                prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }

        #[test]
        fn eval_is_linear_in_weights(seed in 0u64..500, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let f = FeatureMap::rff(25, 0.2, seed).unwrap();
            let base = Path::straight_line(f, &[0.0, 0.0], &[1.0, 2.0]).unwrap();
            let w1 = random_weights(2, 25, seed);
            let w2 = random_weights(2, 25, seed + 7);
            let mut p = base.clone();
            p.set_weights(&w1 * alpha + &w2 * beta).unwrap();
            let mut p1 = base.clone();
            p1.set_weights(w1).unwrap();
            let mut p2 = base.clone();
            p2.set_weights(w2).unwrap();
            for t in [0.1, 0.5, 0.77] {
                let off = base.eval(t, 0).unwrap();
                let c1 = p1.eval(t, 0).unwrap() - &off;
                let c2 = p2.eval(t, 0).unwrap() - &off;
                let expect = off + c1 * alpha + c2 * beta;
                prop_assert!((p.eval(t, 0).unwrap() - expect).amax() <= 1e-10);
            }
        }
    }
}
