//! Continuous occupancy model and grid-map adapter.
//!
//! [`HilbertMap`] is a logistic classifier over spatial kernel features,
//! `p(occupied | x) = sigmoid(w . phi(x) + b)`, with a closed-form spatial gradient
//! `p (1 - p) J(x)^T w`. [`GridMap`] wraps a raster of probabilities and estimates
//! gradients with a Sobel operator.

use std::cmp::Ordering;
use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec};

pub const MAP_FORMAT: &str = "occplan.hilbert-map";
pub const MAP_VERSION: u32 = 1;

/// Probabilities are kept strictly inside `(0, 1)`.
const PROB_FLOOR: f64 = 1e-15;

/// Occupancy label of a training point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Label {
    Occupied,
    Free,
}

impl Label {
    /// `+1` for occupied, `-1` for free.
    pub fn sign(self) -> i8 {
        match self {
            Label::Occupied => 1,
            Label::Free => -1,
        }
    }

    fn target(self) -> f64 {
        match self {
            Label::Occupied => 1.0,
            Label::Free => 0.0,
        }
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        l.sign()
    }
}

impl TryFrom<i8> for Label {
    type Error = Error;

    fn try_from(v: i8) -> Result<Label> {
        match v {
            1 => Ok(Label::Occupied),
            -1 => Ok(Label::Free),
            other => Err(Error::InvalidInput(format!(
                "label must be +1 or -1, got {other}"
            ))),
        }
    }
}

/// A workspace point with its occupancy label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub label: Label,
}

impl LabeledPoint {
    pub fn new(x: Vec<f64>, label: Label) -> Self {
        LabeledPoint { x, label }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub step: f64,
    pub l2: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 5,
            step: 0.01,
            l2: 1e-4,
            batch: 1,
            seed: 0,
        }
    }
}

/// Training provenance stored with a map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub options: TrainOptions,
    pub points: usize,
    pub occupied: usize,
    /// Mean training log-loss of the fitted model.
    pub log_loss: f64,
    /// Mean training log-loss of the constant 0.5 prior (`ln 2`).
    pub prior_log_loss: f64,
}

/// Logistic occupancy model over spatial features.
#[derive(Clone, Debug)]
pub struct HilbertMap {
    features: FeatureMap,
    weights: Vec<f64>,
    bias: f64,
    meta: Option<TrainMeta>,
}

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

impl HilbertMap {
    /// An untrained map: zero weights and bias, so every query returns 0.5.
    pub fn untrained(features: FeatureMap) -> Self {
        let m = features.len();
        HilbertMap {
            features,
            weights: vec![0.0; m],
            bias: 0.0,
            meta: None,
        }
    }

    pub fn with_weights(features: FeatureMap, weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.len() != features.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} features",
                weights.len(),
                features.len()
            )));
        }
        Ok(HilbertMap {
            features,
            weights,
            bias,
            meta: None,
        })
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn meta(&self) -> Option<&TrainMeta> {
        self.meta.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.features.input_dim()
    }

    /// `w . phi(x) + b`.
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.features.weighted_value(x, &self.weights) + self.bias
    }

    /// Probability of occupancy at `x`, always strictly inside `(0, 1)`.
    pub fn query(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Probability and its closed-form spatial gradient.
    pub fn query_with_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (z, mut g) = self.features.weighted_value_and_gradient(x, &self.weights);
        let p = sigmoid(z + self.bias);
        let s = p * (1.0 - p);
        for v in &mut g {
            *v *= s;
        }
        (p, g)
    }

    /// Spatial gradient `p (1 - p) J(x)^T w` of [`Self::query`].
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.query_with_gradient(x).1
    }

    /// Mean log-loss over a labeled set.
    pub fn log_loss(&self, points: &[LabeledPoint]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let total: f64 = points
            .iter()
            .map(|pt| {
                let p = self.query(&pt.x);
                match pt.label {
                    Label::Occupied => -p.ln(),
                    Label::Free => -(1.0 - p).ln(),
                }
            })
            .sum();
        total / points.len() as f64
    }

    /// Samples the map on an `nx x ny` grid of cell centers covering `[min, max]`.
    pub fn rasterize(&self, min: [f64; 2], max: [f64; 2], nx: usize, ny: usize) -> Result<GridMap> {
        if self.dim() != 2 {
            return Err(Error::InvalidArgument("rasterization needs a 2-D map".into()));
        }
        let res = (max[0] - min[0]) / nx as f64;
        let mut cells = Vec::with_capacity(nx * ny);
        for r in 0..ny {
            for c in 0..nx {
                let x = [min[0] + (c as f64 + 0.5) * res, min[1] + (r as f64 + 0.5) * res];
                cells.push(self.query(&x));
            }
        }
        GridMap::new(min, res, nx, ny, cells)
    }

    pub fn to_document(&self) -> MapDocument {
        MapDocument {
            format: MAP_FORMAT.into(),
            version: MAP_VERSION,
            features: self.features.spec().clone(),
            weights: self.weights.clone(),
            bias: self.bias,
            train_meta: self.meta.clone(),
        }
    }

    pub fn from_document(doc: MapDocument) -> Result<Self> {
        if doc.format != MAP_FORMAT {
            return Err(Error::Format(format!(
                "expected format {MAP_FORMAT:?}, found {:?}",
                doc.format
            )));
        }
        if doc.version != MAP_VERSION {
            return Err(Error::Format(format!(
                "unsupported map document version {}",
                doc.version
            )));
        }
        let features = FeatureMap::from_spec(doc.features)?;
        let mut map = HilbertMap::with_weights(features, doc.weights, doc.bias)?;
        map.meta = doc.train_meta;
        Ok(map)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Versioned serialized form of a [`HilbertMap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapDocument {
    pub format: String,
    pub version: u32,
    pub features: FeatureSpec,
    pub weights: Vec<f64>,
    pub bias: f64,
    #[serde(default)]
    pub train_meta: Option<TrainMeta>,
}

fn cmp_points(a: &LabeledPoint, b: &LabeledPoint) -> Ordering {
    for (u, v) in a.x.iter().zip(&b.x) {
        match u.total_cmp(v) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    a.label.sign().cmp(&b.label.sign())
}

/// Fits a logistic occupancy model by mini-batch SGD with L2 regularization.
///
/// Points are put in a canonical order before the seeded shuffle, so the result
/// depends only on the point set and the seed.
pub fn train_map(
    points: &[LabeledPoint],
    features: FeatureMap,
    opts: &TrainOptions,
) -> Result<HilbertMap> {
    if points.is_empty() {
        return Err(Error::DegenerateData("no training points".into()));
    }
    let d = features.input_dim();
    for (i, p) in points.iter().enumerate() {
        if p.x.len() != d {
            return Err(Error::InvalidInput(format!(
                "point {i} has dimension {}, features expect {d}",
                p.x.len()
            )));
        }
        if p.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "point {i} has non-finite coordinates {:?}",
                p.x
            )));
        }
    }
    let occupied = points.iter().filter(|p| p.label == Label::Occupied).count();
    if occupied == 0 || occupied == points.len() {
        return Err(Error::DegenerateData(format!(
            "all {} points carry the same label",
            points.len()
        )));
    }
    if opts.batch == 0 || opts.epochs == 0 || !(opts.step > 0.0) || !(opts.l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "training needs batch >= 1, epochs >= 1, step > 0, l2 >= 0 (got {opts:?})"
        )));
    }

    let mut order: Vec<&LabeledPoint> = points.iter().collect();
    order.sort_by(|a, b| cmp_points(a, b));

    let m = features.len();
    let mut weights = vec![0.0; m];
    let mut bias = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut phi = vec![0.0; m];
    let mut grad = vec![0.0; m];

    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for pt in chunk {
                features.eval_into(&pt.x, &mut phi);
                let z: f64 = phi.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() + bias;
                let err = sigmoid(z) - pt.label.target();
                for (g, f) in grad.iter_mut().zip(&phi) {
                    *g += err * f;
                }
                grad_b += err;
            }
            let scale = opts.step / chunk.len() as f64;
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= scale * g + opts.step * opts.l2 * *w;
            }
            bias -= scale * grad_b;
        }
    }

    let mut map = HilbertMap::with_weights(features, weights, bias)?;
    let log_loss = map.log_loss(points);
    map.meta = Some(TrainMeta {
        options: opts.clone(),
        points: points.len(),
        occupied,
        log_loss,
        prior_log_loss: std::f64::consts::LN_2,
    });
    Ok(map)
}

/// Metadata sidecar for a raster grid map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    /// World coordinates of the lower-left corner of the lower-left cell.
    pub origin: [f64; 2],
    /// Meters per cell.
    pub resolution: f64,
    /// Treat bright pixels as occupied instead of dark ones (images only).
    #[serde(default)]
    pub negate: bool,
}

/// Raster of occupancy probabilities. Row 0 is the row closest to `origin.y`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    origin: [f64; 2],
    resolution: f64,
    width: usize,
    height: usize,
    cells: Vec<f64>,
}

impl GridMap {
    pub fn new(
        origin: [f64; 2],
        resolution: f64,
        width: usize,
        height: usize,
        cells: Vec<f64>,
    ) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be positive, got {resolution}"
            )));
        }
        if width == 0 || height == 0 || cells.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} cells do not fill a {width}x{height} grid",
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "grid cell value {bad} outside [0, 1]"
            )));
        }
        Ok(GridMap {
            origin,
            resolution,
            width,
            height,
            cells,
        })
    }

    /// Grid with every cell at the given probability.
    pub fn uniform(origin: [f64; 2], resolution: f64, width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(origin, resolution, width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.width + col]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.resolution,
            self.origin[1] + (row as f64 + 0.5) * self.resolution,
        ]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let max_x = self.origin[0] + self.width as f64 * self.resolution;
        let max_y = self.origin[1] + self.height as f64 * self.resolution;
        x[0] >= self.origin[0] && x[0] <= max_x && x[1] >= self.origin[1] && x[1] <= max_y
    }

    fn clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.cell(r, c)
    }

    /// Sobel response at a cell in probability per meter, borders replicated.
    pub fn sobel(&self, row: usize, col: usize) -> [f64; 2] {
        let (r, c) = (row as isize, col as isize);
        let p = |dr: isize, dc: isize| self.clamped(r + dr, c + dc);
        let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
        let s = 1.0 / (8.0 * self.resolution);
        [gx * s, gy * s]
    }

    /// Spatial occupancy gradient at `x`: Sobel responses of the surrounding cell
    /// centers, bilinearly interpolated.
    pub fn gradient(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != 2 || x.iter().any(|v| !v.is_finite()) || !self.contains(x) {
            return Err(Error::Domain(format!("{x:?} lies outside the grid")));
        }
        let u = ((x[0] - self.origin[0]) / self.resolution - 0.5).clamp(0.0, (self.width - 1) as f64);
        let v = ((x[1] - self.origin[1]) / self.resolution - 0.5).clamp(0.0, (self.height - 1) as f64);
        let c0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let r0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let fu = (u - c0 as f64).clamp(0.0, 1.0);
        let fv = (v - r0 as f64).clamp(0.0, 1.0);
        let g00 = self.sobel(r0, c0);
        let g01 = self.sobel(r0, c1);
        let g10 = self.sobel(r1, c0);
        let g11 = self.sobel(r1, c1);
        let mut out = [0.0; 2];
        for k in 0..2 {
            out[k] = (1.0 - fv) * ((1.0 - fu) * g00[k] + fu * g01[k])
                + fv * ((1.0 - fu) * g10[k] + fu * g11[k]);
        }
        Ok(out)
    }

    /// Parses whitespace-separated probabilities, first line being the top row.
    pub fn from_text(text: &str, meta: &GridMeta) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        Error::InvalidInput(format!("line {}: bad cell value {tok:?}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidInput("ragged grid rows".into()));
        }
        let cells = rows.into_iter().rev().flatten().collect();
        Self::new(meta.origin, meta.resolution, width, height, cells)
    }

    /// Reads a grayscale raster (PNG, PGM, ...); dark pixels are occupied unless
    /// `meta.negate` is set. The top image row is the row farthest from the origin.
    pub fn from_image(path: &FsPath, meta: &GridMeta) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut cells = Vec::with_capacity(w * h);
        for row in (0..h).rev() {
            for col in 0..w {
                let v = img.get_pixel(col as u32, row as u32).0[0] as f64 / 255.0;
                cells.push(if meta.negate { v } else { 1.0 - v });
            }
        }
        Self::new(meta.origin, meta.resolution, w, h, cells)
    }

    /// Loads a grid from `path` plus a JSON sidecar (`<path>.json` unless given).
    /// Files ending in `.txt` are read as text, everything else as an image.
    pub fn load(path: &FsPath, sidecar: Option<&FsPath>) -> Result<Self> {
        let default_sidecar = path.with_extension(
            path.extension()
                .map(|e| format!("{}.json", e.to_string_lossy()))
                .unwrap_or_else(|| "json".into()),
        );
        let sidecar = sidecar.unwrap_or(&default_sidecar);
        let meta_text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
        let meta: GridMeta = serde_json::from_str(&meta_text)?;
        if path.extension().is_some_and(|e| e == "txt") {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Self::from_text(&text, &meta)
        } else {
            Self::from_image(path, &meta)
        }
    }
}
