//! Experiment harness: map construction, repeated-seed runs of both planners,
//! shared metrics and plot-ready outputs.
//!
//! Output layout under the experiment directory:
//!
//! ```text
//! map.json
//! <method>/<seed>/path.csv
//! <method>/<seed>/run.json
//! <method>/<seed>/metrics.json
//! runs.csv          one row per (method, seed)
//! summary.csv       mean and standard error of each metric per method
//! convergence.csv   planner max occupancy per iteration
//! ```
//!
//! Every file is a pure function of the spec; wall-clock timings only go to the log.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMap};
use crate::objective::BodyModel;
use crate::occupancy::{train_map, HilbertMap, LabeledPoint, TrainOptions};
use crate::path::{Path, PathDocument};
use crate::planner::{plan, PlanRun, PlanStatus, PlannerConfig};
use crate::rrt::{polyline_length, rrt_star_plan, sample_polyline, RrtConfig, RrtResult, RrtStatus};
use crate::world::{
    office_world, parse_carmen, read_points_csv, scans_to_points, simulate_scans, subsample,
    two_rectangle_world, CarmenOptions, LaserModel, PointOptions, SyntheticWorld,
};

/// Default resolution of the shared metric sweep.
pub const SWEEP_RESOLUTION: usize = 1000;

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum WorldSource {
    /// A built-in world: `two-rectangle` or `office`.
    Preset { name: String },
    /// Synthetic world JSON file.
    World { path: PathBuf },
    /// Synthetic world given inline.
    Inline { world: SyntheticWorld },
    /// CARMEN laser log.
    Carmen { path: PathBuf },
    /// Labeled `x,y,label` CSV.
    Points { path: PathBuf },
    /// A previously trained map; training parameters are ignored.
    Map { path: PathBuf },
}

impl WorldSource {
    fn file(&self) -> Option<&FsPath> {
        match self {
            WorldSource::World { path }
            | WorldSource::Carmen { path }
            | WorldSource::Points { path }
            | WorldSource::Map { path } => Some(path),
            _ => None,
        }
    }
}

pub fn preset_world(name: &str) -> Result<SyntheticWorld> {
    match name {
        "two-rectangle" => Ok(two_rectangle_world()),
        "office" => Ok(office_world()),
        other => Err(Error::InvalidArgument(format!(
            "unknown preset world {other:?} (expected two-rectangle or office)"
        ))),
    }
}

/// Hyperparameters of map construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapParams {
    pub features: usize,
    pub lengthscale: f64,
    pub feature_seed: u64,
    pub train: TrainOptions,
    pub points: PointOptions,
    /// Laser used to scan synthetic worlds.
    pub laser: LaserModel,
    /// Grid spacing of scan poses for worlds without explicit poses.
    pub scan_spacing: f64,
    pub scan_seed: u64,
    pub carmen: CarmenOptions,
    /// Keep every k-th scan of a log.
    pub subsample: usize,
    /// Workspace box of the map features; derived from the data when absent.
    pub bounds: Option<([f64; 2], [f64; 2])>,
}

impl Default for MapParams {
    fn default() -> Self {
        MapParams {
            features: 1000,
            lengthscale: 0.8,
            feature_seed: 0,
            train: TrainOptions {
                step: 0.02,
                ..TrainOptions::default()
            },
            points: PointOptions::default(),
            laser: LaserModel::default(),
            scan_spacing: 1.0,
            scan_seed: 0,
            carmen: CarmenOptions::default(),
            subsample: 5,
            bounds: None,
        }
    }
}

/// What went into a trained map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub scans: usize,
    pub points: usize,
    pub occupied: usize,
    pub skipped_lines: usize,
    pub malformed_lines: usize,
    pub log_loss: f64,
    pub bounds: ([f64; 2], [f64; 2]),
}

fn point_bounds(points: &[LabeledPoint], pad: f64) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for i in 0..2 {
            lo[i] = lo[i].min(p.x[i]);
            hi[i] = hi[i].max(p.x[i]);
        }
    }
    ([lo[0] - pad, lo[1] - pad], [hi[0] + pad, hi[1] + pad])
}

/// Collects labeled points from a world source.
pub fn training_points(
    source: &WorldSource,
    params: &MapParams,
) -> Result<(Vec<LabeledPoint>, MapReport)> {
    let mut report = MapReport {
        scans: 0,
        points: 0,
        occupied: 0,
        skipped_lines: 0,
        malformed_lines: 0,
        log_loss: f64::NAN,
        bounds: ([0.0; 2], [0.0; 2]),
    };
    let mut popts = params.points.clone();
    let points = match source {
        WorldSource::Preset { .. } | WorldSource::World { .. } | WorldSource::Inline { .. } => {
            let world = match source {
                WorldSource::Preset { name } => preset_world(name)?,
                WorldSource::World { path } => {
                    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    SyntheticWorld::from_json(&text)?
                }
                WorldSource::Inline { world } => {
                    world.validate()?;
                    world.clone()
                }
                _ => unreachable!(),
            };
            let poses = world.observation_poses(params.scan_spacing);
            let scans = simulate_scans(&world, &poses, &params.laser, params.scan_seed)?;
            report.scans = scans.len();
            if popts.bounds.is_none() {
                popts.bounds = Some((world.bounds.min, world.bounds.max));
            }
            scans_to_points(&scans, &popts)
        }
        WorldSource::Carmen { path } => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let log = parse_carmen(BufReader::new(file), &params.carmen)?;
            report.skipped_lines = log.skipped;
            report.malformed_lines = log.malformed.len();
            for (line, msg) in log.malformed.iter().take(5) {
                log::warn!("{}:{line}: {msg}", path.display());
            }
            let scans = subsample(&log.scans, params.subsample.max(1));
            report.scans = scans.len();
            if popts.bounds.is_none() {
                popts.bounds = params.bounds;
            }
            scans_to_points(&scans, &popts)
        }
        WorldSource::Points { path } => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_points_csv(BufReader::new(file))?
        }
        WorldSource::Map { .. } => {
            return Err(Error::InvalidArgument(
                "a trained map has no training points".into(),
            ))
        }
    };
    report.points = points.len();
    report.occupied = points
        .iter()
        .filter(|p| p.label == crate::occupancy::Label::Occupied)
        .count();
    report.bounds = match (params.bounds, popts.bounds) {
        (Some(b), _) => b,
        (None, Some(b)) => b,
        (None, None) if !points.is_empty() => point_bounds(&points, 1.0),
        _ => ([0.0; 2], [1.0; 2]),
    };
    Ok((points, report))
}

/// Builds (or loads) the occupancy map for a source.
pub fn build_map(source: &WorldSource, params: &MapParams) -> Result<(HilbertMap, Option<MapReport>)> {
    if let WorldSource::Map { path } = source {
        return Ok((HilbertMap::load(path)?, None));
    }
    let (points, mut report) = training_points(source, params)?;
    let (lo, hi) = report.bounds;
    let features = FeatureMap::rff_spatial(
        params.features,
        params.lengthscale,
        params.feature_seed,
        lo.to_vec(),
        hi.to_vec(),
    )?;
    let map = train_map(&points, features, &params.train)?;
    report.log_loss = map.meta().map_or(f64::NAN, |m| m.log_loss);
    Ok((map, Some(report)))
}

/// Time features of the planner's path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathFeatures {
    pub kind: FeatureKind,
    pub count: usize,
    pub lengthscale: f64,
    /// Nystrom jitter.
    pub jitter: f64,
}

impl Default for PathFeatures {
    fn default() -> Self {
        PathFeatures {
            kind: FeatureKind::Rff,
            count: 200,
            lengthscale: 0.1,
            jitter: 1e-8,
        }
    }
}

impl PathFeatures {
    /// RFF draws use `seed`; Nystrom landmarks are evenly spaced and seed-free.
    pub fn build(&self, seed: u64) -> Result<FeatureMap> {
        match self.kind {
            FeatureKind::Rff => FeatureMap::rff(self.count, self.lengthscale, seed),
            FeatureKind::Nystrom => {
                if self.count < 2 {
                    return Err(Error::InvalidArgument(
                        "Nystrom path features need at least two landmarks".into(),
                    ));
                }
                let lm: Vec<f64> = (0..self.count)
                    .map(|i| i as f64 / (self.count - 1) as f64)
                    .collect();
                FeatureMap::nystrom(&lm, self.lengthscale, self.jitter)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Planner,
    Rrt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Planner => "planner",
            Method::Rrt => "rrt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub source: WorldSource,
    pub map: MapParams,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    pub body: Option<BodyModel>,
    pub planner: PlannerConfig,
    pub path_features: PathFeatures,
    pub rrt: RrtConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub sweep_resolution: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "two-rectangle".into(),
            source: WorldSource::Preset {
                name: "two-rectangle".into(),
            },
            map: MapParams::default(),
            start: vec![1.0, 5.0],
            goal: vec![9.0, 5.0],
            body: None,
            planner: PlannerConfig::default(),
            path_features: PathFeatures::default(),
            rrt: RrtConfig::default(),
            methods: vec![Method::Planner, Method::Rrt],
            seeds: (0..5).collect(),
            output_dir: None,
            sweep_resolution: SWEEP_RESOLUTION,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        Ok(spec)
    }

    /// Resolves relative file references against `base`.
    pub fn resolve_paths(&mut self, base: &FsPath) {
        match &mut self.source {
            WorldSource::World { path }
            | WorldSource::Carmen { path }
            | WorldSource::Points { path }
            | WorldSource::Map { path } => {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("at least one method is required".into()));
        }
        if self.start.len() != 2 || self.goal.len() != 2 {
            return Err(Error::InvalidArgument("start and goal must be 2-D".into()));
        }
        if self.sweep_resolution < 2 {
            return Err(Error::InvalidArgument("sweep_resolution must be at least 2".into()));
        }
        if let Some(path) = self.source.file() {
            if !path.exists() {
                return Err(Error::Io {
                    path: path.to_path_buf(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file does not exist"),
                });
            }
        }
        if let WorldSource::Preset { name } = &self.source {
            preset_world(name)?;
        }
        self.planner.validate()?;
        self.rrt.validate()?;
        Ok(())
    }

    pub fn body(&self) -> BodyModel {
        self.body.clone().unwrap_or_else(|| BodyModel::point(2))
    }
}

/// Settings of a single planner run, as read from a `--config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanSettings {
    pub planner: PlannerConfig,
    pub path_features: PathFeatures,
    pub body: Option<BodyModel>,
    pub sweep_resolution: usize,
}

impl Default for PlanSettings {
    fn default() -> Self {
        PlanSettings {
            planner: PlannerConfig::default(),
            path_features: PathFeatures::default(),
            body: None,
            sweep_resolution: SWEEP_RESOLUTION,
        }
    }
}

/// Metrics shared by both methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub seed: u64,
    pub status: String,
    /// Whether the run produced a path.
    pub ok: bool,
    pub max_occupancy: f64,
    pub length: f64,
    pub samples: usize,
    pub samples_to_first_solution: Option<usize>,
    pub iterations: Option<usize>,
    pub sweep_resolution: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Maximum occupancy over the points (and body offsets) and the chord length
/// of the sweep.
pub fn sweep_metrics(points: &[Vec<f64>], map: &HilbertMap, body: &BodyModel) -> (f64, f64) {
    let mut max_occ = 0.0f64;
    for p in points {
        let c = nalgebra::DVector::from_column_slice(p);
        for u in 0..body.len() {
            max_occ = max_occ.max(map.query(&body.workspace_point(&c, u)));
        }
    }
    (max_occ, polyline_length(points))
}

pub fn path_sweep(path: &Path, resolution: usize) -> Vec<Vec<f64>> {
    path.sample(resolution)
        .into_iter()
        .map(|c| c.iter().copied().collect())
        .collect()
}

/// Planner output bundle written as `run.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlannerRunFile {
    pub run: PlanRun,
    pub path: PathDocument,
}

pub struct PlannerOutcome {
    pub path: Path,
    pub run: PlanRun,
    pub metrics: RunMetrics,
}

pub fn planner_status_name(s: PlanStatus) -> &'static str {
    match s {
        PlanStatus::Converged => "converged",
        PlanStatus::MaxIters => "max-iters",
        PlanStatus::InfeasibleBoundary => "infeasible-boundary",
    }
}

/// One planner run with seed-derived configuration.
pub fn run_planner(
    map: &HilbertMap,
    start: &[f64],
    goal: &[f64],
    body: &BodyModel,
    features: &PathFeatures,
    cfg: &PlannerConfig,
    seed: u64,
    sweep_resolution: usize,
) -> Result<PlannerOutcome> {
    let cfg = PlannerConfig {
        seed,
        ..cfg.clone()
    };
    let (path, run) = plan(map, start, goal, body, features.build(seed)?, &cfg)?;
    let (max_occupancy, length) = sweep_metrics(&path_sweep(&path, sweep_resolution), map, body);
    let metrics = RunMetrics {
        method: Method::Planner,
        seed,
        status: planner_status_name(run.status).into(),
        ok: run.status != PlanStatus::InfeasibleBoundary,
        max_occupancy,
        length,
        samples: run.samples_drawn,
        samples_to_first_solution: run
            .records
            .iter()
            .position(|r| r.max_occupancy <= cfg.p_safe)
            .map(|i| (i + 1) * cfg.batch),
        iterations: Some(run.iterations),
        sweep_resolution,
        error: None,
    };
    Ok(PlannerOutcome { path, run, metrics })
}

pub struct RrtOutcome {
    pub result: RrtResult,
    pub metrics: RunMetrics,
}

pub fn run_rrt(
    map: &HilbertMap,
    start: &[f64],
    goal: &[f64],
    cfg: &RrtConfig,
    seed: u64,
    sweep_resolution: usize,
) -> Result<RrtOutcome> {
    let cfg = RrtConfig {
        seed,
        ..cfg.clone()
    };
    let result = rrt_star_plan(map, start, goal, &cfg)?;
    let (max_occupancy, length, ok) = match &result.path {
        Some(p) => {
            let (o, l) = sweep_metrics(&sample_polyline(p, sweep_resolution), map, &BodyModel::point(map.dim()));
            (o, l, true)
        }
        None => (f64::NAN, f64::NAN, false),
    };
    let metrics = RunMetrics {
        method: Method::Rrt,
        seed,
        status: match result.status {
            RrtStatus::Found => "found".into(),
            RrtStatus::NoPath => "no-path".into(),
        },
        ok,
        max_occupancy,
        length,
        samples: result.stats.samples,
        samples_to_first_solution: result.stats.samples_to_first_solution,
        iterations: None,
        sweep_resolution,
        error: None,
    };
    Ok(RrtOutcome { result, metrics })
}

fn create_file(path: &FsPath) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_planner_outputs(dir: &FsPath, outcome: &PlannerOutcome, resolution: usize) -> Result<()> {
    let csv_path = dir.join("path.csv");
    let mut w = create_file(&csv_path)?;
    outcome
        .path
        .write_csv(&mut w, resolution)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&csv_path, e))?;
    write_json(
        &dir.join("run.json"),
        &PlannerRunFile {
            run: outcome.run.clone(),
            path: outcome.path.to_document(),
        },
    )?;
    write_json(&dir.join("metrics.json"), &outcome.metrics)
}

pub fn write_polyline_csv(path: &FsPath, points: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    let d = points.first().map_or(2, |p| p.len());
    let header: Vec<String> = ["x", "y", "z"].iter().take(d).map(|s| s.to_string()).collect();
    w.write_record(&header)?;
    for p in points {
        w.write_record(p.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_rrt_outputs(dir: &FsPath, outcome: &RrtOutcome) -> Result<()> {
    write_polyline_csv(
        &dir.join("path.csv"),
        outcome.result.path.as_deref().unwrap_or(&[]),
    )?;
    write_json(&dir.join("run.json"), &outcome.result)?;
    write_json(&dir.join("metrics.json"), &outcome.metrics)
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub succeeded: usize,
    pub max_occupancy: (f64, f64),
    pub length: (f64, f64),
    pub samples: (f64, f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunMetrics>,
    pub summary: Vec<MethodSummary>,
    /// `(iteration, mean, stderr)` of the planner's max occupancy, runs that
    /// stopped early holding their final value.
    pub convergence: Vec<(usize, f64, f64)>,
    pub map: Option<MapReport>,
}

pub fn summarize(runs: &[RunMetrics], methods: &[Method]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|&m| {
            let ok: Vec<&RunMetrics> = runs.iter().filter(|r| r.method == m && r.ok).collect();
            let col = |f: fn(&RunMetrics) -> f64| mean_stderr(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                method: m,
                runs: runs.iter().filter(|r| r.method == m).count(),
                succeeded: ok.len(),
                max_occupancy: col(|r| r.max_occupancy),
                length: col(|r| r.length),
                samples: col(|r| r.samples as f64),
            }
        })
        .collect()
}

/// Aligns per-run max-occupancy traces, carrying each final value forward.
pub fn convergence_table(traces: &[Vec<f64>]) -> Vec<(usize, f64, f64)> {
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = traces
                .iter()
                .filter(|t| !t.is_empty())
                .map(|t| t[i.min(t.len() - 1)])
                .collect();
            let (m, s) = mean_stderr(&vals);
            (i, m, s)
        })
        .collect()
}

pub fn write_summary_csv(path: &FsPath, summary: &[MethodSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    let mut header = vec!["metric".to_string()];
    for s in summary {
        header.push(format!("{}_mean", s.method.name()));
        header.push(format!("{}_stderr", s.method.name()));
    }
    w.write_record(&header)?;
    let rows: [(&str, fn(&MethodSummary) -> (f64, f64)); 3] = [
        ("max_occupancy", |s| s.max_occupancy),
        ("length", |s| s.length),
        ("samples", |s| s.samples),
    ];
    for (name, get) in rows {
        let mut rec = vec![name.to_string()];
        for s in summary {
            let (m, e) = get(s);
            rec.push(m.to_string());
            rec.push(e.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), T::to_string)
}

pub fn write_runs_csv(path: &FsPath, runs: &[RunMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record([
        "method",
        "seed",
        "status",
        "ok",
        "max_occupancy",
        "length",
        "samples",
        "samples_to_first_solution",
        "iterations",
    ])?;
    for r in runs {
        w.write_record([
            r.method.name().to_string(),
            r.seed.to_string(),
            r.status.clone(),
            r.ok.to_string(),
            r.max_occupancy.to_string(),
            r.length.to_string(),
            r.samples.to_string(),
            opt(&r.samples_to_first_solution),
            opt(&r.iterations),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_convergence_csv(path: &FsPath, table: &[(usize, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(["iteration", "max_occupancy_mean", "max_occupancy_stderr"])?;
    for (i, m, s) in table {
        w.write_record([i.to_string(), m.to_string(), s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

enum Outcome {
    Planner(Box<PlannerOutcome>),
    Rrt(Box<RrtOutcome>),
}

/// Runs every (method, seed) pair of a spec against a prepared map and writes
/// all outputs under `out`. Seeds that fail are recorded and skipped in the
/// aggregate; the call fails only when no run succeeds.
pub fn run_experiment_with_map(
    spec: &ExperimentSpec,
    map: &HilbertMap,
    map_report: Option<MapReport>,
    out: &FsPath,
) -> Result<Report> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let body = spec.body();
    let jobs: Vec<(Method, u64)> = spec
        .methods
        .iter()
        .flat_map(|&m| spec.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<(Method, u64, Result<Outcome>)> = jobs
        .par_iter()
        .map(|&(method, seed)| {
            let started = std::time::Instant::now();
            let dir = out.join(method.name()).join(seed.to_string());
            let r = match method {
                Method::Planner => run_planner(
                    map,
                    &spec.start,
                    &spec.goal,
                    &body,
                    &spec.path_features,
                    &spec.planner,
                    seed,
                    spec.sweep_resolution,
                )
                .and_then(|o| {
                    write_planner_outputs(&dir, &o, spec.sweep_resolution)?;
                    Ok(Outcome::Planner(Box::new(o)))
                }),
                Method::Rrt => run_rrt(map, &spec.start, &spec.goal, &spec.rrt, seed, spec.sweep_resolution)
                    .and_then(|o| {
                        write_rrt_outputs(&dir, &o)?;
                        Ok(Outcome::Rrt(Box::new(o)))
                    }),
            };
            log::info!(
                "{} seed {seed} finished in {:.2}s",
                method.name(),
                started.elapsed().as_secs_f64()
            );
            (method, seed, r)
        })
        .collect();

    let mut runs = Vec::new();
    let mut traces = Vec::new();
    for (method, seed, r) in results {
        match r {
            Ok(Outcome::Planner(o)) => {
                traces.push(o.run.records.iter().map(|r| r.max_occupancy).collect());
                runs.push(o.metrics);
            }
            Ok(Outcome::Rrt(o)) => runs.push(o.metrics),
            Err(e) => {
                log::error!("{} seed {seed} failed: {e}", method.name());
                let m = RunMetrics {
                    method,
                    seed,
                    status: "error".into(),
                    ok: false,
                    max_occupancy: f64::NAN,
                    length: f64::NAN,
                    samples: 0,
                    samples_to_first_solution: None,
                    iterations: None,
                    sweep_resolution: spec.sweep_resolution,
                    error: Some(e.to_string()),
                };
                write_json(&out.join(method.name()).join(seed.to_string()).join("metrics.json"), &m)?;
                runs.push(m);
            }
        }
    }
    if !runs.iter().any(|r| r.ok) {
        let first = runs.iter().find_map(|r| r.error.clone()).unwrap_or_else(|| "no path found".into());
        return Err(Error::InvalidInput(format!("every run failed; first error: {first}")));
    }
    let summary = summarize(&runs, &spec.methods);
    let convergence = convergence_table(&traces);
    write_runs_csv(&out.join("runs.csv"), &runs)?;
    write_summary_csv(&out.join("summary.csv"), &summary)?;
    if !traces.is_empty() {
        write_convergence_csv(&out.join("convergence.csv"), &convergence)?;
    }
    Ok(Report {
        runs,
        summary,
        convergence,
        map: map_report,
    })
}

/// Builds the map for a spec, stores it as `map.json`, then runs the experiment.
pub fn run_experiment(spec: &ExperimentSpec, out: &FsPath) -> Result<Report> {
    spec.validate()?;
    let (map, report) = build_map(&spec.source, &spec.map)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let map_path = out.join("map.json");
    fs::write(&map_path, map.to_json()?).map_err(|e| Error::io(&map_path, e))?;
    run_experiment_with_map(spec, &map, report, out)
}

/// Centered moving average with a window of `w` (shrinking at the ends).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let h = w / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_identity() {
        let v = [0.4, 0.5, 0.45, 0.47, 0.52];
        let (m, s) = mean_stderr(&v);
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((m - 0.468).abs() < 1e-12);
        assert!((s - sd / 5f64.sqrt()).abs() < 1e-15);
        assert!(mean_stderr(&[1.0]).1.is_nan());
    }

    #[test]
    fn convergence_table_carries_final_values() {
        let t = convergence_table(&[vec![0.9, 0.5], vec![0.9, 0.7, 0.3]]);
        assert_eq!(t.len(), 3);
        assert!((t[2].1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn smoothing_window() {
        let s = smooth(&[0.0, 3.0, 6.0, 9.0, 12.0], 5);
        assert_eq!(s, vec![3.0, 4.5, 6.0, 7.5, 9.0]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = ExperimentSpec::default();
        assert!(spec.validate().is_ok());
        spec.seeds.clear();
        assert!(spec.validate().is_err());
        let spec = ExperimentSpec {
            source: WorldSource::Carmen {
                path: "/definitely/not/here.log".into(),
            },
            ..ExperimentSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Io { .. })));
    }

    #[test]
    fn spec_json_defaults_fill_in() {
        let spec = ExperimentSpec::from_json(r#"{"seeds":[3],"methods":["rrt"]}"#).unwrap();
        assert_eq!(spec.seeds, vec![3]);
        assert_eq!(spec.methods, vec![Method::Rrt]);
        assert_eq!(spec.sweep_resolution, SWEEP_RESOLUTION);
    }
}
