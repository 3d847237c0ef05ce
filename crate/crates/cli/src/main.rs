//! `occplan`: train occupancy maps, run the planners and benchmark them.
//!
//! Exit codes: 0 success, 1 planner infeasible (no safe path, occupied
//! endpoint), 2 I/O or unreadable input data, 3 invalid configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use occplan::bench::{
    self, build_map, run_experiment, run_planner, run_rrt, write_planner_outputs, write_rrt_outputs,
    ExperimentSpec, MapParams, Method, PlanSettings, WorldSource,
};
use occplan::features::FeatureKind;
use occplan::objective::BodyModel;
use occplan::occupancy::HilbertMap;
use occplan::path::MetricSpec;
use occplan::planner::{BoundaryMode, PlanStatus};
use occplan::rrt::{RrtConfig, RrtStatus};
use occplan::world::{write_points_csv, PoseSource};
use occplan::Error;

const OUTPUT_ENV: &str = "OCCPLAN_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "occplan", version, about = "Stochastic functional-gradient planning on occupancy maps")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug). RUST_LOG also works.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a Hilbert occupancy map from a synthetic world, laser log or labeled points.
    TrainMap(TrainArgs),
    /// Run the stochastic planner on a trained map.
    Plan(PlanArgs),
    /// Run the RRT* baseline on a trained map.
    Rrt(RrtArgs),
    /// Run a repeated-seed experiment from a spec file.
    Benchmark(BenchArgs),
}

#[derive(Args)]
#[group(id = "input", required = true, multiple = false)]
struct InputArgs {
    /// Built-in world: two-rectangle or office.
    #[arg(long)]
    preset: Option<String>,
    /// Synthetic world JSON file.
    #[arg(long)]
    world: Option<PathBuf>,
    /// CARMEN laser log.
    #[arg(long)]
    carmen: Option<PathBuf>,
    /// Labeled points CSV (x,y,label).
    #[arg(long)]
    points: Option<PathBuf>,
}

impl InputArgs {
    fn source(&self) -> WorldSource {
        if let Some(name) = &self.preset {
            WorldSource::Preset { name: name.clone() }
        } else if let Some(path) = &self.world {
            WorldSource::World { path: path.clone() }
        } else if let Some(path) = &self.carmen {
            WorldSource::Carmen { path: path.clone() }
        } else {
            WorldSource::Points {
                path: self.points.clone().expect("clap enforces one input"),
            }
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PoseArg {
    Corrected,
    Odometry,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output map file.
    #[arg(short, long)]
    out: PathBuf,
    /// JSON file with map parameters; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the labeled training points to this CSV.
    #[arg(long)]
    points_out: Option<PathBuf>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    lengthscale: Option<f64>,
    #[arg(long)]
    feature_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    train_batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    free_per_beam: Option<usize>,
    #[arg(long)]
    hit_margin: Option<f64>,
    #[arg(long)]
    max_range_discard: bool,
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    scan_spacing: Option<f64>,
    #[arg(long)]
    scan_seed: Option<u64>,
    #[arg(long)]
    laser_beams: Option<usize>,
    #[arg(long)]
    laser_max_range: Option<f64>,
    #[arg(long)]
    laser_noise: Option<f64>,
    #[arg(long, value_enum)]
    pose_source: Option<PoseArg>,
    /// FLASER field of view in radians.
    #[arg(long)]
    carmen_fov: Option<f64>,
    /// Map box as min_x,min_y,max_x,max_y.
    #[arg(long, value_delimiter = ',')]
    bounds: Option<Vec<f64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Rff,
    Nystrom,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundaryArg {
    PerBatch,
    PerSample,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory [env: OCCPLAN_OUTPUT_DIR, default: occplan-out].
    #[arg(short, long, env = OUTPUT_ENV)]
    out_dir: Option<PathBuf>,
}

impl OutArgs {
    fn dir(&self, sub: &str) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("occplan-out").join(sub))
    }
}

#[derive(Args)]
struct EndpointArgs {
    /// Trained map file.
    #[arg(long)]
    map: PathBuf,
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    start: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    goal: Vec<f64>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    ends: EndpointArgs,
    #[command(flatten)]
    out: OutArgs,
    /// JSON file with planner settings; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p_safe: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    weight_tol: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    check_resolution: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    boundary_tol: Option<f64>,
    #[arg(long, value_enum)]
    boundary_mode: Option<BoundaryArg>,
    /// Precondition updates with the feature Gram matrix (grid size, ridge).
    #[arg(long, value_delimiter = ',')]
    gram_metric: Option<Vec<f64>>,
    #[arg(long)]
    objective_every: Option<usize>,
    #[arg(long)]
    dyn_cost_relative_to_offset: bool,
    #[arg(long, value_enum)]
    path_features: Option<KindArg>,
    #[arg(long)]
    path_count: Option<usize>,
    #[arg(long)]
    path_lengthscale: Option<f64>,
    /// Disc robot as radius,points.
    #[arg(long, value_delimiter = ',')]
    body_disc: Option<Vec<f64>>,
    #[arg(long)]
    sweep_resolution: Option<usize>,
}

#[derive(Args)]
struct RrtArgs {
    #[command(flatten)]
    ends: EndpointArgs,
    #[command(flatten)]
    out: OutArgs,
    /// JSON file with RRT* settings; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    steer_step: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    collision_resolution: Option<f64>,
    #[arg(long)]
    p_safe: Option<f64>,
    #[arg(long)]
    goal_bias: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = bench::SWEEP_RESOLUTION)]
    sweep_resolution: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment spec JSON; relative file paths resolve against its directory.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
    /// Override the seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override the methods (planner, rrt).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::UnsupportedOrder(_) => 3,
            Error::InvalidEndpoint(_) | Error::Numerical(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        message: msg.into(),
    }
}

fn expect_len(name: &str, v: &[f64], n: usize) -> Result<(), Failure> {
    if v.len() == n {
        Ok(())
    } else {
        Err(config_error(format!("--{name} takes {n} comma-separated values, got {}", v.len())))
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn check_ends(ends: &EndpointArgs) -> Result<(), Failure> {
    expect_len("start", &ends.start, 2)?;
    expect_len("goal", &ends.goal, 2)
}

fn load_map(path: &Path) -> Result<HilbertMap, Failure> {
    HilbertMap::load(path).map_err(|e| match e {
        Error::Json(_) | Error::Format(_) => Failure {
            code: 2,
            message: format!("{}: {e}", path.display()),
        },
        other => other.into(),
    })
}

fn train_map_cmd(args: TrainArgs) -> Result<(), Failure> {
    let mut p: MapParams = read_config(args.config.as_deref())?;
    set(&mut p.features, args.features);
    set(&mut p.lengthscale, args.lengthscale);
    set(&mut p.feature_seed, args.feature_seed);
    set(&mut p.train.epochs, args.epochs);
    set(&mut p.train.step, args.step);
    set(&mut p.train.l2, args.l2);
    set(&mut p.train.batch, args.train_batch);
    set(&mut p.train.seed, args.seed);
    set(&mut p.points.seed, args.seed);
    set(&mut p.points.free_per_beam, args.free_per_beam);
    set(&mut p.points.hit_label_margin, args.hit_margin);
    p.points.max_range_discard |= args.max_range_discard;
    set(&mut p.subsample, args.subsample);
    set(&mut p.scan_spacing, args.scan_spacing);
    set(&mut p.scan_seed, args.scan_seed);
    set(&mut p.laser.beams, args.laser_beams);
    set(&mut p.laser.max_range, args.laser_max_range);
    set(&mut p.laser.noise_sigma, args.laser_noise);
    set(&mut p.carmen.fov, args.carmen_fov);
    if let Some(ps) = args.pose_source {
        p.carmen.pose_source = match ps {
            PoseArg::Corrected => PoseSource::Corrected,
            PoseArg::Odometry => PoseSource::Odometry,
        };
    }
    if let Some(b) = args.bounds {
        expect_len("bounds", &b, 4)?;
        p.bounds = Some(([b[0], b[1]], [b[2], b[3]]));
    }
    let source = args.input.source();
    if let Some(out) = &args.points_out {
        let (points, _) = bench::training_points(&source, &p)?;
        let file = fs::File::create(out).map_err(|e| Failure::from(Error::Io {
            path: out.clone(),
            source: e,
        }))?;
        write_points_csv(std::io::BufWriter::new(file), &points)?;
    }
    let (map, report) = build_map(&source, &p)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }))?;
    }
    fs::write(&args.out, map.to_json()?).map_err(|e| Failure::from(Error::Io {
        path: args.out.clone(),
        source: e,
    }))?;
    if let Some(r) = report {
        println!(
            "scans {} points {} occupied {} free {} log_loss {:.4} (prior {:.4})",
            r.scans,
            r.points,
            r.occupied,
            r.points - r.occupied,
            r.log_loss,
            std::f64::consts::LN_2
        );
        if r.skipped_lines > 0 || r.malformed_lines > 0 {
            println!("skipped lines {} malformed FLASER lines {}", r.skipped_lines, r.malformed_lines);
        }
    }
    println!("map written to {}", args.out.display());
    Ok(())
}

fn plan_cmd(args: PlanArgs) -> Result<(), Failure> {
    let mut s: PlanSettings = read_config(args.config.as_deref())?;
    let c = &mut s.planner;
    set(&mut c.p_safe, args.p_safe);
    set(&mut c.batch, args.batch);
    set(&mut c.lambda, args.lambda);
    set(&mut c.schedule.eta0, args.eta0);
    set(&mut c.schedule.tau, args.tau);
    set(&mut c.schedule.power, args.power);
    set(&mut c.max_iters, args.max_iters);
    set(&mut c.convergence.weight_tol, args.weight_tol);
    set(&mut c.convergence.patience, args.patience);
    set(&mut c.convergence.resolution, args.check_resolution);
    set(&mut c.seed, args.seed);
    set(&mut c.boundary_tol, args.boundary_tol);
    set(&mut c.objective_every, args.objective_every);
    c.dyn_cost_relative_to_offset |= args.dyn_cost_relative_to_offset;
    if let Some(m) = args.boundary_mode {
        c.boundary_mode = match m {
            BoundaryArg::PerBatch => BoundaryMode::PerBatch,
            BoundaryArg::PerSample => BoundaryMode::PerSample,
        };
    }
    if let Some(g) = args.gram_metric {
        expect_len("gram-metric", &g, 2)?;
        if g[0] < 1.0 || g[0].fract() != 0.0 {
            return Err(config_error("--gram-metric grid size must be a positive integer"));
        }
        c.metric = MetricSpec::Gram {
            grid: g[0] as usize,
            ridge: g[1],
        };
    }
    if let Some(k) = args.path_features {
        s.path_features.kind = match k {
            KindArg::Rff => FeatureKind::Rff,
            KindArg::Nystrom => FeatureKind::Nystrom,
        };
    }
    set(&mut s.path_features.count, args.path_count);
    set(&mut s.path_features.lengthscale, args.path_lengthscale);
    set(&mut s.sweep_resolution, args.sweep_resolution);
    if let Some(b) = args.body_disc {
        expect_len("body-disc", &b, 2)?;
        if b[1] < 1.0 || b[1].fract() != 0.0 {
            return Err(config_error("--body-disc point count must be a positive integer"));
        }
        s.body = Some(BodyModel::disc(b[0], b[1] as usize)?);
    }
    s.planner.validate()?;
    check_ends(&args.ends)?;

    let map = load_map(&args.ends.map)?;
    let body = s.body.clone().unwrap_or_else(|| BodyModel::point(map.dim()));
    let outcome = run_planner(
        &map,
        &args.ends.start,
        &args.ends.goal,
        &body,
        &s.path_features,
        &s.planner,
        s.planner.seed,
        s.sweep_resolution,
    )?;
    let dir = args.out.dir("plan");
    write_planner_outputs(&dir, &outcome, s.sweep_resolution)?;
    let m = &outcome.metrics;
    println!(
        "status {} iterations {} samples {} max_occupancy {:.4} length {:.4}",
        m.status,
        outcome.run.iterations,
        m.samples,
        m.max_occupancy,
        m.length
    );
    println!("outputs in {}", dir.display());
    let safe = m.max_occupancy <= s.planner.p_safe;
    match outcome.run.status {
        PlanStatus::Converged => Ok(()),
        PlanStatus::MaxIters if safe => Ok(()),
        _ => Err(Failure {
            code: 1,
            message: format!(
                "no safe path: status {}, max occupancy {:.3} above p_safe {}",
                m.status, m.max_occupancy, s.planner.p_safe
            ),
        }),
    }
}

fn rrt_cmd(args: RrtArgs) -> Result<(), Failure> {
    let mut c: RrtConfig = read_config(args.config.as_deref())?;
    set(&mut c.max_samples, args.max_samples);
    set(&mut c.steer_step, args.steer_step);
    if args.gamma.is_some() {
        c.neighbor_radius_gamma = args.gamma;
    }
    set(&mut c.collision_resolution, args.collision_resolution);
    set(&mut c.p_safe, args.p_safe);
    set(&mut c.goal_bias, args.goal_bias);
    set(&mut c.seed, args.seed);
    c.validate()?;
    check_ends(&args.ends)?;
    let map = load_map(&args.ends.map)?;
    let outcome = run_rrt(&map, &args.ends.start, &args.ends.goal, &c, c.seed, args.sweep_resolution)?;
    let dir = args.out.dir("rrt");
    write_rrt_outputs(&dir, &outcome)?;
    let m = &outcome.metrics;
    println!(
        "status {} samples {} first_solution {} max_occupancy {:.4} length {:.4}",
        m.status,
        m.samples,
        m.samples_to_first_solution
            .map_or_else(|| "none".to_string(), |s| s.to_string()),
        m.max_occupancy,
        m.length
    );
    println!("outputs in {}", dir.display());
    match outcome.result.status {
        RrtStatus::Found => Ok(()),
        RrtStatus::NoPath => Err(Failure {
            code: 1,
            message: format!("no path found within {} samples", c.max_samples),
        }),
    }
}

fn benchmark_cmd(args: BenchArgs) -> Result<(), Failure> {
    let mut spec: ExperimentSpec = read_config(args.spec.as_deref())?;
    if let Some(path) = &args.spec {
        let base = path.parent().unwrap_or(Path::new("."));
        spec.resolve_paths(base);
    }
    set(&mut spec.seeds, args.seeds);
    if let Some(ms) = args.methods {
        spec.methods = ms
            .iter()
            .map(|m| match m.as_str() {
                "planner" => Ok(Method::Planner),
                "rrt" => Ok(Method::Rrt),
                other => Err(config_error(format!("unknown method {other:?}"))),
            })
            .collect::<Result<_, _>>()?;
    }
    let dir = match (&args.out.out_dir, &spec.output_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => d.clone(),
        (None, None) => PathBuf::from("occplan-out").join(&spec.name),
    };
    spec.validate()?;
    let report = run_experiment(&spec, &dir)?;
    println!("{:<10} {:>6} {:>22} {:>22} {:>22}", "method", "ok", "max_occupancy", "length", "samples");
    for s in &report.summary {
        println!(
            "{:<10} {:>3}/{:<2} {:>10.4} +- {:<8.4} {:>10.3} +- {:<8.3} {:>10.1} +- {:<8.1}",
            s.method.name(),
            s.succeeded,
            s.runs,
            s.max_occupancy.0,
            s.max_occupancy.1,
            s.length.0,
            s.length.1,
            s.samples.0,
            s.samples.1
        );
    }
    for r in report.runs.iter().filter(|r| r.error.is_some()) {
        eprintln!("{} seed {} failed: {}", r.method.name(), r.seed, r.error.as_deref().unwrap_or(""));
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::TrainMap(a) => train_map_cmd(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Rrt(a) => rrt_cmd(a),
        Command::Benchmark(a) => benchmark_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
