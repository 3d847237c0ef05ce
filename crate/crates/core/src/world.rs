//! Laser data ingestion and synthetic worlds.
//!
//! * CARMEN `FLASER` records are parsed into [`LaserScan`]s.
//! * [`SyntheticWorld`]s made of rectangles, discs and polygons can be scanned with
//!   an exact ray-casting laser simulator.
//! * [`scans_to_points`] turns scans into labeled training points: one occupied point
//!   per beam endpoint plus free points sampled along the beam.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occupancy::{Label, LabeledPoint};

/// Planar robot or sensor pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose { x, y, theta }
    }
}

/// One planar laser scan. Beams are spread evenly over `fov`, centered on the
/// pose heading; readings at or above `max_range` mean "no return".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaserScan {
    pub pose: Pose,
    /// Raw odometry pose, when the source provides one.
    #[serde(default)]
    pub odometry: Option<Pose>,
    pub ranges: Vec<f64>,
    pub fov: f64,
    pub max_range: f64,
    pub timestamp: f64,
}

impl LaserScan {
    /// Heading of beam `i` in the world frame.
    pub fn beam_angle(&self, i: usize) -> f64 {
        let n = self.ranges.len();
        if n <= 1 {
            return self.pose.theta;
        }
        if (self.fov - 2.0 * PI).abs() < 1e-12 {
            // Full circle: avoid a duplicated beam at +-pi.
            self.pose.theta - PI + i as f64 * 2.0 * PI / n as f64
        } else {
            self.pose.theta - self.fov / 2.0 + i as f64 * self.fov / (n - 1) as f64
        }
    }

    pub fn is_max_range(&self, i: usize) -> bool {
        self.ranges[i] >= self.max_range
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoseSource {
    /// The first (corrected / laser) pose triple of an FLASER record.
    #[default]
    Corrected,
    /// The raw odometry triple.
    Odometry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarmenOptions {
    pub pose_source: PoseSource,
    /// Field of view assumed for FLASER records.
    pub fov: f64,
    /// Readings at or above this are treated as "no return".
    pub max_range: f64,
}

impl Default for CarmenOptions {
    fn default() -> Self {
        CarmenOptions {
            pose_source: PoseSource::Corrected,
            fov: PI,
            max_range: 40.0,
        }
    }
}

/// Result of parsing a CARMEN log.
#[derive(Clone, Debug, Default)]
pub struct CarmenLog {
    pub scans: Vec<LaserScan>,
    /// Lines of other record types (comments, ODOM, PARAM, ...).
    pub skipped: usize,
    /// `(line number, message)` for FLASER lines that could not be parsed.
    pub malformed: Vec<(usize, String)>,
}

fn parse_flaser(tokens: &[&str], opts: &CarmenOptions) -> std::result::Result<LaserScan, String> {
    let num = |i: usize, what: &str| -> std::result::Result<f64, String> {
        let tok = tokens
            .get(i)
            .ok_or_else(|| format!("missing {what} (field {i})"))?;
        let v: f64 = tok
            .parse()
            .map_err(|_| format!("bad {what} {tok:?} (field {i})"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite {what} (field {i})"))
        }
    };
    let count_tok = tokens.get(1).ok_or("missing beam count")?;
    let count: usize = count_tok
        .parse()
        .map_err(|_| format!("bad beam count {count_tok:?}"))?;
    if tokens.len() < 2 + count + 6 {
        return Err(format!(
            "expected {count} ranges and 6 pose fields, found {} fields",
            tokens.len().saturating_sub(2)
        ));
    }
    let mut ranges = Vec::with_capacity(count);
    for i in 0..count {
        let r = num(2 + i, "range")?;
        if r < 0.0 {
            return Err(format!("negative range {r} (beam {i})"));
        }
        ranges.push(r.min(opts.max_range));
    }
    let base = 2 + count;
    let laser = Pose::new(num(base, "x")?, num(base + 1, "y")?, num(base + 2, "theta")?);
    let odom = Pose::new(
        num(base + 3, "odom x")?,
        num(base + 4, "odom y")?,
        num(base + 5, "odom theta")?,
    );
    let timestamp = if tokens.len() > base + 6 {
        num(base + 6, "timestamp")?
    } else {
        0.0
    };
    let pose = match opts.pose_source {
        PoseSource::Corrected => laser,
        PoseSource::Odometry => odom,
    };
    Ok(LaserScan {
        pose,
        odometry: Some(odom),
        ranges,
        fov: opts.fov,
        max_range: opts.max_range,
        timestamp,
    })
}

/// Streams a CARMEN log, keeping FLASER records.
///
/// Arbitrary bytes are accepted: non-UTF-8 content is decoded lossily, unknown
/// record types are counted and skipped, malformed FLASER lines are reported with
/// their line numbers. A log without any scan is an [`Error::EmptyLog`].
pub fn parse_carmen<R: BufRead>(mut reader: R, opts: &CarmenOptions) -> Result<CarmenLog> {
    let mut log = CarmenLog::default();
    let mut buf = Vec::new();
    let mut lineno = 0;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::io("<carmen stream>", e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        let line = String::from_utf8_lossy(&buf);
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.first() {
            Some(&"FLASER") => match parse_flaser(&tokens, opts) {
                Ok(scan) => log.scans.push(scan),
                Err(msg) => {
                    log::warn!("line {lineno}: malformed FLASER record: {msg}");
                    log.malformed.push((lineno, msg));
                }
            },
            _ => log.skipped += 1,
        }
    }
    if log.scans.is_empty() {
        return Err(Error::EmptyLog {
            skipped: log.skipped + log.malformed.len(),
        });
    }
    Ok(log)
}

/// Formats a scan as an FLASER record.
pub fn format_flaser(scan: &LaserScan) -> String {
    let odom = scan.odometry.unwrap_or(scan.pose);
    let mut fields = vec!["FLASER".to_string(), scan.ranges.len().to_string()];
    fields.extend(scan.ranges.iter().map(|r| r.to_string()));
    for v in [
        scan.pose.x,
        scan.pose.y,
        scan.pose.theta,
        odom.x,
        odom.y,
        odom.theta,
        scan.timestamp,
    ] {
        fields.push(v.to_string());
    }
    fields.push("occplan".into());
    fields.push(scan.timestamp.to_string());
    fields.join(" ")
}

/// Writes scans as a CARMEN log.
pub fn write_carmen<W: Write>(mut out: W, scans: &[LaserScan]) -> std::io::Result<()> {
    writeln!(out, "# synthetic laser log")?;
    for s in scans {
        writeln!(out, "{}", format_flaser(s))?;
    }
    Ok(())
}

/// Keeps every `k`-th scan, starting with the first.
pub fn subsample(scans: &[LaserScan], k: usize) -> Vec<LaserScan> {
    scans.iter().step_by(k.max(1)).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointOptions {
    /// Free points sampled along each beam.
    pub free_per_beam: usize,
    /// Free points stay this far short of a hit.
    pub hit_label_margin: f64,
    /// Drop max-range beams entirely instead of using them for free space.
    pub max_range_discard: bool,
    pub seed: u64,
    /// Points outside this `[min, max]` box are dropped.
    pub bounds: Option<([f64; 2], [f64; 2])>,
}

impl Default for PointOptions {
    fn default() -> Self {
        PointOptions {
            free_per_beam: 4,
            hit_label_margin: 0.05,
            max_range_discard: false,
            seed: 0,
            bounds: None,
        }
    }
}

/// Converts scans into labeled training points.
pub fn scans_to_points(scans: &[LaserScan], opts: &PointOptions) -> Vec<LabeledPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let inside = |x: f64, y: f64| match opts.bounds {
        Some((lo, hi)) => x >= lo[0] && x <= hi[0] && y >= lo[1] && y <= hi[1],
        None => true,
    };
    let mut out = Vec::new();
    for scan in scans {
        for (i, &r) in scan.ranges.iter().enumerate() {
            let angle = scan.beam_angle(i);
            let (s, c) = angle.sin_cos();
            let hit = !scan.is_max_range(i);
            if !hit && opts.max_range_discard {
                continue;
            }
            let free_len = if hit {
                r - opts.hit_label_margin
            } else {
                scan.max_range
            };
            if hit {
                let (x, y) = (scan.pose.x + r * c, scan.pose.y + r * s);
                if inside(x, y) {
                    out.push(LabeledPoint::new(vec![x, y], Label::Occupied));
                }
            }
            if free_len <= 0.0 {
                continue;
            }
            for _ in 0..opts.free_per_beam {
                let d = rng.random_range(0.0..free_len);
                let (x, y) = (scan.pose.x + d * c, scan.pose.y + d * s);
                if inside(x, y) {
                    out.push(LabeledPoint::new(vec![x, y], Label::Free));
                }
            }
        }
    }
    out
}

/// Writes labeled points as `x,y,label` CSV.
pub fn write_points_csv<W: Write>(out: W, points: &[LabeledPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "label"])?;
    for p in points {
        w.write_record([
            p.x[0].to_string(),
            p.x[1].to_string(),
            p.label.sign().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<points csv>", e))?;
    Ok(())
}

/// Reads `x,y,label` CSV.
pub fn read_points_csv<R: std::io::Read>(input: R) -> Result<Vec<LabeledPoint>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let (x, y, label): (f64, f64, i8) = rec?;
        out.push(LabeledPoint::new(vec![x, y], Label::try_from(label)?));
    }
    Ok(out)
}

/// Obstacle primitives of a synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "lowercase")]
pub enum Obstacle {
    Rectangle { min: [f64; 2], max: [f64; 2] },
    Disc { center: [f64; 2], radius: f64 },
    /// Simple polygon, vertices in order.
    Polygon { vertices: Vec<[f64; 2]> },
}

fn ray_segment(o: [f64; 2], d: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Option<f64> {
    let e = [b[0] - a[0], b[1] - a[1]];
    let denom = d[0] * e[1] - d[1] * e[0];
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = [a[0] - o[0], a[1] - o[1]];
    let t = (w[0] * e[1] - w[1] * e[0]) / denom;
    let u = (w[0] * d[1] - w[1] * d[0]) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

impl Obstacle {
    fn edges(&self) -> Vec<([f64; 2], [f64; 2])> {
        let verts: Vec<[f64; 2]> = match self {
            Obstacle::Rectangle { min, max } => vec![
                [min[0], min[1]],
                [max[0], min[1]],
                [max[0], max[1]],
                [min[0], max[1]],
            ],
            Obstacle::Polygon { vertices } => vertices.clone(),
            Obstacle::Disc { .. } => return Vec::new(),
        };
        (0..verts.len())
            .map(|i| (verts[i], verts[(i + 1) % verts.len()]))
            .collect()
    }

    /// Whether `p` lies inside or on the obstacle.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Obstacle::Rectangle { min, max } => {
                p[0] >= min[0] && p[0] <= max[0] && p[1] >= min[1] && p[1] <= max[1]
            }
            Obstacle::Disc { center, radius } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                dx * dx + dy * dy <= radius * radius
            }
            Obstacle::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (a, b) = (vertices[i], vertices[(i + n - 1) % n]);
                    if (a[1] > p[1]) != (b[1] > p[1])
                        && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0]
                    {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    /// Distance along a unit-direction ray to the first boundary crossing.
    pub fn ray_distance(&self, origin: [f64; 2], dir: [f64; 2]) -> Option<f64> {
        match self {
            Obstacle::Disc { center, radius } => ray_disc(origin, dir, *center, *radius),
            _ => self
                .edges()
                .into_iter()
                .filter_map(|(a, b)| ray_segment(origin, dir, a, b))
                .min_by(f64::total_cmp),
        }
    }

    fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        match self {
            Obstacle::Rectangle { min, max } => (*min, *max),
            Obstacle::Disc { center, radius } => (
                [center[0] - radius, center[1] - radius],
                [center[0] + radius, center[1] + radius],
            ),
            Obstacle::Polygon { vertices } => {
                let mut lo = [f64::INFINITY; 2];
                let mut hi = [f64::NEG_INFINITY; 2];
                for v in vertices {
                    for k in 0..2 {
                        lo[k] = lo[k].min(v[k]);
                        hi[k] = hi[k].max(v[k]);
                    }
                }
                (lo, hi)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Obstacle::Rectangle { min, max } => min[0] < max[0] && min[1] < max[1],
            Obstacle::Disc { radius, .. } => *radius > 0.0,
            Obstacle::Polygon { vertices } => vertices.len() >= 3,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("degenerate obstacle {self:?}")))
        }
    }
}

/// Smallest non-negative `t` with `|origin + t dir - center| = radius` (unit `dir`).
pub fn ray_disc(origin: [f64; 2], dir: [f64; 2], center: [f64; 2], radius: f64) -> Option<f64> {
    let f = [origin[0] - center[0], origin[1] - center[1]];
    let b = f[0] * dir[0] + f[1] * dir[1];
    let c = f[0] * f[0] + f[1] * f[1] - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 >= 0.0 {
        Some(t0)
    } else if t1 >= 0.0 {
        Some(t1)
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

/// Obstacles in an axis-aligned box. The box itself is not a wall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub bounds: Bounds,
    pub obstacles: Vec<Obstacle>,
    /// Sensor poses used to observe the world; generated on a grid when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scan_poses: Vec<Pose>,
}

impl SyntheticWorld {
    pub fn new(bounds: Bounds, obstacles: Vec<Obstacle>) -> Result<Self> {
        let w = SyntheticWorld {
            bounds,
            obstacles,
            scan_poses: Vec::new(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        if !(b.min[0] < b.max[0] && b.min[1] < b.max[1]) {
            return Err(Error::InvalidInput("degenerate world bounds".into()));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            o.validate()?;
            let (lo, hi) = o.bounding_box();
            if !(b.contains(lo) && b.contains(hi)) {
                return Err(Error::InvalidInput(format!(
                    "obstacle {i} extends outside the world bounds"
                )));
            }
        }
        for p in &self.scan_poses {
            if !b.contains([p.x, p.y]) {
                return Err(Error::InvalidInput(format!("scan pose {p:?} outside bounds")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: SyntheticWorld = serde_json::from_str(text)?;
        w.validate()?;
        Ok(w)
    }

    pub fn is_occupied(&self, p: [f64; 2]) -> bool {
        self.obstacles.iter().any(|o| o.contains(p))
    }

    /// Distance to the nearest obstacle along a ray (minimum over all obstacles).
    pub fn cast(&self, origin: [f64; 2], angle: f64) -> Option<f64> {
        let (s, c) = angle.sin_cos();
        self.obstacles
            .iter()
            .filter_map(|o| o.ray_distance(origin, [c, s]))
            .min_by(f64::total_cmp)
    }

    /// Free poses on a regular grid, at least `clearance` from every obstacle.
    pub fn grid_poses(&self, spacing: f64, clearance: f64) -> Vec<Pose> {
        let b = &self.bounds;
        let mut poses = Vec::new();
        let nx = ((b.max[0] - b.min[0]) / spacing).floor() as usize;
        let ny = ((b.max[1] - b.min[1]) / spacing).floor() as usize;
        for iy in 0..ny {
            for ix in 0..nx {
                let p = [
                    b.min[0] + (ix as f64 + 0.5) * spacing,
                    b.min[1] + (iy as f64 + 0.5) * spacing,
                ];
                let clear = (0..16).all(|k| {
                    let a = k as f64 * PI / 8.0;
                    !self.is_occupied([p[0] + clearance * a.cos(), p[1] + clearance * a.sin()])
                }) && !self.is_occupied(p);
                if clear {
                    poses.push(Pose::new(p[0], p[1], 0.0));
                }
            }
        }
        poses
    }

    /// Poses to scan from: the explicit list, or a grid.
    pub fn observation_poses(&self, spacing: f64) -> Vec<Pose> {
        if self.scan_poses.is_empty() {
            self.grid_poses(spacing, 0.3)
        } else {
            self.scan_poses.clone()
        }
    }
}

/// Laser model used by [`simulate_laser`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaserModel {
    pub beams: usize,
    pub fov: f64,
    pub max_range: f64,
    pub noise_sigma: f64,
}

impl Default for LaserModel {
    fn default() -> Self {
        LaserModel {
            beams: 180,
            fov: 2.0 * PI,
            max_range: 8.0,
            noise_sigma: 0.0,
        }
    }
}

/// Ray-casts one scan. Noisy ranges are clamped to `[0, max_range]`; beams without
/// a return read exactly `max_range`.
pub fn simulate_laser<R: Rng>(
    world: &SyntheticWorld,
    pose: Pose,
    model: &LaserModel,
    rng: &mut R,
) -> Result<LaserScan> {
    if world.is_occupied([pose.x, pose.y]) {
        return Err(Error::InvalidPose(format!(
            "sensor at ({}, {}) is inside an obstacle",
            pose.x, pose.y
        )));
    }
    if model.beams == 0 || !(model.max_range > 0.0) || model.noise_sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("bad laser model {model:?}")));
    }
    let noise = Normal::new(0.0, model.noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let mut scan = LaserScan {
        pose,
        odometry: None,
        ranges: vec![0.0; model.beams],
        fov: model.fov,
        max_range: model.max_range,
        timestamp: 0.0,
    };
    for i in 0..model.beams {
        let angle = scan.beam_angle(i);
        scan.ranges[i] = match world.cast([pose.x, pose.y], angle) {
            Some(d) if d < model.max_range => {
                let n = if model.noise_sigma > 0.0 {
                    rng.sample(noise)
                } else {
                    0.0
                };
                (d + n).clamp(0.0, model.max_range)
            }
            _ => model.max_range,
        };
    }
    Ok(scan)
}

/// Scans a world from each pose with a single seeded RNG stream.
pub fn simulate_scans(
    world: &SyntheticWorld,
    poses: &[Pose],
    model: &LaserModel,
    seed: u64,
) -> Result<Vec<LaserScan>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    poses
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut s = simulate_laser(world, *p, model, &mut rng)?;
            s.timestamp = k as f64;
            Ok(s)
        })
        .collect()
}

/// Two rectangles straddling the line from `(1, 5)` to `(9, 5)` on opposite sides,
/// so the straight path clips the bottom of the first and the top of the second.
pub fn two_rectangle_world() -> SyntheticWorld {
    SyntheticWorld::new(
        Bounds {
            min: [0.0, 0.0],
            max: [10.0, 10.0],
        },
        vec![
            Obstacle::Rectangle {
                min: [2.5, 4.6],
                max: [4.0, 7.5],
            },
            Obstacle::Rectangle {
                min: [6.0, 2.5],
                max: [7.5, 5.4],
            },
        ],
    )
    .expect("preset world is valid")
}

/// An office-like floor: outer walls, a central block of rooms and a corridor
/// ring around it, with a robot trajectory sweeping the corridors.
pub fn office_world() -> SyntheticWorld {
    let t = 0.2;
    let wall = |x0: f64, y0: f64, x1: f64, y1: f64| Obstacle::Rectangle {
        min: [x0, y0],
        max: [x1, y1],
    };
    let mut obstacles = vec![
        // Outer shell, 20 m x 14 m.
        wall(0.0, 0.0, 20.0, t),
        wall(0.0, 14.0 - t, 20.0, 14.0),
        wall(0.0, 0.0, t, 14.0),
        wall(20.0 - t, 0.0, 20.0, 14.0),
        // Central block leaving a ~2.4 m corridor ring.
        wall(2.6, 2.6, 17.4, 2.6 + t),
        wall(2.6, 11.4 - t, 17.4, 11.4),
        wall(2.6, 2.6, 2.6 + t, 11.4),
        wall(17.4 - t, 2.6, 17.4, 11.4),
        // Cabinets and pillars protruding into the corridors.
        wall(8.0, 0.0, 9.0, 0.9),
        wall(12.0, 11.4, 12.8, 12.2),
        wall(19.1, 6.0, 20.0, 7.0),
        Obstacle::Disc {
            center: [1.0, 9.0],
            radius: 0.35,
        },
    ];
    // Interior room dividers (never observed from the corridor ring).
    obstacles.push(wall(10.0 - t / 2.0, 2.6, 10.0 + t / 2.0, 11.4));
    let mut world = SyntheticWorld::new(
        Bounds {
            min: [0.0, 0.0],
            max: [20.0, 14.0],
        },
        obstacles,
    )
    .expect("preset world is valid");
    // Drive around the corridor ring, 0.5 m between scans.
    let corners: [[f64; 2]; 5] = [[1.3, 1.6], [18.7, 1.6], [18.7, 12.6], [1.3, 12.6], [1.3, 1.6]];
    let mut poses = Vec::new();
    for w in corners.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
        let steps = (len / 0.5).ceil() as usize;
        for k in 0..steps {
            let s = k as f64 / steps as f64;
            let p = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
            if !world.is_occupied(p) {
                poses.push(Pose::new(p[0], p[1], heading));
            }
        }
    }
    world.scan_poses = poses;
    world
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, proptest};

    #[test]
    fn zero_count_flaser_is_legal() {
        let log = parse_carmen(
            "FLASER 0 0.0 0.0 0.0 0.0 0.0 0.0 0.0 host 0.0\n".as_bytes(),
            &CarmenOptions::default(),
        )
        .unwrap();
        assert_eq!(log.scans.len(), 1);
        assert!(log.scans[0].ranges.is_empty());
    }

    #[test]
    fn flaser_round_trip() {
        let line = "FLASER 3 1.25 2.5 3.75 0.5 -1.5 0.25 0.4 -1.6 0.3 12.125 host 12.5";
        let log = parse_carmen(line.as_bytes(), &CarmenOptions::default()).unwrap();
        let scan = &log.scans[0];
        assert_eq!(scan.ranges, vec![1.25, 2.5, 3.75]);
        assert_eq!(scan.pose, Pose::new(0.5, -1.5, 0.25));
        assert_eq!(scan.timestamp, 12.125);
        let again = parse_carmen(format_flaser(scan).as_bytes(), &CarmenOptions::default()).unwrap();
        assert_eq!(&again.scans[0], scan);

        let odom = CarmenOptions {
            pose_source: PoseSource::Odometry,
            ..CarmenOptions::default()
        };
        let log = parse_carmen(line.as_bytes(), &odom).unwrap();
        assert_eq!(log.scans[0].pose, Pose::new(0.4, -1.6, 0.3));
    }

    #[test]
    fn mixed_records_keep_only_flaser() {
        let text = "\
# comment
ODOM 0.0 0.0 0.0 0.0 0.0 0.0 1.0 host 1.0
FLASER 2 1.0 2.0 0 0 0 0 0 0 1.0 host 1.0
PARAM robot_front_laser_max 50.0
FLASER 1 4.0 1 1 0 1 1 0 2.0 host 2.0
FLASER 5 1.0 2.0
ODOM 0.1 0.0 0.0 0.0 0.0 0.0 2.0 host 2.0
";
        let log = parse_carmen(text.as_bytes(), &CarmenOptions::default()).unwrap();
        assert_eq!(log.scans.len(), 2);
        assert_eq!(log.skipped, 4);
        assert_eq!(log.malformed.len(), 1);
        assert_eq!(log.malformed[0].0, 6);
    }

    #[test]
    fn empty_log_is_an_error() {
        let err = parse_carmen("ODOM 1 2 3\n".as_bytes(), &CarmenOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyLog { skipped: 1 }));
    }

    proptest! {
        #[test]
        fn parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
            let _ = parse_carmen(&bytes[..], &CarmenOptions::default());
        }

        #[test]
        fn parser_never_panics_on_flaser_like_text(
            fields in proptest::collection::vec("[-0-9.eEnaif]{0,6}", 0..20)
        ) {
            let line = format!("FLASER {}", fields.join(" "));
            let _ = parse_carmen(line.as_bytes(), &CarmenOptions::default());
        }
    }

    fn single_beam(range: f64, max_range: f64) -> LaserScan {
        LaserScan {
            pose: Pose::new(0.0, 0.0, 0.0),
            odometry: None,
            ranges: vec![range],
            fov: PI,
            max_range,
            timestamp: 0.0,
        }
    }

    #[test]
    fn beam_to_points() {
        let opts = PointOptions {
            free_per_beam: 3,
            hit_label_margin: 0.1,
            ..PointOptions::default()
        };
        let pts = scans_to_points(&[single_beam(1.0, 10.0)], &opts);
        assert_eq!(pts.len(), 4);
        assert_eq!(pts.iter().filter(|p| p.label == Label::Occupied).count(), 1);
        for p in pts.iter().filter(|p| p.label == Label::Free) {
            assert!(p.x[0].hypot(p.x[1]) < 0.9);
        }
        let discard = PointOptions {
            max_range_discard: true,
            ..opts.clone()
        };
        assert!(scans_to_points(&[single_beam(10.0, 10.0)], &discard).is_empty());
        let kept = scans_to_points(&[single_beam(10.0, 10.0)], &opts);
        assert_eq!(kept.len(), 3);
        assert!(kept.iter().all(|p| p.label == Label::Free));
    }

    #[test]
    fn points_respect_bounds() {
        let opts = PointOptions {
            bounds: Some(([-0.5, -0.5], [0.5, 0.5])),
            ..PointOptions::default()
        };
        let pts = scans_to_points(&[single_beam(2.0, 10.0)], &opts);
        assert!(pts.iter().all(|p| p.x[0].abs() <= 0.5 && p.x[1].abs() <= 0.5));
    }

    #[test]
    fn points_csv_round_trip() {
        let pts = vec![
            LabeledPoint::new(vec![0.5, -1.25], Label::Occupied),
            LabeledPoint::new(vec![3.0, 2.0], Label::Free),
        ];
        let mut buf = Vec::new();
        write_points_csv(&mut buf, &pts).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x,y,label\n0.5,-1.25,1\n"));
        assert_eq!(read_points_csv(&buf[..]).unwrap(), pts);
    }

    fn empty_world() -> SyntheticWorld {
        SyntheticWorld::new(
            Bounds {
                min: [-10.0, -10.0],
                max: [10.0, 10.0],
            },
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn empty_world_reads_max_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = LaserModel {
            noise_sigma: 0.1,
            ..LaserModel::default()
        };
        let s = simulate_laser(&empty_world(), Pose::new(0.0, 0.0, 0.0), &model, &mut rng).unwrap();
        assert!(s.ranges.iter().all(|r| *r == model.max_range));
    }

    #[test]
    fn wall_center_beam_is_exact() {
        let mut w = empty_world();
        w.obstacles.push(Obstacle::Rectangle {
            min: [5.0, -5.0],
            max: [6.0, 5.0],
        });
        let model = LaserModel {
            beams: 181,
            fov: PI,
            max_range: 20.0,
            noise_sigma: 0.0,
        };
        let s = simulate_laser(&w, Pose::new(0.0, 0.0, 0.0), &model, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(s.beam_angle(90), 0.0);
        assert_eq!(s.ranges[90], 5.0);
    }

    #[test]
    fn disc_intersection_matches_quadratic_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c: [f64; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let r: f64 = rng.random_range(0.2..1.5);
            let o: [f64; 2] = [c[0] + rng.random_range(2.0..5.0), c[1] + rng.random_range(-1.0..1.0)];
            let to_c = (c[1] - o[1]).atan2(c[0] - o[0]);
            let a: f64 = to_c + rng.random_range(-0.3..0.3);
            let d = [a.cos(), a.sin()];
            // Oracle: |o + t d - c|^2 = r^2, smallest root, written out independently.
            let qa = d[0] * d[0] + d[1] * d[1];
            let qb = 2.0 * (d[0] * (o[0] - c[0]) + d[1] * (o[1] - c[1]));
            let qc = (o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2) - r * r;
            let disc = qb * qb - 4.0 * qa * qc;
            let got = ray_disc(o, d, c, r);
            if disc < 0.0 {
                assert!(got.is_none());
            } else {
                let t = (-qb - disc.sqrt()) / (2.0 * qa);
                assert!((got.unwrap() - t).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn ray_cast_takes_minimum_over_obstacles() {
        let mut w = empty_world();
        w.obstacles.push(Obstacle::Disc {
            center: [6.0, 0.0],
            radius: 0.5,
        });
        w.obstacles.push(Obstacle::Rectangle {
            min: [3.0, -1.0],
            max: [4.0, 1.0],
        });
        w.obstacles.push(Obstacle::Polygon {
            vertices: vec![[8.0, -1.0], [9.0, 0.0], [8.0, 1.0]],
        });
        assert_eq!(w.cast([0.0, 0.0], 0.0), Some(3.0));
        assert!(w.is_occupied([8.5, 0.0]));
        assert!(!w.is_occupied([8.5, 0.9]));
    }

    #[test]
    fn pose_inside_obstacle_is_rejected() {
        let w = two_rectangle_world();
        let r = simulate_laser(&w, Pose::new(3.5, 5.0, 0.0), &LaserModel::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::InvalidPose(_))));
    }

    #[test]
    fn world_json_round_trip_and_validation() {
        let w = two_rectangle_world();
        let text = serde_json::to_string(&w).unwrap();
        assert!(text.contains(r#""type":"rectangle","params""#));
        assert_eq!(SyntheticWorld::from_json(&text).unwrap(), w);
        let bad = r#"{"bounds":{"min":[0,0],"max":[1,1]},"obstacles":[{"type":"disc","params":{"center":[0.9,0.5],"radius":0.5}}]}"#;
        assert!(SyntheticWorld::from_json(bad).is_err());
    }

    #[test]
    fn simulated_points_stay_in_bounds() {
        let w = two_rectangle_world();
        let poses = w.observation_poses(1.5);
        assert!(!poses.is_empty());
        let scans = simulate_scans(&w, &poses, &LaserModel::default(), 1).unwrap();
        let opts = PointOptions {
            bounds: Some((w.bounds.min, w.bounds.max)),
            ..PointOptions::default()
        };
        let pts = scans_to_points(&scans, &opts);
        assert!(pts.iter().all(|p| w.bounds.contains([p.x[0], p.x[1]])));
    }

    #[test]
    fn office_poses_are_free() {
        let w = office_world();
        assert!(w.scan_poses.len() > 50);
        assert!(w.scan_poses.iter().all(|p| !w.is_occupied([p.x, p.y])));
    }
}
