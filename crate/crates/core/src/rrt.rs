//! RRT* baseline on the same occupancy model.
//!
//! A configuration is free iff the map's occupancy there is at most `p_safe`;
//! edges are checked at `collision_resolution` spacing. Neighbours are gathered
//! within `r_n = min(gamma (log n / n)^(1/D), steer_step)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Domain;
use crate::occupancy::HilbertMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrtConfig {
    pub max_samples: usize,
    pub steer_step: f64,
    /// Scale of the shrinking neighbour radius; `None` derives it from the
    /// sampling volume.
    pub neighbor_radius_gamma: Option<f64>,
    pub collision_resolution: f64,
    pub p_safe: f64,
    pub goal_bias: f64,
    pub seed: u64,
    /// Sampling box; defaults to the map's feature domain.
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for RrtConfig {
    fn default() -> Self {
        RrtConfig {
            max_samples: 5000,
            steer_step: 0.5,
            neighbor_radius_gamma: None,
            collision_resolution: 0.05,
            p_safe: 0.55,
            goal_bias: 0.05,
            seed: 0,
            bounds: None,
        }
    }
}

impl RrtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.steer_step > 0.0) {
            return Err(Error::InvalidArgument("steer_step must be positive".into()));
        }
        if !(self.collision_resolution > 0.0 && self.collision_resolution <= self.steer_step) {
            return Err(Error::InvalidArgument(format!(
                "collision_resolution must lie in (0, steer_step], got {}",
                self.collision_resolution
            )));
        }
        if !(self.p_safe > 0.0 && self.p_safe < 1.0) || !(0.0..1.0).contains(&self.goal_bias) {
            return Err(Error::InvalidArgument(
                "p_safe must lie in (0, 1) and goal_bias in [0, 1)".into(),
            ));
        }
        if self.max_samples == 0 {
            return Err(Error::InvalidArgument("max_samples must be at least 1".into()));
        }
        if let Some(g) = self.neighbor_radius_gamma {
            if !(g > 0.0) {
                return Err(Error::InvalidArgument("neighbor_radius_gamma must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RrtStatus {
    Found,
    NoPath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RrtStats {
    pub samples: usize,
    pub samples_to_first_solution: Option<usize>,
    pub nodes: usize,
    pub rewires: usize,
    pub collision_checks: usize,
    /// `(samples, best cost)` each time the best goal-connected cost improved.
    pub cost_history: Vec<(usize, f64)>,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RrtResult {
    pub status: RrtStatus,
    pub path: Option<Vec<Vec<f64>>>,
    pub cost: Option<f64>,
    pub stats: RrtStats,
}

/// The search tree. Exposed so callers can audit it.
#[derive(Clone, Debug, Default)]
pub struct Tree {
    pub points: Vec<Vec<f64>>,
    pub parent: Vec<Option<usize>>,
    pub cost: Vec<f64>,
    pub children: Vec<Vec<usize>>,
}

impl Tree {
    fn push(&mut self, p: Vec<f64>, parent: Option<usize>, cost: f64) -> usize {
        let id = self.points.len();
        self.points.push(p);
        self.parent.push(parent);
        self.cost.push(cost);
        self.children.push(Vec::new());
        if let Some(q) = parent {
            self.children[q].push(id);
        }
        id
    }

    fn reparent(&mut self, node: usize, new_parent: usize, new_cost: f64) {
        if let Some(old) = self.parent[node] {
            self.children[old].retain(|&c| c != node);
        }
        self.parent[node] = Some(new_parent);
        self.children[new_parent].push(node);
        let delta = self.cost[node] - new_cost;
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            self.cost[n] -= delta;
            stack.extend_from_slice(&self.children[n]);
        }
    }

    fn trace(&self, mut node: usize) -> Vec<Vec<f64>> {
        let mut out = vec![self.points[node].clone()];
        while let Some(p) = self.parent[node] {
            out.push(self.points[p].clone());
            node = p;
        }
        out.reverse();
        out
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

struct Checker<'a> {
    map: &'a HilbertMap,
    p_safe: f64,
    resolution: f64,
    checks: usize,
}

impl Checker<'_> {
    fn free(&mut self, x: &[f64]) -> bool {
        self.checks += 1;
        self.map.query(x) <= self.p_safe
    }

    /// Interior and end points of the edge; the start is assumed checked.
    fn edge_free(&mut self, a: &[f64], b: &[f64]) -> bool {
        let len = dist(a, b);
        let steps = (len / self.resolution).ceil().max(1.0) as usize;
        let mut x = vec![0.0; a.len()];
        for k in 1..=steps {
            let s = k as f64 / steps as f64;
            for (i, v) in x.iter_mut().enumerate() {
                *v = a[i] + s * (b[i] - a[i]);
            }
            if !self.free(&x) {
                return false;
            }
        }
        true
    }
}

/// Lebesgue measure of the unit ball in `d` dimensions.
fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(d - 2) * 2.0 * std::f64::consts::PI / d as f64,
    }
}

fn sampling_box(map: &HilbertMap, cfg: &RrtConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some((lo, hi)) = &cfg.bounds {
        if lo.len() != map.dim() || hi.len() != map.dim() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidArgument("invalid RRT* sampling bounds".into()));
        }
        return Ok((lo.clone(), hi.clone()));
    }
    match &map.features().spec().domain {
        Domain::Box { min, max } => Ok((min.clone(), max.clone())),
        Domain::Time => Err(Error::InvalidArgument(
            "map has no workspace box; set RrtConfig::bounds".into(),
        )),
    }
}

/// Runs RRT* for exactly `max_samples` samples and returns the cheapest
/// goal-connected polyline found.
pub fn rrt_star_plan(map: &HilbertMap, start: &[f64], goal: &[f64], cfg: &RrtConfig) -> Result<RrtResult> {
    rrt_star_with_tree(map, start, goal, cfg).map(|(r, _)| r)
}

/// As [`rrt_star_plan`], also returning the final tree.
pub fn rrt_star_with_tree(
    map: &HilbertMap,
    start: &[f64],
    goal: &[f64],
    cfg: &RrtConfig,
) -> Result<(RrtResult, Tree)> {
    cfg.validate()?;
    let d = map.dim();
    if start.len() != d || goal.len() != d {
        return Err(Error::InvalidArgument(format!("endpoints must be {d}-D")));
    }
    let (lo, hi) = sampling_box(map, cfg)?;
    let mut checker = Checker {
        map,
        p_safe: cfg.p_safe,
        resolution: cfg.collision_resolution,
        checks: 0,
    };
    for (name, x) in [("start", start), ("goal", goal)] {
        if !checker.free(x) {
            return Err(Error::InvalidEndpoint(format!(
                "{name} {x:?} has occupancy {:.3} above p_safe {}",
                map.query(x),
                cfg.p_safe
            )));
        }
    }
    let volume: f64 = lo.iter().zip(&hi).map(|(a, b)| b - a).product();
    let df = d as f64;
    let gamma = cfg.neighbor_radius_gamma.unwrap_or_else(|| {
        // Just above the asymptotic-optimality bound, using the whole box as free volume.
        1.1 * 2.0 * (1.0 + 1.0 / df).powf(1.0 / df) * (volume / unit_ball_volume(d)).powf(1.0 / df)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tree = Tree::default();
    tree.push(start.to_vec(), None, 0.0);
    // Nodes with a collision-free edge to the goal.
    let mut goal_links: Vec<usize> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut stats = RrtStats {
        samples: 0,
        samples_to_first_solution: None,
        nodes: 1,
        rewires: 0,
        collision_checks: 0,
        cost_history: Vec::new(),
        gamma,
    };
    let goal_reach = cfg.steer_step;
    let try_goal = |node: usize, tree: &Tree, checker: &mut Checker, goal_links: &mut Vec<usize>| {
        if dist(&tree.points[node], goal) <= goal_reach && checker.edge_free(&tree.points[node], goal) {
            goal_links.push(node);
        }
    };
    try_goal(0, &tree, &mut checker, &mut goal_links);
    let mut sample = vec![0.0; d];

    for s in 1..=cfg.max_samples {
        stats.samples = s;
        if rng.random::<f64>() < cfg.goal_bias {
            sample.copy_from_slice(goal);
        } else {
            for (i, v) in sample.iter_mut().enumerate() {
                *v = rng.random_range(lo[i]..hi[i]);
            }
        }
        let (nearest, nd) = tree
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, dist(p, &sample)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        if nd <= 1e-12 {
            continue;
        }
        let new: Vec<f64> = if nd > cfg.steer_step {
            let k = cfg.steer_step / nd;
            tree.points[nearest]
                .iter()
                .zip(&sample)
                .map(|(a, b)| a + k * (b - a))
                .collect()
        } else {
            sample.clone()
        };
        if !checker.free(&new) {
            continue;
        }
        let n = tree.points.len() as f64 + 1.0;
        let radius = (gamma * (n.ln() / n).powf(1.0 / df)).min(cfg.steer_step);
        let mut near: Vec<(usize, f64)> = tree
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, dist(p, &new)))
            .filter(|&(i, r)| r <= radius || i == nearest)
            .collect();
        // Cheapest candidate first; stop at the first collision-free edge.
        near.sort_by(|a, b| {
            (tree.cost[a.0] + a.1)
                .total_cmp(&(tree.cost[b.0] + b.1))
                .then(a.0.cmp(&b.0))
        });
        let mut parent = None;
        for &(i, r) in &near {
            if checker.edge_free(&tree.points[i], &new) {
                parent = Some((i, tree.cost[i] + r));
                break;
            }
        }
        let Some((p, c)) = parent else { continue };
        let id = tree.push(new, Some(p), c);
        for &(i, r) in &near {
            if i == p || tree.cost[id] + r >= tree.cost[i] {
                continue;
            }
            if checker.edge_free(&tree.points[id], &tree.points[i]) {
                tree.reparent(i, id, tree.cost[id] + r);
                stats.rewires += 1;
            }
        }
        try_goal(id, &tree, &mut checker, &mut goal_links);

        let cand = goal_links
            .iter()
            .map(|&g| (g, tree.cost[g] + dist(&tree.points[g], goal)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((g, c)) = cand {
            if best.is_none_or(|(_, bc)| c < bc - 1e-12) {
                if stats.samples_to_first_solution.is_none() {
                    stats.samples_to_first_solution = Some(s);
                }
                stats.cost_history.push((s, c));
                best = Some((g, c));
            } else {
                best = Some((g, c.min(best.unwrap().1)));
            }
        }
    }
    stats.nodes = tree.points.len();
    stats.collision_checks = checker.checks;

    let result = match best {
        Some((g, c)) => {
            let mut path = tree.trace(g);
            if dist(path.last().unwrap(), goal) > 0.0 {
                path.push(goal.to_vec());
            }
            RrtResult {
                status: RrtStatus::Found,
                path: Some(path),
                cost: Some(c),
                stats,
            }
        }
        None => RrtResult {
            status: RrtStatus::NoPath,
            path: None,
            cost: None,
            stats,
        },
    };
    Ok((result, tree))
}

/// Polyline length.
pub fn polyline_length(points: &[Vec<f64>]) -> f64 {
    points.windows(2).map(|w| dist(&w[0], &w[1])).sum()
}

/// `n` points spaced uniformly in arc length along a polyline, ends included.
pub fn sample_polyline(points: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let n = n.max(2);
    let total = polyline_length(points);
    if points.len() < 2 || total == 0.0 {
        return vec![points[0].clone(); n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..n {
        let s = total * k as f64 / (n - 1) as f64;
        while seg + 1 < points.len() - 1 && seg_start + dist(&points[seg], &points[seg + 1]) < s {
            seg_start += dist(&points[seg], &points[seg + 1]);
            seg += 1;
        }
        let len = dist(&points[seg], &points[seg + 1]);
        let u = if len > 0.0 { ((s - seg_start) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(
            points[seg]
                .iter()
                .zip(&points[seg + 1])
                .map(|(a, b)| a + u * (b - a))
                .collect(),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMap;

    fn free_map() -> HilbertMap {
        let f = FeatureMap::rff_spatial(10, 1.0, 1, vec![0.0, 0.0], vec![10.0, 10.0]).unwrap();
        HilbertMap::with_weights(f, vec![0.0; 10], -4.0).unwrap()
    }

    #[test]
    fn polyline_sampling_is_uniform_in_arc_length() {
        let poly = vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![3.0, 1.0]];
        let s = sample_polyline(&poly, 5);
        let expect = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [3.0, 1.0]];
        for (a, b) in s.iter().zip(expect) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn radius_volume_constants() {
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-12);
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let c = RrtConfig {
            collision_resolution: 1.0,
            steer_step: 0.5,
            ..RrtConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(RrtConfig::default().validate().is_ok());
    }

    #[test]
    fn reparent_propagates_costs() {
        let mut t = Tree::default();
        t.push(vec![0.0], None, 0.0);
        t.push(vec![1.0], Some(0), 5.0);
        t.push(vec![2.0], Some(1), 6.0);
        t.push(vec![0.5], Some(0), 0.5);
        t.reparent(1, 3, 1.0);
        assert_eq!(t.parent[1], Some(3));
        assert_eq!(t.cost[2], 2.0);
        assert!(t.children[0] == vec![3]);
    }

    #[test]
    fn free_space_goes_nearly_straight() {
        let cfg = RrtConfig {
            max_samples: 3000,
            ..RrtConfig::default()
        };
        let r = rrt_star_plan(&free_map(), &[1.0, 1.0], &[9.0, 8.0], &cfg).unwrap();
        assert_eq!(r.status, RrtStatus::Found);
        let p = r.path.unwrap();
        assert_eq!(p.first().unwrap(), &vec![1.0, 1.0]);
        assert_eq!(p.last().unwrap(), &vec![9.0, 8.0]);
        assert!((polyline_length(&p) - r.cost.unwrap()).abs() < 1e-9);
    }
}
