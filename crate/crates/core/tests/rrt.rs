use occplan::bench::{build_map, MapParams, WorldSource};
use occplan::features::FeatureMap;
use occplan::occupancy::{train_map, HilbertMap, Label, LabeledPoint, TrainOptions};
use occplan::rrt::{polyline_length, rrt_star_plan, rrt_star_with_tree, RrtConfig, RrtStatus, Tree};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn edge_is_free(map: &HilbertMap, a: &[f64], b: &[f64], res: f64, p_safe: f64) -> bool {
    let steps = (dist(a, b) / res).ceil().max(1.0) as usize;
    (0..=steps).all(|k| {
        let s = k as f64 / steps as f64;
        let x: Vec<f64> = a.iter().zip(b).map(|(p, q)| p + s * (q - p)).collect();
        map.query(&x) <= p_safe
    })
}

fn check_tree(tree: &Tree, map: &HilbertMap, cfg: &RrtConfig) {
    let n = tree.points.len();
    assert_eq!(tree.parent[0], None);
    assert_eq!(tree.cost[0], 0.0);
    for i in 1..n {
        let p = tree.parent[i].expect("every non-root node has a parent");
        assert!(tree.children[p].contains(&i));
        let expected = tree.cost[p] + dist(&tree.points[p], &tree.points[i]);
        assert!((tree.cost[i] - expected).abs() < 1e-9, "node {i} cost {} vs {expected}", tree.cost[i]);
        assert!(edge_is_free(map, &tree.points[p], &tree.points[i], cfg.collision_resolution, cfg.p_safe));
        // Walking up reaches the root without revisiting nodes.
        let (mut j, mut hops) = (i, 0);
        while let Some(q) = tree.parent[j] {
            j = q;
            hops += 1;
            assert!(hops <= n, "cycle through node {i}");
        }
        assert_eq!(j, 0);
    }
    for (p, kids) in tree.children.iter().enumerate() {
        for &c in kids {
            assert_eq!(tree.parent[c], Some(p));
        }
    }
}

#[test]
fn tree_is_valid_on_two_rectangle_map() {
    let params = MapParams {
        features: 400,
        train: TrainOptions {
            epochs: 2,
            ..MapParams::default().train
        },
        ..MapParams::default()
    };
    let source = WorldSource::Preset {
        name: "two-rectangle".into(),
    };
    let (map, _) = build_map(&source, &params).unwrap();
    let cfg = RrtConfig {
        max_samples: 1500,
        seed: 4,
        ..RrtConfig::default()
    };
    let (result, tree) = rrt_star_with_tree(&map, &[1.0, 5.0], &[9.0, 5.0], &cfg).unwrap();
    check_tree(&tree, &map, &cfg);
    assert_eq!(result.status, RrtStatus::Found);
    let path = result.path.unwrap();
    assert_eq!(path.first().unwrap(), &vec![1.0, 5.0]);
    assert_eq!(path.last().unwrap(), &vec![9.0, 5.0]);
    assert!((polyline_length(&path) - result.cost.unwrap()).abs() < 1e-9);
    for w in path.windows(2) {
        assert!(edge_is_free(&map, &w[0], &w[1], cfg.collision_resolution, cfg.p_safe));
    }
    // The anytime cost history only improves.
    for w in result.stats.cost_history.windows(2) {
        assert!(w[1].1 <= w[0].1 && w[1].0 > w[0].0);
    }
}

#[test]
fn empty_world_path_is_nearly_straight() {
    let f = FeatureMap::rff_spatial(10, 1.0, 0, vec![0.0, 0.0], vec![10.0, 10.0]).unwrap();
    let map = HilbertMap::with_weights(f, vec![0.0; 10], -6.0).unwrap();
    let (start, goal) = ([1.0, 1.0], [9.0, 8.0]);
    for seed in 0..3 {
        let cfg = RrtConfig {
            max_samples: 3000,
            seed,
            ..RrtConfig::default()
        };
        let r = rrt_star_plan(&map, &start, &goal, &cfg).unwrap();
        let len = polyline_length(&r.path.unwrap());
        assert!(len <= 1.05 * dist(&start, &goal), "seed {seed}: {len}");
    }
}

#[test]
fn blocked_goal_reports_no_path() {
    // A wall of occupied space across the whole box at x = 5.
    let f = FeatureMap::rff_spatial(200, 0.5, 1, vec![0.0, 0.0], vec![10.0, 10.0]).unwrap();
    let wall = |x: &[f64]| if (x[0] - 5.0).abs() < 0.6 { 1.0 } else { -1.0 };
    let pts: Vec<_> = (0..60)
        .flat_map(|i| (0..60).map(move |j| vec![i as f64 / 6.0, j as f64 / 6.0]))
        .map(|x| {
            let label = if wall(&x) > 0.0 { Label::Occupied } else { Label::Free };
            LabeledPoint::new(x, label)
        })
        .collect();
    let map = train_map(&pts, f, &TrainOptions { epochs: 5, step: 0.05, ..TrainOptions::default() }).unwrap();
    assert!(map.query(&[5.0, 5.0]) > 0.55 && map.query(&[2.0, 5.0]) < 0.55);
    let cfg = RrtConfig {
        max_samples: 400,
        ..RrtConfig::default()
    };
    let r = rrt_star_plan(&map, &[2.0, 5.0], &[8.0, 5.0], &cfg).unwrap();
    assert_eq!(r.status, RrtStatus::NoPath);
    assert!(r.path.is_none());
}
