use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Label, Point, PointCloud, IGNORE};

/// Toy scenes span `[-HALF_EXTENT, HALF_EXTENT]` on x and y.
pub const HALF_EXTENT: f32 = 4.0;
/// Height of the ground plane.
pub const GROUND_Z: f32 = -1.0;
/// Half-thickness of the band plane points are drawn from.
pub const GROUND_BAND: f32 = 0.02;
pub const TOY_CLASSES: usize = 3;

pub const GROUND: Label = 0;
pub const BOX: Label = 1;
pub const POLE: Label = 2;

const POLE_RADIUS: f32 = 0.08;
const POLE_HEIGHT: f32 = 2.0;

struct Solid {
    center: [f32; 2],
    half: [f32; 2],
    height: f32,
}

fn disjoint(a: &Solid, b_center: [f32; 2], b_half: [f32; 2], gap: f32) -> bool {
    (0..2).any(|i| (a.center[i] - b_center[i]).abs() > a.half[i] + b_half[i] + gap)
}

/// Scene of `n` points: a ground plane (class 0), two boxes (class 1), three
/// poles (class 2) and uniform noise labeled [`IGNORE`].
pub fn make_toy_scene(seed: u64, n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keeps the widest box (half width 0.7) inside the scene bounds
    let extent = HALF_EXTENT - 0.8;

    let mut solids: Vec<Solid> = Vec::new();
    while solids.len() < 2 {
        let half = [rng.gen_range(0.4..0.7), rng.gen_range(0.4..0.7)];
        let center = [rng.gen_range(-extent..extent), rng.gen_range(-extent..extent)];
        if solids.iter().all(|s| disjoint(s, center, half, 0.5)) {
            solids.push(Solid {
                center,
                half,
                height: rng.gen_range(0.6..1.0),
            });
        }
    }
    let mut poles: Vec<[f32; 2]> = Vec::new();
    while poles.len() < 3 {
        let c = [rng.gen_range(-extent..extent), rng.gen_range(-extent..extent)];
        let r = [POLE_RADIUS; 2];
        let clear_of_boxes = solids.iter().all(|s| disjoint(s, c, r, 0.5));
        let clear_of_poles = poles.iter().all(|p| (p[0] - c[0]).hypot(p[1] - c[1]) > 1.0);
        if clear_of_boxes && clear_of_poles {
            poles.push(c);
        }
    }

    let noise = n * 8 / 100;
    let boxes = n * 30 / 100;
    let pole_pts = n * 20 / 100;
    let ground = n - noise - boxes - pole_pts;

    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut push = |p: [f32; 3], l: Label, rng: &mut ChaCha8Rng| {
        points.push(Point::new(p[0], p[1], p[2], rng.gen_range(0.0..1.0)));
        labels.push(l);
    };

    let mut placed = 0;
    while placed < ground {
        let x = rng.gen_range(-HALF_EXTENT..HALF_EXTENT);
        let y = rng.gen_range(-HALF_EXTENT..HALF_EXTENT);
        if solids.iter().any(|s| !disjoint(s, [x, y], [0.0; 2], 0.0)) {
            continue;
        }
        let z = GROUND_Z + rng.gen_range(-GROUND_BAND..GROUND_BAND);
        push([x, y, z], GROUND, &mut rng);
        placed += 1;
    }
    for i in 0..boxes {
        let s = &solids[i % solids.len()];
        let [hx, hy] = s.half;
        // top face, then the four sides, chosen in proportion to their areas
        let top = 4.0 * hx * hy;
        let side_x = 2.0 * hy * s.height;
        let side_y = 2.0 * hx * s.height;
        let pick = rng.gen_range(0.0..top + 2.0 * (side_x + side_y));
        let u: f32 = rng.gen_range(-1.0..1.0);
        let v: f32 = rng.gen_range(0.0..1.0);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (dx, dy, h) = if pick < top {
            (u * hx, rng.gen_range(-hy..hy), s.height)
        } else if pick < top + 2.0 * side_x {
            (sign * hx, u * hy, v * s.height)
        } else {
            (u * hx, sign * hy, v * s.height)
        };
        push([s.center[0] + dx, s.center[1] + dy, GROUND_Z + h], BOX, &mut rng);
    }
    for i in 0..pole_pts {
        let c = poles[i % poles.len()];
        let a: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let z = GROUND_Z + rng.gen_range(0.05..POLE_HEIGHT);
        push([c[0] + POLE_RADIUS * a.cos(), c[1] + POLE_RADIUS * a.sin(), z], POLE, &mut rng);
    }
    for _ in 0..noise {
        let x = rng.gen_range(-HALF_EXTENT..HALF_EXTENT);
        let y = rng.gen_range(-HALF_EXTENT..HALF_EXTENT);
        let z = rng.gen_range(GROUND_Z..GROUND_Z + POLE_HEIGHT + 1.0);
        push([x, y, z], IGNORE, &mut rng);
    }
    PointCloud::with_labels(points, labels).expect("one label per point")
}

/// A handful of toy scenes with sizes spread over 200 to 1000 points.
pub fn make_toy_dataset(seed: u64) -> Vec<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|_| {
            let n = rng.gen_range(200..=1000);
            make_toy_scene(rng.gen(), n)
        })
        .collect()
}
