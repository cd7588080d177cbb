//! Ray-cast street scenes in the layout of a 64-beam spinning lidar, for
//! runs that need a full-size scan without a dataset on disk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Point, PointCloud};
use crate::io::RemapTable;

pub const BEAMS: usize = 64;
pub const COLUMNS: usize = 1900;
pub const SENSOR_HEIGHT: f64 = 1.73;
pub const MAX_RANGE: f64 = 80.0;
const ELEVATION_TOP: f64 = 2.0;
const ELEVATION_BOTTOM: f64 = -24.8;
const DROPOUT: f64 = 0.04;

// raw SemanticKITTI ids
const CAR: u32 = 10;
const ROAD: u32 = 40;
const SIDEWALK: u32 = 48;
const BUILDING: u32 = 50;
const VEGETATION: u32 = 70;
const TRUNK: u32 = 71;
const TERRAIN: u32 = 72;
const POLE: u32 = 80;

enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Cylinder { center: [f64; 2], radius: f64, z: [f64; 2] },
    Sphere { center: [f64; 3], radius: f64 },
}

struct Object {
    shape: Shape,
    raw: u32,
    reflectance: f64,
}

impl Shape {
    /// Smallest positive ray parameter for a ray from the origin along `d`.
    fn hit(&self, d: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Box { min, max } => {
                let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
                for a in 0..3 {
                    if d[a].abs() < 1e-12 {
                        if 0.0 < min[a] || 0.0 > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (t0, t1) = (min[a] / d[a], max[a] / d[a]);
                    lo = lo.max(t0.min(t1));
                    hi = hi.min(t0.max(t1));
                }
                (lo <= hi && lo > 0.0).then_some(lo)
            }
            Shape::Cylinder { center, radius, z } => {
                let a = d[0] * d[0] + d[1] * d[1];
                if a < 1e-12 {
                    return None;
                }
                let b = -2.0 * (d[0] * center[0] + d[1] * center[1]);
                let c = center[0] * center[0] + center[1] * center[1] - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                let hz = t * d[2];
                (t > 0.0 && hz >= z[0] && hz <= z[1]).then_some(t)
            }
            Shape::Sphere { center, radius } => {
                let b = -2.0 * (d[0] * center[0] + d[1] * center[1] + d[2] * center[2]);
                let c = center.iter().map(|v| v * v).sum::<f64>() - radius * radius;
                let disc = b * b - 4.0 * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / 2.0;
                (t > 0.0).then_some(t)
            }
        }
    }
}

fn ground_label(y: f64) -> (u32, f64) {
    match y.abs() {
        a if a < 4.0 => (ROAD, 0.25),
        a if a < 7.0 => (SIDEWALK, 0.35),
        _ => (TERRAIN, 0.45),
    }
}

fn scene<R: Rng>(rng: &mut R) -> Vec<Object> {
    let mut objects = Vec::new();
    let mut push = |shape, raw, reflectance| objects.push(Object { shape, raw, reflectance });
    let g = -SENSOR_HEIGHT;
    for side in [-1.0f64, 1.0] {
        // building facades set back from the street
        let mut x: f64 = -70.0;
        while x < 70.0 {
            let len = rng.gen_range(8.0..20.0);
            let near = side * rng.gen_range(11.0..15.0);
            let far = near + side * rng.gen_range(6.0..12.0);
            push(
                Shape::Box {
                    min: [x, near.min(far), g],
                    max: [x + len, near.max(far), g + rng.gen_range(6.0..15.0)],
                },
                BUILDING,
                0.5,
            );
            x += len + rng.gen_range(2.0..8.0);
        }
        // parked cars along the curb
        let mut x: f64 = -40.0;
        while x < 40.0 {
            if x.abs() > 4.0 {
                let y = side * rng.gen_range(2.2..3.0);
                push(
                    Shape::Box {
                        min: [x, y - 0.9, g],
                        max: [x + 4.2, y + 0.9, g + 1.5],
                    },
                    CAR,
                    0.7,
                );
            }
            x += rng.gen_range(6.0..12.0);
        }
        for _ in 0..6 {
            let c = [rng.gen_range(-45.0..45.0), side * rng.gen_range(4.5..6.5)];
            push(
                Shape::Cylinder {
                    center: c,
                    radius: 0.1,
                    z: [g, g + 5.0],
                },
                POLE,
                0.6,
            );
        }
        for _ in 0..6 {
            let c = [rng.gen_range(-45.0..45.0), side * rng.gen_range(7.5..10.0)];
            let trunk_top = g + rng.gen_range(2.0..3.0);
            push(
                Shape::Cylinder {
                    center: c,
                    radius: 0.2,
                    z: [g, trunk_top],
                },
                TRUNK,
                0.3,
            );
            let r = rng.gen_range(1.5..2.5);
            push(
                Shape::Sphere {
                    center: [c[0], c[1], trunk_top + r * 0.8],
                    radius: r,
                },
                VEGETATION,
                0.2,
            );
        }
    }
    objects
}

/// A labeled scan and the raw label ids that go with it.
#[derive(Clone, Debug)]
pub struct SyntheticScan {
    /// Points with train ids under the SemanticKITTI remap.
    pub cloud: PointCloud,
    pub raw_labels: Vec<u32>,
}

/// Casts `BEAMS x COLUMNS` rays into a random street scene; rays that hit
/// nothing within range or fall to dropout yield no point. Typical scans hold
/// about 115k points.
pub fn synthetic_scan(seed: u64) -> SyntheticScan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = scene(&mut rng);
    let mut points = Vec::with_capacity(BEAMS * COLUMNS);
    let mut raw_labels = Vec::with_capacity(BEAMS * COLUMNS);
    for beam in 0..BEAMS {
        let pitch = (ELEVATION_TOP + (ELEVATION_BOTTOM - ELEVATION_TOP) * beam as f64 / (BEAMS - 1) as f64).to_radians();
        for col in 0..COLUMNS {
            if rng.gen_bool(DROPOUT) {
                continue;
            }
            let yaw = std::f64::consts::PI - std::f64::consts::TAU * col as f64 / COLUMNS as f64;
            let d = [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin()];
            let mut best: Option<(f64, u32, f64)> = None;
            if d[2] < 0.0 {
                let t = -SENSOR_HEIGHT / d[2];
                let (raw, refl) = ground_label(t * d[1]);
                best = Some((t, raw, refl));
            }
            for o in &objects {
                if let Some(t) = o.shape.hit(d) {
                    if best.map_or(true, |b| t < b.0) {
                        best = Some((t, o.raw, o.reflectance));
                    }
                }
            }
            let Some((t, raw, refl)) = best else { continue };
            let t = t + rng.gen_range(-0.02..0.02);
            if t > MAX_RANGE {
                continue;
            }
            let intensity = (refl + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
            points.push(Point::new(
                (t * d[0]) as f32,
                (t * d[1]) as f32,
                (t * d[2]) as f32,
                intensity as f32,
            ));
            raw_labels.push(raw);
        }
    }
    let table = RemapTable::semantic_kitti();
    let labels = raw_labels.iter().map(|&r| table.to_train(r)).collect();
    SyntheticScan {
        cloud: PointCloud::with_labels(points, labels).expect("one label per point"),
        raw_labels,
    }
}
