//! Voxel downsampling, field-of-view cropping and geometric augmentation.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    /// Voxel edge length in meters.
    pub voxel_size: f32,
    pub crop_min: [f32; 3],
    pub crop_max: [f32; 3],
    pub augment: AugmentConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            voxel_size: 0.1,
            crop_min: [-50.0, -50.0, -5.0],
            crop_max: [50.0, 50.0, 5.0],
            augment: AugmentConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config(format!("voxel_size must be > 0, got {}", self.voxel_size)));
        }
        for axis in 0..3 {
            if !(self.crop_min[axis] < self.crop_max[axis]) {
                return Err(Error::Config(format!(
                    "crop bounds on axis {axis} are empty: [{}, {}]",
                    self.crop_min[axis], self.crop_max[axis]
                )));
            }
        }
        self.augment.validate()
    }

    /// Crop then voxelize; returns the network-resolution cloud and, for every
    /// input point, the index of the kept point that stands for it (`None`
    /// when the point was cropped away).
    pub fn apply(&self, cloud: &PointCloud) -> Result<(PointCloud, Vec<Option<usize>>)> {
        self.validate()?;
        let cropped = fov_crop(cloud, self.crop_min, self.crop_max);
        let down = voxel_downsample(&cropped.cloud, self.voxel_size)?;
        let mut back = vec![None; cloud.len()];
        for (ci, &orig) in cropped.kept.iter().enumerate() {
            back[orig] = Some(down.back_map[ci]);
        }
        Ok((down.cloud, back))
    }
}

/// Result of [`voxel_downsample`].
#[derive(Clone, Debug)]
pub struct Downsampled {
    pub cloud: PointCloud,
    /// Input index of each surviving point.
    pub representatives: Vec<usize>,
    /// For each input point, the index (into `cloud`) of its voxel's survivor.
    pub back_map: Vec<usize>,
}

/// Integer voxel coordinates of a point.
pub fn voxel_key(xyz: [f32; 3], voxel_size: f32) -> [i64; 3] {
    let s = voxel_size as f64;
    xyz.map(|c| (c as f64 / s).floor() as i64)
}

/// Keeps the first point encountered in each occupied voxel.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f32) -> Result<Downsampled> {
    if !(voxel_size > 0.0) {
        return Err(Error::Config(format!("voxel_size must be > 0, got {voxel_size}")));
    }
    let mut slot_of: HashMap<[i64; 3], usize> = HashMap::with_capacity(cloud.len());
    let mut representatives = Vec::new();
    let mut back_map = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points().iter().enumerate() {
        let slot = *slot_of.entry(voxel_key(p.xyz(), voxel_size)).or_insert_with(|| {
            representatives.push(i);
            representatives.len() - 1
        });
        back_map.push(slot);
    }
    Ok(Downsampled {
        cloud: cloud.select(&representatives),
        representatives,
        back_map,
    })
}

#[derive(Clone, Debug)]
pub struct Cropped {
    pub cloud: PointCloud,
    pub kept: Vec<usize>,
}

/// Keeps points inside the closed box `[min, max]`, preserving order.
pub fn fov_crop(cloud: &PointCloud, min: [f32; 3], max: [f32; 3]) -> Cropped {
    let kept: Vec<usize> = cloud
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| (0..3).all(|a| p.coord(a) >= min[a] && p.coord(a) <= max[a]))
        .map(|(i, _)| i)
        .collect();
    Cropped {
        cloud: cloud.select(&kept),
        kept,
    }
}

/// Which random transforms [`augment`] may draw.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_x: bool,
    pub flip_y: bool,
    pub rotate_z: bool,
    pub scale: bool,
    /// Scale factor is drawn from `[1 - scale_max, 1 + scale_max]`.
    pub scale_max: f32,
    /// Whether scaling also applies to z.
    pub scale_z: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_x: false,
            flip_y: false,
            rotate_z: false,
            scale: false,
            scale_max: 0.1,
            scale_z: true,
        }
    }
}

impl AugmentConfig {
    /// Flips, rotation and scaling all enabled with the 0.1 scale bound.
    pub fn small_data() -> Self {
        AugmentConfig {
            flip_x: true,
            flip_y: true,
            rotate_z: true,
            scale: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.scale_max) {
            return Err(Error::Config(format!("scale_max must lie in [0, 1), got {}", self.scale_max)));
        }
        Ok(())
    }
}

/// A concrete draw of the augmentation transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidScale {
    pub flip_x: bool,
    pub flip_y: bool,
    /// Rotation about z, radians.
    pub angle: f64,
    pub scale: f64,
    pub scale_z: bool,
}

impl Default for RigidScale {
    fn default() -> Self {
        RigidScale {
            flip_x: false,
            flip_y: false,
            angle: 0.0,
            scale: 1.0,
            scale_z: true,
        }
    }
}

impl RigidScale {
    /// Each enabled flip fires with probability 1/2; the angle is uniform in
    /// `[0, 2π)` and the scale uniform in `[1 - scale_max, 1 + scale_max]`.
    pub fn sample<R: Rng>(config: &AugmentConfig, rng: &mut R) -> Self {
        let mut t = RigidScale {
            scale_z: config.scale_z,
            ..Default::default()
        };
        if config.flip_x {
            t.flip_x = rng.gen_bool(0.5);
        }
        if config.flip_y {
            t.flip_y = rng.gen_bool(0.5);
        }
        if config.rotate_z {
            t.angle = rng.gen_range(0.0..2.0 * PI);
        }
        if config.scale && config.scale_max > 0.0 {
            let m = config.scale_max as f64;
            t.scale = rng.gen_range(1.0 - m..=1.0 + m);
        }
        t
    }

    /// Flip, then rotate, then scale. Intensity is untouched, range recomputed.
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let mut out = cloud.clone();
        if *self == RigidScale::default() {
            return out;
        }
        let (sin, cos) = self.angle.sin_cos();
        let sz = if self.scale_z { self.scale } else { 1.0 };
        for p in out.points_mut() {
            let mut x = p.x as f64;
            let mut y = p.y as f64;
            if self.flip_x {
                x = -x;
            }
            if self.flip_y {
                y = -y;
            }
            let (rx, ry) = (cos * x - sin * y, sin * x + cos * y);
            p.x = (rx * self.scale) as f32;
            p.y = (ry * self.scale) as f32;
            p.z = (p.z as f64 * sz) as f32;
            p.refresh_range();
        }
        out
    }
}

/// Draws a transform from a generator seeded with `seed` and applies it.
pub fn augment(cloud: &PointCloud, config: &AugmentConfig, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RigidScale::sample(config, &mut rng).apply(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud_of(pts: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point::new(p[0], p[1], p[2], 0.3)).collect())
    }

    fn random_cloud(seed: u64, n: usize, extent: f32) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point::new(
                        rng.gen_range(-extent..extent),
                        rng.gen_range(-extent..extent),
                        rng.gen_range(-extent..extent),
                        rng.gen(),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn close_points_share_a_voxel() {
        let c = cloud_of(&[[0.02, 0.02, 0.02], [0.03, 0.02, 0.02]]);
        let d = voxel_downsample(&c, 0.1).unwrap();
        assert_eq!(d.representatives, vec![0]);
        assert_eq!(d.back_map, vec![0, 0]);
    }

    #[test]
    fn distant_points_both_survive() {
        let c = cloud_of(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(voxel_downsample(&c, 0.1).unwrap().cloud.len(), 2);
    }

    #[test]
    fn voxel_size_must_be_positive() {
        assert!(voxel_downsample(&cloud_of(&[[0.0; 3]]), 0.0).is_err());
    }

    #[test]
    fn downsample_matches_hash_oracle() {
        let cloud = random_cloud(7, 10_000, 3.0);
        let d = voxel_downsample(&cloud, 0.25).unwrap();
        // oracle: a point survives iff no earlier point has the same quantized coords
        let mut seen = std::collections::HashSet::new();
        let expect: Vec<usize> = cloud
            .points()
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let q = [p.x, p.y, p.z].map(|c| (c as f64 / 0.25).floor() as i64);
                seen.insert(q)
            })
            .map(|(i, _)| i)
            .collect();
        assert_eq!(d.representatives, expect);
        for (i, &slot) in d.back_map.iter().enumerate() {
            let rep = d.representatives[slot];
            assert_eq!(voxel_key(cloud.points()[i].xyz(), 0.25), voxel_key(cloud.points()[rep].xyz(), 0.25));
        }
    }

    #[test]
    fn crop_examples() {
        let c = cloud_of(&[[0.0, 0.0, 0.0]]);
        assert_eq!(fov_crop(&c, [-1.0; 3], [1.0; 3]).cloud.len(), 1);
        let c = cloud_of(&[[100.0, 0.0, 0.0]]);
        assert_eq!(fov_crop(&c, [-50.0; 3], [50.0; 3]).cloud.len(), 0);
        let c = cloud_of(&[[1.0, -1.0, 1.0]]);
        assert_eq!(fov_crop(&c, [-1.0; 3], [1.0; 3]).kept, vec![0], "box is closed");
    }

    #[test]
    fn crop_matches_predicate_scan() {
        let cloud = random_cloud(3, 2000, 10.0);
        let (lo, hi) = ([-4.0, -6.0, -2.0], [5.0, 3.0, 8.0]);
        let got = fov_crop(&cloud, lo, hi);
        let mut expect = Vec::new();
        for (i, p) in cloud.points().iter().enumerate() {
            if p.x >= lo[0] && p.x <= hi[0] && p.y >= lo[1] && p.y <= hi[1] && p.z >= lo[2] && p.z <= hi[2] {
                expect.push(i);
            }
        }
        assert_eq!(got.kept, expect);
    }

    #[test]
    fn flip_x_negates_x() {
        let c = cloud_of(&[[1.0, 2.0, 3.0]]);
        let t = RigidScale {
            flip_x: true,
            ..Default::default()
        };
        assert_eq!(t.apply(&c).points()[0].xyz(), [-1.0, 2.0, 3.0]);
    }

    #[test]
    fn half_turn_about_z() {
        let c = cloud_of(&[[1.0, 0.0, 0.0]]);
        let t = RigidScale {
            angle: PI,
            ..Default::default()
        };
        let p = t.apply(&c).points()[0];
        assert!((p.x + 1.0).abs() < 1e-6 && p.y.abs() < 1e-6 && p.z == 0.0);
    }

    #[test]
    fn scale_multiplies_range() {
        let c = cloud_of(&[[1.5, -2.0, 0.7]]);
        let t = RigidScale {
            scale: 1.07,
            ..Default::default()
        };
        let (before, after) = (c.points()[0].range as f64, t.apply(&c).points()[0].range as f64);
        assert!((after - 1.07 * before).abs() <= 1e-6 * after);
    }

    #[test]
    fn scale_z_flag_restricts_to_xy() {
        let c = cloud_of(&[[1.0, 1.0, 2.0]]);
        let t = RigidScale {
            scale: 0.5,
            scale_z: false,
            ..Default::default()
        };
        assert_eq!(t.apply(&c).points()[0].xyz(), [0.5, 0.5, 2.0]);
    }

    #[test]
    fn scale_max_validated() {
        let cfg = AugmentConfig {
            scale_max: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PreprocessConfig {
            crop_min: [1.0, 0.0, 0.0],
            crop_max: [1.0, 1.0, 1.0],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sampled_transform_is_within_bounds() {
        let cfg = AugmentConfig::small_data();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t = RigidScale::sample(&cfg, &mut rng);
            assert!((0.0..2.0 * PI).contains(&t.angle));
            assert!((0.9..=1.1).contains(&t.scale));
        }
    }

    #[test]
    fn preprocess_back_map_covers_kept_points() {
        let cloud = random_cloud(5, 3000, 8.0);
        let cfg = PreprocessConfig {
            voxel_size: 0.5,
            crop_min: [-5.0; 3],
            crop_max: [5.0; 3],
            ..Default::default()
        };
        let (down, back) = cfg.apply(&cloud).unwrap();
        for (i, b) in back.iter().enumerate() {
            let p = cloud.points()[i];
            let inside = (0..3).all(|a| p.coord(a).abs() <= 5.0);
            assert_eq!(b.is_some(), inside);
            if let Some(j) = b {
                assert_eq!(voxel_key(p.xyz(), 0.5), voxel_key(down.points()[*j].xyz(), 0.5));
            }
        }
    }

    proptest! {
        #[test]
        fn downsample_is_idempotent(seed in 0u64..1000, size in 0.05f32..2.0) {
            let cloud = random_cloud(seed, 300, 4.0);
            let once = voxel_downsample(&cloud, size).unwrap().cloud;
            let twice = voxel_downsample(&once, size).unwrap().cloud;
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn disabled_augment_is_identity(seed in any::<u64>()) {
            let cloud = random_cloud(seed % 97, 50, 20.0);
            prop_assert_eq!(augment(&cloud, &AugmentConfig::default(), seed), cloud);
        }

        #[test]
        fn augmented_ranges_stay_consistent(seed in any::<u64>()) {
            let cloud = random_cloud(seed % 89, 100, 30.0);
            let out = augment(&cloud, &AugmentConfig::small_data(), seed);
            prop_assert!(out.ranges_consistent(1e-6));
            for (a, b) in cloud.points().iter().zip(out.points()) {
                prop_assert_eq!(a.intensity, b.intensity);
            }
        }
    }
}
