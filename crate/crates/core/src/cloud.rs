//! Point and point-cloud types shared by every stage of the pipeline.

use crate::error::{Error, Result};

/// Training-class id. Valid ids are `0..classes`; [`IGNORE`] marks points
/// excluded from the loss and the metrics.
pub type Label = u16;

/// Label carried by unlabeled points, unknown raw ids and noise.
pub const IGNORE: Label = u16::MAX;

/// Number of per-point input features: x, y, z, intensity, range.
pub const POINT_FEATURES: usize = 5;

/// One lidar return in the sensor frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
    /// Euclidean distance from the sensor, derived from x, y, z.
    pub range: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Point {
            x,
            y,
            z,
            intensity,
            range: norm3(x, y, z),
        }
    }

    #[inline]
    pub fn xyz(&self) -> [f32; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn coord(&self, axis: usize) -> f32 {
        match axis {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis {axis} out of range"),
        }
    }

    #[inline]
    pub fn features(&self) -> [f32; POINT_FEATURES] {
        [self.x, self.y, self.z, self.intensity, self.range]
    }

    /// Recomputes `range` after the coordinates changed.
    pub fn refresh_range(&mut self) {
        self.range = norm3(self.x, self.y, self.z);
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

#[inline]
fn norm3(x: f32, y: f32, z: f32) -> f32 {
    let (x, y, z) = (x as f64, y as f64, z as f64);
    (x * x + y * y + z * z).sqrt() as f32
}

/// N points with optional per-point labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    labels: Option<Vec<Label>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            labels: None,
        }
    }

    pub fn with_labels(points: Vec<Point>, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != points.len() {
            return Err(Error::LabelCount {
                expected: points.len(),
                actual: labels.len(),
            });
        }
        Ok(PointCloud {
            points,
            labels: Some(labels),
        })
    }

    pub fn set_labels(&mut self, labels: Vec<Label>) -> Result<()> {
        if labels.len() != self.points.len() {
            return Err(Error::LabelCount {
                expected: self.points.len(),
                actual: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Point] {
        &mut self.points
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn into_parts(self) -> (Vec<Point>, Option<Vec<Label>>) {
        (self.points, self.labels)
    }

    /// Sub-cloud made of `indices`, in that order, labels carried along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Checks the range column against the coordinates (relative tolerance).
    pub fn ranges_consistent(&self, rel_tol: f64) -> bool {
        self.points.iter().all(|p| {
            let expect = (p.x as f64).hypot(p.y as f64).hypot(p.z as f64);
            (p.range as f64 - expect).abs() <= rel_tol * expect.max(f64::MIN_POSITIVE)
        })
    }
}
