use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::projection::GridSpec;

/// Hyperparameters of the network and the preprocessing it expects.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature width F.
    pub features: usize,
    /// Backbone depth L.
    pub layers: usize,
    /// Neighbors per point K, the point itself included.
    pub neighbors: usize,
    pub classes: usize,
    /// The available views.
    pub views: Vec<GridSpec>,
    /// Layer `l` projects onto `views[cycle[l % cycle.len()]]`.
    pub cycle: Vec<usize>,
    /// Add the neighbor embedding to the backbone output before the head.
    pub head_skip: bool,
    /// Probability of dropping a neighbor slot during training.
    pub neighbor_dropout: f64,
    /// Feed neighbor features relative to the center point.
    pub relative_neighbors: bool,
    /// Group count of the pointwise conv closing the spatial mix.
    pub spatial_groups: usize,
    /// Side of the depthwise 2D kernels.
    pub kernel: usize,
    pub bn_momentum: f64,
    pub voxel_size: f32,
    pub crop_min: [f32; 3],
    pub crop_max: [f32; 3],
}

/// Width of the hidden layer of the neighbor branch.
pub const NEIGHBOR_HIDDEN: usize = 64;

impl Default for ModelConfig {
    /// F=256, L=48, K=16, 19 classes, 0.4 m planes over a 100 x 100 x 10 m box.
    fn default() -> Self {
        let crop_min = [-50.0, -50.0, -5.0];
        let crop_max = [50.0, 50.0, 5.0];
        ModelConfig {
            features: 256,
            layers: 48,
            neighbors: 16,
            classes: 19,
            views: GridSpec::default_views(crop_min, crop_max, 0.4),
            cycle: vec![0, 1, 2, 3],
            head_skip: true,
            neighbor_dropout: 0.0,
            relative_neighbors: false,
            spatial_groups: 1,
            kernel: 3,
            bn_momentum: 0.99,
            voxel_size: 0.1,
            crop_min,
            crop_max,
        }
    }
}

impl ModelConfig {
    /// A small model for desk-scale runs over a box of the given half-width.
    pub fn small(features: usize, layers: usize, classes: usize, half_extent: f32, resolution: f64) -> Self {
        let crop_min = [-half_extent, -half_extent, -half_extent];
        let crop_max = [half_extent, half_extent, half_extent];
        ModelConfig {
            features,
            layers,
            classes,
            views: GridSpec::default_views(crop_min, crop_max, resolution),
            crop_min,
            crop_max,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.features == 0 || self.layers == 0 || self.neighbors == 0 || self.classes == 0 {
            return bad("features, layers, neighbors and classes must all be >= 1");
        }
        if self.classes >= crate::cloud::IGNORE as usize {
            return bad("too many classes");
        }
        if self.spatial_groups == 0 || self.features % self.spatial_groups != 0 {
            return bad("spatial_groups must divide features");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.views.is_empty() || self.cycle.is_empty() {
            return bad("views and cycle must be non-empty");
        }
        if let Some(&v) = self.cycle.iter().find(|&&v| v >= self.views.len()) {
            return Err(Error::Config(format!("cycle refers to view {v}, only {} defined", self.views.len())));
        }
        for v in &self.views {
            v.validate()?;
        }
        if !(0.0..1.0).contains(&self.neighbor_dropout) {
            return bad("neighbor_dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1)");
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad("voxel_size must be positive");
        }
        if (0..3).any(|i| !(self.crop_min[i] < self.crop_max[i])) {
            return bad("crop_min must be below crop_max on every axis");
        }
        Ok(())
    }

    /// View used by backbone layer `layer`.
    pub fn view_of(&self, layer: usize) -> &GridSpec {
        &self.views[self.cycle[layer % self.cycle.len()]]
    }

    /// Indices of the views some layer actually uses.
    pub fn used_views(&self) -> Vec<usize> {
        let mut used: Vec<usize> = (0..self.layers.min(self.cycle.len()))
            .map(|l| self.cycle[l])
            .collect();
        used.sort_unstable();
        used.dedup();
        used
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let join = |v: &[f32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "features={}", self.features);
        let _ = writeln!(s, "layers={}", self.layers);
        let _ = writeln!(s, "neighbors={}", self.neighbors);
        let _ = writeln!(s, "classes={}", self.classes);
        for (i, v) in self.views.iter().enumerate() {
            let _ = writeln!(s, "view{i}={v}");
        }
        let cycle: Vec<String> = self.cycle.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "cycle={}", cycle.join(" "));
        let _ = writeln!(s, "head_skip={}", self.head_skip);
        let _ = writeln!(s, "neighbor_dropout={}", self.neighbor_dropout);
        let _ = writeln!(s, "relative_neighbors={}", self.relative_neighbors);
        let _ = writeln!(s, "spatial_groups={}", self.spatial_groups);
        let _ = writeln!(s, "kernel={}", self.kernel);
        let _ = writeln!(s, "bn_momentum={}", self.bn_momentum);
        let _ = writeln!(s, "voxel_size={}", self.voxel_size);
        let _ = writeln!(s, "crop_min={}", join(&self.crop_min));
        let _ = writeln!(s, "crop_max={}", join(&self.crop_max));
        s
    }

    /// Parses `key=value` lines over the defaults. Views given as
    /// `view<i>=...` replace the default list entirely.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut views: Vec<(usize, GridSpec)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key, value, &mut views)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        if !views.is_empty() {
            views.sort_by_key(|(i, _)| *i);
            if views.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
                return Err(Error::Config("views must be numbered view0, view1, ... without gaps".into()));
            }
            cfg.views = views.into_iter().map(|(_, v)| v).collect();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut views = Vec::new();
        self.set(key, value, &mut views)?;
        for (i, v) in views {
            let len = self.views.len();
            match self.views.get_mut(i) {
                Some(slot) => *slot = v,
                None if i == len => self.views.push(v),
                None => return Err(Error::Config(format!("no view {i} to replace"))),
            }
        }
        self.validate()
    }

    fn set(&mut self, key: &str, value: &str, views: &mut Vec<(usize, GridSpec)>) -> Result<()> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
        }
        fn triple(key: &str, value: &str) -> Result<[f32; 3]> {
            let v: Vec<f32> = value
                .split_whitespace()
                .map(|t| parse(key, t))
                .collect::<Result<_>>()?;
            v.try_into()
                .map_err(|_| Error::Config(format!("{key} needs three numbers")))
        }
        match key {
            "features" => self.features = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "neighbors" => self.neighbors = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "cycle" => {
                self.cycle = value
                    .split_whitespace()
                    .map(|t| parse(key, t))
                    .collect::<Result<_>>()?
            }
            "head_skip" => self.head_skip = parse(key, value)?,
            "neighbor_dropout" => self.neighbor_dropout = parse(key, value)?,
            "relative_neighbors" => self.relative_neighbors = parse(key, value)?,
            "spatial_groups" => self.spatial_groups = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            "voxel_size" => self.voxel_size = parse(key, value)?,
            "crop_min" => self.crop_min = triple(key, value)?,
            "crop_max" => self.crop_max = triple(key, value)?,
            _ => match key.strip_prefix("view").and_then(|i| i.parse::<usize>().ok()) {
                Some(i) => views.push((i, value.parse()?)),
                None => return Err(Error::Config(format!("unknown key `{key}`"))),
            },
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Field names whose values differ from `other`, for compatibility
    /// errors.
    pub fn differing_fields(&self, other: &ModelConfig) -> Vec<String> {
        let fields = |c: &ModelConfig| -> BTreeMap<String, String> {
            c.to_text()
                .lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        };
        let (mine, theirs) = (fields(self), fields(other));
        let mut keys: Vec<&String> = mine.keys().chain(theirs.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| mine.get(*k) != theirs.get(*k))
            .cloned()
            .collect()
    }
}
