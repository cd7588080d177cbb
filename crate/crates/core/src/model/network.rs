use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use super::config::ModelConfig;
use super::params::{BoundParams, ModelParams};
use crate::cloud::{Label, PointCloud, IGNORE, POINT_FEATURES};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::preprocess::PreprocessConfig;
use crate::projection::{assign, CellAssignment};
use crate::tensor::{BatchNormMode, BatchNormStats, Real, Tape, Tensor, Var};

/// Which statistics batch norm uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running-stat updates are reported.
    Train,
    /// Stored running statistics.
    Eval,
}

/// A cloud with its neighbor lists and per-view cell assignments, computed
/// once and reused across forward passes.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    n: usize,
    k: usize,
    /// Channel-first raw features, `[5, N]`.
    features: Vec<f32>,
    /// Query-major neighbor indices, `[N, K]`.
    neighbors: Vec<u32>,
    relative: bool,
    views: Vec<Option<(Arc<CellAssignment>, (usize, usize))>>,
}

impl PreparedCloud {
    /// Builds the kd-tree, queries `K` neighbors per point (the point itself
    /// first) and assigns points to every view the layers use.
    pub fn new(cloud: &PointCloud, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tree = KdTree::build(cloud)?;
        let knn = tree.query_knn_indexed(config.neighbors, true)?;
        Self::with_neighbors(cloud, knn.indices, config)
    }

    /// Like [`PreparedCloud::new`] with neighbor lists supplied by the caller.
    pub fn with_neighbors(cloud: &PointCloud, neighbors: Vec<u32>, config: &ModelConfig) -> Result<Self> {
        let (n, k) = (cloud.len(), config.neighbors);
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        if k > n {
            return Err(Error::InvalidK { k, n });
        }
        if neighbors.len() != n * k || neighbors.iter().any(|&i| i as usize >= n) {
            return Err(Error::shape("prepare", format!("need {n}x{k} neighbor indices below {n}")));
        }
        let mut features = vec![0f32; POINT_FEATURES * n];
        for (p, pt) in cloud.points().iter().enumerate() {
            for (ch, v) in pt.features().into_iter().enumerate() {
                features[ch * n + p] = v;
            }
        }
        let used = config.used_views();
        let views = (0..config.views.len())
            .map(|v| {
                if !used.contains(&v) {
                    return Ok(None);
                }
                let spec = &config.views[v];
                Ok(Some((Arc::new(assign(cloud, spec)?), spec.dims())))
            })
            .collect::<Result<_>>()?;
        Ok(PreparedCloud {
            n,
            k,
            features,
            neighbors,
            relative: config.relative_neighbors,
            views,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn neighbors(&self, point: usize) -> &[u32] {
        &self.neighbors[point * self.k..(point + 1) * self.k]
    }

    pub fn assignment(&self, view: usize) -> Option<&Arc<CellAssignment>> {
        self.views.get(view).and_then(|v| v.as_ref()).map(|(a, _)| a)
    }

    /// Copy in which each neighbor slot after the first is replaced by the
    /// point itself with probability `p`.
    pub fn with_neighbor_dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Self {
        let mut out = self.clone();
        if p <= 0.0 {
            return out;
        }
        for (q, slots) in out.neighbors.chunks_mut(self.k).enumerate() {
            for s in slots.iter_mut().skip(1) {
                if rng.gen_bool(p) {
                    *s = q as u32;
                }
            }
        }
        out
    }

    fn point_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[POINT_FEATURES, self.n], self.features.iter().map(|&v| T::of(v as f64)).collect()).unwrap()
    }

    /// Neighbor features as `[5, K, N]`.
    fn neighbor_tensor<T: Real>(&self) -> Tensor<T> {
        let (n, k) = (self.n, self.k);
        let mut out = vec![T::zero(); POINT_FEATURES * k * n];
        for ch in 0..POINT_FEATURES {
            let src = &self.features[ch * n..(ch + 1) * n];
            for j in 0..k {
                let dst = &mut out[(ch * k + j) * n..(ch * k + j + 1) * n];
                for (q, d) in dst.iter_mut().enumerate() {
                    let mut v = src[self.neighbors[q * k + j] as usize] as f64;
                    if self.relative {
                        v -= src[q] as f64;
                    }
                    *d = T::of(v);
                }
            }
        }
        Tensor::new(&[POINT_FEATURES, k, n], out).unwrap()
    }
}

/// Batch statistics of one batch-norm layer measured in train mode.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    /// Parameter prefix, e.g. `layer3.channel.bn`.
    pub prefix: String,
    pub stats: BatchNormStats<T>,
}

/// Outputs of the embedding stage, both `[F, N]`.
pub struct Embedding<T> {
    pub features: Var<T>,
    pub neighbor_embedding: Var<T>,
}

/// Wall-clock split of one forward pass, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub embed: f64,
    pub backbone: f64,
    pub head: f64,
}

pub struct ForwardOutput<T> {
    /// `[C, N]` logits.
    pub logits: Var<T>,
    pub bn_updates: Vec<BnUpdate<T>>,
    pub times: StageTimes,
}

fn batchnorm<T: Real>(
    tape: &Tape<T>,
    p: &BoundParams<T>,
    prefix: &str,
    x: &Var<T>,
    mode: Mode,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<Var<T>> {
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let beta = p.var(&format!("{prefix}.beta"))?;
    let (y, stats) = match mode {
        Mode::Train => tape.batchnorm(x, gamma, beta, BatchNormMode::Train)?,
        Mode::Eval => {
            let mean = p.var(&format!("{prefix}.mean"))?.value();
            let var = p.var(&format!("{prefix}.var"))?.value();
            tape.batchnorm(
                x,
                gamma,
                beta,
                BatchNormMode::Eval {
                    running_mean: mean,
                    running_var: var,
                },
            )?
        }
    };
    if let Some(stats) = stats {
        updates.push(BnUpdate {
            prefix: prefix.to_string(),
            stats,
        });
    }
    Ok(y)
}

fn conv<T: Real>(tape: &Tape<T>, p: &BoundParams<T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    tape.conv1d(x, p.var(&format!("{name}.w"))?, p.var(&format!("{name}.b"))?)
}

/// Per-point stem features fused with the max-pooled neighbor branch.
pub fn embed<T: Real>(
    tape: &Tape<T>,
    p: &BoundParams<T>,
    cloud: &PreparedCloud,
    mode: Mode,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<Embedding<T>> {
    let x = tape.constant(cloud.point_tensor());
    let stem = conv(tape, p, "embed.stem", &x)?;
    let nbr = tape.constant(cloud.neighbor_tensor());
    let h = batchnorm(tape, p, "embed.nbr_bn", &nbr, mode, updates)?;
    let h = tape.relu(&conv(tape, p, "embed.nbr_conv1", &h)?);
    let h = conv(tape, p, "embed.nbr_conv2", &h)?;
    let pooled = tape.max_over_axis(&h, 1)?;
    let fused = conv(tape, p, "embed.fuse", &tape.concat_channels(&stem, &pooled)?)?;
    Ok(Embedding {
        features: fused,
        neighbor_embedding: pooled,
    })
}

/// `x + proj(inflate(dw2(relu(dw1(flatten(bn(x)))))))`.
#[allow(clippy::too_many_arguments)]
pub fn spatial_mix<T: Real>(
    tape: &Tape<T>,
    p: &BoundParams<T>,
    layer: usize,
    x: &Var<T>,
    cells: &Arc<CellAssignment>,
    dims: (usize, usize),
    groups: usize,
    mode: Mode,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<Var<T>> {
    let s = format!("layer{layer}.spatial");
    let h = batchnorm(tape, p, &format!("{s}.bn"), x, mode, updates)?;
    let g = tape.flatten(&h, cells, dims)?;
    let g = tape.conv2d_depthwise(&g, p.var(&format!("{s}.dw1.w"))?, p.var(&format!("{s}.dw1.b"))?)?;
    let g = tape.relu(&g);
    let g = tape.conv2d_depthwise(&g, p.var(&format!("{s}.dw2.w"))?, p.var(&format!("{s}.dw2.b"))?)?;
    let h = tape.inflate(&g, cells)?;
    let h = tape.conv1d_grouped(&h, p.var(&format!("{s}.proj.w"))?, p.var(&format!("{s}.proj.b"))?, groups)?;
    tape.add(x, &h)
}

/// `x + dw(relu(conv(bn(x))))`, per point.
pub fn channel_mix<T: Real>(
    tape: &Tape<T>,
    p: &BoundParams<T>,
    layer: usize,
    x: &Var<T>,
    mode: Mode,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<Var<T>> {
    let c = format!("layer{layer}.channel");
    let h = batchnorm(tape, p, &format!("{c}.bn"), x, mode, updates)?;
    let h = tape.relu(&conv(tape, p, &format!("{c}.conv"), &h)?);
    let h = tape.conv1d_depthwise(&h, p.var(&format!("{c}.dw.w"))?, p.var(&format!("{c}.dw.b"))?)?;
    tape.add(x, &h)
}

/// Full network: embedding, `L` spatial/channel mix layers, head.
pub fn forward<T: Real>(
    tape: &Tape<T>,
    p: &BoundParams<T>,
    cloud: &PreparedCloud,
    config: &ModelConfig,
    mode: Mode,
) -> Result<ForwardOutput<T>> {
    if cloud.k != config.neighbors {
        return Err(Error::Config(format!(
            "cloud was prepared with K={}, config has K={}",
            cloud.k, config.neighbors
        )));
    }
    let mut updates = Vec::new();
    let t0 = Instant::now();
    let emb = embed(tape, p, cloud, mode, &mut updates)?;
    let t1 = Instant::now();
    let mut x = emb.features;
    for layer in 0..config.layers {
        let view = config.cycle[layer % config.cycle.len()];
        let (cells, dims) = cloud
            .views
            .get(view)
            .and_then(|v| v.as_ref())
            .ok_or_else(|| Error::Config(format!("cloud was prepared without view {view}")))?;
        x = spatial_mix(tape, p, layer, &x, cells, *dims, config.spatial_groups, mode, &mut updates)?;
        x = channel_mix(tape, p, layer, &x, mode, &mut updates)?;
    }
    let t2 = Instant::now();
    if config.head_skip {
        x = tape.add(&x, &emb.neighbor_embedding)?;
    }
    let logits = conv(tape, p, "head", &x)?;
    let t3 = Instant::now();
    let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
    Ok(ForwardOutput {
        logits,
        bn_updates: updates,
        times: StageTimes {
            embed: ms(t0, t1),
            backbone: ms(t1, t2),
            head: ms(t2, t3),
        },
    })
}

impl<T: Real> ModelParams<T> {
    /// `running = momentum·running + (1 - momentum)·batch` for every update.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) -> Result<()> {
        let (m, m1) = (T::of(momentum), T::of(1.0 - momentum));
        for u in updates {
            for (suffix, batch) in [("mean", &u.stats.mean), ("var", &u.stats.var)] {
                let name = format!("{}.{suffix}", u.prefix);
                let running = self
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("no buffer `{name}`")))?;
                for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
                    *r = m * *r + m1 * b;
                }
            }
        }
        Ok(())
    }
}

/// Eval-mode logits `[C, N]` without recording gradients.
pub fn predict<T: Real>(params: &ModelParams<T>, cloud: &PreparedCloud, config: &ModelConfig) -> Result<Tensor<T>> {
    Ok(predict_timed(params, cloud, config)?.0)
}

pub fn predict_timed<T: Real>(
    params: &ModelParams<T>,
    cloud: &PreparedCloud,
    config: &ModelConfig,
) -> Result<(Tensor<T>, StageTimes)> {
    let tape = Tape::no_grad();
    let bound = params.bind(&tape);
    let out = forward(&tape, &bound, cloud, config, Mode::Eval)?;
    Ok((out.logits.value().clone(), out.times))
}

/// Per-point argmax of `[C, N]` logits; the lowest class wins ties.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<Label> {
    let (c, n) = (logits.dim(0), logits.dim(1));
    let d = logits.data();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for cls in 1..c {
                if d[cls * n + p] > d[best * n + p] {
                    best = cls;
                }
            }
            best as Label
        })
        .collect()
}

impl ModelConfig {
    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            voxel_size: self.voxel_size,
            crop_min: self.crop_min,
            crop_max: self.crop_max,
            ..PreprocessConfig::default()
        }
    }
}

/// Result of segmenting a raw cloud.
#[derive(Clone, Debug)]
pub struct Segmentation {
    /// One label per input point; points outside the crop box get
    /// [`IGNORE`].
    pub labels: Vec<Label>,
    pub kept_points: usize,
    pub prepare_ms: f64,
    pub times: StageTimes,
}

/// Crops and voxelizes `cloud`, runs the network on the voxel
/// representatives and propagates their predictions back to every point.
pub fn segment<T: Real>(params: &ModelParams<T>, config: &ModelConfig, cloud: &PointCloud) -> Result<Segmentation> {
    let t0 = Instant::now();
    let (reduced, back) = config.preprocess().apply(cloud)?;
    let prepared = PreparedCloud::new(&reduced, config)?;
    let prepare_ms = t0.elapsed().as_secs_f64() * 1e3;
    let (logits, times) = predict_timed(params, &prepared, config)?;
    let reduced_labels = argmax_labels(&logits);
    let labels = back
        .iter()
        .map(|b| b.map_or(IGNORE, |i| reduced_labels[i]))
        .collect();
    Ok(Segmentation {
        labels,
        kept_points: reduced.len(),
        prepare_ms,
        times,
    })
}
