//! Loss, optimizer, metrics and the desk-scale training harness.

mod metrics;
mod optim;
mod toy;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::{Label, PointCloud};
use crate::error::{Error, Result};
use crate::model::{forward, segment, BnUpdate, Mode, ModelConfig, ModelParams, PreparedCloud};
use crate::projection::GridSpec;
use crate::tensor::{Real, Tape, Tensor};

pub use metrics::{iou_per_class, miou, ConfusionMatrix, MetricsReport};
pub use optim::{AdamWConfig, OptimState};
pub use toy::{make_toy_dataset, make_toy_scene, GROUND_BAND, GROUND_Z, HALF_EXTENT, TOY_CLASSES};

/// A preprocessed, labeled cloud ready for training.
#[derive(Clone, Debug)]
pub struct Batch {
    pub prepared: PreparedCloud,
    pub labels: Vec<Label>,
}

impl Batch {
    /// Builds neighbors and projections for an already preprocessed cloud.
    pub fn new(cloud: &PointCloud, config: &ModelConfig) -> Result<Self> {
        let labels = cloud
            .labels()
            .ok_or_else(|| Error::Config("training cloud has no labels".into()))?
            .to_vec();
        Ok(Batch {
            prepared: PreparedCloud::new(cloud, config)?,
            labels,
        })
    }

    /// Crops and voxelizes a raw cloud with the model's settings first.
    pub fn from_raw(cloud: &PointCloud, config: &ModelConfig) -> Result<Self> {
        let (reduced, _) = config.preprocess().apply(cloud)?;
        Batch::new(&reduced, config)
    }
}

/// Mean cross-entropy times `scale`, the gradient of that scaled loss for
/// every trainable tensor, and the batch-norm statistics of the pass.
pub struct LossAndGrads<T> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

pub fn loss_and_gradients<T: Real>(
    params: &ModelParams<T>,
    prepared: &PreparedCloud,
    labels: &[Label],
    config: &ModelConfig,
    scale: f64,
) -> Result<LossAndGrads<T>> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward(&tape, &bound, prepared, config, Mode::Train)?;
    let mut loss = tape.softmax_cross_entropy(&out.logits, labels)?;
    if scale != 1.0 {
        loss = tape.dot(&loss, &Tensor::scalar(T::of(scale)))?;
    }
    let value = loss.value().item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    let grads = tape.backward(&loss)?;
    let trainable: Vec<Tensor<T>> = params
        .specs()
        .iter()
        .zip(bound.vars())
        .filter(|(s, _)| s.trainable)
        .map(|(_, v)| grads.get_or_zeros(v))
        .collect();
    Ok(LossAndGrads {
        loss: value,
        grads: trainable,
        bn_updates: out.bn_updates,
    })
}

/// One forward, backward and optimizer update. Returns the loss before the
/// update. A non-finite loss or gradient aborts with a diagnostic.
pub fn train_step<T: Real>(
    params: &mut ModelParams<T>,
    state: &mut OptimState<T>,
    batch: &Batch,
    config: &ModelConfig,
    optim: &AdamWConfig,
) -> Result<f64> {
    let step = state.step;
    let out = loss_and_gradients(params, &batch.prepared, &batch.labels, config, 1.0)
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step} (lr {})", optim.lr_at(step))),
            e => e,
        })?;
    if let Some(i) = out.grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of `{}` at step {step} (loss {})",
            params.specs().iter().filter(|s| s.trainable).nth(i).map_or("?", |s| s.name.as_str()),
            out.loss
        )));
    }
    state.update(params, &out.grads, optim)?;
    params.apply_bn_updates(&out.bn_updates, config.bn_momentum)?;
    Ok(out.loss)
}

/// Training state for one run: parameters, optimizer and the seeded stream
/// used for neighbor dropout.
pub struct Trainer<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub state: OptimState<T>,
    pub optim: AdamWConfig,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>, optim: AdamWConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        optim.validate()?;
        params.audit(&config)?;
        let state = OptimState::new(&params);
        Ok(Trainer {
            config,
            params,
            state,
            optim,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        if self.config.neighbor_dropout > 0.0 {
            let dropped = Batch {
                prepared: batch.prepared.with_neighbor_dropout(self.config.neighbor_dropout, &mut self.rng),
                labels: batch.labels.clone(),
            };
            train_step(&mut self.params, &mut self.state, &dropped, &self.config, &self.optim)
        } else {
            train_step(&mut self.params, &mut self.state, batch, &self.config, &self.optim)
        }
    }
}

/// Segments every cloud at full resolution and accumulates one confusion
/// matrix. Clouds are processed in parallel.
pub fn evaluate<T: Real>(params: &ModelParams<T>, dataset: &[PointCloud], config: &ModelConfig) -> Result<MetricsReport> {
    let per_cloud: Vec<Result<ConfusionMatrix>> = dataset
        .par_iter()
        .map(|cloud| {
            let truth = cloud
                .labels()
                .ok_or_else(|| Error::Config("evaluation cloud has no labels".into()))?;
            let seg = segment(params, config, cloud)?;
            let mut cm = ConfusionMatrix::new(config.classes);
            cm.accumulate(truth, &seg.labels)?;
            Ok(cm)
        })
        .collect();
    let mut total = ConfusionMatrix::new(config.classes);
    for cm in per_cloud {
        total.merge(&cm?)?;
    }
    MetricsReport::new(total)
}

/// Model settings for the toy scenes.
pub fn toy_config(features: usize, layers: usize) -> ModelConfig {
    let mut cfg = ModelConfig::small(features, layers, TOY_CLASSES, HALF_EXTENT, 0.5);
    cfg.voxel_size = 0.02;
    cfg.views[3] = GridSpec::Spherical {
        height: 16,
        width: 64,
        fov_up: 45.0,
        fov_down: -85.0,
        closest: false,
    };
    cfg
}

/// Settings of the single-scene overfit run.
#[derive(Clone, Debug)]
pub struct ToyOptions {
    pub seed: u64,
    pub steps: usize,
    pub points: usize,
    pub features: usize,
    pub layers: usize,
    /// Replaces the default cycle over all four views.
    pub cycle: Option<Vec<usize>>,
    pub optim: AdamWConfig,
}

impl Default for ToyOptions {
    fn default() -> Self {
        ToyOptions {
            seed: 0,
            steps: 500,
            points: 500,
            features: 32,
            layers: 4,
            cycle: None,
            optim: AdamWConfig {
                lr: 1e-2,
                decay_steps: 500,
                ..AdamWConfig::default()
            },
        }
    }
}

pub struct ToyRun {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub scene: PointCloud,
    /// Loss before each step.
    pub losses: Vec<f64>,
    /// Full-resolution point accuracy on the training scene after training.
    pub accuracy: f64,
}

/// Trains the toy model on one scene, calling `on_step(step, loss)` after
/// every update.
pub fn train_toy(opts: &ToyOptions, mut on_step: impl FnMut(usize, f64)) -> Result<ToyRun> {
    let mut config = toy_config(opts.features, opts.layers);
    if let Some(cycle) = &opts.cycle {
        config.cycle = cycle.clone();
    }
    let scene = make_toy_scene(opts.seed, opts.points);
    let params = ModelParams::<f32>::init(&config, opts.seed)?;
    let mut trainer = Trainer::new(config, params, opts.optim.clone(), opts.seed)?;
    let batch = Batch::from_raw(&scene, &trainer.config)?;
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let loss = trainer.step(&batch)?;
        on_step(step, loss);
        losses.push(loss);
    }
    let report = evaluate(&trainer.params, std::slice::from_ref(&scene), &trainer.config)?;
    Ok(ToyRun {
        accuracy: report.confusion.accuracy(),
        config: trainer.config,
        params: trainer.params,
        scene,
        losses,
    })
}

/// Means of consecutive disjoint windows of `window` losses; a trailing
/// partial window is dropped.
pub fn window_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks_exact(window.max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}
