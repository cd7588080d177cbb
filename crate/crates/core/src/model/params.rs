use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, NEIGHBOR_HIDDEN};
use crate::cloud::POINT_FEATURES;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Ones,
    Zeros,
}

/// Name, shape and role of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Buffers (running batch-norm statistics) are saved but not trained.
    pub trainable: bool,
    pub init: Init,
}

fn push_conv(out: &mut Vec<ParamSpec>, name: &str, w_shape: Vec<usize>, fan_in: usize) {
    let bias = vec![w_shape[0]];
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: w_shape,
        trainable: true,
        init: Init::FanIn(fan_in),
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: bias,
        trainable: true,
        init: Init::FanIn(fan_in),
    });
}

fn push_bn(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    for (suffix, trainable, init) in [
        ("gamma", true, Init::Ones),
        ("beta", true, Init::Zeros),
        ("mean", false, Init::Zeros),
        ("var", false, Init::Ones),
    ] {
        out.push(ParamSpec {
            name: format!("{name}.{suffix}"),
            shape: vec![c],
            trainable,
            init,
        });
    }
}

/// Every parameter tensor the configuration needs, in a fixed order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let (f, k, g) = (config.features, config.kernel, config.spatial_groups);
    let p = POINT_FEATURES;
    let h = NEIGHBOR_HIDDEN;
    let mut out = Vec::new();
    push_conv(&mut out, "embed.stem", vec![f, p], p);
    push_bn(&mut out, "embed.nbr_bn", p);
    push_conv(&mut out, "embed.nbr_conv1", vec![h, p], p);
    push_conv(&mut out, "embed.nbr_conv2", vec![f, h], h);
    push_conv(&mut out, "embed.fuse", vec![f, 2 * f], 2 * f);
    for l in 0..config.layers {
        let s = format!("layer{l}.spatial");
        push_bn(&mut out, &format!("{s}.bn"), f);
        push_conv(&mut out, &format!("{s}.dw1"), vec![f, k, k], k * k);
        push_conv(&mut out, &format!("{s}.dw2"), vec![f, k, k], k * k);
        push_conv(&mut out, &format!("{s}.proj"), vec![f, f / g], f / g);
        let c = format!("layer{l}.channel");
        push_bn(&mut out, &format!("{c}.bn"), f);
        push_conv(&mut out, &format!("{c}.conv"), vec![f, f], f);
        push_conv(&mut out, &format!("{c}.dw"), vec![f], 1);
    }
    push_conv(&mut out, "head", vec![config.classes, f], f);
    out
}

/// Named parameter tensors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    specs: Arc<Vec<ParamSpec>>,
    index: Arc<HashMap<String, usize>>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Fan-in scaled uniform weights and biases, unit gamma, zero beta,
    /// running statistics at mean 0 / variance 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = param_specs(config);
        let values = specs
            .iter()
            .map(|s| match s.init {
                Init::Ones => Tensor::full(&s.shape, T::one()),
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| T::of(rng.gen_range(-bound..bound)))
                }
            })
            .collect();
        Ok(Self::from_parts(specs, values))
    }

    fn from_parts(specs: Vec<ParamSpec>, values: Vec<Tensor<T>>) -> Self {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        ModelParams {
            specs: Arc::new(specs),
            index: Arc::new(index),
            values,
        }
    }

    /// Builds parameters for `config` from named tensors; every expected
    /// name must be present with its expected shape.
    pub fn from_named(config: &ModelConfig, mut named: HashMap<String, Tensor<T>>) -> Result<Self> {
        let specs = param_specs(config);
        let mut values = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = named
                .remove(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, config needs {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            values.push(t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self::from_parts(specs, values))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.specs
            .iter()
            .zip(&self.values)
            .filter(|(s, _)| s.trainable)
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Tensors of the trainable parameters, in spec order.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        self.specs
            .iter()
            .zip(&self.values)
            .filter(|(s, _)| s.trainable)
            .map(|(_, v)| v)
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            specs: Arc::clone(&self.specs),
            index: Arc::clone(&self.index),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Checks every tensor against the shapes `config` calls for.
    pub fn audit(&self, config: &ModelConfig) -> Result<()> {
        let expect = param_specs(config);
        if expect.len() != self.specs.len() {
            return Err(Error::Config(format!(
                "config needs {} parameter tensors, model has {}",
                expect.len(),
                self.specs.len()
            )));
        }
        for (e, (s, v)) in expect.iter().zip(self.specs.iter().zip(&self.values)) {
            if e.name != s.name || e.shape != v.shape() {
                return Err(Error::Config(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    s.name,
                    v.shape(),
                    e.name,
                    e.shape
                )));
            }
        }
        Ok(())
    }

    /// Registers trainable tensors as tape leaves and buffers as constants.
    pub fn bind(&self, tape: &Tape<T>) -> BoundParams<T> {
        let vars = self
            .specs
            .iter()
            .zip(&self.values)
            .map(|(s, v)| if s.trainable { tape.param(v.clone()) } else { Var::constant(v.clone()) })
            .collect();
        BoundParams {
            index: Arc::clone(&self.index),
            vars,
        }
    }

    /// Binds caller-provided variables for the trainable tensors (in
    /// [`ModelParams::trainable`] order); buffers become constants.
    pub fn bind_vars(&self, trainable: &[Var<T>]) -> Result<BoundParams<T>> {
        let mut it = trainable.iter();
        let mut vars = Vec::with_capacity(self.values.len());
        for (s, v) in self.specs.iter().zip(&self.values) {
            vars.push(if s.trainable {
                let var = it
                    .next()
                    .ok_or_else(|| Error::shape("bind_vars", "too few trainable variables"))?;
                if var.shape() != v.shape() {
                    return Err(Error::shape(
                        "bind_vars",
                        format!("`{}` expects {:?}, got {:?}", s.name, v.shape(), var.shape()),
                    ));
                }
                var.clone()
            } else {
                Var::constant(v.clone())
            });
        }
        if it.next().is_some() {
            return Err(Error::shape("bind_vars", "too many trainable variables"));
        }
        Ok(BoundParams {
            index: Arc::clone(&self.index),
            vars,
        })
    }
}

/// Parameters registered on a tape for one forward pass.
pub struct BoundParams<T> {
    index: Arc<HashMap<String, usize>>,
    vars: Vec<Var<T>>,
}

impl<T: Real> BoundParams<T> {
    pub fn var(&self, name: &str) -> Result<&Var<T>> {
        self.index
            .get(name)
            .map(|&i| &self.vars[i])
            .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::small(16, 2, 3, 4.0, 0.5);
        let a = ModelParams::<f32>::init(&cfg, 7).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 7).unwrap();
        let c = ModelParams::<f32>::init(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn parameter_count_matches_shape_sum() {
        let (f, l, c, k) = (32usize, 2usize, 4usize, 3usize);
        let cfg = ModelConfig::small(f, l, c, 4.0, 0.5);
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let embed = (f * 5 + f) + (5 + 5) + (64 * 5 + 64) + (f * 64 + f) + (f * 2 * f + f);
        let spatial = 2 * f + 2 * (f * k * k + f) + (f * f + f);
        let channel = 2 * f + (f * f + f) + (f + f);
        let head = c * f + c;
        assert_eq!(p.trainable_count(), embed + l * (spatial + channel) + head);
        p.audit(&cfg).unwrap();
    }

    #[test]
    fn grouped_projection_shrinks_weights() {
        let mut cfg = ModelConfig::small(16, 1, 3, 4.0, 0.5);
        cfg.spatial_groups = 4;
        let p = ModelParams::<f64>::init(&cfg, 0).unwrap();
        assert_eq!(p.get("layer0.spatial.proj.w").unwrap().shape(), &[16, 4]);
    }

    #[test]
    fn audit_catches_other_config() {
        let cfg = ModelConfig::small(16, 2, 3, 4.0, 0.5);
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let mut other = cfg.clone();
        other.classes = 5;
        assert!(p.audit(&other).is_err());
        other = cfg.clone();
        other.layers = 3;
        assert!(p.audit(&other).is_err());
    }

    #[test]
    fn from_named_checks_names_and_shapes() {
        let cfg = ModelConfig::small(8, 1, 2, 4.0, 0.5);
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let named = |p: &ModelParams<f32>| -> HashMap<String, Tensor<f32>> {
            p.specs().iter().map(|s| s.name.clone()).zip(p.values().iter().cloned()).collect()
        };
        assert_eq!(ModelParams::from_named(&cfg, named(&p)).unwrap(), p);
        let mut missing = named(&p);
        missing.remove("head.w");
        assert!(ModelParams::from_named(&cfg, missing).is_err());
        let mut wrong = named(&p);
        wrong.insert("head.b".into(), Tensor::zeros(&[3]));
        assert!(ModelParams::from_named(&cfg, wrong).is_err());
    }
}
