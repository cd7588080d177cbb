//! Differentiable operations recorded on a [`Tape`].

use std::rc::Rc;

use super::kernels::{self, BnForward};
use super::{Backward, Real, Tape, Tensor, Var};
use crate::cloud::{Label, IGNORE};
use crate::error::{Error, Result};

/// Statistics source of a batch-norm call.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with the batch statistics and report them.
    Train,
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a Tensor<T>,
        running_var: &'a Tensor<T>,
    },
}

/// Batch statistics measured in train mode (variance unbiased).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

fn expect_shape<T: Real>(op: &'static str, what: &str, v: &Var<T>, shape: &[usize]) -> Result<()> {
    if v.shape() != shape {
        return Err(Error::shape(
            op,
            format!("{what} has shape {:?}, expected {shape:?}", v.shape()),
        ));
    }
    Ok(())
}

/// Leading channel count and the product of the remaining dims.
fn channels_and_rest<T: Real>(op: &'static str, x: &Var<T>) -> Result<(usize, usize)> {
    if x.shape().len() < 2 {
        return Err(Error::shape(op, format!("input needs rank >= 2, has shape {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1..].iter().product()))
}

struct Conv1dBack<T> {
    x: Rc<Tensor<T>>,
    w: Rc<Tensor<T>>,
    groups: usize,
}

impl<T: Real> Backward<T> for Conv1dBack<T> {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (cin, cout) = (self.x.dim(0), self.w.dim(0));
        let n = self.x.numel() / cin.max(1);
        let (dx, dw, db) = kernels::conv1d_backward(self.x.data(), self.w.data(), g.data(), cin, cout, n, self.groups);
        vec![
            Some(Tensor::new(self.x.shape(), dx).unwrap()),
            Some(Tensor::new(self.w.shape(), dw).unwrap()),
            Some(Tensor::new(&[cout], db).unwrap()),
        ]
    }
}

struct Dw2dBack<T> {
    x: Rc<Tensor<T>>,
    w: Rc<Tensor<T>>,
}

impl<T: Real> Backward<T> for Dw2dBack<T> {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let s = self.x.shape();
        let k = self.w.dim(1);
        let (dx, dw, db) = kernels::dwconv2d_backward(self.x.data(), self.w.data(), g.data(), s[0], s[1], s[2], k);
        vec![
            Some(Tensor::new(s, dx).unwrap()),
            Some(Tensor::new(self.w.shape(), dw).unwrap()),
            Some(Tensor::new(&[s[0]], db).unwrap()),
        ]
    }
}

struct Dw1dBack<T> {
    x: Rc<Tensor<T>>,
    w: Rc<Tensor<T>>,
}

impl<T: Real> Backward<T> for Dw1dBack<T> {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let c = self.w.numel();
        let n = self.x.numel() / c.max(1);
        let mut dx = vec![T::zero(); self.x.numel()];
        let mut dw = vec![T::zero(); c];
        let mut db = vec![T::zero(); c];
        for ch in 0..c {
            let (xr, gr) = (&self.x.data()[ch * n..(ch + 1) * n], &g.data()[ch * n..(ch + 1) * n]);
            let wv = self.w.data()[ch];
            for ((d, &gv), &xv) in dx[ch * n..(ch + 1) * n].iter_mut().zip(gr).zip(xr) {
                *d = wv * gv;
                dw[ch] += gv * xv;
                db[ch] += gv;
            }
        }
        vec![
            Some(Tensor::new(self.x.shape(), dx).unwrap()),
            Some(Tensor::new(&[c], dw).unwrap()),
            Some(Tensor::new(&[c], db).unwrap()),
        ]
    }
}

struct BnBack<T> {
    shape: Vec<usize>,
    xhat: Vec<T>,
    gamma: Rc<Tensor<T>>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Real> Backward<T> for BnBack<T> {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let c = self.gamma.numel();
        let m = self.xhat.len() / c.max(1);
        let (dx, dg, dbt) =
            kernels::batchnorm_backward(g.data(), &self.xhat, self.gamma.data(), &self.inv_std, m, self.batch_stats);
        vec![
            Some(Tensor::new(&self.shape, dx).unwrap()),
            Some(Tensor::new(&[c], dg).unwrap()),
            Some(Tensor::new(&[c], dbt).unwrap()),
        ]
    }
}

struct UnaryBack<T> {
    x: Rc<Tensor<T>>,
    deriv: fn(T) -> T,
}

impl<T: Real> Backward<T> for UnaryBack<T> {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let d = self
            .x
            .data()
            .iter()
            .zip(g.data())
            .map(|(&x, &gv)| gv * (self.deriv)(x))
            .collect();
        vec![Some(Tensor::new(self.x.shape(), d).unwrap())]
    }
}

fn relu_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

struct MaxBack {
    in_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for MaxBack {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(&self.in_shape);
        let d = dx.data_mut();
        for (&i, &gv) in self.argmax.iter().zip(g.data()) {
            d[i] += gv;
        }
        vec![Some(dx)]
    }
}

struct AddBack;

impl<T: Real> Backward<T> for AddBack {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct ConcatBack {
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
}

impl<T: Real> Backward<T> for ConcatBack {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let split: usize = self.a_shape.iter().product();
        let (ga, gb) = g.data().split_at(split);
        vec![
            Some(Tensor::new(&self.a_shape, ga.to_vec()).unwrap()),
            Some(Tensor::new(&self.b_shape, gb.to_vec()).unwrap()),
        ]
    }
}

struct ReshapeBack {
    shape: Vec<usize>,
}

impl<T: Real> Backward<T> for ReshapeBack {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(&self.shape).unwrap())]
    }
}

struct XentBack<T> {
    probs: Vec<T>,
    targets: Vec<Label>,
    classes: usize,
    count: usize,
}

impl<T: Real> Backward<T> for XentBack<T> {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let n = self.targets.len();
        let scale = g.item() / T::of(self.count as f64);
        let mut d = self.probs.clone();
        for (pt, &t) in self.targets.iter().enumerate() {
            if t == IGNORE {
                for cls in 0..self.classes {
                    d[cls * n + pt] = T::zero();
                }
            } else {
                d[t as usize * n + pt] -= T::one();
            }
        }
        d.iter_mut().for_each(|v| *v *= scale);
        vec![Some(Tensor::new(&[self.classes, n], d).unwrap())]
    }
}

struct DotBack<T> {
    weights: Tensor<T>,
}

impl<T: Real> Backward<T> for DotBack<T> {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let s = g.item();
        vec![Some(self.weights.map(|w| w * s))]
    }
}

impl<T: Real> Tape<T> {
    /// Kernel-size-1 convolution over the channel axis:
    /// `out[o, n] = b[o] + Σ_i w[o, i]·x[i, n]`. Trailing dims of `x`
    /// beyond the channel axis are treated as one point axis.
    pub fn conv1d(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.conv1d_grouped(x, w, b, 1)
    }

    /// Grouped kernel-size-1 convolution, `w` of shape `[cout, cin/groups]`.
    pub fn conv1d_grouped(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>, groups: usize) -> Result<Var<T>> {
        const OP: &str = "conv1d";
        let (cin, n) = channels_and_rest(OP, x)?;
        if w.shape().len() != 2 {
            return Err(Error::shape(OP, format!("weight must be [cout, cin/groups], got {:?}", w.shape())));
        }
        let cout = w.shape()[0];
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(OP, format!("{groups} groups do not divide cin={cin}, cout={cout}")));
        }
        expect_shape(OP, "weight", w, &[cout, cin / groups])?;
        expect_shape(OP, "bias", b, &[cout])?;
        let out = kernels::conv1d_forward(x.data(), w.data(), b.data(), cin, cout, n, groups);
        let mut shape = x.shape().to_vec();
        shape[0] = cout;
        Ok(self.record(Tensor::new(&shape, out)?, &[x, w, b], || Conv1dBack {
            x: x.shared(),
            w: w.shared(),
            groups,
        }))
    }

    /// Per-channel 2D cross-correlation of `x [C, H, W]` with `w [C, k, k]`,
    /// zero padding `(k-1)/2`, odd `k`.
    pub fn conv2d_depthwise(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        const OP: &str = "conv2d_depthwise";
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::shape(OP, format!("input must be [C, H, W], got {s:?}")));
        }
        let (c, h, wd) = (s[0], s[1], s[2]);
        let k = w.shape().get(1).copied().unwrap_or(0);
        if k % 2 == 0 {
            return Err(Error::shape(OP, format!("kernel size must be odd, got {k}")));
        }
        expect_shape(OP, "weight", w, &[c, k, k])?;
        expect_shape(OP, "bias", b, &[c])?;
        let out = kernels::dwconv2d_forward(x.data(), w.data(), b.data(), h, wd, k);
        Ok(self.record(Tensor::new(s, out)?, &[x, w, b], || Dw2dBack {
            x: x.shared(),
            w: w.shared(),
        }))
    }

    /// `out[c, n] = w[c]·x[c, n] + b[c]`.
    pub fn conv1d_depthwise(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        const OP: &str = "conv1d_depthwise";
        let (c, n) = channels_and_rest(OP, x)?;
        expect_shape(OP, "weight", w, &[c])?;
        expect_shape(OP, "bias", b, &[c])?;
        let mut out = x.value().clone();
        for ch in 0..c {
            let (wv, bv) = (w.data()[ch], b.data()[ch]);
            out.data_mut()[ch * n..(ch + 1) * n]
                .iter_mut()
                .for_each(|v| *v = wv * *v + bv);
        }
        Ok(self.record(out, &[x, w, b], || Dw1dBack {
            x: x.shared(),
            w: w.shared(),
        }))
    }

    /// Per-channel standardization over all non-channel positions followed
    /// by the affine map `gamma·x̂ + beta`.
    pub fn batchnorm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var<T>, Option<BatchNormStats<T>>)> {
        const OP: &str = "batchnorm";
        let (c, m) = channels_and_rest(OP, x)?;
        if m == 0 {
            return Err(Error::shape(OP, "batch has no positions (M = 0)"));
        }
        expect_shape(OP, "gamma", gamma, &[c])?;
        expect_shape(OP, "beta", beta, &[c])?;
        let (fwd, stats, batch_stats) = match mode {
            BatchNormMode::Train => {
                let f = kernels::batchnorm_train(x.data(), gamma.data(), beta.data(), m);
                let unbias = if m > 1 { T::of(m as f64 / (m - 1) as f64) } else { T::one() };
                let stats = BatchNormStats {
                    mean: Tensor::new(&[c], f.mean.clone())?,
                    var: Tensor::new(&[c], f.var.iter().map(|&v| v * unbias).collect())?,
                };
                (f, Some(stats), true)
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.shape() != [c] || running_var.shape() != [c] {
                    return Err(Error::shape(OP, "running statistics do not match the channel count"));
                }
                let f = kernels::batchnorm_eval(
                    x.data(),
                    gamma.data(),
                    beta.data(),
                    running_mean.data(),
                    running_var.data(),
                    m,
                );
                (f, None, false)
            }
        };
        let BnForward { y, xhat, inv_std, .. } = fwd;
        let out = self.record(Tensor::new(x.shape(), y)?, &[x, gamma, beta], || BnBack {
            shape: x.shape().to_vec(),
            xhat,
            gamma: gamma.shared(),
            inv_std,
            batch_stats,
        });
        Ok((out, stats))
    }

    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        let y = x.value().map(|v| v.max(T::zero()));
        self.record(y, &[x], || UnaryBack {
            x: x.shared(),
            deriv: relu_grad::<T>,
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        let y = x.value().map(kernels::gelu);
        self.record(y, &[x], || UnaryBack {
            x: x.shared(),
            deriv: kernels::gelu_grad::<T>,
        })
    }

    /// Maximum along `axis`; the gradient goes to the first maximal element.
    pub fn max_over_axis(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        let s = x.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape("max_over_axis", format!("cannot reduce axis {axis} of {s:?}")));
        }
        let (vals, argmax) = kernels::max_over_axis(x.data(), s, axis);
        let mut out_shape = s.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.record(Tensor::new(&out_shape, vals)?, &[x], || MaxBack {
            in_shape: s.to_vec(),
            argmax,
        }))
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", a.shape(), b.shape())));
        }
        let mut out = a.value().clone();
        out.add_assign(b.value());
        Ok(self.record(out, &[a, b], || AddBack))
    }

    /// Stacks `a [Ca, ...]` on top of `b [Cb, ...]` along the channel axis.
    pub fn concat_channels(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape().len() < 2 || a.shape()[1..] != b.shape()[1..] {
            return Err(Error::shape("concat", format!("{:?} with {:?}", a.shape(), b.shape())));
        }
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut data = Vec::with_capacity(a.value().numel() + b.value().numel());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        Ok(self.record(Tensor::new(&shape, data)?, &[a, b], || ConcatBack {
            a_shape: a.shape().to_vec(),
            b_shape: b.shape().to_vec(),
        }))
    }

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = x.value().clone().reshape(shape)?;
        Ok(self.record(out, &[x], || ReshapeBack {
            shape: x.shape().to_vec(),
        }))
    }

    /// Mean negative log-softmax of `logits [C, N]` over points whose
    /// target is not [`IGNORE`].
    pub fn softmax_cross_entropy(&self, logits: &Var<T>, targets: &[Label]) -> Result<Var<T>> {
        const OP: &str = "softmax_cross_entropy";
        if logits.shape().len() != 2 || logits.shape()[1] != targets.len() {
            return Err(Error::shape(
                OP,
                format!("logits {:?} vs {} targets", logits.shape(), targets.len()),
            ));
        }
        let (c, n) = (logits.shape()[0], logits.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE && t as usize >= c) {
            return Err(Error::shape(OP, format!("target {bad} outside [0, {c})")));
        }
        let (loss, probs, count) = kernels::softmax_xent(logits.data(), targets, c, n);
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        Ok(self.record(Tensor::scalar(loss), &[logits], || XentBack {
            probs,
            targets: targets.to_vec(),
            classes: c,
            count,
        }))
    }

    /// `Σ weights·x`, a scalar. Used to contract outputs for gradient checks.
    pub fn dot(&self, x: &Var<T>, weights: &Tensor<T>) -> Result<Var<T>> {
        if x.shape() != weights.shape() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", x.shape(), weights.shape())));
        }
        let s: T = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.record(Tensor::scalar(s), &[x], || DotBack {
            weights: weights.clone(),
        }))
    }
}
