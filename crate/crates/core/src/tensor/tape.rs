use std::cell::RefCell;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Gradient rule of one recorded operation.
///
/// Given the gradient of the operation's output, returns one entry per
/// input in the order the inputs were recorded; `None` for inputs that do
/// not receive a gradient.
pub trait Backward<T: Real> {
    fn backward(&self, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

/// A value flowing through a forward pass.
///
/// Variables without a node id are constants: no gradient is tracked for
/// them or for anything computed only from them.
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Real> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn shared(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }
}

struct Record<T> {
    output: usize,
    inputs: Vec<Option<usize>>,
    op: Box<dyn Backward<T>>,
}

struct Inner<T> {
    next_node: usize,
    records: Vec<Record<T>>,
}

/// Ordered log of executed operations.
///
/// A tape with gradients disabled records nothing, so intermediate values
/// are freed as soon as the caller drops them.
pub struct Tape<T> {
    inner: RefCell<Inner<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                next_node: 0,
                records: Vec::new(),
            }),
            grad_enabled: true,
        }
    }

    /// A tape for inference: parameters and results carry no gradient.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf whose gradient will be reported by [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<T> {
        let node = self.grad_enabled.then(|| self.fresh_node());
        Var {
            value: Rc::new(value),
            node,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var::constant(value)
    }

    fn fresh_node(&self) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.next_node += 1;
        inner.next_node - 1
    }

    /// Wraps an op result, recording `op` when any input tracks gradients.
    pub fn record<B>(&self, value: Tensor<T>, inputs: &[&Var<T>], op: impl FnOnce() -> B) -> Var<T>
    where
        B: Backward<T> + 'static,
    {
        if !self.grad_enabled || inputs.iter().all(|v| v.node.is_none()) {
            return Var::constant(value);
        }
        let output = self.fresh_node();
        self.inner.borrow_mut().records.push(Record {
            output,
            inputs: inputs.iter().map(|v| v.node).collect(),
            op: Box::new(op()),
        });
        Var {
            value: Rc::new(value),
            node: Some(output),
        }
    }

    /// Propagates from a one-element output back through every record in
    /// reverse execution order. Gradients accumulate additively.
    pub fn backward(&self, output: &Var<T>) -> Result<Gradients<T>> {
        if output.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must hold one value, has shape {:?}", output.shape()),
            ));
        }
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; inner.next_node];
        let Some(root) = output.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(output.shape(), T::one()));
        for rec in inner.records.iter().rev() {
            let Some(g) = grads[rec.output].take() else {
                continue;
            };
            let input_grads = rec.op.backward(&g);
            debug_assert_eq!(input_grads.len(), rec.inputs.len());
            for (node, ig) in rec.inputs.iter().zip(input_grads) {
                let (Some(node), Some(ig)) = (node, ig) else {
                    continue;
                };
                match &mut grads[*node] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            // keep gradients of leaves (never an op output) and the root
            if rec.output == root {
                grads[rec.output] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves registered with [`Tape::param`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|n| self.grads.get(n)).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.node.and_then(|n| self.grads.get_mut(n)).and_then(Option::take)
    }
}
