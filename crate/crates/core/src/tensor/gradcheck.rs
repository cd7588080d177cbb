use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst relative error over all inputs.
    pub max_rel_error: f64,
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|)` per input.
    pub per_input: Vec<f64>,
}

/// Checks the gradient of a scalar-valued `f` with respect to every input.
///
/// `f` is rebuilt on a fresh tape for each perturbation, so it must be
/// deterministic. Each input element costs two evaluations.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<f64>> = perturbed.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().numel() != 1 {
            return Err(Error::shape("grad_check", "objective must be a scalar"));
        }
        Ok(out.value().item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let numeric = Tensor::new(a.shape(), numeric)?;
        let scale = a.max_abs().max(numeric.max_abs());
        let err = if scale == 0.0 {
            0.0
        } else {
            a.max_abs_diff(&numeric) / scale
        };
        per_input.push(err);
    }
    Ok(GradCheck {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    })
}
