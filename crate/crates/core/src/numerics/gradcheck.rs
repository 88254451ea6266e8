use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Denominator floor for relative errors, so gradients that are zero up to
/// roundoff are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Maximum elementwise relative error for each input.
    pub max_rel_error: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst() < tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward-pass gradients of a scalar function against central
/// differences with the given step.
pub fn grad_check<G>(f: G, inputs: &[Tensor<f64>], step: f64) -> Result<GradReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    grad_check_against(&f, inputs, step, analytic)
}

/// Same as [`grad_check`] but with caller-supplied analytic gradients.
pub fn grad_check_against<G>(f: &G, inputs: &[Tensor<f64>], step: f64, analytic: Vec<Tensor<f64>>) -> Result<GradReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = vals.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut num = vec![0.0; inputs[i].len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let worst = num
            .iter()
            .zip(analytic[i].data())
            .map(|(&n, &a)| relative_error(a, n))
            .fold(0.0, f64::max);
        max_rel_error.push(worst);
        numeric.push(Tensor::new(inputs[i].shape(), num)?);
    }
    Ok(GradReport {
        max_rel_error,
        analytic,
        numeric,
    })
}

pub fn analytic_grads<G>(f: &G, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}
