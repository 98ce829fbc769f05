//! Central finite-difference checks of reverse-mode gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Per input: `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub relative_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare the gradient of the scalar `f(inputs)` against central
/// differences with step `h`, for every element of every input.
pub fn check(inputs: &[Tensor], h: f64, f: impl Fn(&Graph, &[Var]) -> Result<Var>) -> Result<GradReport> {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.scalar(out))
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    if g.shape(out).iter().product::<usize>() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar, got {:?}", g.shape(out))));
    }
    let grads = g.backward(out)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, (v, t)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(*v, t.shape());
        let mut numeric = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            let x = t.data()[i];
            probe[k].data_mut()[i] = x + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        relative_errors.push(if scale == 0.0 { 0.0 } else { diff / scale });
    }
    Ok(GradReport { relative_errors })
}
