//! Central-difference verification of analytic gradients.

use super::{Bindings, Graph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_abs_error: f64,
    /// `max |analytic - numeric|` over the leaf, divided by the larger of the
    /// two gradients' max magnitude.
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }
}

/// One leaf replaced, everything else from the base bindings.
struct Perturbed<'a, T, B: ?Sized> {
    base: &'a B,
    name: &'a str,
    value: &'a Tensor<T>,
}

impl<T, B: Bindings<T> + ?Sized> Bindings<T> for Perturbed<'_, T, B> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        if name == self.name {
            Some(self.value)
        } else {
            self.base.lookup(name)
        }
    }
}

/// Compares the gradient of every differentiable leaf against central
/// differences with the given step.
pub fn grad_check<T: Scalar, B: Bindings<T> + ?Sized>(
    graph: &mut Graph<T>,
    bindings: &B,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let hard = graph.hard_quantizers();
    if !hard.is_empty() {
        return Err(Error::NotDifferentiable(format!(
            "graph contains {} hard quantizer(s) (first at node {}); finite differences of a step \
             function say nothing about the training gradient, use the straight-through surrogate",
            hard.len(),
            hard[0].index()
        )));
    }
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Invalid(format!("step must be positive, got {step}")));
    }
    let out_len = graph.forward(bindings)?.len();
    if out_len != 1 {
        return Err(Error::Invalid("grad_check needs a scalar output".into()));
    }
    let analytic = graph.backward()?;
    let h = T::lit(step);
    let two_h = T::lit(2.0 * step);

    let mut entries = Vec::new();
    for (name, grad) in analytic.iter() {
        let base = bindings.lookup(name).ok_or_else(|| Error::Unbound(name.clone()))?;
        let mut probe = base.clone();
        let mut numeric = Vec::with_capacity(base.len());
        for idx in 0..base.len() {
            let orig = probe.data()[idx];
            probe.data_mut()[idx] = orig + h;
            let plus = graph.forward(&Perturbed { base: bindings, name, value: &probe })?.item();
            probe.data_mut()[idx] = orig - h;
            let minus = graph.forward(&Perturbed { base: bindings, name, value: &probe })?.item();
            probe.data_mut()[idx] = orig;
            numeric.push((plus - minus) / two_h);
        }
        let numeric = Tensor::new(base.shape().to_vec(), numeric)?;
        let max_abs_error = grad.max_abs_diff(&numeric).expect("same shape").to_f64().unwrap_or(f64::NAN);
        let scale = grad.max_abs().max(numeric.max_abs()).to_f64().unwrap_or(f64::NAN);
        let relative_error = if scale == 0.0 { max_abs_error } else { max_abs_error / scale };
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_abs_error,
            relative_error,
            passed: relative_error < tolerance,
        });
    }
    // leave the graph evaluated at the caller's bindings
    graph.forward(bindings)?;
    Ok(GradCheckReport { tolerance, entries })
}
