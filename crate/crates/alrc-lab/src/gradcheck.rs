//! Central finite-difference verification of backward passes.
//!
//! The checker only ever evaluates forward passes of a freshly built tape, so
//! it stays independent of the reverse-mode code path it is used to verify.

use crate::autodiff::{Tape, Value};
use crate::error::Result;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;
/// Default relative tolerance: |analytic - numeric| / (|analytic| + 1e-8).
pub const DEFAULT_REL_TOL: f64 = 1e-5;

/// One disagreement between analytic and numeric gradients.
#[derive(Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Check `build`'s gradients against central finite differences in `f64`.
///
/// `build` must construct the graph from scratch each call: it receives the
/// current input tensors registered as trainable parameters and returns the
/// scalar loss node. Returns every element whose relative error exceeds
/// `rel_tol` (empty means the check passed).
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    rel_tol: f64,
    build: F,
) -> Result<Vec<GradMismatch>>
where
    F: Fn(&mut Tape<f64>, &[Value]) -> Result<Value>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Value>, Value)> {
        let mut tape = Tape::new();
        let vals: Vec<Value> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vals)?;
        Ok((tape, vals, loss))
    };

    let (tape, vals, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> =
        vals.iter().map(|&v| grads.wrt_or_zeros(&tape, v)).collect();

    let forward_at = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let (tape, _, loss) = eval(tensors)?;
        tape.value(loss).scalar_value()
    };

    let mut mismatches = Vec::new();
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += step;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= step;
            let numeric = (forward_at(&plus)? - forward_at(&minus)?) / (2.0 * step);
            let a = analytic[ti].data()[ei];
            let rel_err = (a - numeric).abs() / (a.abs() + 1e-8);
            if rel_err > rel_tol {
                mismatches.push(GradMismatch {
                    input: ti,
                    element: ei,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(mismatches)
}
