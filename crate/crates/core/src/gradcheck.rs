//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative discrepancy between two gradient estimates.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Maximum relative error between the tape gradient of a scalar function
/// and its central finite differences, over every coordinate of `x`.
///
/// Returns `f64::INFINITY` when `f` fails or yields a non-finite value.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), core::slice::from_ref(x), eps)
        .into_iter()
        .fold(0.0, f64::max)
}

/// Like [`grad_check`] for a function of several tensors; returns the
/// maximum relative error per input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Vec<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let fail = || alloc::vec![f64::INFINITY; inputs.len()];
    let eval = |values: &[Tensor]| -> Option<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars).ok()?;
        let v = tape.data(out);
        (v.len() == 1 && v[0].is_finite()).then_some(v[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let Ok(out) = f(&mut tape, &vars) else {
        return fail();
    };
    if !tape.data(out).iter().all(|v| v.is_finite()) {
        return fail();
    }
    let Ok(grads) = tape.backward(out) else {
        return fail();
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap().to_vec();
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[slot].data()[i];
            work[slot].data_mut()[i] = orig + eps;
            let plus = eval(&work);
            work[slot].data_mut()[i] = orig - eps;
            let minus = eval(&work);
            work[slot].data_mut()[i] = orig;
            let (Some(p), Some(m)) = (plus, minus) else {
                return fail();
            };
            let numeric = (p - m) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
        errors.push(worst);
    }
    errors
}
