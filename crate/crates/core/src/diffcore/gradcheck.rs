//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// `(f(+step) - f(-step)) / (2 step)` for a scalar probe `f(delta)`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, step: f64) -> Result<f64> {
    let plus = f(step)?;
    let minus = f(-step)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Maximum relative error between the tape gradient of `f` at `point` and
/// central differences with the given `step`, over every coordinate.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        let loss = f(&tape, x)?;
        tape.backward(loss)?.get(x)
    };
    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(p);
        f(&tape, x)?.item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let numeric = central_difference(
            |delta| {
                let mut p = point.clone();
                p.data_mut()[i] += delta;
                eval(p)
            },
            step,
        )?;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
