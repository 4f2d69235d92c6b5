//! Central finite-difference verification of analytic gradients.
//!
//! The numerical gradient is the independent oracle for every parameterized
//! block: perturb one entry at a time by `h = 1e-5`, evaluate the loss twice,
//! and compare `(f(x+h) - f(x-h)) / 2h` against the tape's backward pass at
//! 64-bit precision.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor that tolerates finite-difference noise on
/// near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Checks `f`'s gradient with respect to every entry of every input and
/// returns the maximum relative error.
///
/// `f` must be a pure function of the inputs: it is re-evaluated on a fresh
/// tape for every perturbation.
pub fn finite_difference_check(
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    per_input_errors(inputs, f).into_iter().fold(0.0, f64::max)
}

/// Same check, but reports the maximum relative error per input tensor.
pub fn per_input_errors(
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> Vec<f64> {
    let eval = |xs: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut tape, &vars);
        let value = tape.value(loss).item();
        let grads = tape.backward(loss);
        let g = vars
            .iter()
            .map(|&v| {
                grads.get(v).cloned().unwrap_or_else(|| {
                    let t = tape.value(v);
                    Tensor::zeros(t.rows, t.cols)
                })
            })
            .collect();
        (value, g)
    };

    let (_, analytic) = eval(inputs);
    let mut xs: Vec<Tensor> = inputs.to_vec();
    let mut errors = vec![0.0f64; inputs.len()];
    for i in 0..inputs.len() {
        for j in 0..inputs[i].data.len() {
            let orig = xs[i].data[j];
            xs[i].data[j] = orig + FD_STEP;
            let (plus, _) = {
                let mut tape = Tape::new();
                let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
                let loss = f(&mut tape, &vars);
                (tape.value(loss).item(), ())
            };
            xs[i].data[j] = orig - FD_STEP;
            let minus = {
                let mut tape = Tape::new();
                let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
                let loss = f(&mut tape, &vars);
                tape.value(loss).item()
            };
            xs[i].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            errors[i] = errors[i].max(rel_err(analytic[i].data[j], numeric));
        }
    }
    errors
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of 2x is 2; a tape op scaling by 2 but (hypothetically)
        // backpropagating 1 would be caught. Here we instead verify the
        // checker reports ~0 error for a correct op.
        let x = Tensor::scalar(0.7);
        let err = finite_difference_check(&[x], |t, v| t.scale(v[0], 2.0));
        assert!(err < 1e-10);
    }
}
