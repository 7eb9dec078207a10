//! Central finite-difference gradient verification.
//!
//! Used by the test suites to check every analytic gradient against an
//! independent numeric estimate at 64-bit precision. Lives in the library
//! (not test code) so integration tests and the acceptance suite can
//! share it; it is never called on a training path.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};

/// Builds a scalar loss graph from owned input matrices.
///
/// Returns the tape, the parameter vars in input order, and the 1x1 output.
pub type GraphBuilder<'a> = dyn Fn(&[Array2<f64>]) -> (Tape, Vec<Var>, Var) + 'a;

/// Central-difference gradient of the builder's output for input `k`.
pub fn numeric_gradient(
    build: &GraphBuilder,
    inputs: &[Array2<f64>],
    k: usize,
    step: f64,
) -> Array2<f64> {
    let eval = |xs: &[Array2<f64>]| -> f64 {
        let (_tape, _vars, out) = build(xs);
        out.scalar_value()
    };
    let mut grad = Array2::zeros(inputs[k].dim());
    let (rows, cols) = inputs[k].dim();
    for i in 0..rows {
        for j in 0..cols {
            let mut plus = inputs.to_vec();
            plus[k][(i, j)] += step;
            let mut minus = inputs.to_vec();
            minus[k][(i, j)] -= step;
            grad[(i, j)] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
    }
    grad
}

/// Norm-based relative error between two gradients.
pub fn relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let diff = analytic - numeric;
    let num = frob(&diff);
    let den = frob(analytic).max(frob(numeric)).max(1e-8);
    num / den
}

/// Worst relative error over all inputs of `build`, comparing backward-pass
/// gradients against central differences with the given step.
///
/// Inputs that receive no gradient from the graph are compared against an
/// all-zero analytic gradient, so an erroneously disconnected parameter
/// still fails the check.
pub fn max_relative_error(build: &GraphBuilder, inputs: &[Array2<f64>], step: f64) -> f64 {
    let (tape, vars, out) = build(inputs);
    let grads = tape.backward(&out);
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(inputs[k].dim()));
        let numeric = numeric_gradient(build, inputs, k, step);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
