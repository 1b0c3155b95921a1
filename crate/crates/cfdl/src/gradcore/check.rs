//! Gradient verification by central finite differences.
//!
//! The checker only uses forward evaluations, so it is independent of the
//! backward rules it validates.

use crate::gradcore::{GradError, ParamRef, Tape, Var};

/// Builds a fresh forward pass from the current parameter values and returns
/// the scalar loss node.
pub type LossBuilder<'a> = dyn FnMut(&mut Tape) -> Result<Var, GradError> + 'a;

/// Central-difference gradients of the loss with respect to every entry of
/// every parameter, using step `h`.
pub fn finite_diff_grads(
    params: &[ParamRef],
    h: f64,
    build: &mut LossBuilder,
) -> Result<Vec<Vec<f64>>, GradError> {
    let mut out = Vec::with_capacity(params.len());
    for p in params {
        let len = p.borrow().len();
        let mut grad = vec![0.0; len];
        for k in 0..len {
            let orig = p.borrow().data()[k];
            p.borrow_mut().data_mut()[k] = orig + h;
            let plus = eval(build)?;
            p.borrow_mut().data_mut()[k] = orig - h;
            let minus = eval(build)?;
            p.borrow_mut().data_mut()[k] = orig;
            grad[k] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Analytic gradients via one taped forward/backward pass.
pub fn analytic_grads(
    params: &[ParamRef],
    build: &mut LossBuilder,
) -> Result<Vec<Vec<f64>>, GradError> {
    for p in params {
        p.borrow_mut().zero_grad();
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    tape.backward(loss)?;
    Ok(params
        .iter()
        .map(|p| p.borrow().grad().unwrap_or(&[]).to_vec())
        .collect())
}

/// Largest relative disagreement between analytic and numeric gradients over
/// all parameters. Relative error is |a−n| / (|a| + |n| + 1e-8).
pub fn gradient_check(
    params: &[ParamRef],
    h: f64,
    mut build: impl FnMut(&mut Tape) -> Result<Var, GradError>,
) -> Result<f64, GradError> {
    let analytic = analytic_grads(params, &mut build)?;
    let numeric = finite_diff_grads(params, h, &mut build)?;
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        worst = worst.max(max_rel_err(a, n));
    }
    Ok(worst)
}

pub fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-8))
        .fold(0.0, f64::max)
}

fn eval(build: &mut LossBuilder) -> Result<f64, GradError> {
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    Ok(tape.scalar_value(loss))
}
