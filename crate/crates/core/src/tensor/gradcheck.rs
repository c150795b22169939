//! Central finite-difference gradient checking in double precision.

use super::{Tape, Tensor, TensorError, Var};

/// Denominator floor for the relative error, so that gradients that are
/// zero up to rounding compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub evaluations: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of a scalar function of `inputs` with central
/// differences of step `h`. `build` must be a pure function of its inputs.
pub fn check<F, E>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();

    let mut values = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut evaluations = 0;
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..values[i].len() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + h;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - h;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            evaluations += 2;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
        evaluations,
    })
}
