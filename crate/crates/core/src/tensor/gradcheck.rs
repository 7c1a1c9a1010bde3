use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Real;

/// Worst disagreement between reverse-mode and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Which input tensor, and which element of it, produced the maximum.
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error floor: below this magnitude the comparison is absolute.
const REL_FLOOR: f64 = 1e-3;

/// Compares the tape gradient of a scalar-valued fragment against central
/// differences with step `h`, perturbing every element of every input.
///
/// The error for one element is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn finite_difference_check<T, F>(fragment: F, inputs: &[Tensor<T>], h: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = fragment(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.len()],
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut perturbed = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for ei in 0..inputs[ti].len() {
            let original = inputs[ti].data()[ei];
            perturbed[ti].data_mut()[ei] = original + T::lit(h);
            let plus = scalar_output(&eval(&perturbed)?);
            perturbed[ti].data_mut()[ei] = original - T::lit(h);
            let minus = scalar_output(&eval(&perturbed)?);
            perturbed[ti].data_mut()[ei] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grads[ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report = GradCheckReport {
                    max_rel_error: err,
                    input: ti,
                    index: ei,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

fn scalar_output<T: Real>((tape, _, out): &(Tape<T>, Vec<Var>, Var)) -> f64 {
    tape.value(*out).data()[0].as_f64()
}
