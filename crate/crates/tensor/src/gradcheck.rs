//! Central finite-difference verification of tape gradients (f64 only).

use crate::tape::{Tape, Var};
use crate::Tensor;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor used by [`check_gradients`]; keeps entries whose true
/// gradient is ~0 from dividing rounding noise by noise.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares tape gradients of `loss_fn` against central differences with
/// step `h` for every element of every input.
///
/// `loss_fn` receives the inputs as leaves and must return a one-element value.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, loss_fn: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = loss_fn(&tape, &leaves);
        let grads = tape.backward(loss);
        leaves.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let leaves: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        loss_fn(&tape, &leaves).value().item()
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + h;
            let plus = eval(&work);
            work[i].data_mut()[e] = orig - h;
            let minus = eval(&work);
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[e];
            let err = relative_error(a, numeric, REL_FLOOR);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    report
}
