use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradient magnitudes below this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(param, element)` where the worst relative error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(p + eps) - f(p - eps)) / 2eps`, element by element.
///
/// `f` records its computation on the tape it is given, using the supplied
/// parameter variables, and returns the scalar output.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        tolerance,
    };
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(param.rows(), param.cols()));
        for k in 0..param.numel() {
            let orig = param.data()[k];
            probe[pi].data_mut()[k] = orig + eps;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[k] = orig - eps;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, k));
            }
        }
    }
    Ok(report)
}
