//! Central-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass under
//! [`no_grad`], so it shares no code path with the backward rules it checks.

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a-n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input index, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.checked > 0
    }
}

/// Checks `d sum(f(inputs)) / d inputs` against central differences with step
/// `h`. When `max_per_input` is set, only that many evenly strided entries of
/// each input are probed.
pub fn check<F>(inputs: &[(Vec<f64>, Vec<usize>)], f: F, h: f64, max_per_input: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let params = inputs
        .iter()
        .map(|(d, s)| Tensor::param(d.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    f(&params)?.sum().backward();

    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        no_grad(|| {
            let ts = vals
                .iter()
                .zip(inputs)
                .map(|(d, (_, s))| Tensor::new(d.clone(), s))
                .collect::<Result<Vec<_>>>()?;
            Ok(f(&ts)?.sum().item())
        })
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    for (i, p) in params.iter().enumerate() {
        let analytic = p.grad_or_zeros();
        let n = analytic.len();
        let stride = match max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = vals[i][j];
            vals[i][j] = orig + h;
            let plus = eval(&vals)?;
            vals[i][j] = orig - h;
            let minus = eval(&vals)?;
            vals[i][j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((i, j, analytic[j], numeric));
                }
            }
        }
    }
    Ok(report)
}
