//! Central finite-difference verification of tape gradients.

use crate::error::AutodiffError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / DENOM_FLOOR.max(analytic.abs() + numeric.abs())
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps`, over every element of every
/// parameter.
///
/// `f` receives the tape and one leaf per entry of `params`, and must be a
/// pure function of those leaves.
pub fn finite_difference_check<E, F>(
    mut f: F,
    params: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(AutodiffError::InvalidStep(eps).into());
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    finite_scalar(&tape, loss, "loss at the unperturbed point")?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]);
        for ei in 0..param.len() {
            let orig = param.data()[ei];
            probe[pi].data_mut()[ei] = orig + eps;
            let plus = evaluate(&mut f, &probe)?;
            probe[pi].data_mut()[ei] = orig - eps;
            let minus = evaluate(&mut f, &probe)?;
            probe[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[ei]);
            let err = relative_error(a, numeric);
            report.elements_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, ei));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn evaluate<E, F>(f: &mut F, params: &[Tensor]) -> Result<f64, E>
where
    E: From<AutodiffError>,
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(finite_scalar(&tape, loss, "loss at a perturbed point")?)
}

fn finite_scalar(tape: &Tape, loss: Var, what: &str) -> Result<f64, AutodiffError> {
    let value = tape
        .scalar(loss)
        .ok_or_else(|| AutodiffError::NonScalarLoss(tape.shape(loss).to_vec()))?;
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite(format!("{what}: {value}")));
    }
    Ok(value)
}
