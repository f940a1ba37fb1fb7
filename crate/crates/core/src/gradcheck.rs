//! Central-difference verification of tape gradients, in 64-bit.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate at which the maximum was reached.
    pub worst_index: usize,
    /// Tape and central-difference gradients at `worst_index`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Candidates passed over because the function is not smooth there.
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}

/// Checks every coordinate of `x`. Returns the largest relative error
/// between the tape gradient and central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    Ok(grad_check_coords(f, x, h, &coords)?.max_rel_error)
}

/// Like [`grad_check`] but only over `coords`, for inputs too large to
/// perturb exhaustively.
pub fn grad_check_coords<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::invalid(format!("step {h} is outside [1e-6, 1e-2]")));
    }
    if !x.all_finite() {
        return Err(Error::invalid("gradient check input has non-finite values"));
    }
    if let Some(&bad) = coords.iter().find(|&&c| c >= x.len()) {
        return Err(Error::invalid(format!(
            "coordinate {bad} out of range for {} values",
            x.len()
        )));
    }

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let first = tape.value(out).clone();
    if first.len() != 1 {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar function, got shape {:?}",
            first.shape()
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let second = evaluate(&f, x)?;
    if first.item().to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: coords.len(),
        skipped: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic.data()[i], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic.data()[i];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// Fourth-order estimates of the derivative along coordinate `i`: forward
/// one-sided, backward one-sided and central. All three agree on a smooth
/// stretch. A ReLU or max-pool switch within four steps of `x` separates the
/// one-sided pair, even when the switch sits exactly at `x`.
fn stencils<F>(f: &F, probe: &mut Tensor<f64>, i: usize, h: f64, center: f64) -> Result<[f64; 3]>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let orig = probe.data()[i];
    let mut v = [0.0; 9];
    for (k, slot) in v.iter_mut().enumerate() {
        *slot = if k == 4 {
            center
        } else {
            probe.data_mut()[i] = orig + (k as f64 - 4.0) * h;
            evaluate(f, probe)?
        };
    }
    probe.data_mut()[i] = orig;
    let forward = (-25.0 * v[4] + 48.0 * v[5] - 36.0 * v[6] + 16.0 * v[7] - 3.0 * v[8]) / (12.0 * h);
    let backward = (25.0 * v[4] - 48.0 * v[3] + 36.0 * v[2] - 16.0 * v[1] + 3.0 * v[0]) / (12.0 * h);
    let central = (8.0 * (v[5] - v[3]) - (v[6] - v[2])) / (12.0 * h);
    Ok([forward, backward, central])
}

/// Relative agreement required between the three stencils.
const SMOOTHNESS_TOLERANCE: f64 = 1e-6;

/// Checks up to `want` coordinates taken in order from `candidates`.
///
/// Each candidate is tried at steps `h`, `h/10` and `h/100` (never below
/// 1e-6). The first step at which the forward, backward and central
/// estimates agree, within [`SMOOTHNESS_TOLERANCE`] relative plus the
/// rounding noise of the stencil, supplies the reference. A candidate with
/// no such step lies on or next to a switch of a piecewise-linear layer,
/// where no finite difference is a valid reference. It is skipped and the
/// next candidate is tried.
///
/// The wide first step keeps rounding noise near 1e-12 on an O(1) value, so
/// gradients of order 1e-7 are still resolved. The narrow steps resolve
/// sharply curved regions such as a soft assignment with a large
/// temperature.
pub fn grad_check_smooth<F>(
    f: F,
    x: &Tensor<f64>,
    h: f64,
    candidates: &[usize],
    want: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::invalid(format!("step {h} is outside [1e-6, 1e-2]")));
    }
    if !x.all_finite() {
        return Err(Error::invalid("gradient check input has non-finite values"));
    }
    if let Some(&bad) = candidates.iter().find(|&&c| c >= x.len()) {
        return Err(Error::invalid(format!(
            "coordinate {bad} out of range for {} values",
            x.len()
        )));
    }

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    if tape.value(out).len() != 1 {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let first = tape.value(out).item();
    let grads = tape.backward(out)?;
    let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    if first.to_bits() != evaluate(&f, x)?.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: candidates.first().copied().unwrap_or(0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = x.clone();
    let noise = 64.0 * f64::EPSILON * first.abs().max(1.0);
    for &i in candidates {
        if report.checked == want {
            break;
        }
        let mut numeric = None;
        for step in [h, h / 10.0, h / 100.0].into_iter().filter(|&s| s >= 1e-6) {
            let [forward, backward, central] = stencils(&f, &mut probe, i, step, first)?;
            let scale = forward.abs().max(backward.abs()).max(central.abs());
            let allowed = SMOOTHNESS_TOLERANCE * scale + noise / step;
            if (forward - backward).abs() <= allowed && (forward - central).abs() <= allowed {
                numeric = Some(central);
                break;
            }
        }
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        let err = relative_error(analytic.data()[i], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic.data()[i];
            report.worst_numeric = numeric;
        }
    }
    if report.checked == 0 && want > 0 && !candidates.is_empty() {
        return Err(Error::invalid("no smooth coordinate among the gradient check candidates"));
    }
    Ok(report)
}
