use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over checked elements of `|a - n| / (|a| + |n| + 1e-12)`; NaN when
    /// the function produced a non-finite value.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Elements whose `±eps` perturbation crosses a kink (ReLU sign change,
    /// max-pool argmax change).
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }

    /// Combine two checks, keeping the worst error.
    pub fn merge(self, other: GradCheck) -> GradCheck {
        let worst = if self.max_relative_error.is_nan() || other.max_relative_error.is_nan() {
            f64::NAN
        } else {
            self.max_relative_error.max(other.max_relative_error)
        };
        GradCheck {
            max_relative_error: worst,
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

fn evaluate<F>(f: &F, x: Tensor<f64>) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let y = f(&mut tape, xv)?;
    Ok((tape.value(y).item(), tape.kink_signature()))
}

/// Check `d f / d x` for a scalar-valued `f` at `x` by central differences
/// with step `eps`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let nan = GradCheck {
        max_relative_error: f64::NAN,
        checked: 0,
        skipped: 0,
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let y = f(&mut tape, xv)?;
    if !tape.value(y).item().is_finite() {
        return Ok(nan);
    }
    let signature = tape.kink_signature();
    tape.backward(y)?;
    let analytic = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_default();

    let mut report = GradCheck {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, sp) = evaluate(&f, plus)?;
        let (fm, sm) = evaluate(&f, minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Ok(nan);
        }
        if sp != signature || sm != signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
