use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over checked coordinates of `|a − n| / max(1e-12, |a| + |n|)`.
    pub max_rel_err: f64,
    /// `‖a − n‖₂ / max(1e-300, ‖a‖₂ + ‖n‖₂)` over the checked coordinates.
    pub norm_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±h probes straddle a relu kink (activation pattern
    /// differs between the two sides); the function is not differentiable
    /// there in the classical sense, so they are skipped.
    pub kink_excluded: usize,
}

/// Compares tape gradients of the scalar function `f` at `x` with central differences.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let fx = tape.value(out);
    if !fx.is_scalar() {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar function, got shape {:?}",
            fx.shape()
        )));
    }
    if !fx.is_finite() {
        return Err(Error::Evaluation("f(x) is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: Tensor<f64>| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let o = f(&mut t, v)?;
        let val = t.value(o).item()?;
        if !val.is_finite() {
            return Err(Error::Evaluation("f(x ± h) is not finite".into()));
        }
        Ok((val, t.relu_signature()))
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        norm_rel_err: 0.0,
        checked: 0,
        kink_excluded: 0,
    };
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp != sm {
            report.kink_excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
        diff2 += (a - numeric) * (a - numeric);
        a2 += a * a;
        n2 += numeric * numeric;
    }
    report.norm_rel_err = norm_rel(diff2, a2, n2);
    Ok(report)
}

/// Normwise relative error from squared sums.
pub fn norm_rel(diff2: f64, a2: f64, n2: f64) -> f64 {
    diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(1e-300)
}
