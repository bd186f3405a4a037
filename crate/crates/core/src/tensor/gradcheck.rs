use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function with central
/// finite differences at `point`.
///
/// Returns `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::contract(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point)?;
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)?
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(probe)?;
        let y = f(&mut tape, x)?;
        tape.item(y)
    };

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for (i, a) in analytic.iter().enumerate() {
        let original = point.data()[i];
        probe.data_mut()[i] = original + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = original - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
