use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// a central-difference estimate with step `eps`.
///
/// `f` receives a fresh tape and the input registered on it as a parameter,
/// and must return a single-element output. The error for each coordinate is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(point.clone());
        let out = f(&mut tape, v)?;
        let value = tape.value(out).data()[0];
        if !value.is_finite() {
            return Err(Error::Evaluation(format!("f evaluated to {value}")));
        }
        Ok(value)
    };

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out).data()[0];
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("f evaluated to {value}")));
    }
    let grads = tape.backward(out);
    let zeros = vec![0.0; x.len()];
    let analytic = grads.get(v).unwrap_or(&zeros);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for (i, &exact) in analytic.iter().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (exact - numeric).abs() / exact.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
