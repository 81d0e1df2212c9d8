//! Central finite-difference gradient checks.

use crate::error::{AutodiffError, Result};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite(v));
    }
    Ok(v)
}

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(AutodiffError::Parameter(format!("step h={h} must be > 0")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    eval_scalar(&tape, out)?;
    let analytic = tape.backward(out)?.wrt(xv);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut at = |value: f64| -> Result<f64> {
            probe.data_mut()[i] = value;
            let mut t = Tape::new();
            let v = t.constant(probe.clone());
            let o = f(&mut t, v)?;
            eval_scalar(&t, o)
        };
        let plus = at(orig + h)?;
        let minus = at(orig - h)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same metric over every trainable coordinate of a [`ParamSet`]; `f`
/// receives the attached parameter vars in registration order.
pub fn grad_check_params<F>(f: F, params: &ParamSet, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(AutodiffError::Parameter(format!("step h={h} must be > 0")));
    }
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape);
    let out = f(&mut tape, &vars)?;
    eval_scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for id in params.ids().filter(|id| params.is_trainable(*id)) {
        let analytic = grads.wrt(vars[id.0]);
        for i in 0..params.get(id).numel() {
            let orig = params.get(id).data()[i];
            let mut at = |value: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[i] = value;
                let mut t = Tape::new();
                let vs = probe.attach(&mut t);
                let o = f(&mut t, &vs)?;
                eval_scalar(&t, o)
            };
            let plus = at(orig + h)?;
            let minus = at(orig - h)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
