//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use super::tape::{Tape, Var};
use super::Tensor;

/// A scalar-valued tensor function, expressed as tape construction.
pub trait ScalarFn {
    fn eval(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

/// Compare reverse-mode gradients of `f` at `x` against central differences
/// with step `h`. Returns the maximum relative error over coordinates,
/// `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn grad_check(f: &dyn ScalarFn, x: &Tensor, h: f64) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::contract(format!("grad_check step {h} outside [1e-6, 1e-4]")));
    }
    let mut probe = x.clone();
    probe.requires_grad = true;

    let mut tape = Tape::new();
    let v = tape.leaf(&probe);
    let y = f.eval(&mut tape, v)?;
    if !tape.value(y).is_scalar() {
        return Err(Error::contract(format!(
            "grad_check requires a scalar function, got shape {:?}",
            tape.value(y).shape
        )));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(v)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval_at = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let probe = Tensor::from_data(&x.shape, data.to_vec())?;
        let v = t.leaf(&probe);
        let y = f.eval(&mut t, v)?;
        Ok(t.value(y).item())
    };

    let mut max_rel = 0.0f64;
    let mut data = x.data.clone();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let fp = eval_at(&data)?;
        data[i] = orig - h;
        let fm = eval_at(&data)?;
        data[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
