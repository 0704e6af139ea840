use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Invalid(format!("grad_check step must be > 0, got {h}")));
    }
    let eval = |input: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(input);
        let out = f(&mut tape, v)?;
        if tape.value(out).len() != 1 {
            return Err(Error::shape("grad_check", "function must be scalar-valued"));
        }
        Ok(tape.value(out).item().as_f64())
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let base = tape.value(out).item().as_f64();
    let grads = tape.grads(out)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let again = eval(x.clone())?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Numeric(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + T::of_f64(h);
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - T::of_f64(h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
