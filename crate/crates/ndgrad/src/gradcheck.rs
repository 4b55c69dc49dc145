//! Central finite-difference oracle for gradient tests.
//!
//! Run checks with `T = f64`; in `f32` the rounding noise of the forward pass
//! dominates any useful step size.

use crate::{Real, Result, Tape, Tensor, Var};

/// `|analytic − numeric| / (|numeric| + 1e-8)`, maximised over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Compares the autodiff gradient of the scalar function `f` at `x` against
/// central differences with step `h` and returns the maximum relative error.
///
/// The numeric quotient divides by the distance between the two perturbed
/// points as actually represented in `T`, not by `2h`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let input = x.clone().with_requires_grad(true);
    let mut tape = Tape::new();
    let leaf = tape.leaf(&input);
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = match grads.get(leaf) {
        Some(g) => g.iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; x.numel()],
    };

    let eval = |t: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out).to_f64())
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let plus = T::from_f64(orig.to_f64() + h);
        let minus = T::from_f64(orig.to_f64() - h);
        probe.data_mut()[i] = plus;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = minus;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((fp - fm) / (plus.to_f64() - minus.to_f64()));
    }
    Ok(max_relative_error(&analytic, &numeric))
}
