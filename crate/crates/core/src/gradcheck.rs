//! Central finite-difference checks for tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a - c| / (|a| + |c| + 1e-12)`, maximised over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, c)| (a - c).abs() / (a.abs() + c.abs() + 1e-12))
        .fold(0.0, f64::max)
}

/// `‖a - c‖₂ / max(‖a‖₂, ‖c‖₂)`; zero when both vectors are zero.
pub fn norm_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, c)| a - c));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe)?;
        probe[i] = x[i] - step;
        let minus = f(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns the maximum relative error.
///
/// `f` builds the scalar output on a fresh tape from the leaf it is given.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let numeric = numeric_gradient(
        |vals| {
            let mut tape = Tape::inference();
            let leaf = tape.leaf(Tensor::new(x.shape().to_vec(), vals.to_vec())?);
            let out = f(&mut tape, leaf)?;
            Ok(tape.value(out).item())
        },
        x.data(),
        step,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_difference_check(
            |t, x| t.mul(x, x),
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_difference_check(
            |t, x| {
                let z = t.scale(x, 0.0)?;
                let s = t.sum(z)?;
                let c = t.constant(Tensor::scalar(4.0));
                t.add(s, c)
            },
            &Tensor::vector(vec![1.0, -2.0, 0.5]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
