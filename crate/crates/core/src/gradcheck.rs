//! Central finite-difference checks against tape gradients (f64 only).

use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("function is not deterministic: {first} then {second} at the same point")]
    NonDeterministic { first: f64, second: f64 },
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("function must return a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64, GradCheckError> {
    let t = tape.value(v)?;
    t.item().ok_or_else(|| GradCheckError::NotScalar(t.shape().to_vec()))
}

/// Compares the tape gradient of `f` at `point` with
/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheck, GradCheckError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    if !(eps > 0.0) {
        return Err(GradCheckError::BadStep(eps));
    }
    let eval = |x: &Tensor<f64>| -> Result<f64, GradCheckError> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let first = eval(point)?;
    let second = eval(point)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&mut tape, x)?;
    scalar_of(&tape, out)?;
    let analytic = if tape.requires_grad(out)? {
        let grads = tape.backward(out)?;
        grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()))
    } else {
        Tensor::zeros(point.shape())
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }
    let numeric = Tensor::new(point.shape().to_vec(), numeric)?;
    let (worst_index, max_rel_error) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck { max_rel_error, worst_index, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let r = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.analytic.data(), &[2.0, 4.0]);
        assert!(r.max_rel_error <= 1e-7, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let r = finite_diff_check(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.analytic.data().iter().chain(r.numeric.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn nondeterminism_is_detected() {
        let calls = std::cell::Cell::new(0.0);
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let r = finite_diff_check(
            |t, x| {
                calls.set(calls.get() + 1.0);
                let s = t.sum(x)?;
                t.scale(s, calls.get())
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(GradCheckError::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(matches!(finite_diff_check(|t, x| t.sum(x), &x, 0.0), Err(GradCheckError::BadStep(_))));
    }
}
