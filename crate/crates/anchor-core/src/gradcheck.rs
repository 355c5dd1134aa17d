//! Central finite-difference verification of analytic gradients.
//!
//! Always runs in double precision; a finite-difference check against
//! f32-rounded values would be meaningless at the step sizes used here.

use crate::error::{AnchorError, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Precision, Tensor};

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Evaluate a scalar-valued graph builder at `x` without gradients.
pub fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new(Precision::F64);
    let mut plain = x.clone();
    plain.requires_grad = false;
    let xid = tape.input(&plain);
    let root = f(&mut tape, xid)?;
    if tape.value(root).len() != 1 {
        return Err(AnchorError::NonScalarRoot {
            shape: tape.shape(root).to_vec(),
        });
    }
    Ok(tape.scalar(root))
}

/// Compare the analytic gradient of `f` at `x` against central finite
/// differences with the given step.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / max(1, |analytic|)`.
///
/// Fails with [`AnchorError::NonDeterministic`] if two evaluations of `f` at
/// the same point disagree bitwise.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    assert!(step > 0.0, "finite-diff step must be positive");

    // Analytic pass.
    let mut tape = Tape::new(Precision::F64);
    let mut leaf = x.clone();
    leaf.requires_grad = true;
    let xid = tape.input(&leaf);
    let root = f(&mut tape, xid)?;
    if tape.value(root).len() != 1 {
        return Err(AnchorError::NonScalarRoot {
            shape: tape.shape(root).to_vec(),
        });
    }
    let v0 = tape.scalar(root);
    tape.backward(root)?;
    let analytic: Vec<f64> = tape
        .grad(xid)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    // Determinism probe: a second evaluation must reproduce v0 bitwise.
    let v1 = eval_scalar(&f, x)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(AnchorError::NonDeterministic { a: v0, b: v1 });
    }

    let mut max_err = 0.0f64;
    let mut probe = x.clone();
    for j in 0..x.len() {
        let orig = probe.values()[j];
        probe.values_mut()[j] = orig + step;
        let fp = eval_scalar(&f, &probe)?;
        probe.values_mut()[j] = orig - step;
        let fm = eval_scalar(&f, &probe)?;
        probe.values_mut()[j] = orig;

        let central = (fp - fm) / (2.0 * step);
        let err = (analytic[j] - central).abs() / analytic[j].abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn sum_of_squares_is_exact_quadratic_case() {
        let mut rng = StreamRng::new(4);
        let x = Tensor::new(vec![6], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let err = finite_diff_check(
            |tape, xid| {
                let sq = tape.mul(xid, xid)?;
                tape.sum_all(sq)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu composed with *2 in the forward, but checked against a function
        // whose finite differences correspond to *3: use scalar_mul mismatch by
        // comparing against an intentionally different builder is impossible,
        // so instead verify the error metric flags a broken analytical value by
        // checking a non-smooth point: |x| near zero has no reliable gradient.
        let x = Tensor::new(vec![1], vec![1e-9]).unwrap();
        let err = finite_diff_check(
            |tape, xid| {
                let r = tape.relu(xid)?;
                tape.sum_all(r)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        // At the kink the central difference gives ~0.5 against analytic 1.0.
        assert!(err > 0.4, "expected a large error at the relu kink, got {err}");
    }

    #[test]
    fn exp_log_chain_checks_out() {
        let mut rng = StreamRng::new(12);
        let x = Tensor::new(vec![5], (0..5).map(|_| rng.uniform_in(0.5, 2.0)).collect()).unwrap();
        let err = finite_diff_check(
            |tape, xid| {
                let l = tape.log(xid)?;
                let e = tape.exp(l)?;
                let m = tape.mul(e, e)?;
                tape.sum_all(m)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-7, "max relative error {err}");
    }
}
