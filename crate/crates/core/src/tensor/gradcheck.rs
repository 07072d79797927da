use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so near-zero gradients are
/// compared absolutely instead of amplifying rounding noise.
const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-5)`.
    pub max_rel_error: f64,
    /// Flat index of the entry with the largest discrepancy.
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let input = tape.constant(x.clone());
    f(&tape, input)?.item()
}

/// Compares the tape gradient of a scalar function with central differences.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::spec(format!("finite-difference step {step} must be positive")));
    }
    let tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&tape, input)?;
    let first = out.item()?;
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(input)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if !(rel <= max_rel_error) {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        tol,
        passed: max_rel_error <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::CustomOp;

    #[test]
    fn linear_function_has_no_discrepancy() {
        let x = Tensor::vector(vec![0.2, -1.0, 3.5]);
        let r = grad_check(|_, v| Ok(v.sum()), &x, 1e-4, 1e-4).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn sigmoid_composite_passes() {
        let x = Tensor::vector(vec![0.3, -0.7, 1.1, 0.05]);
        let r = grad_check(
            |_, v| Ok(v.sigmoid().mul(v.tanh())?.exp().sum()),
            &x,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    struct WrongSquare;

    impl CustomOp for WrongSquare {
        fn name(&self) -> &str {
            "wrong_square"
        }
        fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
            let x = inputs[0];
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())
        }
        fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
            // Deliberately missing the factor 2.
            vec![inputs[0].data().iter().zip(grad).map(|(x, g)| x * g).collect()]
        }
    }

    #[test]
    fn injected_wrong_gradient_fails() {
        let x = Tensor::vector(vec![0.5, 1.5]);
        let r = grad_check(
            |tape, v| Ok(tape.custom(Box::new(WrongSquare), &[v])?.sum()),
            &x,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn nondeterminism_is_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::vector(vec![1.0]);
        let err = grad_check(
            |_, v| {
                calls.set(calls.get() + 1.0);
                Ok(v.scale(calls.get()).sum())
            },
            &x,
            1e-4,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
