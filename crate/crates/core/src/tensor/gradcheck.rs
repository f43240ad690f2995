//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, x: &Tensor, probe: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    let y = value.item();
    if !y.is_finite() {
        return Err(Error::Numeric {
            index: probe.unwrap_or(0),
            message: format!("function evaluated to {y}"),
        });
    }
    Ok(y)
}

/// Max over all elements of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_indices(f, x, eps, None)
}

/// Like [`grad_check`], restricted to `indices` when given.
pub fn grad_check_indices<F>(f: F, x: &Tensor, eps: f64, indices: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Usage(format!("grad_check eps must be > 0, got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let out = f(&mut tape, v)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Usage("grad_check needs a scalar function".into()));
        }
        tape.backward(out)?;
        tape.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let all: Vec<usize>;
    let probe = match indices {
        Some(ix) => ix,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut worst: f64 = 0.0;
    for &i in probe {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (evaluate(&f, &plus, Some(i))? - evaluate(&f, &minus, Some(i))?) / (2.0 * eps);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_closed_form() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(7.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_reports_index() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.scale(v, f64::INFINITY);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    }
}
