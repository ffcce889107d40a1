//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error. Coordinates whose true
/// gradient is zero still show central-difference roundoff around 1e-11.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(1e-6, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / REL_FLOOR.max(analytic.abs() + numeric.abs())
}

fn evaluate<F>(f: &F, point: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.data()[0])
}

/// Compares reverse-mode gradients of a scalar program against central
/// differences with step `eps`, over every coordinate of every point tensor
/// whose `requires_grad` flag is set. Returns the largest relative error.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(point)
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect::<Vec<_>>()
    };

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (i, t) in point.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        for (j, &a) in analytic[i].iter().enumerate() {
            let x0 = t.data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let up = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0 - eps;
            let down = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        let x = Tensor::scalar(0.7).with_requires_grad(true);
        let err = grad_check(|_, v| Ok(v[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap().with_requires_grad(true);
        let r = grad_check(|_, v| Ok(v[0]), &[x], 1e-5);
        assert!(matches!(r, Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn square_and_error_formula() {
        let x = Tensor::scalar(1.5).with_requires_grad(true);
        let err = grad_check(
            |tape, v| {
                let y = tape.mul(v[0], v[0])?;
                tape.sum(y)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
        assert_eq!(relative_error(1.0, 2.0), 1.0 / 3.0);
        assert!((relative_error(0.0, 5e-12) - 5e-6).abs() < 1e-18);
        assert!(grad_check(|_, v| Ok(v[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
