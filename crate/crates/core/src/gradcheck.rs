//! Central finite-difference checks for tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max over coordinates of `|g_auto - g_fd| / max(1, |g_fd|)`, with `g_fd`
/// from central differences of step `h`.
pub fn check_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&xv)?;
    let auto = tape.backward(&y)?.wrt(&xv);

    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::untraced();
        f(&tape.constant(p))?.value().item()
    };

    let mut worst: f64 = 0.0;
    let base = x.data();
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        let mut minus = base.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fp = eval(Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = eval(Tensor::new(x.shape().to_vec(), minus)?)?;
        let fd = (fp - fm) / (2.0 * h);
        let err = (auto.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form() {
        let a = Tensor::new(vec![3, 3], vec![2.0, 0.5, 0.0, 0.5, 3.0, -1.0, 0.0, -1.0, 1.5]).unwrap();
        let x = Tensor::new(vec![3, 1], vec![0.3, -0.7, 1.1]).unwrap();
        let err = check_gradient(
            |x| {
                let a = x.tape().constant(a.clone());
                x.transpose()?.matmul(&a.matmul(x)?).map(|v| v.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_function() {
        let x = Tensor::from_vec(vec![0.1, 0.2, -0.3, 4.0]);
        let err = check_gradient(|x| Ok(x.scale(2.5).sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(check_gradient(|x| Ok(x.square()), &x, 1e-5).is_err());
    }

    #[test]
    fn non_positive_step_rejected() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(check_gradient(|x| Ok(x.sum()), &x, 0.0).is_err());
    }
}
