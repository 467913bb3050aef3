//! Central-difference gradient verification.

use crate::error::{Result, UfdnError};

use super::graph::Graph;
use super::tensor::Tensor;

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences with step `eps`, returning the worst slot-wise relative error
/// `|a - d| / max(|a|, |d|, 1e-8)`.
///
/// `f` must return a scalar and must evaluate the same arithmetic whether or
/// not its graph records (which holds for every op in this crate).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    grad_check_scaled(f, x, eps, 1.0)
}

/// [`grad_check`] with the analytic gradient multiplied by `scale` before the
/// comparison. `scale != 1` simulates a broken backward rule; the verification
/// suite uses it to prove the oracle can fail.
pub fn grad_check_scaled<F>(f: F, x: &Tensor, eps: f64, scale: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(UfdnError::Contract(format!(
            "grad_check eps must lie in (0, 1e-2], got {eps}"
        )));
    }
    let analytic = {
        let mut g = Graph::new();
        let xt = g.leaf(x);
        let y = f(&mut g, &xt)?;
        if y.numel() != 1 {
            return Err(UfdnError::Contract(format!(
                "grad_check target must be scalar, got shape {:?}",
                y.shape()
            )));
        }
        let grads = g.backward(&y)?;
        grads.wrt(&xt)?
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let xt = Tensor::from_vec(x.shape(), data)?;
        f(&mut g, &xt)?.item()
    };

    let base = x.data().to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i] * scale;
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
