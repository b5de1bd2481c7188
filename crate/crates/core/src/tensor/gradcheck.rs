//! Central finite-difference gradient checking.

use super::loss::cross_entropy;
use super::matrix::Matrix;
use super::net::{backward, forward, ClassifierNet};
use crate::error::{ensure, Result};

/// Magnitude below which gradient entries are compared absolutely rather
/// than relatively (both sides near zero carry only rounding noise).
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` against central differences of `f` around `x0`,
/// returning the largest per-coordinate relative error.
pub fn check_gradient<F>(mut f: F, x0: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), analytic.len(), "gradient length mismatch");
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

fn mean_ce(net: &ClassifierNet, inputs: &Matrix, targets: &[Vec<f64>]) -> Result<(f64, Matrix)> {
    let (logits, _) = forward(net, inputs)?;
    let b = inputs.rows() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let (l, g) = cross_entropy(logits.row(r), t)?;
        total += l;
        dlogits
            .row_mut(r)
            .iter_mut()
            .zip(g)
            .for_each(|(d, v)| *d = v / b);
    }
    Ok((total / b, dlogits))
}

/// Checks [`backward`] for the mean cross-entropy of `net` on `inputs`
/// against central differences, over every parameter and every input
/// entry. Returns the maximum relative error.
pub fn grad_check(
    net: &ClassifierNet,
    inputs: &Matrix,
    targets: &[Vec<f64>],
    h: f64,
) -> Result<f64> {
    ensure!(h > 0.0 && h <= 1e-3, "step h must lie in (0, 1e-3], got {h}");
    ensure!(
        targets.len() == inputs.rows(),
        "one target per input row required"
    );
    let (_, cache) = forward(net, inputs)?;
    let (_, dlogits) = mean_ce(net, inputs, targets)?;
    let (param_grads, input_grads) = backward(net, &cache, &dlogits)?;

    let x0: Vec<f64> = net.param_slices().concat();
    let mut probe = net.clone();
    let param_err = check_gradient(
        |x| {
            let mut offset = 0;
            for block in probe.param_slices_mut() {
                block.copy_from_slice(&x[offset..offset + block.len()]);
                offset += block.len();
            }
            mean_ce(&probe, inputs, targets).expect("validated").0
        },
        &x0,
        &param_grads.flatten(),
        h,
    );

    let input_err = check_gradient(
        |x| {
            let m = Matrix::from_vec(inputs.rows(), inputs.cols(), x.to_vec()).expect("shape");
            mean_ce(net, &m, targets).expect("validated").0
        },
        inputs.as_slice(),
        input_grads.as_slice(),
        h,
    );
    Ok(param_err.max(input_err))
}
