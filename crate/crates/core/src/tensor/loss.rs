use crate::error::{ensure, Result};

/// Tolerance on `Σ target = 1` accepted by [`cross_entropy`].
pub const PROBABILITY_SUM_TOL: f64 = 1e-9;

/// Max-subtracted softmax; returns a probability vector for any finite input.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn validate_distribution(p: &[f64]) -> Result<()> {
    ensure!(!p.is_empty(), "empty probability vector");
    ensure!(
        p.iter().all(|&v| v >= 0.0 && v.is_finite()),
        "probability entries must be finite and >= 0"
    );
    let sum: f64 = p.iter().sum();
    ensure!(
        (sum - 1.0).abs() <= PROBABILITY_SUM_TOL,
        "probability vector sums to {sum}, not 1"
    );
    Ok(())
}

/// Softmax cross-entropy against a soft target.
///
/// Returns `-Σ t_k log softmax(z)_k` and its gradient `softmax(z) - t`.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    ensure!(
        logits.len() == target.len(),
        "logits length {} != target length {}",
        logits.len(),
        target.len()
    );
    validate_distribution(target)?;
    let logp = log_softmax(logits);
    let loss = -target
        .iter()
        .zip(&logp)
        .filter(|(&t, _)| t > 0.0)
        .map(|(t, lp)| t * lp)
        .sum::<f64>();
    let grad = logp
        .iter()
        .zip(target)
        .map(|(lp, t)| lp.exp() - t)
        .collect();
    Ok((loss, grad))
}

/// Cross-entropy against a hard class label.
pub fn cross_entropy_label(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    ensure!(
        label < logits.len(),
        "label {label} out of range for {} classes",
        logits.len()
    );
    let mut target = vec![0.0; logits.len()];
    target[label] = 1.0;
    cross_entropy(logits, &target)
}

/// Mean squared difference.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(
        a.len() == b.len(),
        "mse length mismatch: {} vs {}",
        a.len(),
        b.len()
    );
    ensure!(!a.is_empty(), "mse of empty vectors");
    let n = a.len() as f64;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Gradient of [`mse`] with respect to `a`.
pub fn mse_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    ensure!(a.len() == b.len(), "mse length mismatch");
    let n = a.len() as f64;
    Ok(a.iter().zip(b).map(|(x, y)| 2.0 * (x - y) / n).collect())
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}
