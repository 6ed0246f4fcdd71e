use crate::error::{ensure_dim, Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits, `(softmax - onehot) / n`. Logits are shifted by their row maximum
/// before exponentiation.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    let k = s.sample();
    ensure_dim("softmax_xent", "label count", s.n, labels.len())?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            "softmax_xent",
            format!("label {bad} outside 0..{k}"),
        ));
    }
    let inv_n = 1.0 / s.n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(s.numel());
    for (n, &label) in labels.iter().enumerate() {
        let row = logits.sample(n);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        loss -= row[label] - max - log_sum;
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max - log_sum).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            grad.push((p - target) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(s, grad)?))
}

/// Class probabilities per sample.
pub fn softmax(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        let row = logits.sample(n);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        out.extend(row.iter().map(|&z| (z - max).exp() / sum));
    }
    Tensor::from_vec(s, out).expect("softmax shape")
}
