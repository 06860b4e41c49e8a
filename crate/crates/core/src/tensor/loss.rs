use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct XentOutput<T> {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    /// `(softmax − onehot) / N`.
    pub grad: Tensor<T>,
    /// Number of rows whose argmax equals the label.
    pub correct: usize,
}

/// Softmax cross-entropy averaged over the batch.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<XentOutput<T>> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} rows of logits", labels.len())));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Vec::with_capacity(n * k);
    let mut total = 0.0f64;
    let mut correct = 0;
    for (s, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label {
                index: s,
                label,
                classes: k,
            });
        }
        let row = logits.sample(s);
        let (arg, max) = row
            .iter()
            .map(|v| v.as_f64())
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        if arg == label {
            correct += 1;
        }
        let sum_exp: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[label].as_f64();
        for (i, v) in row.iter().enumerate() {
            let p = (v.as_f64() - log_z).exp();
            let target = if i == label { 1.0 } else { 0.0 };
            grad.push(T::of((p - target) * inv_n));
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("cross-entropy loss is {loss}")));
    }
    Ok(XentOutput {
        loss,
        grad: Tensor::new(vec![n, k], grad)?,
        correct,
    })
}
