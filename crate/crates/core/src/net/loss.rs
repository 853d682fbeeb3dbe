use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient at the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, classes] = logits.shape()[..] else {
        return Err(Error::InvalidInput(format!("logits must be batch x classes, got {:?}", logits.shape())));
    };
    if labels.len() != b {
        return Err(Error::InvalidInput(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut grad = vec![0.0; b * classes];
    let mut total = 0.0;
    for (i, (&y, row)) in labels.iter().zip(logits.data().chunks_exact(classes)).enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gj, v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((total / b as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean squared error over all elements and its gradient `2 (pred - target) / n`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    target.expect_shape(pred.shape())?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Row-wise softmax.
pub fn softmax(logits: &Tensor) -> Tensor {
    let classes = logits.row_len();
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}
