use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const PROB_FLOOR: f64 = 1e-12;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error over every element, with its gradient.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    same_shape(pred, target)?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let scale = T::from_f64_lossy(2.0 / n);
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d.to_f64_lossy() * d.to_f64_lossy();
            scale * d
        })
        .collect();
    Ok((sum / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Batch-mean categorical cross-entropy of probability rows against one-hot
/// rows; probabilities are clipped to `[1e-12, 1]`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    same_shape(probs, target)?;
    let rows = probs.batch() as f64;
    let total: f64 = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let t = t.to_f64_lossy();
            if t == 0.0 {
                0.0
            } else {
                -t * p.to_f64_lossy().clamp(PROB_FLOOR, 1.0).ln()
            }
        })
        .sum();
    Ok(total / rows)
}

/// Cross-entropy of softmax outputs plus its gradient with respect to the
/// softmax input, `(p - t) / B`.
pub fn softmax_ce_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let loss = cross_entropy(probs, target)?;
    let scale = T::from_f64_lossy(1.0 / probs.batch() as f64);
    let grad = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * scale)
        .collect();
    Ok((loss, Tensor::new(probs.shape().to_vec(), grad)?))
}
