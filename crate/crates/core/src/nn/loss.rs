use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    /// Mean cross-entropy over the batch, in nats.
    pub loss: f64,
    /// `(softmax − onehot) / N`, shaped like the logits.
    pub dlogits: Tensor4<T>,
}

/// Row-wise softmax of `(N, K, 1, 1)` logits, max-subtracted.
pub fn softmax<T: Real>(logits: &Tensor4<T>) -> Vec<Vec<f64>> {
    let k = logits.c();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

pub fn softmax_cross_entropy<T: Real>(logits: &Tensor4<T>, labels: &[usize]) -> Result<LossOutput<T>> {
    let [n, k, h, w] = logits.dims();
    if h != 1 || w != 1 {
        return Err(Error::shape(format!(
            "logits must be (N, K, 1, 1), got {:?}",
            logits.dims()
        )));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {} logits rows", labels.len(), n)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::arg(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[label].as_f64();
        for (j, v) in row.iter().enumerate() {
            let p = (v.as_f64() - log_z).exp();
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::cast((p - onehot) * inv_n));
        }
    }
    Ok(LossOutput {
        loss: loss * inv_n,
        dlogits: Tensor4::from_vec(logits.dims(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor4::<f64>::zeros([3, 10, 1, 1]);
        let out = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
        for row in out.dlogits.data().chunks(10) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_correct_logit_gives_zero_loss() {
        let mut logits = Tensor4::<f64>::zeros([1, 5, 1, 1]);
        logits.set(0, 2, 0, 0, 1e6);
        let out = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert!(out.loss >= 0.0);
    }

    #[test]
    fn shift_invariance() {
        let logits = Tensor4::<f64>::from_vec([1, 3, 1, 1], vec![0.3, -1.2, 2.0]).unwrap();
        let shifted = logits.map(|v| v + 123.0);
        let a = softmax_cross_entropy(&logits, &[1]).unwrap().loss;
        let b = softmax_cross_entropy(&shifted, &[1]).unwrap().loss;
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn bad_labels_are_rejected() {
        let logits = Tensor4::<f32>::zeros([1, 3, 1, 1]);
        assert!(matches!(softmax_cross_entropy(&logits, &[3]), Err(Error::Argument(_))));
        assert!(matches!(softmax_cross_entropy(&logits, &[0, 1]), Err(Error::Shape(_))));
    }
}
