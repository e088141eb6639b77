use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean categorical cross-entropy of `[B×C]` logits and its gradient
/// `(softmax − onehot)/B`. The loss is accumulated in double precision.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let c = logits.dim(1);
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, num_classes: c });
    }
    let b = labels.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for ((row, g), &y) in logits.data().chunks_exact(c).zip(grad.data_mut().chunks_exact_mut(c)).zip(labels) {
        let max = row.iter().map(|v| v.to_f64_lossless()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.to_f64_lossless() - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y].to_f64_lossless();
        for (j, (gv, v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v.to_f64_lossless() - lse).exp();
            let onehot = if j == y { 1.0 } else { 0.0 };
            *gv = T::from_f64_lossy((p - onehot) / b);
        }
    }
    let loss = loss / b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, grad) = cross_entropy(&Tensor::<f64>::zeros(&[3, 14]), &[0, 5, 13]).unwrap();
        assert!((loss - 14f64.ln()).abs() < 1e-12);
        assert!((grad.at(&[1, 5]) - (1.0 / 14.0 - 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logit_has_vanishing_loss() {
        let mut l = Tensor::<f64>::zeros(&[1, 14]);
        l.set(&[0, 2], 200.0);
        let (loss, _) = cross_entropy(&l, &[2]).unwrap();
        assert!(loss < 1e-80);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = Tensor::from_fn(&[4, 5], |i| ((i * 37) % 11) as f64 * 0.3 - 1.5);
        let labels = [0, 4, 2, 2];
        let (_, g) = cross_entropy(&x, &labels).unwrap();
        let err = grad_check(|t| cross_entropy(t, &labels).unwrap().0, &x, &g, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(matches!(
            cross_entropy(&Tensor::<f32>::zeros(&[1, 14]), &[14]),
            Err(Error::LabelOutOfRange { label: 14, .. })
        ));
        assert!(cross_entropy(&Tensor::<f32>::zeros(&[2, 14]), &[1]).is_err());
    }
}
