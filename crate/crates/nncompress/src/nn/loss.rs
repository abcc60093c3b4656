//! Classification losses.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax with max subtraction for overflow safety.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::Dimension(format!(
            "softmax expects rank-2 logits, got {:?}",
            logits.shape()
        )));
    }
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = (z - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Tensor::new(&[rows, cols], out)
}

/// Mean negative log-likelihood of the labelled class, plus the gradient with
/// respect to the logits: `(softmax - one_hot) / batch`.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 {
        return Err(Error::Dimension(format!(
            "cross_entropy expects rank-2 logits, got {:?}",
            logits.shape()
        )));
    }
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != rows {
        return Err(Error::Dimension(format!(
            "{} labels for {} logit rows",
            labels.len(),
            rows
        )));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("cross_entropy logits are not finite".into()));
    }
    for &l in labels {
        if l as usize >= cols {
            return Err(Error::Parameter(format!(
                "label {l} out of range for {cols} classes"
            )));
        }
    }
    let probs = softmax_rows(logits)?;
    let mut loss = 0.0;
    let mut grad = probs.data().to_vec();
    let inv_batch = 1.0 / rows as f64;
    for (r, &label) in labels.iter().enumerate() {
        let p = probs.data()[r * cols + label as usize];
        loss -= p.ln();
        grad[r * cols + label as usize] -= 1.0;
    }
    for g in grad.iter_mut() {
        *g *= inv_batch;
    }
    Ok((loss * inv_batch, Tensor::new(&[rows, cols], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_loss_is_ln_n() {
        for n in [2usize, 5, 10] {
            let logits = Tensor::zeros(&[3, n]).unwrap();
            let labels = vec![0u32; 3];
            let (loss, _) = cross_entropy(&logits, &labels).unwrap();
            assert!((loss - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_two_class() {
        // logits (ln 2, 0), label 0: p0 = 2/3, loss = -ln(2/3).
        let logits = Tensor::new(&[1, 2], vec![2.0f64.ln(), 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - (-(2.0f64 / 3.0).ln())).abs() < 1e-12);
        assert!((loss - 0.405465).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[1, 4]).unwrap();
        assert!(matches!(
            cross_entropy(&logits, &[4]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::tensor::Rng::new(12);
        let logits = crate::tensor::rand_normal(&mut rng, &[16, 10], 0.0, 5.0).unwrap();
        let p = softmax_rows(&logits).unwrap();
        for r in 0..16 {
            let sum: f64 = p.data()[r * 10..(r + 1) * 10].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::tensor::Rng::new(77);
        let logits = crate::tensor::rand_normal(&mut rng, &[4, 6], 0.0, 2.0).unwrap();
        let labels = [1u32, 0, 5, 3];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..logits.numel() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += eps;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= eps;
            let (lp, _) = cross_entropy(&plus, &labels).unwrap();
            let (lm, _) = cross_entropy(&minus, &labels).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - grad.data()[i]).abs() < 1e-6,
                "grad[{i}]: fd {fd} vs analytic {}",
                grad.data()[i]
            );
        }
    }
}
