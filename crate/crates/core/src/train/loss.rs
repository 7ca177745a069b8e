use crate::error::{dim_err, Result};
use crate::tensor::{cross_entropy, mse, Reduction, Tensor};

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    /// Squared error summed over latent elements, averaged over the batch.
    pub sum_mse: f64,
    pub ce: f64,
}

/// `sum_mse + ce_weight * CE`, where the squared error is summed per
/// window and averaged over the batch and CE is the batch mean.
pub fn combined_loss(pred: &Tensor, target: &Tensor, logits: &Tensor, labels: &[usize], ce_weight: f64) -> Result<LossParts> {
    if pred.rank() == 0 || logits.rank() != 2 || logits.shape()[0] != pred.shape()[0] {
        return Err(dim_err!(
            "combined_loss: prediction {:?} and logits {:?} disagree on the batch",
            pred.shape(),
            logits.shape()
        ));
    }
    let batch = pred.shape()[0] as f64;
    let sq = mse(pred, target, Reduction::Sum)?.scale(1.0 / batch);
    let ce = cross_entropy(logits, labels)?;
    let (sum_mse, ce_value) = (sq.item()?, ce.item()?);
    let total = sq.add(&ce.scale(ce_weight))?;
    Ok(LossParts {
        total,
        sum_mse,
        ce: ce_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_exact_prediction() {
        let p = Tensor::ones(&[1, 2, 3, 3]);
        let logits = Tensor::zeros(&[1, 5]);
        let parts = combined_loss(&p, &p.deep_clone(), &logits, &[3], 1000.0).unwrap();
        assert!((parts.total.item().unwrap() - 1000.0 * 5f64.ln()).abs() < 1e-9);
        assert!((parts.total.item().unwrap() - 1609.44).abs() < 0.01);
        assert_eq!(parts.sum_mse, 0.0);
    }

    #[test]
    fn zero_weight_is_pure_mse() {
        let p = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let t = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let logits = Tensor::new(&[1, 3], vec![5.0, -1.0, 0.3]).unwrap();
        let parts = combined_loss(&p, &t, &logits, &[1], 0.0).unwrap();
        assert_eq!(parts.total.item().unwrap(), 5.0);
    }

    #[test]
    fn matches_hand_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let b = rng.random_range(1..4);
            let p = Tensor::uniform(&[b, 6], -1.0, 1.0, &mut rng);
            let t = Tensor::uniform(&[b, 6], -1.0, 1.0, &mut rng);
            let logits = Tensor::uniform(&[b, 5], -3.0, 3.0, &mut rng);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..5)).collect();
            let parts = combined_loss(&p, &t, &logits, &labels, 1000.0).unwrap();

            let (pv, tv, lv) = (p.to_vec(), t.to_vec(), logits.to_vec());
            let sq: f64 = pv.iter().zip(&tv).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / b as f64;
            let ce: f64 = lv
                .chunks(5)
                .zip(&labels)
                .map(|(row, &y)| {
                    let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                    lse - row[y]
                })
                .sum::<f64>()
                / b as f64;
            let got = parts.total.item().unwrap();
            assert!((got - (sq + 1000.0 * ce)).abs() <= 1e-12 * got.abs().max(1.0));
            assert_eq!(got, parts.sum_mse + 1000.0 * parts.ce);
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = Tensor::zeros(&[2, 3]);
        let t = Tensor::zeros(&[2, 4]);
        assert!(combined_loss(&p, &t, &Tensor::zeros(&[2, 5]), &[0, 1], 1.0).is_err());
        assert!(combined_loss(&p, &p, &Tensor::zeros(&[3, 5]), &[0, 1, 2], 1.0).is_err());
    }

    #[test]
    fn eq_arithmetic_example() {
        // a window with sum-MSE 2.0 and CE 0.001
        let p = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let t = Tensor::zeros(&[1, 2]);
        // logits chosen so that CE = 0.001: p(target) = exp(-0.001)
        let q = (-0.001f64).exp();
        let other = ((1.0 - q) / q).ln();
        let logits = Tensor::new(&[1, 2], vec![0.0, other]).unwrap();
        let parts = combined_loss(&p, &t, &logits, &[0], 1000.0).unwrap();
        assert!((parts.ce - 0.001).abs() < 1e-12);
        assert!((parts.total.item().unwrap() - 3.0).abs() < 1e-9);
    }
}
