use super::ops::softmax_in_place;
use super::Tensor;
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Mean over the batch of `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let &[b, k] = logits.shape() else {
        return Err(dim_err!("cross_entropy needs logits [B,K], got {:?}", logits.shape()));
    };
    if targets.len() != b {
        return Err(dim_err!("cross_entropy: {b} rows but {} targets", targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Index(format!("target class {bad} outside [0, {k})")));
    }
    let mut probs = logits.to_vec();
    let mut total = 0.0;
    {
        let x = logits.data();
        for ((row, p), &t) in x.chunks(k).zip(probs.chunks_mut(k)).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(p);
        }
    }
    let targets = targets.to_vec();
    let loss = total / b as f64;
    Ok(Tensor::from_op("cross_entropy", vec![1], vec![loss], &[logits], move |g, _| {
        let scale = g[0] / b as f64;
        let mut gx = probs.clone();
        for (row, &t) in gx.chunks_mut(k).zip(&targets) {
            row[t] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        vec![Some(gx)]
    }))
}

/// Squared error summed over every element, or averaged per element.
pub fn mse(pred: &Tensor, target: &Tensor, reduction: Reduction) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(dim_err!("mse: shapes {:?} and {:?} differ", pred.shape(), target.shape()));
    }
    let diff: Vec<f64> = pred.data().iter().zip(target.data().iter()).map(|(p, t)| p - t).collect();
    let denom = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => diff.len() as f64,
    };
    let value = diff.iter().map(|d| d * d).sum::<f64>() / denom;
    Ok(Tensor::from_op("mse", vec![1], vec![value], &[pred, target], move |g, need| {
        let scale = 2.0 * g[0] / denom;
        let gp = need[0].then(|| diff.iter().map(|d| d * scale).collect());
        let gt = need[1].then(|| diff.iter().map(|d| -d * scale).collect());
        vec![gp, gt]
    }))
}
