use rand::Rng;

use super::gemm::{gemm, row_major, transposed};
use super::Tensor;
use crate::error::{dim_err, Result};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn unary(
    input: &Tensor,
    name: &'static str,
    f: impl Fn(f64) -> f64,
    // derivative expressed through (input, output)
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let x = input.to_vec();
    let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
    let y_saved = y.clone();
    Tensor::from_op(name, input.shape().to_vec(), y, &[input], move |g, _| {
        let gx = g
            .iter()
            .zip(x.iter().zip(&y_saved))
            .map(|(g, (&xi, &yi))| g * df(xi, yi))
            .collect();
        vec![Some(gx)]
    })
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op("add", self.shape().to_vec(), data, &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op("sub", self.shape().to_vec(), data, &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let a = self.to_vec();
        let b = other.to_vec();
        let data = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Ok(Tensor::from_op("mul", self.shape().to_vec(), data, &[self, other], move |g, need| {
            let ga = need[0].then(|| g.iter().zip(&b).map(|(g, y)| g * y).collect());
            let gb = need[1].then(|| g.iter().zip(&a).map(|(g, x)| g * x).collect());
            vec![ga, gb]
        }))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, &[self], move |g, _| {
            vec![Some(g.iter().map(|v| v * factor).collect())]
        })
    }

    pub fn add_scalar(&self, offset: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + offset).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, &[self], |g, _| vec![Some(g.to_vec())])
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let total = self.data().iter().sum();
        Tensor::from_op("sum", vec![1], vec![total], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Same values, new shape with an equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape(), shape));
        }
        Ok(Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), &[self], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Flattens everything after the leading (batch) dimension.
    pub fn flatten_batch(&self) -> Result<Tensor> {
        let b = self.shape()[0];
        self.reshape(&[b, self.numel() / b])
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let &[rows, cols] = self.shape() else {
            return Err(dim_err!("narrow_cols needs rank 2, got {:?}", self.shape()));
        };
        if start + len > cols || len == 0 {
            return Err(dim_err!("narrow_cols [{start}, {}) outside {cols} columns", start + len));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        drop(src);
        Ok(Tensor::from_op("narrow_cols", vec![rows, len], out, &[self], move |g, _| {
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                gx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            vec![Some(gx)]
        }))
    }

    /// `[m,k] @ [k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(dim_err!("matmul needs rank-2 operands, got {:?} and {:?}", self.shape(), other.shape()));
        };
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions {k} and {k2} differ"));
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, row_major(k), &b, row_major(n), 0.0, &mut c, row_major(n));
        Ok(Tensor::from_op("matmul", vec![m, n], c, &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, 1.0, g, row_major(n), &b, transposed(n), 0.0, &mut ga, row_major(k));
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, 1.0, &a, transposed(k), g, row_major(n), 0.0, &mut gb, row_major(n));
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, "relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            "sigmoid",
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self) -> Tensor {
        let k = *self.shape().last().expect("rank >= 1");
        let mut y = self.to_vec();
        for row in y.chunks_mut(k) {
            softmax_in_place(row);
        }
        let y_saved = y.clone();
        Tensor::from_op("softmax", self.shape().to_vec(), y, &[self], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for ((gx, g), y) in gx.chunks_mut(k).zip(g.chunks(k)).zip(y_saved.chunks(k)) {
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                for i in 0..k {
                    gx[i] = y[i] * (g[i] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, train: bool, rng: &mut R) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1)");
        if !train || p == 0.0 {
            return self.scale(1.0);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Tensor::from_op("dropout", self.shape().to_vec(), data, &[self], move |g, _| {
            vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())]
        })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Affine map `input @ weight^T + bias` for `input [B,N]`, `weight [M,N]`,
/// `bias [M]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (&[b, n], &[m, n2]) = (input.shape(), weight.shape()) else {
        return Err(dim_err!(
            "dense needs input [B,N] and weight [M,N], got {:?} and {:?}",
            input.shape(),
            weight.shape()
        ));
    };
    if n != n2 {
        return Err(dim_err!("dense: input has {n} features but weight expects {n2}"));
    }
    if bias.shape() != [m] {
        return Err(dim_err!("dense: bias shape {:?}, expected [{m}]", bias.shape()));
    }
    let x = input.to_vec();
    let w = weight.to_vec();
    let mut y = Vec::with_capacity(b * m);
    {
        let bias = bias.data();
        for _ in 0..b {
            y.extend_from_slice(&bias);
        }
    }
    gemm(b, n, m, 1.0, &x, row_major(n), &w, transposed(n), 1.0, &mut y, row_major(m));
    Ok(Tensor::from_op("dense", vec![b, m], y, &[input, weight, bias], move |g, need| {
        let gx = need[0].then(|| {
            let mut gx = vec![0.0; b * n];
            gemm(b, m, n, 1.0, g, row_major(m), &w, row_major(n), 0.0, &mut gx, row_major(n));
            gx
        });
        let gw = need[1].then(|| {
            let mut gw = vec![0.0; m * n];
            gemm(m, b, n, 1.0, g, transposed(m), &x, row_major(n), 0.0, &mut gw, row_major(n));
            gw
        });
        let gb = need[2].then(|| {
            let mut gb = vec![0.0; m];
            for row in g.chunks(m) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            gb
        });
        vec![gx, gw, gb]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_dense_is_a_no_op() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = Tensor::new(&[3, 3], eye).unwrap();
        let y = dense(&x, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn dense_shapes() {
        let x = Tensor::zeros(&[1, 9216]);
        let w = Tensor::zeros(&[512, 9216]);
        let y = dense(&x, &w, &Tensor::zeros(&[512])).unwrap();
        assert_eq!(y.shape(), &[1, 512]);
        assert!(dense(&x, &Tensor::zeros(&[512, 100]), &Tensor::zeros(&[512])).is_err());
    }

    #[test]
    fn relu_and_softmax_values() {
        let x = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(x.relu().to_vec(), vec![0.0, 2.0]);
        let s = Tensor::zeros(&[3]).softmax().to_vec();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let s = Tensor::new(&[3], vec![1000.0, 0.0, -1000.0]).unwrap().softmax().to_vec();
        assert!((s[0] - 1.0).abs() < 1e-15 && s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn narrow_cols_picks_columns() {
        let x = Tensor::new(&[2, 4], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(x.narrow_cols(1, 2).unwrap().to_vec(), vec![1.0, 2.0, 5.0, 6.0]);
        assert!(x.narrow_cols(3, 2).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(x.dropout(0.5, false, &mut rng).to_vec(), x.to_vec());
        let y = x.dropout(0.5, true, &mut rng).to_vec();
        assert!(y.iter().zip(x.to_vec()).all(|(y, x)| *y == 0.0 || (*y - 2.0 * x).abs() < 1e-12));
    }

    #[test]
    fn elementwise_gradients() {
        let cfg = GradCheckConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng).requires_grad_(true);
            let b = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng).requires_grad_(true);
            let w = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng).requires_grad_(true);
            let report = check_gradients(&[a.clone(), b.clone(), w.clone()], &cfg, || {
                let t = a.mul(&b)?.sub(&b.tanh())?.add(&a.sigmoid())?;
                Ok(t.matmul(&w)?.softmax().mul(&Tensor::uniform(&[2, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(99)))?.sum())
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn dense_gradients() {
        let cfg = GradCheckConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng).requires_grad_(true);
            let w = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng).requires_grad_(true);
            let b = Tensor::uniform(&[4], -1.0, 1.0, &mut rng).requires_grad_(true);
            let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
            let report = check_gradients(&[x.clone(), w.clone(), b.clone()], &cfg, || {
                Ok(dense(&x, &w, &b)?.mul(&probe)?.sum())
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }
}
