use super::gemm::{gemm, row_major, transposed};
use super::Tensor;
use crate::error::{dim_err, Result};

/// Output length of a strided window over `size` padded by `padding` on each side.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(dim_err!("kernel and stride must be positive"));
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(dim_err!("kernel {kernel} larger than padded input {padded}"));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn pool_out_size(size: usize, kernel: usize, stride: usize) -> Result<usize> {
    conv_out_size(size, kernel, stride, 0)
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(dim_err!("{what} must be rank 4, got {:?}", t.shape())),
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image `[Cin,H,W]` into `[Cin*kh*kw, Ho*Wo]`.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let hw = self.spatial_out();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *out = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters-adds columns back into an image.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let hw = self.spatial_out();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation `[B,Cin,H,W] * [Cout,Cin,kh,kw] + bias[Cout]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let [b, cin, h, w] = dims4(input, "conv2d input")?;
    let [cout, cin_w, kh, kw] = dims4(weight, "conv2d weight")?;
    if cin != cin_w {
        return Err(dim_err!("conv2d: input has {cin} channels, weight expects {cin_w}"));
    }
    if bias.shape() != [cout] {
        return Err(dim_err!("conv2d: bias shape {:?}, expected [{cout}]", bias.shape()));
    }
    let geom = ConvGeom {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        ho: conv_out_size(h, kh, stride, padding)?,
        wo: conv_out_size(w, kw, stride, padding)?,
    };
    let (k, hw) = (geom.k(), geom.spatial_out());
    let x = input.to_vec();
    let wt = weight.to_vec();
    let bias_v = bias.to_vec();

    let mut out = vec![0.0; b * cout * hw];
    let mut cols = vec![0.0; k * hw];
    for n in 0..b {
        geom.im2col(&x[n * cin * h * w..(n + 1) * cin * h * w], &mut cols);
        let y = &mut out[n * cout * hw..(n + 1) * cout * hw];
        for (oc, row) in y.chunks_mut(hw).enumerate() {
            row.fill(bias_v[oc]);
        }
        gemm(cout, k, hw, 1.0, &wt, row_major(k), &cols, row_major(hw), 1.0, y, row_major(hw));
    }

    let shape = vec![b, cout, geom.ho, geom.wo];
    Ok(Tensor::from_op("conv2d", shape, out, &[input, weight, bias], move |g, need| {
        let mut gx = need[0].then(|| vec![0.0; b * cin * h * w]);
        let mut gw = need[1].then(|| vec![0.0; cout * k]);
        let mut gb = need[2].then(|| vec![0.0; cout]);
        let mut cols = vec![0.0; k * hw];
        let mut gcols = vec![0.0; k * hw];
        for n in 0..b {
            let gy = &g[n * cout * hw..(n + 1) * cout * hw];
            if let Some(gw) = gw.as_mut() {
                geom.im2col(&x[n * cin * h * w..(n + 1) * cin * h * w], &mut cols);
                gemm(cout, hw, k, 1.0, gy, row_major(hw), &cols, transposed(hw), 1.0, gw, row_major(k));
            }
            if let Some(gx) = gx.as_mut() {
                gemm(k, cout, hw, 1.0, &wt, transposed(k), gy, row_major(hw), 0.0, &mut gcols, row_major(hw));
                geom.col2im(&gcols, &mut gx[n * cin * h * w..(n + 1) * cin * h * w]);
            }
            if let Some(gb) = gb.as_mut() {
                for (oc, row) in gy.chunks(hw).enumerate() {
                    gb[oc] += row.iter().sum::<f64>();
                }
            }
        }
        vec![gx, gw, gb]
    }))
}

/// Max pooling without padding; floor size rule.
pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let [b, c, h, w] = dims4(input, "max_pool2d input")?;
    let ho = pool_out_size(h, kernel, stride)?;
    let wo = pool_out_size(w, kernel, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * stride * w + ox * stride;
                for ki in 0..kernel {
                    let row = base + (oy * stride + ki) * w + ox * stride;
                    for kj in 0..kernel {
                        let v = x[row + kj];
                        if v > best {
                            best = v;
                            best_idx = row + kj;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    drop(x);
    let n_in = b * c * h * w;
    Ok(Tensor::from_op("max_pool2d", vec![b, c, ho, wo], out, &[input], move |g, _| {
        let mut gx = vec![0.0; n_in];
        for (gv, &idx) in g.iter().zip(&argmax) {
            gx[idx] += gv;
        }
        vec![Some(gx)]
    }))
}

/// Bin `i` of `out` over an axis of length `size`.
fn adaptive_bin(i: usize, out: usize, size: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

/// Average pooling onto an exact `target` grid using the usual adaptive bins
/// `[floor(i*H/h), ceil((i+1)*H/h))`.
pub fn adaptive_avg_pool2d(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let [b, c, h, w] = dims4(input, "adaptive_avg_pool2d input")?;
    let (oh, ow) = target;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(dim_err!("adaptive pool target {oh}x{ow} does not fit input {h}x{w}"));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, ow, w);
                let mut acc = 0.0;
                for yy in y0..y1 {
                    acc += x[base + yy * w + x0..base + yy * w + x1].iter().sum::<f64>();
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    drop(x);
    Ok(Tensor::from_op("adaptive_avg_pool2d", vec![b, c, oh, ow], out, &[input], move |g, _| {
        let mut gx = vec![0.0; b * c * h * w];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let (y0, y1) = adaptive_bin(oy, oh, h);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_bin(ox, ow, w);
                    let share = g[(plane * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                    for yy in y0..y1 {
                        gx[base + yy * w + x0..base + yy * w + x1].iter_mut().for_each(|v| *v += share);
                    }
                }
            }
        }
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ones_convolution() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![4.0; 4]);
    }

    #[test]
    fn size_rules() {
        assert_eq!(conv_out_size(256, 11, 4, 2).unwrap(), 63);
        assert_eq!(pool_out_size(63, 3, 2).unwrap(), 31);
        assert_eq!(pool_out_size(31, 3, 2).unwrap(), 15);
        assert!(conv_out_size(2, 5, 1, 1).is_err());
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let x = Tensor::ones(&[1, 2, 5, 5]);
        let k = Tensor::ones(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).is_err());
    }

    #[test]
    fn adaptive_pool_shapes_and_constants() {
        let x = Tensor::full(&[1, 256, 15, 15], 0.75);
        let y = adaptive_avg_pool2d(&x, (6, 6)).unwrap();
        assert_eq!(y.shape(), &[1, 256, 6, 6]);
        assert!(y.to_vec().iter().all(|v| (v - 0.75).abs() < 1e-15));
        assert!(adaptive_avg_pool2d(&Tensor::ones(&[1, 1, 4, 4]), (5, 5)).is_err());
    }

    #[test]
    fn adaptive_bins_cover_the_axis() {
        for size in 1..20 {
            for out in 1..=size {
                assert_eq!(adaptive_bin(0, out, size).0, 0);
                assert_eq!(adaptive_bin(out - 1, out, size).1, size);
                for i in 0..out {
                    let (s, e) = adaptive_bin(i, out, size);
                    assert!(s < e);
                }
            }
        }
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 5.0, -2.0, 3.0]).unwrap();
        assert_eq!(max_pool2d(&x, 2, 2).unwrap().to_vec(), vec![5.0]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let cfg = GradCheckConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(&[1, 1, 5, 5], -1.0, 1.0, &mut rng).requires_grad_(true);
            let k = Tensor::uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng).requires_grad_(true);
            let b = Tensor::uniform(&[1], -1.0, 1.0, &mut rng).requires_grad_(true);
            let probe = Tensor::uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
            let report = check_gradients(&[x.clone(), k.clone(), b.clone()], &cfg, || {
                Ok(conv2d(&x, &k, &b, 1, 0)?.mul(&probe)?.sum())
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn strided_padded_multichannel_conv_gradients() {
        let cfg = GradCheckConfig::default();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Tensor::uniform(&[2, 2, 7, 6], -1.0, 1.0, &mut rng).requires_grad_(true);
            let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng).requires_grad_(true);
            let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng).requires_grad_(true);
            let out = conv2d(&x, &k, &b, 2, 1).unwrap();
            let probe = Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng);
            let report = check_gradients(&[x.clone(), k.clone(), b.clone()], &cfg, || {
                Ok(conv2d(&x, &k, &b, 2, 1)?.mul(&probe)?.sum())
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn pool_gradients_match_finite_differences() {
        let cfg = GradCheckConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(&[1, 2, 7, 7], -1.0, 1.0, &mut rng).requires_grad_(true);
            let p1 = Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
            let p2 = Tensor::uniform(&[1, 2, 3, 2], -1.0, 1.0, &mut rng);
            let report = check_gradients(&[x.clone()], &cfg, || {
                let a = max_pool2d(&x, 3, 2)?.mul(&p1)?.sum();
                let b = adaptive_avg_pool2d(&x, (3, 2))?.mul(&p2)?.sum();
                a.add(&b)
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }
}
