//! Raw frame + mask -> model input tensor.
//!
//! Masking happens at the native resolution, then the frame is resized with
//! half-pixel-centred bilinear sampling. Depth is scaled by a fixed
//! dataset-wide range so that absolute distances stay comparable across
//! frames.

use super::image::{DepthFrame, Mask, RgbFrame};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DEPTH_MAX_RANGE_M: f64 = 2.0;

/// Resize one `src_h x src_w` plane to `dst_h x dst_w`.
pub fn resize_bilinear(src: &[f64], (src_h, src_w): (usize, usize), (dst_h, dst_w): (usize, usize)) -> Vec<f64> {
    assert_eq!(src.len(), src_h * src_w);
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(dst_h, src_h);
    let xs = axis(dst_w, src_w);
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
            let bottom = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn check_mask(width: usize, height: usize, mask: &Mask) -> Result<()> {
    if mask.width != width || mask.height != height {
        return Err(Error::Data(format!(
            "mask is {}x{} but frame is {width}x{height}",
            mask.width, mask.height
        )));
    }
    Ok(())
}

/// Depth frame -> `[1, 1, H, W]` in [0, 1].
pub fn preprocess_depth(frame: &DepthFrame, mask: &Mask, size: (usize, usize), max_range_m: f64) -> Result<Tensor> {
    check_mask(frame.width, frame.height, mask)?;
    if !(max_range_m > 0.0) {
        return Err(Error::Config("depth max range must be positive".into()));
    }
    let scale = 1.0 / (1000.0 * max_range_m);
    let plane: Vec<f64> = frame
        .millimeters
        .iter()
        .zip(&mask.values)
        .map(|(&mm, &m)| if m != 0 { (mm as f64 * scale).min(1.0) } else { 0.0 })
        .collect();
    let out = resize_bilinear(&plane, (frame.height, frame.width), size);
    Tensor::new(&[1, 1, size.0, size.1], out)
}

/// RGB frame -> `[1, 3, H, W]` in [0, 1], channel-planar.
pub fn preprocess_rgb(frame: &RgbFrame, mask: &Mask, size: (usize, usize)) -> Result<Tensor> {
    check_mask(frame.width, frame.height, mask)?;
    let n = frame.width * frame.height;
    let mut out = Vec::with_capacity(3 * size.0 * size.1);
    for c in 0..3 {
        let plane: Vec<f64> = (0..n)
            .map(|i| {
                if mask.values[i] != 0 {
                    frame.pixels[3 * i + c] as f64 / 255.0
                } else {
                    0.0
                }
            })
            .collect();
        out.extend(resize_bilinear(&plane, (frame.height, frame.width), size));
    }
    Tensor::new(&[1, 3, size.0, size.1], out)
}
