//! Green-backdrop segmentation in HSV space.
//!
//! A pixel is background when it sits in the green hue band with enough
//! saturation, or when its value (brightness) falls below the V threshold.
//! Everything else is garment.

use super::image::{Mask, RgbFrame};
use crate::error::{Error, Result};

/// Used when no dataset-specific threshold has been calibrated.
pub const DEFAULT_V_THRESHOLD: f64 = 0.2;

/// (hue degrees in [0, 360), saturation, value), each of s/v in [0, 1].
pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentRule {
    pub v_threshold: f64,
    pub green_hue: (f64, f64),
    pub min_saturation: f64,
}

impl SegmentRule {
    pub fn new(v_threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&v_threshold) {
            return Err(Error::Config(format!("v_threshold {v_threshold} outside [0, 1]")));
        }
        Ok(Self {
            v_threshold,
            green_hue: (75.0, 165.0),
            min_saturation: 0.25,
        })
    }

    pub fn is_background(&self, rgb: [u8; 3]) -> bool {
        let (h, s, v) = rgb_to_hsv(rgb);
        let green = h >= self.green_hue.0 && h <= self.green_hue.1 && s >= self.min_saturation;
        green || v < self.v_threshold
    }
}

impl Default for SegmentRule {
    fn default() -> Self {
        Self::new(DEFAULT_V_THRESHOLD).expect("default threshold is valid")
    }
}

/// Garment mask of an RGB frame. An all-background result is reported as a
/// data error so callers can skip the frame.
pub fn segment_garment(frame: &RgbFrame, rule: &SegmentRule) -> Result<Mask> {
    let values: Vec<u8> = frame
        .pixels
        .chunks_exact(3)
        .map(|p| u8::from(!rule.is_background([p[0], p[1], p[2]])))
        .collect();
    let mask = Mask {
        width: frame.width,
        height: frame.height,
        values,
    };
    if mask.is_empty() {
        return Err(Error::Data("segmentation produced an empty mask".into()));
    }
    Ok(mask)
}

/// Otsu's threshold over values in [0, 1] using a 256-bin histogram.
/// Values strictly below the returned threshold form the dark class.
pub fn otsu_threshold(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut hist = [0u64; 256];
    let mut total = 0u64;
    for v in values {
        let bin = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
        hist[bin] += 1;
        total += 1;
    }
    if total == 0 {
        return DEFAULT_V_THRESHOLD;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut best = (f64::NEG_INFINITY, 0usize);
    let (mut w0, mut sum0) = (0.0, 0.0);
    // threshold t means class 0 = bins [0, t)
    for t in 1..256 {
        w0 += hist[t - 1] as f64;
        sum0 += (t - 1) as f64 * hist[t - 1] as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if between > best.0 {
            best = (between, t);
        }
    }
    // midway between the last dark bin and the first bright one
    (best.1 as f64 - 0.5) / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: usize, h: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> RgbFrame {
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                pixels.extend(f(x, y));
            }
        }
        RgbFrame {
            width: w,
            height: h,
            pixels,
        }
    }

    #[test]
    fn hsv_reference_values() {
        assert_eq!(rgb_to_hsv([0, 255, 0]), (120.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv([255, 0, 0]).0, 0.0);
        assert_eq!(rgb_to_hsv([0, 0, 255]).0, 240.0);
        let (_, s, v) = rgb_to_hsv([128, 128, 128]);
        assert_eq!(s, 0.0);
        assert!((v - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn green_is_background_gray_is_garment() {
        let rule = SegmentRule::default();
        assert!(rule.is_background([0, 255, 0]));
        assert!(rule.is_background([30, 110, 40]));
        assert!(!rule.is_background([128, 128, 128]));
        assert!(!rule.is_background([200, 60, 50]));
        assert!(rule.is_background([10, 10, 10]));
    }

    #[test]
    fn known_coverage_is_recovered() {
        // top 40 rows of 100 are a grey garment on a green backdrop
        let f = frame(80, 100, |_, y| if y < 40 { [150, 150, 160] } else { [20, 120, 30] });
        let mask = segment_garment(&f, &SegmentRule::default()).unwrap();
        assert!((mask.coverage() - 0.40).abs() <= 0.02);
    }

    #[test]
    fn all_background_is_flagged() {
        let f = frame(4, 4, |_, _| [0, 200, 0]);
        assert!(segment_garment(&f, &SegmentRule::default()).is_err());
    }

    #[test]
    fn otsu_splits_bimodal_values() {
        let mut values = vec![0.3; 500];
        values.extend(vec![0.8; 300]);
        let t = otsu_threshold(values);
        assert!(t > 0.3 && t < 0.8, "threshold {t}");
        assert!(SegmentRule::new(1.5).is_err());
    }
}
