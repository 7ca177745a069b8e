//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever evaluates the forward closure, so it shares no
//! code with the backward implementations it is checking.

use super::{no_grad, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are zero
    /// on both sides do not blow up the ratio.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_elements_per_param: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (parameter index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward()` of `loss_fn` against central differences for every
/// (sampled) element of `params`. Each parameter must be a leaf with
/// `requires_grad` set. Parameter values are restored afterwards.
pub fn check_gradients(
    params: &[Tensor],
    cfg: &GradCheckConfig,
    mut loss_fn: impl FnMut() -> Result<Tensor>,
) -> Result<GradCheckReport> {
    params.iter().for_each(Tensor::zero_grad);
    loss_fn()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance: cfg.tolerance,
    };

    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let indices: Vec<usize> = match cfg.max_elements_per_param {
            Some(limit) if limit < n => (0..limit).map(|i| i * n / limit).collect(),
            _ => (0..n).collect(),
        };
        for idx in indices {
            let original = param.data()[idx];
            let eval_at = |v: f64, loss_fn: &mut dyn FnMut() -> Result<Tensor>| -> Result<f64> {
                param.with_data_mut(|d| d[idx] = v);
                no_grad(|| loss_fn())?.item()
            };
            let plus = eval_at(original + cfg.step, &mut loss_fn)?;
            let minus = eval_at(original - cfg.step, &mut loss_fn)?;
            param.with_data_mut(|d| d[idx] = original);

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[pi][idx];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, idx, a, numeric));
            }
        }
    }
    params.iter().for_each(Tensor::zero_grad);
    Ok(report)
}
