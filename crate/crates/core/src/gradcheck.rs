//! Central finite-difference check of the analytic model gradient.
//!
//! Relative error per scalar is `|a - n| / max(|a|, |n|, floor)` where `a` is
//! the analytic and `n` the numeric derivative. The floor keeps derivatives
//! that are zero up to rounding from dominating the maximum.

use crate::error::Result;
use crate::models::{Model, Reduction, TrainingExample};
use crate::objective::LossConfig;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter tensor holding the worst scalar.
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub scalars: usize,
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares every scalar of the analytic gradient with a central difference.
pub fn check_model_gradient(
    model: &Model,
    batch: &[TrainingExample],
    loss: &LossConfig,
    reduction: Reduction,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = model.backward(batch, loss, reduction, 0)?;
    let analytic: Vec<f64> = grads.flat().collect();
    let mut sizes = Vec::new();
    for (name, t) in model.params.iter() {
        sizes.push((name.to_string(), t.len()));
    }

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        scalars: analytic.len(),
    };
    let (mut tensor, mut offset) = (0usize, 0usize);
    for (k, &a) in analytic.iter().enumerate() {
        while k >= offset + sizes[tensor].1 {
            offset += sizes[tensor].1;
            tensor += 1;
        }
        let original = *probe.params.scalar_mut(k);
        *probe.params.scalar_mut(k) = original + step;
        let up = probe.combined_loss(batch, loss, reduction)?.combined;
        *probe.params.scalar_mut(k) = original - step;
        let down = probe.combined_loss(batch, loss, reduction)?.combined;
        *probe.params.scalar_mut(k) = original;
        let n = (up - down) / (2.0 * step);
        let err = relative_error(a, n, floor);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_param = sizes[tensor].0.clone();
            report.analytic = a;
            report.numeric = n;
        }
    }
    Ok(report)
}
