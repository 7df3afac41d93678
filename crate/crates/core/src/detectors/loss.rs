//! Per-proposal training losses and their gradients with respect to the raw
//! network output.

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, N_BOX_PARAMS, YAW_INDEX};

use super::HeadLayout;

/// Log-variance bounds applied before exponentiation.
pub const LOGVAR_MIN: f64 = -16.0;
pub const LOGVAR_MAX: f64 = 4.0;

/// Number of location parameters (`cx, cy, cz`) covered by the Gaussian head.
pub const N_LOCATION: usize = 3;

/// Gaussian negative log-likelihood `(y - mu)^2 / (2 sigma2) + ln(sigma2) / 2`.
pub fn gaussian_nll(y: f64, mu: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::usage(format!("variance must be positive, got {sigma2}")));
    }
    Ok((y - mu).powi(2) / (2.0 * sigma2) + sigma2.ln() / 2.0)
}

/// NLL in the log-variance parameterization, with gradients with respect to
/// `mu` and `logvar`.
pub fn gaussian_nll_logvar(y: f64, mu: f64, logvar: f64) -> (f64, f64, f64) {
    let inv = (-logvar).exp();
    let r = y - mu;
    let loss = 0.5 * r * r * inv + 0.5 * logvar;
    let d_mu = -r * inv;
    let d_logvar = 0.5 - 0.5 * r * r * inv;
    (loss, d_mu, d_logvar)
}

/// Training target of one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainTarget {
    /// Encoded box parameters and category.
    Object {
        params: [f64; N_BOX_PARAMS],
        category: u32,
    },
    Background,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `d^2`, or its Huber form `2 delta |d| - delta^2` beyond `delta`; value
/// and slope agree at the switch. Returns the term and its derivative.
fn box_term(d: f64, huber_delta: Option<f64>) -> (f64, f64) {
    match huber_delta {
        Some(delta) if d.abs() > delta => (2.0 * delta * d.abs() - delta * delta, 2.0 * delta * d.signum()),
        _ => (d * d, 2.0 * d),
    }
}

/// Unweighted loss of one proposal and its gradient with respect to the
/// network output.
///
/// Objects: Gaussian NLL on the location slots when the layout carries a
/// variance head, squared error on every other box slot (yaw difference
/// wrapped), plus cross-entropy. Background: cross-entropy only.
pub fn proposal_loss(out: &[f64], target: &TrainTarget, layout: &HeadLayout) -> (f64, Vec<f64>) {
    debug_assert_eq!(out.len(), layout.output_dim());
    let mut grad = vec![0.0; out.len()];
    let mut loss = 0.0;

    let class = match *target {
        TrainTarget::Object { params, category } => {
            for i in 0..N_BOX_PARAMS {
                let mut d = out[i] - params[i];
                if i == YAW_INDEX {
                    d = wrap_angle(d);
                }
                if layout.aleatoric && i < N_LOCATION {
                    let k = layout.logvar_offset() + i;
                    let lv = out[k].clamp(LOGVAR_MIN, LOGVAR_MAX);
                    let (l, d_mu, d_lv) = gaussian_nll_logvar(params[i], out[i], lv);
                    loss += l;
                    grad[i] = d_mu;
                    // clamped region passes no gradient
                    grad[k] = if out[k] > LOGVAR_MIN && out[k] < LOGVAR_MAX {
                        d_lv
                    } else {
                        0.0
                    };
                } else {
                    let (l, g) = box_term(d, layout.huber_delta);
                    loss += layout.box_weight * l;
                    grad[i] = layout.box_weight * g;
                }
            }
            category as usize
        }
        TrainTarget::Background => layout.background_class(),
    };

    let lo = layout.logit_offset();
    let probs = softmax(&out[lo..]);
    loss += layout.class_weight * -(probs[class].max(1e-300)).ln();
    for (j, p) in probs.iter().enumerate() {
        let onehot = if j == class { 1.0 } else { 0.0 };
        grad[lo + j] = layout.class_weight * (p - onehot);
    }
    (loss, grad)
}

/// Confidence-scaled loss: `c * L`. The gradient scales the same way.
pub fn weighted_student_loss(
    out: &[f64],
    target: &TrainTarget,
    confidence: f64,
    layout: &HeadLayout,
) -> Result<(f64, Vec<f64>)> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::usage(format!("confidence must lie in [0, 1], got {confidence}")));
    }
    let (l, mut g) = proposal_loss(out, target, layout);
    g.iter_mut().for_each(|v| *v *= confidence);
    Ok((confidence * l, g))
}

/// Joint objective: mean supervised loss (confidence 1) plus `lambda_u`
/// times the mean confidence-weighted pseudo-label loss. Averaging each set
/// separately keeps `lambda_u` the relative weight of the two sets whatever
/// their sizes. `pseudo` holds `(unweighted loss, confidence)` pairs; an
/// empty set contributes 0.
pub fn joint_loss(labeled: &[f64], pseudo: &[(f64, f64)], lambda_u: f64) -> Result<f64> {
    if !(lambda_u >= 0.0) {
        return Err(Error::usage(format!("lambda_u must be non-negative, got {lambda_u}")));
    }
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    let sup = mean(labeled.iter().sum(), labeled.len());
    if lambda_u == 0.0 {
        return Ok(sup);
    }
    let mut unsup = 0.0;
    for &(l, c) in pseudo {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::usage(format!("confidence must lie in [0, 1], got {c}")));
        }
        unsup += c * l;
    }
    Ok(sup + lambda_u * mean(unsup, pseudo.len()))
}

/// Sample means of the terms in
/// `(f - y)^2 = (f - h)^2 + (h - y)^2 + 2 (f - h)(h - y)`
/// for a predictor `f`, a reference `h` and labels `y`. When `h` is the
/// conditional mean of `y`, the cross term vanishes in expectation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquaredLossDecomposition {
    pub total: f64,
    pub model: f64,
    pub noise: f64,
    pub cross: f64,
}

impl SquaredLossDecomposition {
    /// Estimate from `(f, h, y)` triples; `None` for an empty sample.
    pub fn estimate(samples: impl IntoIterator<Item = (f64, f64, f64)>) -> Option<Self> {
        let mut acc = [0.0; 4];
        let mut n = 0usize;
        for (f, h, y) in samples {
            acc[0] += (f - y) * (f - y);
            acc[1] += (f - h) * (f - h);
            acc[2] += (h - y) * (h - y);
            acc[3] += 2.0 * (f - h) * (h - y);
            n += 1;
        }
        (n > 0).then(|| {
            let n = n as f64;
            SquaredLossDecomposition {
                total: acc[0] / n,
                model: acc[1] / n,
                noise: acc[2] / n,
                cross: acc[3] / n,
            }
        })
    }
}
