//! Supervision terms and their analytic gradients.
//!
//! * coarse and fine matching: focal loss on dual-softmax probabilities
//! * sub-pixel refinement: masked squared error on window-relative offsets
//! * confidence: binary cross-entropy on both maps, averaged
//!
//! The total is `L_c + L_f + L_s + beta * L_m`. Gradients are checked against
//! central finite differences by [`grad_check`].

use serde::{Deserialize, Serialize};

use crate::ops::compensated_sum;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub clamp_eps: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            clamp_eps: 1e-6,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("focal alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config(format!("clamp_eps must lie in (0, 0.5), got {}", self.clamp_eps)));
        }
        Ok(())
    }
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} predictions vs {b} targets")));
    }
    Ok(())
}

fn check_binary(gt: &[f64]) -> Result<()> {
    if gt.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidGroundTruth("targets must be 0 or 1".into()));
    }
    Ok(())
}

#[inline]
fn clamp(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

fn counts(gt: &[f64]) -> (usize, usize) {
    let pos = gt.iter().filter(|&&v| v == 1.0).count();
    (pos, gt.len() - pos)
}

/// Mean focal loss over positive cells plus mean over negative cells.
pub fn focal_loss(p: &[f64], gt: &[f64], cfg: &FocalConfig) -> Result<f64> {
    check_lengths(p.len(), gt.len(), "focal loss")?;
    check_binary(gt)?;
    let (n_pos, n_neg) = counts(gt);
    let (a, g) = (cfg.alpha, cfg.gamma);
    let pos = compensated_sum(p.iter().zip(gt).filter(|(_, &t)| t == 1.0).map(|(&p, _)| {
        let p = clamp(p, cfg.clamp_eps);
        -a * (1.0 - p).powf(g) * p.ln()
    }));
    let neg = compensated_sum(p.iter().zip(gt).filter(|(_, &t)| t == 0.0).map(|(&p, _)| {
        let p = clamp(p, cfg.clamp_eps);
        -(1.0 - a) * p.powf(g) * (1.0 - p).ln()
    }));
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(mean(pos, n_pos) + mean(neg, n_neg))
}

/// Gradient of [`focal_loss`] with respect to `p` (zero where `p` is clamped).
pub fn focal_loss_grad(p: &[f64], gt: &[f64], cfg: &FocalConfig) -> Result<Vec<f64>> {
    check_lengths(p.len(), gt.len(), "focal loss")?;
    check_binary(gt)?;
    let (n_pos, n_neg) = counts(gt);
    let (a, g, eps) = (cfg.alpha, cfg.gamma, cfg.clamp_eps);
    // d/dp of x^g, defined as 0 for g == 0.
    let dpow = |x: f64| if g == 0.0 { 0.0 } else { g * x.powf(g - 1.0) };
    Ok(p.iter()
        .zip(gt)
        .map(|(&raw, &t)| {
            if raw <= eps || raw >= 1.0 - eps {
                return 0.0;
            }
            let p = raw;
            if t == 1.0 {
                let d = -a * (-dpow(1.0 - p) * p.ln() + (1.0 - p).powf(g) / p);
                d / n_pos as f64
            } else {
                let d = -(1.0 - a) * (dpow(p) * (1.0 - p).ln() - p.powf(g) / (1.0 - p));
                d / n_neg as f64
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubpixelLoss {
    pub value: f64,
    /// Number of entries inside the mask.
    pub count: usize,
    pub empty_mask: bool,
}

fn in_mask(gt: &[f64; 2], epsilon: f64) -> bool {
    gt[0].abs().max(gt[1].abs()) < epsilon
}

/// Mean squared distance over entries whose target lies strictly within
/// `epsilon` (max-norm) of the window center.
pub fn subpixel_loss(pred: &[[f64; 2]], gt: &[[f64; 2]], epsilon: f64) -> Result<SubpixelLoss> {
    check_lengths(pred.len(), gt.len(), "sub-pixel loss")?;
    let terms: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| in_mask(g, epsilon))
        .map(|(p, g)| (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2))
        .collect();
    let count = terms.len();
    Ok(SubpixelLoss {
        value: if count == 0 { 0.0 } else { compensated_sum(terms) / count as f64 },
        count,
        empty_mask: count == 0,
    })
}

pub fn subpixel_loss_grad(pred: &[[f64; 2]], gt: &[[f64; 2]], epsilon: f64) -> Result<Vec<[f64; 2]>> {
    check_lengths(pred.len(), gt.len(), "sub-pixel loss")?;
    let count = gt.iter().filter(|g| in_mask(g, epsilon)).count();
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            if in_mask(g, epsilon) {
                let k = 2.0 / count as f64;
                [k * (p[0] - g[0]), k * (p[1] - g[1])]
            } else {
                [0.0, 0.0]
            }
        })
        .collect())
}

fn bce(w: &[f64], t: &[f64], eps: f64) -> f64 {
    let s = compensated_sum(w.iter().zip(t).map(|(&w, &t)| {
        let w = clamp(w, eps);
        -(t * w.ln() + (1.0 - t) * (1.0 - w).ln())
    }));
    s / w.len().max(1) as f64
}

/// Average of the two per-map mean binary cross-entropies.
pub fn confidence_loss(w1: &[f64], w2: &[f64], target1: &[f64], target2: &[f64], clamp_eps: f64) -> Result<f64> {
    check_lengths(w1.len(), target1.len(), "confidence loss (image 1)")?;
    check_lengths(w2.len(), target2.len(), "confidence loss (image 2)")?;
    check_binary(target1)?;
    check_binary(target2)?;
    Ok(0.5 * (bce(w1, target1, clamp_eps) + bce(w2, target2, clamp_eps)))
}

pub fn confidence_loss_grad(
    w1: &[f64],
    w2: &[f64],
    target1: &[f64],
    target2: &[f64],
    clamp_eps: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(w1.len(), target1.len(), "confidence loss (image 1)")?;
    check_lengths(w2.len(), target2.len(), "confidence loss (image 2)")?;
    let grad = |w: &[f64], t: &[f64]| -> Vec<f64> {
        let n = w.len() as f64;
        w.iter()
            .zip(t)
            .map(|(&w, &t)| {
                if w <= clamp_eps || w >= 1.0 - clamp_eps {
                    0.0
                } else {
                    0.5 * (-t / w + (1.0 - t) / (1.0 - w)) / n
                }
            })
            .collect()
    };
    Ok((grad(w1, target1), grad(w2, target2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_f: f64,
    pub l_s: f64,
    pub l_m: f64,
    pub beta: f64,
    pub total: f64,
}

pub fn total_loss(l_c: f64, l_f: f64, l_s: f64, l_m: f64, beta: f64) -> LossBreakdown {
    LossBreakdown {
        l_c,
        l_f,
        l_s,
        l_m,
        beta,
        total: l_c + l_f + l_s + beta * l_m,
    }
}

/// Compares an analytic gradient against central differences with step `h`
/// and returns the largest relative error. Entries where both derivatives
/// are below `1e-8` in magnitude are compared absolutely.
pub fn grad_check<F>(loss: F, inputs: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    check_lengths(analytic.len(), inputs.len(), "gradient check")?;
    let mut x = inputs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!("derivative at index {i}")));
        }
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    #[test]
    fn focal_examples() {
        let cfg = FocalConfig::default();
        let gt = [1.0, 0.0, 0.0, 1.0];
        assert!(focal_loss(&gt, &gt, &cfg).unwrap() <= 1e-6);

        let l = focal_loss(&[0.5], &[1.0], &cfg).unwrap();
        assert!((l - 0.25 * 0.25 * LN_2).abs() < 1e-15);
        assert!((l - 0.043322).abs() < 1e-6);

        let g0 = FocalConfig { gamma: 0.0, ..cfg };
        let ratio = focal_loss(&[0.9], &[1.0], &cfg).unwrap() / focal_loss(&[0.9], &[1.0], &g0).unwrap();
        assert!((ratio - 0.01).abs() < 1e-12);
    }

    #[test]
    fn focal_reduces_to_half_balanced_bce() {
        let cfg = FocalConfig {
            alpha: 0.5,
            gamma: 0.0,
            clamp_eps: 1e-6,
        };
        let p = [0.3, 0.8, 0.1, 0.65, 0.4];
        let gt = [1.0, 1.0, 0.0, 0.0, 0.0];
        let bce_pos = -(0.3f64.ln() + 0.8f64.ln()) / 2.0;
        let bce_neg = -(0.9f64.ln() + 0.35f64.ln() + 0.6f64.ln()) / 3.0;
        let l = focal_loss(&p, &gt, &cfg).unwrap();
        assert!((l - 0.5 * (bce_pos + bce_neg)).abs() < 1e-12);
    }

    #[test]
    fn focal_errors() {
        let cfg = FocalConfig::default();
        assert!(matches!(focal_loss(&[0.5], &[1.0, 0.0], &cfg), Err(Error::ShapeMismatch(_))));
        assert!(matches!(focal_loss(&[0.5], &[0.5], &cfg), Err(Error::InvalidGroundTruth(_))));
    }

    #[test]
    fn subpixel_examples() {
        let gt = [[0.2, -0.1], [0.5, 0.5]];
        let l = subpixel_loss(&gt, &gt, 1.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(!l.empty_mask);

        let far = [[1.0, 0.0], [0.0, -3.0]];
        let l = subpixel_loss(&[[0.0, 0.0]; 2], &far, 1.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.empty_mask);

        let l = subpixel_loss(&[[0.3, -0.4]], &[[0.0, 0.0]], 1.0).unwrap();
        assert_eq!(l.value, 0.25);
    }

    #[test]
    fn subpixel_ignores_masked_entries() {
        let gt = [[0.1, 0.1], [2.0, 0.0]];
        let a = subpixel_loss(&[[0.0, 0.0], [5.0, 5.0]], &gt, 1.0).unwrap();
        let b = subpixel_loss(&[[0.0, 0.0], [-9.0, 1.0]], &gt, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn confidence_examples() {
        let eps = 1e-6;
        let t = [1.0, 0.0, 1.0];
        // Perfect prediction costs only the clamp: -ln(1 - eps).
        let l = confidence_loss(&t, &t, &t, &t, eps).unwrap();
        assert!((l + (1.0 - eps).ln()).abs() < 1e-15);
        let l = confidence_loss(&[0.5; 3], &[0.5; 2], &t, &[0.0, 1.0], eps).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
        let l = confidence_loss(&[0.9, 0.1], &[0.9, 0.1], &[1.0, 0.0], &[1.0, 0.0], eps).unwrap();
        assert!((l - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!(confidence_loss(&[0.5], &[0.5], &[0.3], &[1.0], eps).is_err());
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 1.0).total, 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0, 1.0).total, 10.0);
        assert_eq!(total_loss(1.0, 1.0, 1.0, 1.0, 0.5).total, 3.5);
    }

    #[test]
    fn subpixel_gradient_matches_fd() {
        let pred = [[0.3, -0.2], [0.1, 0.4], [2.0, 1.0]];
        let gt = [[0.1, 0.0], [-0.5, 0.2], [3.0, 0.0]];
        let grad = subpixel_loss_grad(&pred, &gt, 1.0).unwrap();
        assert!((grad[0][0] - 2.0 * 0.2 / 2.0).abs() < 1e-15);
        let flat: Vec<f64> = pred.iter().flatten().copied().collect();
        let analytic: Vec<f64> = grad.iter().flatten().copied().collect();
        let f = |x: &[f64]| {
            let p: Vec<[f64; 2]> = x.chunks(2).map(|c| [c[0], c[1]]).collect();
            subpixel_loss(&p, &gt, 1.0).unwrap().value
        };
        assert!(grad_check(f, &flat, &analytic, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn confidence_gradient_at_half() {
        let n = 4;
        let (g1, _) = confidence_loss_grad(&[0.5; 4], &[0.5; 4], &[1.0; 4], &[0.0; 4], 1e-6).unwrap();
        assert!((g1[0] - (-2.0 / (2.0 * n as f64))).abs() < 1e-15);
    }

    #[test]
    fn focal_gradient_matches_fd_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = FocalConfig::default();
        for _ in 0..20 {
            let n = rng.random_range(2..12);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
            let mut gt: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            gt[0] = 1.0;
            let analytic = focal_loss_grad(&p, &gt, &cfg).unwrap();
            let err = grad_check(|x| focal_loss(x, &gt, &cfg).unwrap(), &p, &analytic, 1e-5).unwrap();
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn grad_check_validates_step() {
        assert!(grad_check(|x| x[0], &[1.0], &[1.0], 1e-2).is_err());
        assert!(grad_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-4).unwrap() < 1e-9);
        assert!(grad_check(|x| x[0] * x[0], &[3.0], &[5.0], 1e-4).unwrap() > 0.1);
    }
}
