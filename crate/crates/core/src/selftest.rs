//! Built-in invariant checks, runnable from the command line.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{aggregate, attention_weights, biased_scores, biased_scores_additive};
use crate::confidence::{confidence_maps, ConfidenceVariant, CorrelationMatrix};
use crate::losses::{self, FocalConfig};
use crate::matching::{dual_softmax, mnn_filter};
use crate::ops::tempered_softmax;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfTestOptions {
    pub seed: u64,
    /// Log bias strength; the configured temperature `1 + exp(eta)` is checked
    /// against the argmax limit when it is large.
    pub eta: f64,
    /// Perturbs one computation so the suite must fail.
    pub inject_fault: bool,
}

impl Default for SelfTestOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            eta: 0.0,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfTestReport {
    pub checks: Vec<CheckResult>,
}

impl SelfTestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SelfTestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<34} {:>6} {:>12} {:>12}", "check", "status", "max_error", "tolerance")?;
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{:<34} {:>6} {:>12.3e} {:>12.3e}", c.name, status, c.max_error, c.tolerance)?;
        }
        Ok(())
    }
}

fn check(name: &str, max_error: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        max_error,
        tolerance,
        passed: max_error.is_finite() && max_error <= tolerance,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, m), || rng.random_range(-1.0..1.0))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn run(opts: &SelfTestOptions) -> SelfTestReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fault = if opts.inject_fault { 1e-3 } else { 0.0 };
    let checks = vec![
        bias_forms(&mut rng, fault),
        temperature_monotone(&mut rng),
        argmax_limit(1e3, "argmax limit (tau = 1e3)"),
        configured_temperature(opts.eta),
        value_rescaling(&mut rng),
        dual_softmax_oracle(&mut rng),
        confidence_shift(&mut rng),
        gradient_checks(&mut rng),
    ];
    SelfTestReport { checks }
}

fn bias_forms(rng: &mut ChaCha8Rng, fault: f64) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let c = rng.random_range(1..=16);
        let (q, k) = (random_matrix(rng, n, c), random_matrix(rng, n, c));
        let w1 = random_vec(rng, n, 0.0, 1.0);
        let alpha = rng.random_range(0.0..5.0);
        let scale = 1.0 / (c as f64).sqrt();
        let a = biased_scores(&q, &k, &w1, alpha, scale);
        let b = biased_scores_additive(&q, &k, &w1, alpha, scale) + fault;
        for (x, y) in a.iter().zip(b.iter()) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1.0));
        }
    }
    check("bias forms agree", worst, 1e-10)
}

/// Margin by which argmax mass fails to increase across a temperature ladder.
fn temperature_monotone(rng: &mut ChaCha8Rng) -> CheckResult {
    let taus = [1.0, 2.0, 5.0, 10.0, 100.0];
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let logits = random_vec(rng, 6, 0.0, 0.3);
        let top = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap_or(0);
        let masses: Vec<f64> = taus.iter().map(|&t| tempered_softmax(&logits, t)[top]).collect();
        for w in masses.windows(2) {
            if w[1] <= w[0] {
                worst = worst.max(w[0] - w[1] + f64::MIN_POSITIVE);
            }
        }
    }
    check("argmax mass increases with tau", worst, 0.0)
}

fn argmax_limit(tau: f64, name: &str) -> CheckResult {
    let unique = tempered_softmax(&[0.2, 0.9, -0.1, 0.3], tau);
    let mut worst = (1.0 - 1e-6 - unique[1]).max(0.0);
    for k in [2usize, 3] {
        let mut logits = vec![0.1, -0.4, 0.0, -0.2];
        for v in logits.iter_mut().take(k) {
            *v = 0.6;
        }
        let p = tempered_softmax(&logits, tau);
        for v in p.iter().take(k) {
            worst = worst.max((v - 1.0 / k as f64).abs());
        }
    }
    check(name, worst, 1e-6)
}

/// At the configured bias strength, a fully confident query either reaches
/// the argmax limit (large tau) or is strictly sharper than plain softmax.
fn configured_temperature(eta: f64) -> CheckResult {
    let tau = 1.0 + eta.exp();
    if tau >= 50.0 {
        return argmax_limit(tau, "argmax limit at configured tau");
    }
    let logits = [0.2, 0.9, -0.1, 0.3];
    let plain = tempered_softmax(&logits, 1.0)[1];
    let sharp = tempered_softmax(&logits, tau)[1];
    check("sharpening at configured tau", if sharp > plain { 0.0 } else { plain - sharp + f64::MIN_POSITIVE }, 0.0)
}

fn value_rescaling(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(1..=8);
        let a = attention_weights(&random_matrix(rng, n, n));
        let v = random_matrix(rng, n, c);
        let w2 = random_vec(rng, n, 0.0, 1.0);
        let m = aggregate(&a, &v, &w2);
        for i in 0..n {
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += a[[i, j]] * w2[j] * v[[j, ch]];
                }
                worst = worst.max((acc - m[[i, ch]]).abs());
            }
        }
    }
    check("value rescaling oracle", worst, 1e-12)
}

/// Counts disagreements between the matrix implementation and a scalar
/// enumeration on small random grids.
fn dual_softmax_oracle(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut mismatches = 0usize;
    for _ in 0..50 {
        let n = rng.random_range(1..=16);
        let m = rng.random_range(1..=16);
        let s = random_matrix(rng, n, m) * 4.0;
        let theta = rng.random_range(0.0..0.2);
        let p = dual_softmax(&s);
        let got: Vec<(usize, usize)> = mnn_filter(&p, theta).iter().map(|c| (c.i, c.j)).collect();
        let prob = |i: usize, j: usize| {
            let row: f64 = (0..m).map(|k| s[[i, k]].exp()).sum();
            let col: f64 = (0..n).map(|k| s[[k, j]].exp()).sum();
            s[[i, j]].exp() / row * s[[i, j]].exp() / col
        };
        let mut expected = Vec::new();
        for i in 0..n {
            let j = (0..m).max_by(|&a, &b| prob(i, a).total_cmp(&prob(i, b))).unwrap_or(0);
            let back = (0..n).max_by(|&a, &b| prob(a, j).total_cmp(&prob(b, j))).unwrap_or(0);
            if back == i && prob(i, j) >= theta {
                expected.push((i, j));
            }
        }
        if got != expected {
            mismatches += 1;
        }
    }
    check("dual-softmax + MNN oracle", mismatches as f64, 0.0)
}

fn confidence_shift(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=12);
        let s = random_matrix(rng, n, n) * 3.0;
        let base = CorrelationMatrix { s: s.clone(), gamma: 1.0 };
        let (a1, a2) = confidence_maps(&base, ConfidenceVariant::SigmoidGlobalMean);
        for c in [-5.0, 3.0] {
            let shifted = CorrelationMatrix { s: &s + c, gamma: 1.0 };
            let (b1, b2) = confidence_maps(&shifted, ConfidenceVariant::SigmoidGlobalMean);
            for (x, y) in a1.values.iter().chain(&a2.values).zip(b1.values.iter().chain(&b2.values)) {
                worst = worst.max((x - y).abs());
            }
        }
        if a1.values.iter().chain(&a2.values).any(|&w| !(w > 0.0 && w < 1.0)) {
            worst = f64::INFINITY;
        }
    }
    check("confidence shift invariance", worst, 1e-12)
}

fn gradient_checks(rng: &mut ChaCha8Rng) -> CheckResult {
    let cfg = FocalConfig::default();
    let mut worst = 0.0f64;
    let mut record = |r: crate::Result<f64>| worst = worst.max(r.unwrap_or(f64::INFINITY));
    for _ in 0..20 {
        let n = rng.random_range(2..=10);
        let p = random_vec(rng, n, 0.05, 0.95);
        let gt: Vec<f64> = (0..n).map(|i| if i == 0 || rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let analytic = losses::focal_loss_grad(&p, &gt, &cfg).unwrap_or_default();
        record(losses::grad_check(|x| losses::focal_loss(x, &gt, &cfg).unwrap_or(f64::NAN), &p, &analytic, 1e-6));

        let pred = random_vec(rng, 2 * n, -0.5, 0.5);
        let target: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)]).collect();
        let pairs = |x: &[f64]| x.chunks(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>();
        let analytic: Vec<f64> = losses::subpixel_loss_grad(&pairs(&pred), &target, 1.0)
            .unwrap_or_default()
            .into_iter()
            .flatten()
            .collect();
        record(losses::grad_check(
            |x| losses::subpixel_loss(&pairs(x), &target, 1.0).map_or(f64::NAN, |l| l.value),
            &pred,
            &analytic,
            1e-6,
        ));

        let w = random_vec(rng, 2 * n, 0.05, 0.95);
        let t: Vec<f64> = (0..2 * n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let (g1, g2) = losses::confidence_loss_grad(&w[..n], &w[n..], &t[..n], &t[n..], 1e-6).unwrap_or_default();
        let analytic: Vec<f64> = g1.into_iter().chain(g2).collect();
        record(losses::grad_check(
            |x| losses::confidence_loss(&x[..n], &x[n..], &t[..n], &t[n..], 1e-6).unwrap_or(f64::NAN),
            &w,
            &analytic,
            1e-6,
        ));
    }
    check("loss gradients", worst, 1e-4)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes() {
        let report = run(&SelfTestOptions::default());
        assert!(report.all_passed(), "{report}");
        assert_eq!(report.checks.len(), 8);
    }

    #[test]
    fn large_eta_exercises_the_limit() {
        let report = run(&SelfTestOptions { eta: 6.9, ..SelfTestOptions::default() });
        assert!(report.all_passed(), "{report}");
        assert!(report.checks.iter().any(|c| c.name == "argmax limit at configured tau"));
    }

    #[test]
    fn injected_fault_fails() {
        let report = run(&SelfTestOptions { inject_fault: true, ..SelfTestOptions::default() });
        assert!(!report.all_passed());
    }

    #[test]
    fn display_lists_every_check() {
        let text = run(&SelfTestOptions::default()).to_string();
        assert_eq!(text.matches("PASS").count(), 8);
    }
}
