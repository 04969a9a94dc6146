#![allow(dead_code)]

use borrowsim::survival::{Arm, Subject, SurvivalDataset};
use statrs::function::gamma::digamma;

/// ψ₁(x) by upward recurrence to x ≥ 20, then the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// Mean and variance of log λ when λ ~ Gamma(d, y).
pub fn log_gamma_moments(d: f64, y: f64) -> (f64, f64) {
    (digamma(d) - y.ln(), trigamma(d))
}

/// Mean and variance of `log λ_E − log λ_C` under independent flat-prior
/// exponential posteriors with the given (events, exposure) pairs.
pub fn log_hr_moments(control: (f64, f64), experimental: (f64, f64)) -> (f64, f64) {
    let (mc, vc) = log_gamma_moments(control.0, control.1);
    let (me, ve) = log_gamma_moments(experimental.0, experimental.1);
    (me - mc, ve + vc)
}

/// A dataset whose arms have exactly `d` events over total exposure `y`.
pub fn arms_dataset(arms: &[(Arm, usize, f64)]) -> SurvivalDataset {
    let mut subjects = Vec::new();
    for &(arm, d, y) in arms {
        for i in 0..d {
            let t = if i == 0 { y - (d - 1) as f64 * 1e-3 } else { 1e-3 };
            subjects.push(Subject::new(arm, 0.0, t, true));
        }
    }
    SurvivalDataset::new("arms", subjects)
}
