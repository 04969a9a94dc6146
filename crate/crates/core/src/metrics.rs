//! Operating characteristics across Monte Carlo replicates.

use serde::Serialize;

use crate::borrowing::{AnalysisResult, Method};
use crate::error::{domain, Result};

/// Extra events a trial-only analysis would need to match the precision the
/// hybrid analysis achieved: `max{0, d·(σ²_trial/σ²_hybrid − 1)}`, with the
/// variances those of β₁ and `d` the number of trial events.
pub fn commensurate_effective_events(
    trial_variance: f64,
    hybrid_variance: f64,
    trial_events: f64,
) -> Result<f64> {
    if !(hybrid_variance > 0.0) {
        return domain(format!("hybrid variance must be positive, got {hybrid_variance}"));
    }
    if !(trial_variance >= 0.0) || !(trial_events >= 0.0) {
        return domain("trial variance and event count must be non-negative");
    }
    Ok((trial_events * (trial_variance / hybrid_variance - 1.0)).max(0.0))
}

/// Neumaier-compensated sum, so aggregates do not depend on input order beyond
/// rounding of the final result.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Summary of one method over the replicates of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatingCharacteristics {
    pub method: Method,
    /// Power when the true effect is non-null, type I error otherwise.
    pub rejection_rate: f64,
    /// `sqrt(p(1 − p)/n)`.
    pub rejection_mc_se: f64,
    pub mse_log_hr: f64,
    pub bias_log_hr: f64,
    pub mean_effective_events: f64,
    /// Sample SD (n − 1 denominator); undefined for a single replicate.
    pub sd_effective_events: Option<f64>,
    /// Monte Carlo standard error of `mean_effective_events`.
    pub effective_events_mc_se: Option<f64>,
    /// Replicates that entered the averages.
    pub n_replicates: usize,
    /// Replicates whose analysis failed and were left out.
    pub n_excluded: usize,
}

impl OperatingCharacteristics {
    /// Placeholder row for a scenario in which every replicate failed.
    pub fn all_excluded(method: Method, n_excluded: usize) -> Self {
        OperatingCharacteristics {
            method,
            rejection_rate: f64::NAN,
            rejection_mc_se: f64::NAN,
            mse_log_hr: f64::NAN,
            bias_log_hr: f64::NAN,
            mean_effective_events: f64::NAN,
            sd_effective_events: None,
            effective_events_mc_se: None,
            n_replicates: 0,
            n_excluded,
        }
    }
}

/// Aggregate successful results of a single method. `n_excluded` is carried
/// through to the output for auditing.
pub fn aggregate(
    results: &[AnalysisResult],
    true_log_hr: f64,
    n_excluded: usize,
) -> Result<OperatingCharacteristics> {
    let Some(first) = results.first() else {
        return domain("no results to aggregate");
    };
    let method = first.method;
    if results.iter().any(|r| r.method != method) {
        return domain("results from different methods cannot be aggregated together");
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&AnalysisResult) -> f64| compensated_sum(results.iter().map(f)) / n;

    let p = mean(&|r| f64::from(u8::from(r.reject)));
    let bias = mean(&|r| r.log_hr_hat) - true_log_hr;
    let mse = mean(&|r| (r.log_hr_hat - true_log_hr).powi(2));
    let mean_eff = mean(&|r| r.effective_events);
    let sd_eff = (results.len() > 1).then(|| {
        let ss = compensated_sum(results.iter().map(|r| (r.effective_events - mean_eff).powi(2)));
        (ss / (n - 1.0)).sqrt()
    });

    Ok(OperatingCharacteristics {
        method,
        rejection_rate: p,
        rejection_mc_se: (p * (1.0 - p) / n).sqrt(),
        mse_log_hr: mse,
        bias_log_hr: bias,
        mean_effective_events: mean_eff,
        sd_effective_events: sd_eff,
        effective_events_mc_se: sd_eff.map(|s| s / n.sqrt()),
        n_replicates: results.len(),
        n_excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(method: Method, est: f64, reject: bool, eff: f64) -> AnalysisResult {
        AnalysisResult {
            method,
            log_hr_hat: est,
            se_or_posterior_sd: 0.1,
            upper_bound: if reject { -1.0 } else { 1.0 },
            reject,
            borrow_weight: None,
            effective_events: eff,
            external_events: 0,
            dataset_digest: 0,
            diagnostics: None,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn effective_events_formula() {
        assert!((commensurate_effective_events(0.01, 0.008, 400.0).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(commensurate_effective_events(0.01, 0.02, 400.0).unwrap(), 0.0);
        assert_eq!(commensurate_effective_events(0.01, 0.01, 400.0).unwrap(), 0.0);
        assert!(commensurate_effective_events(0.01, 0.0, 400.0).is_err());
    }

    #[test]
    fn two_point_bias_and_mse() {
        let rs = [
            result(Method::TwoStep, -0.2, true, 5.0),
            result(Method::TwoStep, -0.3, true, 5.0),
        ];
        let oc = aggregate(&rs, -0.25, 0).unwrap();
        assert!(oc.bias_log_hr.abs() < 1e-15);
        assert!((oc.mse_log_hr - 0.0025).abs() < 1e-15);
        assert_eq!(oc.rejection_rate, 1.0);
        assert_eq!(oc.rejection_mc_se, 0.0);
        assert_eq!(oc.sd_effective_events, Some(0.0));
    }

    #[test]
    fn single_replicate_has_no_sd() {
        let oc = aggregate(&[result(Method::NoBorrow, 0.1, false, 0.0)], 0.0, 3).unwrap();
        assert_eq!(oc.sd_effective_events, None);
        assert_eq!(oc.n_excluded, 3);
        assert_eq!(oc.rejection_rate, 0.0);
    }

    #[test]
    fn aggregation_errors() {
        assert!(aggregate(&[], 0.0, 0).is_err());
        let mixed = [
            result(Method::NoBorrow, 0.1, false, 0.0),
            result(Method::TwoStep, 0.1, false, 0.0),
        ];
        assert!(aggregate(&mixed, 0.0, 0).is_err());
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }
}
