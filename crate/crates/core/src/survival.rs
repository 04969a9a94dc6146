//! Censored exponential survival primitives.
//!
//! Everything here works on right-censored observations `(time, event)` with an
//! optional per-subject analysis weight. The exponential model has closed-form
//! sufficient statistics (weighted event count and weighted exposure), which the
//! Bayesian models in [`crate::borrowing`] also reuse.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{domain, Error, Result};

/// Which cohort a subject belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    TrialControl,
    TrialExperimental,
    ExternalControl,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::TrialExperimental, Arm::TrialControl, Arm::ExternalControl];

    /// True for randomized trial patients (either arm).
    pub fn is_trial(self) -> bool {
        !matches!(self, Arm::ExternalControl)
    }

    /// True for patients on the control regimen, randomized or external.
    pub fn is_control(self) -> bool {
        !matches!(self, Arm::TrialExperimental)
    }
}

/// One patient record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    /// Calendar time of enrollment in months since the first site activated.
    pub accrual_time: f64,
    /// Follow-up time in months (event time if `event`, censoring time otherwise).
    pub observed_time: f64,
    pub event: bool,
    pub arm: Arm,
    /// Analysis weight in `[0, 1]`; trial patients always carry 1.
    pub weight: f64,
}

impl Subject {
    pub fn new(arm: Arm, accrual_time: f64, observed_time: f64, event: bool) -> Self {
        Subject {
            accrual_time,
            observed_time,
            event,
            arm,
            weight: 1.0,
        }
    }

    /// Calendar time at which the observation ends (accrual plus follow-up).
    pub fn calendar_time(&self) -> f64 {
        self.accrual_time + self.observed_time
    }
}

/// An ordered collection of subjects plus a free-form provenance label.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDataset {
    pub subjects: Vec<Subject>,
    pub label: String,
}

impl SurvivalDataset {
    pub fn new(label: impl Into<String>, subjects: Vec<Subject>) -> Self {
        SurvivalDataset {
            subjects,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.subjects.iter().filter(|s| s.arm == arm).count()
    }

    /// Unweighted number of events in `arm`.
    pub fn event_count(&self, arm: Arm) -> usize {
        self.subjects
            .iter()
            .filter(|s| s.arm == arm && s.event)
            .count()
    }

    /// Arms with no subjects at all.
    pub fn empty_arms(&self) -> Vec<Arm> {
        Arm::ALL
            .into_iter()
            .filter(|&a| self.arm_count(a) == 0)
            .collect()
    }

    /// Subjects in `arm`, in dataset order.
    pub fn arm(&self, arm: Arm) -> impl Iterator<Item = &Subject> + '_ {
        self.subjects.iter().filter(move |s| s.arm == arm)
    }

    /// Copy restricted to subjects satisfying `keep`.
    pub fn filter(&self, keep: impl Fn(&Subject) -> bool) -> SurvivalDataset {
        SurvivalDataset {
            subjects: self.subjects.iter().copied().filter(|s| keep(s)).collect(),
            label: self.label.clone(),
        }
    }

    /// The control-arms projection: randomized and external controls only.
    /// Anything computed from this view cannot depend on experimental outcomes.
    pub fn controls(&self) -> SurvivalDataset {
        self.filter(|s| s.arm.is_control())
    }

    /// Copy with every subject of `arm` reweighted to `weight`.
    pub fn with_arm_weight(&self, arm: Arm, weight: f64) -> SurvivalDataset {
        let mut out = self.clone();
        for s in out.subjects.iter_mut().filter(|s| s.arm == arm) {
            s.weight = weight;
        }
        out
    }

    /// Copy with all accrual and follow-up times multiplied by `k`.
    pub fn rescale_time(&self, k: f64) -> SurvivalDataset {
        let mut out = self.clone();
        for s in &mut out.subjects {
            s.accrual_time *= k;
            s.observed_time *= k;
        }
        out
    }

    /// Weighted sufficient statistics for the subjects of the given arms.
    pub fn group_stats(&self, arms: &[Arm]) -> GroupStats {
        GroupStats::from_subjects(self.subjects.iter().filter(|s| arms.contains(&s.arm)))
    }

    /// Order-sensitive 64-bit digest of the subject records. Two analyses that
    /// report the same digest saw the same dataset.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::default();
        for s in &self.subjects {
            s.accrual_time.to_bits().hash(&mut h);
            s.observed_time.to_bits().hash(&mut h);
            s.event.hash(&mut h);
            s.arm.hash(&mut h);
            s.weight.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Clone, Copy)]
struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv1a {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Weighted sufficient statistics of an exponential sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GroupStats {
    /// Number of subjects (unweighted).
    pub n: usize,
    /// Σ wᵢ δᵢ
    pub weighted_events: f64,
    /// Σ wᵢ yᵢ
    pub weighted_exposure: f64,
}

impl GroupStats {
    pub fn from_subjects<'a>(subjects: impl IntoIterator<Item = &'a Subject>) -> Self {
        let mut g = GroupStats::default();
        for s in subjects {
            g.n += 1;
            if s.event {
                g.weighted_events += s.weight;
            }
            g.weighted_exposure += s.weight * s.observed_time;
        }
        g
    }

    pub fn combine(self, other: GroupStats) -> GroupStats {
        GroupStats {
            n: self.n + other.n,
            weighted_events: self.weighted_events + other.weighted_events,
            weighted_exposure: self.weighted_exposure + other.weighted_exposure,
        }
    }

    /// Scale both weighted totals by `a` (a power-prior style discount).
    pub fn discounted(self, a: f64) -> GroupStats {
        GroupStats {
            n: self.n,
            weighted_events: a * self.weighted_events,
            weighted_exposure: a * self.weighted_exposure,
        }
    }

    /// Exponential log-likelihood Σ wᵢ[δᵢ log λ − λ yᵢ] at `log_hazard`.
    pub fn log_likelihood(&self, log_hazard: f64) -> f64 {
        self.weighted_events * log_hazard - log_hazard.exp() * self.weighted_exposure
    }
}

/// Exponential CDF `1 − exp(−λ t)`.
pub fn exp_cdf(t: f64, lambda: f64) -> Result<f64> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return domain(format!("hazard must be finite and positive, got {lambda}"));
    }
    if t.is_nan() || t < 0.0 {
        return domain(format!("time must be non-negative, got {t}"));
    }
    Ok(-(-lambda * t).exp_m1())
}

/// Single-group exponential rate estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub log_hazard: f64,
    /// Standard error of `log_hazard`, `1/√D`.
    pub se_log_hazard: f64,
    pub stats: GroupStats,
}

/// Weighted MLE of a single exponential hazard from its sufficient statistics.
pub fn fit_rate(stats: GroupStats, what: &str) -> Result<RateFit> {
    if stats.n == 0 {
        return domain(format!("{what} is empty"));
    }
    if !(stats.weighted_exposure > 0.0) {
        return domain(format!("{what} has no weighted follow-up time"));
    }
    if !(stats.weighted_events > 0.0) {
        return Err(Error::DegenerateFit(what.to_string()));
    }
    Ok(RateFit {
        log_hazard: (stats.weighted_events / stats.weighted_exposure).ln(),
        se_log_hazard: stats.weighted_events.recip().sqrt(),
        stats,
    })
}

/// A two-group partition of arms. Arms in neither group are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Contrast {
    pub group0: &'static [Arm],
    pub group1: &'static [Arm],
}

impl Contrast {
    /// Experimental vs randomized control, external patients excluded.
    pub const TRIAL_ONLY: Contrast = Contrast {
        group0: &[Arm::TrialControl],
        group1: &[Arm::TrialExperimental],
    };

    /// Experimental vs the hybrid (randomized plus external) control arm.
    pub const HYBRID: Contrast = Contrast {
        group0: &[Arm::TrialControl, Arm::ExternalControl],
        group1: &[Arm::TrialExperimental],
    };

    /// External cohort vs randomized controls; never touches the experimental arm.
    pub const EXTERNAL_VS_TRIAL: Contrast = Contrast {
        group0: &[Arm::TrialControl],
        group1: &[Arm::ExternalControl],
    };
}

/// Fitted two-group proportional-hazards exponential model
/// `λᵢ = exp(β₀ + β₁ xᵢ)` with `xᵢ` the group-1 indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpFit {
    /// β₀, log of the group-0 hazard (events per month).
    pub log_baseline_hazard: f64,
    /// β₁, log hazard ratio of group 1 vs group 0.
    pub log_hazard_ratio: f64,
    /// `sqrt(1/D₀ + 1/D₁)` with `D_g` the weighted event count of group g.
    pub se_log_hr: f64,
    pub weighted_events: [f64; 2],
    pub weighted_exposure: [f64; 2],
}

impl ExpFit {
    pub fn hazard_ratio(&self) -> f64 {
        self.log_hazard_ratio.exp()
    }
}

/// Weighted maximum-likelihood fit of the two-group exponential model.
///
/// The score equations decouple per group, so the MLE is `λ̂_g = D_g / Y_g`.
pub fn fit_weighted_exponential(data: &SurvivalDataset, contrast: Contrast) -> Result<ExpFit> {
    fit_groups(data.group_stats(contrast.group0), data.group_stats(contrast.group1))
}

/// [`fit_weighted_exponential`] from precomputed group statistics.
pub fn fit_groups(g0: GroupStats, g1: GroupStats) -> Result<ExpFit> {
    // Structural problems take precedence over missing events.
    for (g, what) in [(g0, "group 0"), (g1, "group 1")] {
        if g.n == 0 {
            return domain(format!("{what} is empty"));
        }
    }
    let f0 = fit_rate(g0, "group 0")?;
    let f1 = fit_rate(g1, "group 1")?;
    Ok(ExpFit {
        log_baseline_hazard: f0.log_hazard,
        log_hazard_ratio: f1.log_hazard - f0.log_hazard,
        se_log_hr: (g0.weighted_events.recip() + g1.weighted_events.recip()).sqrt(),
        weighted_events: [g0.weighted_events, g1.weighted_events],
        weighted_exposure: [g0.weighted_exposure, g1.weighted_exposure],
    })
}

/// Result of a two-sample log-rank test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRank {
    /// Chi-squared statistic with one degree of freedom.
    pub statistic: f64,
    pub p_value: f64,
    /// Σ (O − E) for group 0.
    pub observed_minus_expected: f64,
    pub variance: f64,
}

/// Unweighted two-sample log-rank test between two datasets.
pub fn logrank_test(group0: &SurvivalDataset, group1: &SurvivalDataset) -> Result<LogRank> {
    let obs = |d: &SurvivalDataset| -> Vec<(f64, bool)> {
        d.subjects.iter().map(|s| (s.observed_time, s.event)).collect()
    };
    logrank(&obs(group0), &obs(group1))
}

/// Log-rank test on raw `(time, event)` observations.
///
/// Tied times are grouped: all events at a time share one risk set, and
/// subjects censored at that time are still counted as at risk.
pub fn logrank(group0: &[(f64, bool)], group1: &[(f64, bool)]) -> Result<LogRank> {
    let mut obs: Vec<(f64, bool, bool)> = Vec::with_capacity(group0.len() + group1.len());
    obs.extend(group0.iter().map(|&(t, e)| (t, e, true)));
    obs.extend(group1.iter().map(|&(t, e)| (t, e, false)));
    if obs.iter().any(|o| o.0.is_nan()) {
        return domain("NaN observation time");
    }
    if !obs.iter().any(|o| o.1) {
        return Err(Error::TestUndefined("no events in either group".into()));
    }
    obs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut at_risk = obs.len() as f64;
    let mut at_risk0 = group0.len() as f64;
    let mut o_minus_e = 0.0;
    let mut variance = 0.0;
    let mut i = 0;
    while i < obs.len() {
        let t = obs[i].0;
        let (mut d, mut d0, mut leaving, mut leaving0) = (0.0, 0.0, 0.0, 0.0);
        while i < obs.len() && obs[i].0 == t {
            let (_, event, in0) = obs[i];
            leaving += 1.0;
            if in0 {
                leaving0 += 1.0;
            }
            if event {
                d += 1.0;
                if in0 {
                    d0 += 1.0;
                }
            }
            i += 1;
        }
        if d > 0.0 {
            let frac0 = at_risk0 / at_risk;
            o_minus_e += d0 - d * frac0;
            if at_risk > 1.0 {
                variance += d * frac0 * (1.0 - frac0) * (at_risk - d) / (at_risk - 1.0);
            }
        }
        at_risk -= leaving;
        at_risk0 -= leaving0;
    }

    if variance <= 0.0 {
        if o_minus_e == 0.0 {
            return Ok(LogRank {
                statistic: 0.0,
                p_value: 1.0,
                observed_minus_expected: 0.0,
                variance,
            });
        }
        return Err(Error::TestUndefined("zero variance".into()));
    }
    let statistic = o_minus_e * o_minus_e / variance;
    Ok(LogRank {
        statistic,
        p_value: chi2_1_sf(statistic),
        observed_minus_expected: o_minus_e,
        variance,
    })
}

/// Upper tail of the chi-squared distribution with one degree of freedom.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(arm: Arm, obs: &[(f64, bool)]) -> SurvivalDataset {
        SurvivalDataset::new(
            "t",
            obs.iter().map(|&(t, e)| Subject::new(arm, 0.0, t, e)).collect(),
        )
    }

    #[test]
    fn exp_cdf_values() {
        assert_eq!(exp_cdf(0.0, 0.043).unwrap(), 0.0);
        assert!((exp_cdf(16.0, std::f64::consts::LN_2 / 16.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((exp_cdf(1.0, 0.043).unwrap() - 0.042_088_6).abs() < 1e-6);
        assert!(exp_cdf(1.0, 0.0).is_err());
        assert!(exp_cdf(1.0, f64::NAN).is_err());
        assert!(exp_cdf(1.0, f64::INFINITY).is_err());
        assert!(exp_cdf(-1.0, 0.1).is_err());
    }

    #[test]
    fn single_group_rate() {
        let d = ds(Arm::TrialControl, &[(1.0, true), (3.0, true)]);
        let f = fit_rate(d.group_stats(&[Arm::TrialControl]), "g").unwrap();
        assert!((f.log_hazard.exp() - 0.5).abs() < 1e-15);
        assert!((f.se_log_hazard - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn two_group_closed_form() {
        let mut d = ds(Arm::TrialControl, &[(2.0, true), (2.0, true)]);
        d.subjects
            .extend(ds(Arm::TrialExperimental, &[(4.0, true), (4.0, true)]).subjects);
        let f = fit_weighted_exponential(&d, Contrast::TRIAL_ONLY).unwrap();
        assert!((f.log_hazard_ratio - (0.25f64 / 0.5).ln()).abs() < 1e-12);
        assert!((f.log_hazard_ratio + std::f64::consts::LN_2).abs() < 1e-5);
        assert!((f.se_log_hr - 1.0).abs() < 1e-12);

        let half = d.with_arm_weight(Arm::TrialControl, 0.5).with_arm_weight(Arm::TrialExperimental, 0.5);
        let g = fit_weighted_exponential(&half, Contrast::TRIAL_ONLY).unwrap();
        assert!((g.log_hazard_ratio - f.log_hazard_ratio).abs() < 1e-12);
        assert!((g.se_log_hr - f.se_log_hr * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fit_errors() {
        let d = ds(Arm::TrialControl, &[(2.0, false)]);
        let mut both = d.clone();
        both.subjects.extend(ds(Arm::TrialExperimental, &[(1.0, true)]).subjects);
        assert!(matches!(
            fit_weighted_exponential(&both, Contrast::TRIAL_ONLY),
            Err(Error::DegenerateFit(_))
        ));
        assert!(matches!(
            fit_weighted_exponential(&d, Contrast::TRIAL_ONLY),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn logrank_hand_computed() {
        let g0 = ds(Arm::TrialControl, &[(1.0, true)]);
        let g1 = ds(Arm::ExternalControl, &[(2.0, true)]);
        let lr = logrank_test(&g0, &g1).unwrap();
        assert!((lr.observed_minus_expected - 0.5).abs() < 1e-12);
        assert!((lr.variance - 0.25).abs() < 1e-12);
        assert!((lr.statistic - 1.0).abs() < 1e-12);
        assert!((lr.p_value - 0.317_310_507_862_914_1).abs() < 1e-9);
    }

    #[test]
    fn logrank_identical_groups() {
        let g = ds(Arm::TrialControl, &[(1.0, true), (2.5, false), (3.0, true), (7.0, true)]);
        let lr = logrank_test(&g, &g).unwrap();
        assert_eq!(lr.statistic, 0.0);
        assert_eq!(lr.p_value, 1.0);
    }

    #[test]
    fn logrank_ties_censored_at_event_time_are_at_risk() {
        // Risk set at t=1: all four subjects, including the one censored at 1.
        let g0 = [(1.0, true), (1.0, false)];
        let g1 = [(1.0, true), (2.0, true)];
        let lr = logrank(&g0, &g1).unwrap();
        // t=1: n=4, n0=2, d=2 → O−E = 1 − 1 = 0; V = 2·½·½·2/3 = 1/3
        // t=2: n=1 → no contribution
        assert!(lr.observed_minus_expected.abs() < 1e-12);
        assert!((lr.variance - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn logrank_requires_events() {
        let g = ds(Arm::TrialControl, &[(1.0, false)]);
        assert!(matches!(logrank_test(&g, &g), Err(Error::TestUndefined(_))));
    }

    #[test]
    fn digest_tracks_content() {
        let a = ds(Arm::TrialControl, &[(1.0, true), (2.0, false)]);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.subjects[1].observed_time = 2.000_000_1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn controls_projection_drops_experimental() {
        let mut d = ds(Arm::TrialControl, &[(1.0, true)]);
        d.subjects.extend(ds(Arm::TrialExperimental, &[(1.0, true)]).subjects);
        d.subjects.extend(ds(Arm::ExternalControl, &[(1.0, true)]).subjects);
        let c = d.controls();
        assert_eq!(c.len(), 2);
        assert_eq!(c.arm_count(Arm::TrialExperimental), 0);
        assert_eq!(c.empty_arms(), vec![Arm::TrialExperimental]);
    }
}
