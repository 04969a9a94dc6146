//! Analysis strategies for a hybrid control arm.
//!
//! Each strategy maps one dataset to an estimate of the experimental log hazard
//! ratio β₁, a one-sided upper bound Û, a reject flag (`Û < 0`), and the number
//! of external events it effectively borrowed.
//!
//! All models are exponential, so every likelihood depends on the data only
//! through per-arm weighted event counts and exposures. The Bayesian models
//! evaluate their log posterior in O(1) from those statistics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{domain, Error, Result};
use crate::mcmc::{sample, summarize, PosteriorSummary, SamplerConfig, SamplerWarning};
use crate::metrics::commensurate_effective_events;
use crate::seed::{mix_seed, StreamTag};
use crate::survival::{
    fit_groups, fit_weighted_exponential, logrank_test, Arm, Contrast, GroupStats,
    SurvivalDataset,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoBorrow,
    TestThenPool,
    TwoStep,
    PowerPrior,
    Commensurate,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::NoBorrow,
        Method::TestThenPool,
        Method::TwoStep,
        Method::PowerPrior,
        Method::Commensurate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoBorrow => "no_borrow",
            Method::TestThenPool => "test_then_pool",
            Method::TwoStep => "two_step",
            Method::PowerPrior => "power_prior",
            Method::Commensurate => "commensurate",
        }
    }

    /// Whether the amount borrowed reacts to the observed control discrepancy.
    pub fn is_dynamic(self) -> bool {
        matches!(
            self,
            Method::TestThenPool | Method::TwoStep | Method::Commensurate
        )
    }

    pub fn is_bayesian(self) -> bool {
        matches!(self, Method::PowerPrior | Method::Commensurate)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown method {s:?}")))
    }
}

/// How the commensurate prior's spread depends on τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Commensurability {
    /// `β₀,trial ~ N(β₀,ext, 1/τ)`, τ a precision.
    VarianceInvTau,
    /// `β₀,trial ~ N(β₀,ext, 1/τ²)`, τ² a precision.
    PrecisionTauSq,
    /// `β₀,trial ~ N(β₀,ext, τ²)`, τ a standard deviation.
    #[default]
    StdDevTau,
}

impl Commensurability {
    /// Prior standard deviation of `β₀,trial − β₀,ext` given τ.
    pub fn prior_sd(self, tau: f64) -> f64 {
        match self {
            Commensurability::VarianceInvTau => tau.sqrt().recip(),
            Commensurability::PrecisionTauSq => tau.recip(),
            Commensurability::StdDevTau => tau,
        }
    }

    /// Inverse of [`Self::prior_sd`].
    pub fn tau_for_sd(self, sd: f64) -> f64 {
        match self {
            Commensurability::VarianceInvTau => sd.powi(-2),
            Commensurability::PrecisionTauSq => sd.recip(),
            Commensurability::StdDevTau => sd,
        }
    }

    /// True when a larger τ means less borrowing.
    pub fn larger_tau_borrows_less(self) -> bool {
        matches!(self, Commensurability::StdDevTau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningParameters {
    /// Level of the log-rank pre-test in test-then-pool.
    pub alpha_pool: f64,
    /// Decay factor `c` of the two-step weight `exp(−c |log HR|)`.
    pub decay_c: f64,
    /// Fixed power `a` of the static power prior.
    pub power_a: f64,
    /// Scale `v` of the Half-Cauchy hyperprior on τ.
    pub cauchy_scale_v: f64,
    pub commensurability: Commensurability,
}

impl Default for TuningParameters {
    fn default() -> Self {
        TuningParameters {
            alpha_pool: 0.15,
            decay_c: 8.25,
            power_a: 0.6,
            cauchy_scale_v: 0.035,
            commensurability: Commensurability::StdDevTau,
        }
    }
}

impl TuningParameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_pool > 0.0 && self.alpha_pool < 1.0) {
            return domain("alpha_pool must lie in (0, 1)");
        }
        if !(self.decay_c > 0.0 && self.decay_c.is_finite()) {
            return domain("decay_c must be positive");
        }
        if !(0.0..=1.0).contains(&self.power_a) {
            return domain("power_a must lie in [0, 1]");
        }
        if !(self.cauchy_scale_v > 0.0 && self.cauchy_scale_v.is_finite()) {
            return domain("cauchy_scale_v must be positive");
        }
        Ok(())
    }

    /// The tuning parameter a method depends on, if any.
    pub fn value_for(&self, method: Method) -> Option<f64> {
        match method {
            Method::NoBorrow => None,
            Method::TestThenPool => Some(self.alpha_pool),
            Method::TwoStep => Some(self.decay_c),
            Method::PowerPrior => Some(self.power_a),
            Method::Commensurate => Some(self.cauchy_scale_v),
        }
    }

    /// Copy with the method's tuning parameter replaced.
    pub fn with_value(&self, method: Method, value: f64) -> Result<Self> {
        let mut t = *self;
        match method {
            Method::NoBorrow => return domain("no_borrow has no tuning parameter"),
            Method::TestThenPool => t.alpha_pool = value,
            Method::TwoStep => t.decay_c = value,
            Method::PowerPrior => t.power_a = value,
            Method::Commensurate => t.cauchy_scale_v = value,
        }
        t.validate()?;
        Ok(t)
    }

    /// True when increasing the method's parameter reduces borrowing.
    pub fn larger_borrows_less(&self, method: Method) -> bool {
        match method {
            Method::NoBorrow | Method::TestThenPool | Method::TwoStep => true,
            Method::PowerPrior => false,
            Method::Commensurate => self.commensurability.larger_tau_borrows_less(),
        }
    }
}

/// Sampler diagnostics attached to Bayesian results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub max_split_rhat: Option<f64>,
    pub min_acceptance: f64,
    /// Split-R̂ above 1.1.
    pub unreliable: bool,
}

/// One method's analysis of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisResult {
    pub method: Method,
    /// Estimate of β₁ (MLE or posterior mean).
    pub log_hr_hat: f64,
    /// Standard error or posterior standard deviation of β₁.
    pub se_or_posterior_sd: f64,
    /// One-sided upper bound Û.
    pub upper_bound: f64,
    /// `upper_bound < 0`.
    pub reject: bool,
    /// Weight given to external patients, where the method has one.
    pub borrow_weight: Option<f64>,
    pub effective_events: f64,
    /// Unweighted number of events in the external cohort.
    pub external_events: usize,
    pub dataset_digest: u64,
    pub diagnostics: Option<Diagnostics>,
    pub warnings: Vec<String>,
}

impl AnalysisResult {
    fn frequentist(
        method: Method,
        data: &SurvivalDataset,
        estimate: f64,
        se: f64,
        z: f64,
    ) -> AnalysisResult {
        let upper_bound = estimate + z * se;
        AnalysisResult {
            method,
            log_hr_hat: estimate,
            se_or_posterior_sd: se,
            upper_bound,
            reject: upper_bound < 0.0,
            borrow_weight: None,
            effective_events: 0.0,
            external_events: data.event_count(Arm::ExternalControl),
            dataset_digest: data.digest(),
            diagnostics: None,
            warnings: Vec::new(),
        }
    }
}

/// Standard-normal upper-α critical value `Φ⁻¹(1 − α)`.
pub fn normal_critical_value(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return domain(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(1.0 - alpha))
}

fn arm_stats(data: &SurvivalDataset) -> [GroupStats; 3] {
    [
        data.group_stats(&[Arm::TrialControl]),
        data.group_stats(&[Arm::TrialExperimental]),
        data.group_stats(&[Arm::ExternalControl]),
    ]
}

pub fn analyze_no_borrowing(data: &SurvivalDataset, alpha: f64) -> Result<AnalysisResult> {
    let z = normal_critical_value(alpha)?;
    let fit = fit_weighted_exponential(data, Contrast::TRIAL_ONLY)?;
    Ok(AnalysisResult::frequentist(
        Method::NoBorrow,
        data,
        fit.log_hazard_ratio,
        fit.se_log_hr,
        z,
    ))
}

/// Pool the external cohort with weight 1 when a log-rank test of external vs
/// randomized controls gives `p > alpha_pool`; otherwise ignore it.
pub fn analyze_test_then_pool(
    data: &SurvivalDataset,
    tuning: &TuningParameters,
    alpha: f64,
) -> Result<AnalysisResult> {
    let z = normal_critical_value(alpha)?;
    let controls = data.controls();
    let trial = controls.filter(|s| s.arm == Arm::TrialControl);
    let external = controls.filter(|s| s.arm == Arm::ExternalControl);
    if trial.is_empty() || external.is_empty() {
        return domain("test-then-pool needs both randomized and external controls");
    }
    let test = logrank_test(&trial, &external)?;
    let pool = test.p_value > tuning.alpha_pool;

    let [c, e, x] = arm_stats(data);
    let control = if pool { c.combine(x.discounted(1.0)) } else { c };
    let fit = fit_groups(control, e)?;
    let mut r = AnalysisResult::frequentist(
        Method::TestThenPool,
        data,
        fit.log_hazard_ratio,
        fit.se_log_hr,
        z,
    );
    r.borrow_weight = Some(if pool { 1.0 } else { 0.0 });
    r.effective_events = if pool { r.external_events as f64 } else { 0.0 };
    Ok(r)
}

/// Two-step weight `exp(−c |log HR|)`.
pub fn two_step_weight(log_hr_external: f64, decay_c: f64) -> f64 {
    (-decay_c * log_hr_external.abs()).exp()
}

/// Step 1 estimates the external-vs-randomized-control hazard ratio from the
/// control arms alone and converts it to a weight `w`; step 2 refits the
/// treatment effect with external patients weighted by `w`.
pub fn analyze_two_step(
    data: &SurvivalDataset,
    tuning: &TuningParameters,
    alpha: f64,
) -> Result<AnalysisResult> {
    let z = normal_critical_value(alpha)?;
    let mut warnings = Vec::new();
    let w = match fit_weighted_exponential(&data.controls(), Contrast::EXTERNAL_VS_TRIAL) {
        Ok(fit) => two_step_weight(fit.log_hazard_ratio, tuning.decay_c),
        Err(err @ (Error::DegenerateFit(_) | Error::Domain(_))) => {
            warnings.push(format!("two-step weight set to 0: {err}"));
            0.0
        }
        Err(err) => return Err(err),
    };

    let [c, e, x] = arm_stats(data);
    let fit = fit_groups(c.combine(x.discounted(w)), e)?;
    let mut r =
        AnalysisResult::frequentist(Method::TwoStep, data, fit.log_hazard_ratio, fit.se_log_hr, z);
    r.borrow_weight = Some(w);
    r.effective_events = w * r.external_events as f64;
    r.warnings = warnings;
    Ok(r)
}

/// Posterior of (β₀, β₁) when randomized controls enter with weight 1 and
/// external controls with weight `a`, under flat priors.
fn discounted_posterior(
    data: &SurvivalDataset,
    a: f64,
    sampler: &SamplerConfig,
) -> Result<PosteriorSummary> {
    // Both trial arms need events for the flat-prior posterior to be proper.
    fit_weighted_exponential(data, Contrast::TRIAL_ONLY)?;
    let [c, e, x] = arm_stats(data);
    let control = c.combine(x.discounted(a));
    let init = fit_groups(control, e)?;
    let log_density = move |p: &[f64]| control.log_likelihood(p[0]) + e.log_likelihood(p[0] + p[1]);
    let draws = sample(
        log_density,
        &[init.log_baseline_hazard, init.log_hazard_ratio],
        sampler,
    )?;
    summarize(&draws)
}

fn diagnostics(summary: &PosteriorSummary) -> Diagnostics {
    let max_split_rhat = summary.max_split_rhat();
    Diagnostics {
        max_split_rhat,
        min_acceptance: summary.min_acceptance(),
        unreliable: max_split_rhat.is_some_and(|r| r > 1.1),
    }
}

fn warning_strings(warnings: &[SamplerWarning]) -> Vec<String> {
    warnings
        .iter()
        .map(|w| match w {
            SamplerWarning::StuckChain { chain, window } => {
                format!("chain {chain} rejected every proposal in burn-in window {window}")
            }
        })
        .collect()
}

fn bayesian_result(
    method: Method,
    data: &SurvivalDataset,
    summary: &PosteriorSummary,
    beta1: usize,
    alpha: f64,
) -> AnalysisResult {
    let p = summary.param(beta1);
    let upper_bound = p.quantile(1.0 - alpha);
    AnalysisResult {
        method,
        log_hr_hat: p.mean,
        se_or_posterior_sd: p.sd(),
        upper_bound,
        reject: upper_bound < 0.0,
        borrow_weight: None,
        effective_events: 0.0,
        external_events: data.event_count(Arm::ExternalControl),
        dataset_digest: data.digest(),
        diagnostics: Some(diagnostics(summary)),
        warnings: warning_strings(&summary.warnings),
    }
}

/// Flat-prior Bayesian exponential model on the randomized patients only.
/// Parameters are (β₀, β₁).
pub fn bayes_trial_only(data: &SurvivalDataset, sampler: &SamplerConfig) -> Result<PosteriorSummary> {
    discounted_posterior(data, 0.0, sampler)
}

/// Static power prior: external log-likelihood contributions are multiplied
/// by `power_a`. Parameters are (β₀, β₁).
pub fn analyze_power_prior(
    data: &SurvivalDataset,
    tuning: &TuningParameters,
    alpha: f64,
    sampler: &SamplerConfig,
) -> Result<AnalysisResult> {
    normal_critical_value(alpha)?;
    let a = tuning.power_a;
    let summary = discounted_posterior(data, a, sampler)?;
    let mut r = bayesian_result(Method::PowerPrior, data, &summary, 1, alpha);
    r.borrow_weight = Some(a);
    r.effective_events = a * r.external_events as f64;
    Ok(r)
}

/// Hyperprior on the commensurability parameter τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauPrior {
    /// Half-Cauchy with the given scale.
    HalfCauchy(f64),
    /// τ held fixed; used to check the limiting behavior of the model.
    Fixed(f64),
}

/// `e^z·E₁(z)` for `z > 0`, by the power series below 1 and a continued
/// fraction above.
fn scaled_exp_integral(z: f64) -> f64 {
    const EULER: f64 = 0.577_215_664_901_532_9;
    if z <= 1.0 {
        let (mut term, mut sum) = (1.0, 0.0);
        for k in 1..60 {
            term *= -z / k as f64;
            let add = term / k as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs().max(1e-300) {
                break;
            }
        }
        z.exp() * (-EULER - z.ln() - sum)
    } else {
        let tiny = 1e-300;
        let mut b = z + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            c = b + an / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h
    }
}

/// Log density at `x` of `N(0, s²)` mixed over `s ~ Half-Cauchy(scale)`, the
/// horseshoe marginal `e^z·E₁(z) / (scale·√(2π³))` with `z = x²/(2·scale²)`.
///
/// The density has a logarithmic pole at zero; `z` is floored so that the
/// value stays finite.
pub fn horseshoe_log_density(x: f64, scale: f64) -> f64 {
    let z = (0.5 * (x / scale).powi(2)).max(1e-300);
    scaled_exp_integral(z).ln() - scale.ln() - 0.5 * (2.0 * std::f64::consts::PI.powi(3)).ln()
}

/// Posterior of the commensurate model.
///
/// When the prior SD of `β₀,trial − β₀,ext` is τ or 1/τ, a Half-Cauchy on τ
/// makes that SD Half-Cauchy too, so τ is integrated out in closed form and
/// the chain runs on `(β₀,ext, β₀,trial − β₀,ext, β₁)`. Otherwise the chain
/// runs non-centered on `(β₀,ext, η, β₁, log τ)` with
/// `β₀,trial = β₀,ext + sd(τ)·η`, `η ~ N(0, 1)`. A fixed τ drops the last
/// coordinate. Flat priors on β₀,ext and β₁.
pub fn commensurate_posterior(
    data: &SurvivalDataset,
    tau_prior: TauPrior,
    commensurability: Commensurability,
    sampler: &SamplerConfig,
) -> Result<PosteriorSummary> {
    let [c, e, x] = arm_stats(data);
    if x.n == 0 {
        return domain("commensurate prior needs external controls");
    }
    if c.weighted_events + x.weighted_events <= 0.0 {
        return Err(Error::DegenerateFit("control arms".into()));
    }
    // Experimental events are required for β₁ to have a proper posterior.
    let trial = fit_weighted_exponential(data, Contrast::TRIAL_ONLY);
    let (b0_trial, b1) = match trial {
        Ok(f) => (f.log_baseline_hazard, f.log_hazard_ratio),
        Err(Error::DegenerateFit(_)) if e.weighted_events > 0.0 => {
            // No randomized control events; start from the external hazard.
            let b0 = (x.weighted_events / x.weighted_exposure).ln();
            (b0, (e.weighted_events / e.weighted_exposure).ln() - b0)
        }
        Err(err) => return Err(err),
    };
    let b0_ext = if x.weighted_events > 0.0 {
        (x.weighted_events / x.weighted_exposure).ln()
    } else {
        b0_trial
    };
    let gap = b0_trial - b0_ext;

    let sd_of = move |tau: f64| commensurability.prior_sd(tau);
    let draws = match tau_prior {
        TauPrior::HalfCauchy(v) => {
            if !(v > 0.0 && v.is_finite()) {
                return domain("Half-Cauchy scale must be positive");
            }
            let sd_scale = match commensurability {
                Commensurability::StdDevTau => Some(v),
                Commensurability::PrecisionTauSq => Some(1.0 / v),
                Commensurability::VarianceInvTau => None,
            };
            if let Some(s) = sd_scale {
                let log_density = move |p: &[f64]| {
                    let (b0x, delta, b1) = (p[0], p[1], p[2]);
                    let b0t = b0x + delta;
                    c.log_likelihood(b0t) + e.log_likelihood(b0t + b1) + x.log_likelihood(b0x)
                        + horseshoe_log_density(delta, s)
                };
                sample(log_density, &[b0_ext, gap, b1], sampler)?
            } else {
                let sd0 = gap.abs().max(0.05);
                let log_tau0 = commensurability.tau_for_sd(sd0).ln();
                let log_density = move |p: &[f64]| {
                    let (b0x, eta, b1, log_tau) = (p[0], p[1], p[2], p[3]);
                    let tau = log_tau.exp();
                    let b0t = b0x + sd_of(tau) * eta;
                    c.log_likelihood(b0t) + e.log_likelihood(b0t + b1) + x.log_likelihood(b0x)
                        - 0.5 * eta * eta
                        - (tau / v).powi(2).ln_1p()
                        + log_tau
                };
                sample(log_density, &[b0_ext, gap / sd0, b1, log_tau0], sampler)?
            }
        }
        TauPrior::Fixed(tau) => {
            if !(tau > 0.0 && tau.is_finite()) {
                return domain("fixed tau must be positive");
            }
            let sd = sd_of(tau);
            let log_density = move |p: &[f64]| {
                let (b0x, eta, b1) = (p[0], p[1], p[2]);
                let b0t = b0x + sd * eta;
                c.log_likelihood(b0t) + e.log_likelihood(b0t + b1) + x.log_likelihood(b0x)
                    - 0.5 * eta * eta
            };
            sample(log_density, &[b0_ext, (gap / sd).clamp(-3.0, 3.0), b1], sampler)?
        }
    };
    summarize(&draws)
}

/// Index of β₁ in the commensurate parameter vector.
pub const COMMENSURATE_BETA1: usize = 2;

/// Commensurate prior with a Half-Cauchy(`cauchy_scale_v`) hyperprior on τ.
///
/// Effective events borrowed compare the posterior variance of β₁ to that of
/// a flat-prior fit to the randomized patients only, sampled on a seed derived
/// from `sampler.seed`.
pub fn analyze_commensurate(
    data: &SurvivalDataset,
    tuning: &TuningParameters,
    alpha: f64,
    sampler: &SamplerConfig,
) -> Result<AnalysisResult> {
    normal_critical_value(alpha)?;
    let trial_only = bayes_trial_only(
        data,
        &sampler.with_seed(mix_seed(sampler.seed, StreamTag::TrialOnlyBayes as u64)),
    )?;
    let summary = commensurate_posterior(
        data,
        TauPrior::HalfCauchy(tuning.cauchy_scale_v),
        tuning.commensurability,
        sampler,
    )?;
    let mut r = bayesian_result(Method::Commensurate, data, &summary, COMMENSURATE_BETA1, alpha);
    let trial_events =
        (data.event_count(Arm::TrialControl) + data.event_count(Arm::TrialExperimental)) as f64;
    r.effective_events = commensurate_effective_events(
        trial_only.param(1).variance,
        summary.param(COMMENSURATE_BETA1).variance,
        trial_events,
    )?;
    Ok(r)
}

/// Run one method.
pub fn analyze(
    method: Method,
    data: &SurvivalDataset,
    tuning: &TuningParameters,
    alpha: f64,
    sampler: &SamplerConfig,
) -> Result<AnalysisResult> {
    match method {
        Method::NoBorrow => analyze_no_borrowing(data, alpha),
        Method::TestThenPool => analyze_test_then_pool(data, tuning, alpha),
        Method::TwoStep => analyze_two_step(data, tuning, alpha),
        Method::PowerPrior => analyze_power_prior(data, tuning, alpha, sampler),
        Method::Commensurate => analyze_commensurate(data, tuning, alpha, sampler),
    }
}
