//! Deterministic design planning with external controls.
//!
//! Given an effective external accrual rate (already downweighted), the planner
//! re-solves the trial's accrual split so that the trial control arm plus the
//! external cohort finish at the same time as the experimental arm. It then
//! projects expected event curves and the clinical cutoff date.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::survival::exp_cdf;

/// Bisection tolerance for the cutoff, in months.
pub const CUTOFF_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerInputs {
    pub n_experimental: u32,
    /// Originally planned control patients.
    pub n_control: u32,
    /// Trial accrual rate, patients per month.
    pub accrual_rate: f64,
    /// Effective external accrual rate after downweighting, patients per month.
    pub external_rate: f64,
    /// Months of external accrual available before the trial starts.
    pub historical_months: f64,
    /// Control hazard per month.
    pub baseline_hazard: f64,
    pub hr_experimental: f64,
    pub p_lost: f64,
    pub target_events: f64,
    /// Randomization ratio before external data are considered.
    pub initial_ratio: f64,
}

impl Default for PlannerInputs {
    fn default() -> Self {
        PlannerInputs {
            n_experimental: 450,
            n_control: 450,
            accrual_rate: 34.0,
            external_rate: 11.3,
            historical_months: 0.0,
            baseline_hazard: 0.043,
            hr_experimental: 0.78,
            p_lost: 0.05,
            target_events: 655.0,
            initial_ratio: 1.0,
        }
    }
}

impl PlannerInputs {
    /// The same trial without any external data.
    pub fn without_external(&self) -> Self {
        PlannerInputs {
            external_rate: 0.0,
            historical_months: 0.0,
            ..*self
        }
    }

    /// External patients available at trial start.
    pub fn historical_patients(&self) -> f64 {
        self.historical_months * self.external_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experimental == 0 || self.n_control == 0 {
            return domain("arm sizes must be positive");
        }
        for (name, v) in [
            ("accrual_rate", self.accrual_rate),
            ("baseline_hazard", self.baseline_hazard),
            ("hr_experimental", self.hr_experimental),
            ("initial_ratio", self.initial_ratio),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return domain(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("external_rate", self.external_rate),
            ("historical_months", self.historical_months),
            ("target_events", self.target_events),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return domain(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.p_lost) {
            return domain(format!("p_lost must lie in [0, 1), got {}", self.p_lost));
        }
        if f64::from(self.n_control) - self.historical_patients() <= 0.0 {
            return Err(Error::InfeasiblePlan(
                "historical external patients already cover the control arm".into(),
            ));
        }
        Ok(())
    }
}

/// Accrual times per arm in months since trial start. Historical external
/// patients have negative times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanAccrual {
    pub experimental: Vec<f64>,
    pub control: Vec<f64>,
    pub external: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannerOutputs {
    /// Experimental:control randomization ratio after the update.
    pub final_ratio: f64,
    /// Ratio implied by the historical update alone, `n_E/(n_C − N₀)`.
    pub historical_ratio: f64,
    pub rate_experimental: f64,
    pub rate_control: f64,
    pub enrollment_months: f64,
    /// Months from trial start to the clinical cutoff, if solved.
    pub cutoff_months: Option<f64>,
    pub n_experimental: usize,
    pub n_trial_control: usize,
    pub n_external_historical: usize,
    pub n_external_concurrent: usize,
    pub accrual: PlanAccrual,
}

impl PlannerOutputs {
    pub fn n_randomized(&self) -> usize {
        self.n_experimental + self.n_trial_control
    }
}

/// Solve `[[a, b], [c, d]] x = r`.
fn solve_2x2(m: [[f64; 2]; 2], r: [f64; 2]) -> Option<[f64; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-12 || !det.is_finite() {
        return None;
    }
    Some([
        (r[0] * m[1][1] - m[0][1] * r[1]) / det,
        (m[0][0] * r[1] - r[0] * m[1][0]) / det,
    ])
}

fn accrual_times(n: usize, rate: f64) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / rate).collect()
}

/// Solve the accrual split and the resulting enrollment timeline.
///
/// With `N₀` historical patients and `m = n_C − N₀` control patients still to
/// enroll, the rates satisfy `s_E + s_C = s` and
/// `s_E/n_E − s_C/m = s_RWD/m`, i.e. the experimental arm and the combined
/// trial-plus-external control arm fill up simultaneously.
pub fn update_design_for_external(inputs: &PlannerInputs) -> Result<PlannerOutputs> {
    inputs.validate()?;
    let n_e = f64::from(inputs.n_experimental);
    let n0 = inputs.historical_patients();
    let remaining = f64::from(inputs.n_control) - n0;
    let s = inputs.accrual_rate;
    let s_rwd = inputs.external_rate;

    let [s_e, s_c] = solve_2x2(
        [[1.0, 1.0], [1.0 / n_e, -1.0 / remaining]],
        [s, s_rwd / remaining],
    )
    .ok_or_else(|| Error::InfeasiblePlan("accrual system is singular".into()))?;
    if !(s_e > 0.0) || !(s_c > 0.0) {
        return Err(Error::InfeasiblePlan(format!(
            "external accrual {s_rwd}/month leaves no room for trial controls \
             (s_E = {s_e:.4}, s_C = {s_c:.4})"
        )));
    }

    let enrollment = n_e / s_e;
    let n_hist = n0.round() as usize;
    let n_conc = (s_rwd * enrollment).round() as usize;
    let n_trial_control = (inputs.n_control as usize)
        .checked_sub(n_hist + n_conc)
        .ok_or_else(|| Error::InfeasiblePlan("external patients exceed the control arm".into()))?;

    let mut external: Vec<f64> = (1..=n_hist)
        .map(|j| -((n_hist - j) as f64) / s_rwd)
        .collect();
    if n_conc > 0 {
        external.extend(accrual_times(n_conc, s_rwd));
    }

    Ok(PlannerOutputs {
        final_ratio: s_e / s_c,
        historical_ratio: n_e / remaining,
        rate_experimental: s_e,
        rate_control: s_c,
        enrollment_months: enrollment,
        cutoff_months: None,
        n_experimental: inputs.n_experimental as usize,
        n_trial_control,
        n_external_historical: n_hist,
        n_external_concurrent: n_conc,
        accrual: PlanAccrual {
            experimental: accrual_times(inputs.n_experimental as usize, s_e),
            control: accrual_times(n_trial_control, s_c),
            external,
        },
    })
}

/// Expected cumulative events per arm at one time point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ExpectedEvents {
    pub experimental: f64,
    pub trial_control: f64,
    pub external: f64,
}

impl ExpectedEvents {
    pub fn control(&self) -> f64 {
        self.trial_control + self.external
    }

    pub fn total(&self) -> f64 {
        self.experimental + self.control()
    }
}

fn expected_arm_events(accrual: &[f64], t: f64, hazard: f64, retention: f64) -> f64 {
    // Follow-up is capped at the trial's elapsed time, so historical patients
    // contribute no events before the trial starts.
    let sum: f64 = accrual
        .iter()
        .filter(|&&u| u <= t)
        .map(|&u| exp_cdf((t - u).min(t), hazard).unwrap_or(0.0))
        .sum();
    retention * sum
}

/// Expected cumulative events per arm `t` months after trial start.
pub fn project_events(plan: &PlannerOutputs, inputs: &PlannerInputs, t: f64) -> ExpectedEvents {
    if !(t > 0.0) {
        return ExpectedEvents::default();
    }
    let retention = 1.0 - inputs.p_lost;
    let l0 = inputs.baseline_hazard;
    ExpectedEvents {
        experimental: expected_arm_events(
            &plan.accrual.experimental,
            t,
            l0 * inputs.hr_experimental,
            retention,
        ),
        trial_control: expected_arm_events(&plan.accrual.control, t, l0, retention),
        external: expected_arm_events(&plan.accrual.external, t, l0, retention),
    }
}

/// First time, to within [`CUTOFF_TOLERANCE`], at which expected total events
/// reach the target.
pub fn solve_cutoff(plan: &PlannerOutputs, inputs: &PlannerInputs) -> Result<f64> {
    let target = inputs.target_events;
    if target <= 0.0 {
        return Ok(0.0);
    }
    let n_total =
        plan.accrual.experimental.len() + plan.accrual.control.len() + plan.accrual.external.len();
    let ceiling = (1.0 - inputs.p_lost) * n_total as f64;
    if target >= ceiling {
        return Err(Error::InfeasiblePlan(format!(
            "target of {target} events is not reachable; at most {ceiling:.1} are expected"
        )));
    }
    let total = |t: f64| project_events(plan, inputs, t).total();
    let mut lo = 0.0;
    let mut hi = plan.enrollment_months.max(1.0);
    while total(hi) < target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e7 {
            return Err(Error::InfeasiblePlan("cutoff search diverged".into()));
        }
    }
    while hi - lo > CUTOFF_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if total(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Accrual update plus cutoff.
pub fn plan(inputs: &PlannerInputs) -> Result<PlannerOutputs> {
    let mut out = update_design_for_external(inputs)?;
    out.cutoff_months = Some(solve_cutoff(&out, inputs)?);
    Ok(out)
}

/// Differences between an original and a hybrid plan; positive values are
/// savings of the hybrid plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenefitReport {
    pub enrollment_saving_months: f64,
    pub cutoff_saving_months: Option<f64>,
    pub fewer_randomized: i64,
    pub original_events_at_cutoff: Option<ExpectedEvents>,
    pub hybrid_events_at_cutoff: Option<ExpectedEvents>,
}

pub fn summarize_benefits(
    original: &PlannerOutputs,
    original_inputs: &PlannerInputs,
    hybrid: &PlannerOutputs,
    hybrid_inputs: &PlannerInputs,
) -> BenefitReport {
    let at_cutoff = |p: &PlannerOutputs, i: &PlannerInputs| {
        p.cutoff_months.map(|t| project_events(p, i, t))
    };
    BenefitReport {
        enrollment_saving_months: original.enrollment_months - hybrid.enrollment_months,
        cutoff_saving_months: original
            .cutoff_months
            .zip(hybrid.cutoff_months)
            .map(|(a, b)| a - b),
        fewer_randomized: original.n_randomized() as i64 - hybrid.n_randomized() as i64,
        original_events_at_cutoff: at_cutoff(original, original_inputs),
        hybrid_events_at_cutoff: at_cutoff(hybrid, hybrid_inputs),
    }
}

/// Expected event curves on the given time grid.
pub fn event_curves(
    plan: &PlannerOutputs,
    inputs: &PlannerInputs,
    times: &[f64],
) -> Vec<(f64, ExpectedEvents)> {
    times.iter().map(|&t| (t, project_events(plan, inputs, t))).collect()
}
