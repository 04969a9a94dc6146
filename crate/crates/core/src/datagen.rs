//! Hybrid trial data-generating process.
//!
//! A hybrid design keeps the planned experimental arm, shrinks the randomized
//! control arm to `n_E / r`, and makes up the difference with external controls
//! inflated by the expected downweighting factor. Accrual is linear and fully
//! concurrent, event and loss-to-follow-up times are exponential, and the
//! dataset is cut at the calendar time where the (downweighted) event count
//! first reaches its target.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::survival::{Arm, Subject, SurvivalDataset};

/// Borrowing assumptions and trial parameters a hybrid design is derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignInputs {
    /// Planned experimental patients (n_E).
    pub n_experimental: u32,
    /// Control patients in the original, non-hybrid design (n_C).
    pub n_control: u32,
    /// Randomization ratio r of the hybrid trial, experimental : control = r : 1.
    pub randomization_ratio: f64,
    /// Expected downweighting factor of external controls, in (0, 1].
    pub downweight: f64,
    /// Trial accrual rate s, patients per month.
    pub accrual_rate: f64,
    /// Baseline (randomized control) hazard per month.
    pub baseline_hazard: f64,
    /// Probability of loss to follow-up, in [0, 1).
    pub p_lost: f64,
    /// Target (downweighted) event count that triggers the analysis.
    pub target_events: f64,
    /// True experimental vs control hazard ratio.
    pub hr_experimental: f64,
    /// True external vs randomized control hazard ratio (residual bias).
    pub hr_external: f64,
}

impl Default for DesignInputs {
    /// A 2:1 hybrid version of a 900-patient 1:1 trial with 16-month control
    /// median survival, borrowing 60% of 375 external controls.
    fn default() -> Self {
        DesignInputs {
            n_experimental: 450,
            n_control: 450,
            randomization_ratio: 2.0,
            downweight: 0.6,
            accrual_rate: 34.0,
            baseline_hazard: 0.043,
            p_lost: 0.05,
            target_events: 655.0,
            hr_experimental: 0.78,
            hr_external: 1.0,
        }
    }
}

impl DesignInputs {
    pub fn with_hazard_ratios(&self, hr_experimental: f64, hr_external: f64) -> Self {
        DesignInputs {
            hr_experimental,
            hr_external,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                domain(format!("{name} must be finite and positive, got {v}"))
            }
        };
        if self.n_experimental == 0 {
            return domain("n_experimental must be positive");
        }
        positive("randomization_ratio", self.randomization_ratio)?;
        positive("accrual_rate", self.accrual_rate)?;
        positive("baseline_hazard", self.baseline_hazard)?;
        positive("hr_experimental", self.hr_experimental)?;
        positive("hr_external", self.hr_external)?;
        if !(self.downweight > 0.0 && self.downweight <= 1.0) {
            return domain(format!("downweight must lie in (0, 1], got {}", self.downweight));
        }
        if !(0.0..1.0).contains(&self.p_lost) {
            return domain(format!("p_lost must lie in [0, 1), got {}", self.p_lost));
        }
        if !(self.target_events >= 0.0 && self.target_events.is_finite()) {
            return domain("target_events must be finite and non-negative");
        }
        Ok(())
    }
}

/// Derived hybrid design: arm sizes, accrual rates and enrollment length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialDesign {
    pub n_experimental: usize,
    /// Randomized controls after the reduction, `round(n_E / r)`.
    pub n_control_hybrid: usize,
    /// External controls needed, `round((n_C − n_C,hyb) / w_down)`.
    pub n_external: usize,
    pub rate_experimental: f64,
    pub rate_control: f64,
    pub rate_external: f64,
    /// Months until all arms finish accruing.
    pub enrollment_months: f64,
}

/// Rounds half up; counts are non-negative so this is `f64::round`.
fn round_count(x: f64) -> usize {
    x.round() as usize
}

/// Derive the hybrid design from the borrowing assumptions.
///
/// The experimental arm takes the `r/(r+1)` share of trial accrual, and the
/// external cohort accrues at whatever rate finishes it together with the
/// trial.
pub fn derive_hybrid_design(inputs: &DesignInputs) -> Result<TrialDesign> {
    inputs.validate()?;
    let n_e = f64::from(inputs.n_experimental);
    let r = inputs.randomization_ratio;
    let n_control_hybrid = round_count(n_e / r);
    let shortfall = f64::from(inputs.n_control) - n_control_hybrid as f64;
    if shortfall < 0.0 {
        return Err(Error::InfeasibleDesign(format!(
            "hybrid control arm ({n_control_hybrid}) exceeds the original control arm ({})",
            inputs.n_control
        )));
    }
    let n_external = round_count(shortfall / inputs.downweight);
    let rate_experimental = inputs.accrual_rate * r / (r + 1.0);
    let rate_control = inputs.accrual_rate / (r + 1.0);
    let enrollment_months = n_e / rate_experimental;
    Ok(TrialDesign {
        n_experimental: inputs.n_experimental as usize,
        n_control_hybrid,
        n_external,
        rate_experimental,
        rate_control,
        rate_external: n_external as f64 / enrollment_months,
        enrollment_months,
    })
}

/// Linear accrual times `i / s` for `i = 1..=n` in each arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Accrual {
    pub experimental: Vec<f64>,
    pub control: Vec<f64>,
    pub external: Vec<f64>,
}

impl Accrual {
    pub fn for_arm(&self, arm: Arm) -> &[f64] {
        match arm {
            Arm::TrialExperimental => &self.experimental,
            Arm::TrialControl => &self.control,
            Arm::ExternalControl => &self.external,
        }
    }
}

pub fn linear_accrual(n: usize, rate: f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    (1..=n).map(|i| i as f64 / rate).collect()
}

pub fn generate_accrual(design: &TrialDesign) -> Accrual {
    Accrual {
        experimental: linear_accrual(design.n_experimental, design.rate_experimental),
        control: linear_accrual(design.n_control_hybrid, design.rate_control),
        external: linear_accrual(design.n_external, design.rate_external),
    }
}

/// Draw event and loss-to-follow-up times for every subject of the design.
///
/// Draws are consumed arm-major (experimental, trial control, external), then
/// by accrual index, two standard exponentials per subject, so the stream
/// layout is fixed regardless of parameter values.
pub fn simulate_outcomes<R: Rng + ?Sized>(
    design: &TrialDesign,
    inputs: &DesignInputs,
    rng: &mut R,
) -> Result<SurvivalDataset> {
    inputs.validate()?;
    let accrual = generate_accrual(design);
    let loss_odds = inputs.p_lost / (1.0 - inputs.p_lost);
    let mut subjects = Vec::with_capacity(
        design.n_experimental + design.n_control_hybrid + design.n_external,
    );
    for arm in Arm::ALL {
        let hazard = inputs.baseline_hazard
            * match arm {
                Arm::TrialExperimental => inputs.hr_experimental,
                Arm::TrialControl => 1.0,
                Arm::ExternalControl => inputs.hr_external,
            };
        let censor_hazard = hazard * loss_odds;
        for &u in accrual.for_arm(arm) {
            let e1: f64 = rng.sample(Exp1);
            let e2: f64 = rng.sample(Exp1);
            let event_time = e1 / hazard;
            let censor_time = if censor_hazard > 0.0 {
                e2 / censor_hazard
            } else {
                f64::INFINITY
            };
            let event = event_time <= censor_time;
            subjects.push(Subject::new(arm, u, event_time.min(censor_time), event));
        }
    }
    Ok(SurvivalDataset::new("simulated", subjects))
}

/// Outcome of event-driven administrative censoring.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoredDataset {
    pub dataset: SurvivalDataset,
    /// Calendar time of the clinical cutoff; `None` when the target was never reached.
    pub cutoff: Option<f64>,
    /// True when the total weighted event count fell short of the target.
    pub under_target: bool,
    /// Weighted event count (external events counted at `w_down`) in the returned data.
    pub weighted_events: f64,
    /// Subjects removed because they would have enrolled after the cutoff.
    pub dropped: usize,
}

const COUNT_EPS: f64 = 1e-9;

/// Censor all follow-up at the calendar time the weighted event count first
/// reaches `target_events`, counting external events at `downweight`.
///
/// Calendar time of an observation is accrual plus follow-up. The cutoff is
/// the calendar time of the threshold-crossing event itself.
pub fn apply_administrative_censoring(
    data: &SurvivalDataset,
    target_events: f64,
    downweight: f64,
) -> CensoredDataset {
    let event_weight = |s: &Subject| if s.arm.is_trial() { 1.0 } else { downweight };
    let mut events: Vec<(f64, f64)> = data
        .subjects
        .iter()
        .filter(|s| s.event)
        .map(|s| (s.calendar_time(), event_weight(s)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut total = 0.0;
    let mut cutoff = None;
    for &(t, w) in &events {
        total += w;
        if total >= target_events - COUNT_EPS {
            cutoff = Some(t);
            break;
        }
    }

    let Some(t_cut) = cutoff else {
        return CensoredDataset {
            dataset: data.clone(),
            cutoff: None,
            under_target: true,
            weighted_events: total,
            dropped: 0,
        };
    };

    let mut subjects = Vec::with_capacity(data.len());
    let mut weighted_events = 0.0;
    for s in &data.subjects {
        let mut s = *s;
        if s.calendar_time() > t_cut {
            s.observed_time = t_cut - s.accrual_time;
            s.event = false;
        }
        if s.observed_time < 0.0 {
            continue;
        }
        if s.event {
            weighted_events += event_weight(&s);
        }
        subjects.push(s);
    }
    let dropped = data.len() - subjects.len();
    CensoredDataset {
        dataset: SurvivalDataset::new(data.label.clone(), subjects),
        cutoff: Some(t_cut),
        under_target: false,
        weighted_events,
        dropped,
    }
}

/// One simulated replicate after administrative censoring, plus the
/// pre-cutoff tallies used for auditing the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTrial {
    pub censored: CensoredDataset,
    /// Events before administrative censoring.
    pub raw_events: usize,
    /// Subjects before administrative censoring.
    pub raw_subjects: usize,
}

impl SimulatedTrial {
    pub fn dataset(&self) -> &SurvivalDataset {
        &self.censored.dataset
    }

    pub fn raw_event_fraction(&self) -> f64 {
        self.raw_events as f64 / self.raw_subjects as f64
    }
}

/// Generate one replicate: outcomes for the design, then the event-driven cutoff.
pub fn simulate_trial<R: Rng + ?Sized>(
    design: &TrialDesign,
    inputs: &DesignInputs,
    rng: &mut R,
) -> Result<SimulatedTrial> {
    let raw = simulate_outcomes(design, inputs, rng)?;
    let raw_events = raw.subjects.iter().filter(|s| s.event).count();
    let raw_subjects = raw.len();
    let censored = apply_administrative_censoring(&raw, inputs.target_events, inputs.downweight);
    Ok(SimulatedTrial {
        censored,
        raw_events,
        raw_subjects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn derive_reference_design() {
        let d = derive_hybrid_design(&DesignInputs::default()).unwrap();
        assert_eq!(d.n_control_hybrid, 225);
        assert_eq!(d.n_external, 375);
        assert_eq!(d.n_experimental + d.n_control_hybrid, 675);
        assert!((d.rate_experimental - 22.666_667).abs() < 1e-5);
        assert!((d.rate_control - 11.333_333).abs() < 1e-5);
        assert!((d.enrollment_months - 19.852_941).abs() < 1e-5);
        assert!((d.rate_external - 18.888_889).abs() < 1e-5);
        assert!((d.rate_experimental + d.rate_control - 34.0).abs() < 1e-12);
    }

    #[test]
    fn no_borrowing_design() {
        let inputs = DesignInputs {
            randomization_ratio: 1.0,
            downweight: 1.0,
            ..DesignInputs::default()
        };
        let d = derive_hybrid_design(&inputs).unwrap();
        assert_eq!(d.n_control_hybrid, 450);
        assert_eq!(d.n_external, 0);
        assert_eq!(d.rate_experimental, 17.0);
        assert_eq!(d.rate_control, 17.0);
        assert!(generate_accrual(&d).external.is_empty());
    }

    #[test]
    fn infeasible_design() {
        let inputs = DesignInputs {
            randomization_ratio: 0.5,
            ..DesignInputs::default()
        };
        assert!(matches!(
            derive_hybrid_design(&inputs),
            Err(Error::InfeasibleDesign(_))
        ));
    }

    #[test]
    fn accrual_times() {
        let u = linear_accrual(3, 22.667);
        let want = [0.044_12, 0.088_24, 0.132_35];
        for (a, b) in u.iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        let d = derive_hybrid_design(&DesignInputs::default()).unwrap();
        let acc = generate_accrual(&d);
        let last = |v: &[f64]| *v.last().unwrap();
        assert!((last(&acc.control) - d.enrollment_months).abs() < 1e-9);
        assert!((last(&acc.experimental) - d.enrollment_months).abs() < 1e-9);
        assert!((last(&acc.external) - d.enrollment_months).abs() < 1e-9);
    }

    #[test]
    fn p_lost_out_of_range() {
        let inputs = DesignInputs {
            p_lost: 1.0,
            ..DesignInputs::default()
        };
        let design = derive_hybrid_design(&DesignInputs::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(simulate_outcomes(&design, &inputs, &mut rng).is_err());
    }

    #[test]
    fn no_loss_means_every_subject_has_an_event() {
        let inputs = DesignInputs {
            p_lost: 0.0,
            ..DesignInputs::default()
        };
        let design = derive_hybrid_design(&inputs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = simulate_outcomes(&design, &inputs, &mut rng).unwrap();
        assert!(data.subjects.iter().all(|s| s.event));
    }

    fn trial(u: f64, y: f64, event: bool) -> Subject {
        Subject::new(Arm::TrialControl, u, y, event)
    }

    #[test]
    fn cutoff_at_crossing_event() {
        let data = SurvivalDataset::new(
            "t",
            vec![trial(1.0, 4.0, true), trial(2.0, 7.0, true), trial(6.0, 1.0, false)],
        );
        let c = apply_administrative_censoring(&data, 1.0, 0.6);
        assert_eq!(c.cutoff, Some(5.0));
        assert!(!c.under_target);
        let s = &c.dataset.subjects;
        assert_eq!(s.len(), 2, "subject accrued at 6 enrolled after the cutoff");
        assert!(s[0].event);
        assert!(!s[1].event);
        assert_eq!(s[1].observed_time, 3.0);
        assert_eq!(c.dropped, 1);
    }

    #[test]
    fn downweighted_external_events() {
        let ext = |u: f64, y: f64| Subject::new(Arm::ExternalControl, u, y, true);
        let data = SurvivalDataset::new("t", vec![ext(0.0, 2.0), ext(0.0, 3.0), ext(0.0, 4.0)]);
        let c = apply_administrative_censoring(&data, 1.0, 0.6);
        assert_eq!(c.cutoff, Some(3.0));
        assert!((c.weighted_events - 1.2).abs() < 1e-12);
    }

    #[test]
    fn unreachable_target_is_flagged() {
        let data = SurvivalDataset::new(
            "t",
            (0..10).map(|i| trial(0.0, 1.0 + i as f64, true)).collect(),
        );
        let c = apply_administrative_censoring(&data, 655.0, 0.6);
        assert!(c.under_target);
        assert_eq!(c.cutoff, None);
        assert_eq!(c.dataset, data);
    }

    #[test]
    fn simulation_is_reproducible() {
        let inputs = DesignInputs::default();
        let design = derive_hybrid_design(&inputs).unwrap();
        let a = simulate_trial(&design, &inputs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = simulate_trial(&design, &inputs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset().digest(), b.dataset().digest());
    }
}
