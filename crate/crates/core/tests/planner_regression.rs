use std::time::Instant;

use borrowsim::planner::{
    event_curves, plan, project_events, solve_cutoff, summarize_benefits,
    update_design_for_external, PlannerInputs, CUTOFF_TOLERANCE,
};
use borrowsim::Error;
use proptest::prelude::*;

#[test]
fn reference_plans_reproduce_the_design_table() {
    let start = Instant::now();
    let hybrid_inputs = PlannerInputs::default();
    let original_inputs = hybrid_inputs.without_external();
    let hybrid = plan(&hybrid_inputs).unwrap();
    let original = plan(&original_inputs).unwrap();
    let report = summarize_benefits(&original, &original_inputs, &hybrid, &hybrid_inputs);
    assert!(start.elapsed().as_secs_f64() < 1.0);

    assert!((hybrid.final_ratio - 2.0).abs() <= 0.05, "{}", hybrid.final_ratio);
    assert!((hybrid.enrollment_months - 19.9).abs() <= 0.5);
    assert!((hybrid.cutoff_months.unwrap() - 49.0).abs() <= 1.0);
    assert!((original.enrollment_months - 26.5).abs() <= 0.5);
    assert!((original.cutoff_months.unwrap() - 53.0).abs() <= 1.0);
    assert!((original.final_ratio - 1.0).abs() < 1e-12);
    assert_eq!(report.fewer_randomized, 225);
    assert_eq!(hybrid.n_randomized(), 675);
    assert_eq!(hybrid.n_external_concurrent, 225);

    let e = report.hybrid_events_at_cutoff.unwrap();
    assert!((e.experimental - 310.0).abs() <= 5.0, "{e:?}");
    assert!((e.control() - 345.0).abs() <= 5.0, "{e:?}");
    assert!((e.trial_control - 173.0).abs() <= 5.0, "{e:?}");
    assert!((e.external - 172.0).abs() <= 5.0, "{e:?}");
    let o = report.original_events_at_cutoff.unwrap();
    assert!((o.experimental - 310.0).abs() <= 5.0, "{o:?}");
    assert!((o.control() - 345.0).abs() <= 5.0, "{o:?}");
    assert_eq!(o.external, 0.0);
}

/// Σᵢ F(t − i/s) over arrivals i/s ≤ t, by the geometric series.
fn closed_form_events(n: usize, rate: f64, hazard: f64, t: f64, retention: f64) -> f64 {
    let k = ((t * rate).floor() as usize).min(n);
    let q = (hazard / rate).exp();
    let tail = (-hazard * t).exp() * q * (q.powi(k as i32) - 1.0) / (q - 1.0);
    retention * (k as f64 - tail)
}

#[test]
fn projection_without_external_matches_closed_form() {
    let inputs = PlannerInputs::default().without_external();
    let p = update_design_for_external(&inputs).unwrap();
    for t in [0.5, 3.0, 13.7, 26.4, 26.5, 40.0, 53.0, 120.0] {
        let e = project_events(&p, &inputs, t);
        let exp = closed_form_events(450, 17.0, 0.043 * 0.78, t, 0.95);
        let ctl = closed_form_events(450, 17.0, 0.043, t, 0.95);
        assert!((e.experimental - exp).abs() < 1e-9 * exp.max(1.0), "t = {t}");
        assert!((e.trial_control - ctl).abs() < 1e-9 * ctl.max(1.0), "t = {t}");
        assert_eq!(e.external, 0.0);
    }
}

#[test]
fn cutoff_bisection_brackets_the_target() {
    for inputs in [PlannerInputs::default(), PlannerInputs::default().without_external()] {
        let p = update_design_for_external(&inputs).unwrap();
        let t = solve_cutoff(&p, &inputs).unwrap();
        let total = |t: f64| project_events(&p, &inputs, t).total();
        assert!(total(t) >= inputs.target_events);
        assert!(total(t - CUTOFF_TOLERANCE) < inputs.target_events);
    }
}

#[test]
fn infeasible_plans_are_reported() {
    let too_many_events = PlannerInputs {
        target_events: 900.0,
        ..PlannerInputs::default()
    };
    assert!(matches!(plan(&too_many_events), Err(Error::InfeasiblePlan(_))));

    let history_covers_controls = PlannerInputs {
        historical_months: 40.0,
        ..PlannerInputs::default()
    };
    assert!(matches!(plan(&history_covers_controls), Err(Error::InfeasiblePlan(_))));

    let external_too_fast = PlannerInputs {
        external_rate: 40.0,
        ..PlannerInputs::default()
    };
    assert!(matches!(plan(&external_too_fast), Err(Error::InfeasiblePlan(_))));

    let bad = PlannerInputs {
        p_lost: 1.0,
        ..PlannerInputs::default()
    };
    assert!(matches!(plan(&bad), Err(Error::Domain(_))));
}

#[test]
fn identical_plans_show_no_benefit() {
    let inputs = PlannerInputs::default();
    let p = plan(&inputs).unwrap();
    let report = summarize_benefits(&p, &inputs, &p, &inputs);
    assert_eq!(report.enrollment_saving_months, 0.0);
    assert_eq!(report.cutoff_saving_months, Some(0.0));
    assert_eq!(report.fewer_randomized, 0);
    assert_eq!(report.original_events_at_cutoff, report.hybrid_events_at_cutoff);
}

fn planner_inputs() -> impl Strategy<Value = PlannerInputs> {
    (100u32..600, 100u32..600, 10.0f64..60.0, 0.0f64..8.0, 0.0f64..6.0, 0.01f64..0.1, 0.5f64..1.0, 0.0f64..0.2)
        .prop_map(|(n_e, n_c, s, s_rwd, months, hazard, hr, p)| PlannerInputs {
            n_experimental: n_e,
            n_control: n_c,
            accrual_rate: s,
            external_rate: s_rwd,
            historical_months: months,
            baseline_hazard: hazard,
            hr_experimental: hr,
            p_lost: p,
            target_events: 0.5 * f64::from(n_e + n_c),
            ..PlannerInputs::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn curves_are_monotone_and_bounded(inputs in planner_inputs()) {
        let Ok(p) = update_design_for_external(&inputs) else {
            return Ok(());
        };
        let times: Vec<f64> = (0..=80).map(|i| f64::from(i) * 1.5).collect();
        let curves = event_curves(&p, &inputs, &times);
        let keep = 1.0 - inputs.p_lost;
        let caps = [
            keep * p.accrual.experimental.len() as f64,
            keep * p.accrual.control.len() as f64,
            keep * p.accrual.external.len() as f64,
        ];
        let mut prev = [0.0; 3];
        for (_, e) in curves {
            let now = [e.experimental, e.trial_control, e.external];
            for k in 0..3 {
                prop_assert!(now[k] >= prev[k] - 1e-9);
                prop_assert!(now[k] <= caps[k] + 1e-9);
                prop_assert!(now[k] >= 0.0);
            }
            prev = now;
        }
    }

    #[test]
    fn controls_are_fully_accounted_for(inputs in planner_inputs()) {
        let Ok(p) = update_design_for_external(&inputs) else {
            return Ok(());
        };
        prop_assert_eq!(
            p.n_trial_control + p.n_external_historical + p.n_external_concurrent,
            inputs.n_control as usize
        );
        prop_assert!((p.rate_experimental + p.rate_control - inputs.accrual_rate).abs() < 1e-9);
        prop_assert!(p.accrual.external[..p.n_external_historical].iter().all(|&u| u <= 0.0));
        prop_assert!(p.accrual.external[p.n_external_historical..].iter().all(|&u| u > 0.0));
        if inputs.external_rate == 0.0 && inputs.historical_months == 0.0 {
            prop_assert!((p.final_ratio - f64::from(inputs.n_experimental) / f64::from(inputs.n_control)).abs() < 1e-9);
        }
    }

    #[test]
    fn cutoff_meets_target_within_tolerance(inputs in planner_inputs()) {
        let Ok(p) = plan(&inputs) else {
            return Ok(());
        };
        let t = p.cutoff_months.unwrap();
        let total = |t: f64| project_events(&p, &inputs, t).total();
        prop_assert!(total(t) >= inputs.target_events);
        prop_assert!(total(t - CUTOFF_TOLERANCE) < inputs.target_events);
    }
}
