use borrowsim::survival::{
    exp_cdf, fit_weighted_exponential, logrank, logrank_test, Arm, Contrast, Subject,
    SurvivalDataset,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

/// Maximize Σ wᵢ[δᵢ(β₀ + β₁xᵢ) − exp(β₀ + β₁xᵢ) yᵢ] by damped Newton from the
/// origin, without using the closed form.
fn newton_mle(obs: &[(f64, bool, f64, bool)]) -> (f64, f64) {
    let ll = |b: [f64; 2]| -> f64 {
        obs.iter()
            .map(|&(y, d, w, x)| {
                let eta = b[0] + if x { b[1] } else { 0.0 };
                w * (if d { eta } else { 0.0 } - eta.exp() * y)
            })
            .sum()
    };
    let mut b: [f64; 2] = [0.0, 0.0];
    for _ in 0..500 {
        let (mut g, mut h) = ([0.0; 2], [[0.0; 2]; 2]);
        for &(y, d, w, x) in obs {
            let xi = if x { 1.0 } else { 0.0 };
            let lam = (b[0] + b[1] * xi).exp();
            let r = w * (if d { 1.0 } else { 0.0 } - lam * y);
            g[0] += r;
            g[1] += r * xi;
            let c = w * lam * y;
            h[0][0] += c;
            h[0][1] += c * xi;
            h[1][1] += c * xi * xi;
        }
        h[1][0] = h[0][1];
        if g[0].abs().max(g[1].abs()) < 1e-13 {
            break;
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let step = [
            (h[1][1] * g[0] - h[0][1] * g[1]) / det,
            (h[0][0] * g[1] - h[1][0] * g[0]) / det,
        ];
        let base = ll(b);
        let mut t = 1.0;
        loop {
            let cand = [b[0] + t * step[0], b[1] + t * step[1]];
            if ll(cand) >= base - 1e-12 * base.abs() || t < 1e-12 {
                b = cand;
                break;
            }
            t *= 0.5;
        }
    }
    (b[0], b[1])
}

fn observation() -> impl Strategy<Value = (f64, bool, f64, bool)> {
    (0.05f64..20.0, any::<bool>(), 0.05f64..=1.0, any::<bool>())
}

fn to_dataset(obs: &[(f64, bool, f64, bool)]) -> SurvivalDataset {
    let subjects = obs
        .iter()
        .map(|&(y, d, w, x)| {
            let arm = if x { Arm::TrialExperimental } else { Arm::TrialControl };
            Subject {
                weight: w,
                ..Subject::new(arm, 0.0, y, d)
            }
        })
        .collect();
    SurvivalDataset::new("prop", subjects)
}

fn has_events_in_both(obs: &[(f64, bool, f64, bool)]) -> bool {
    obs.iter().any(|o| o.1 && !o.3) && obs.iter().any(|o| o.1 && o.3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn closed_form_matches_numerical_mle(
        obs in prop::collection::vec(observation(), 2..=20)
            .prop_filter("events in both groups", |o| has_events_in_both(o))
    ) {
        let fit = fit_weighted_exponential(&to_dataset(&obs), Contrast::TRIAL_ONLY).unwrap();
        let (b0, b1) = newton_mle(&obs);
        prop_assert!((fit.log_baseline_hazard - b0).abs() < 1e-8);
        prop_assert!((fit.log_hazard_ratio - b1).abs() < 1e-8);
    }

    #[test]
    fn time_rescaling(
        obs in prop::collection::vec(observation(), 2..=20)
            .prop_filter("events in both groups", |o| has_events_in_both(o)),
        k in 0.01f64..100.0,
    ) {
        let d = to_dataset(&obs);
        let a = fit_weighted_exponential(&d, Contrast::TRIAL_ONLY).unwrap();
        let b = fit_weighted_exponential(&d.rescale_time(k), Contrast::TRIAL_ONLY).unwrap();
        prop_assert!((b.log_baseline_hazard - (a.log_baseline_hazard - k.ln())).abs() < 1e-10);
        prop_assert!((b.log_hazard_ratio - a.log_hazard_ratio).abs() < 1e-10);
        prop_assert!((b.se_log_hr - a.se_log_hr).abs() < 1e-12);
    }

    #[test]
    fn exp_cdf_monotone(t1 in 0.0f64..100.0, dt in 0.0f64..100.0, l1 in 1e-4f64..2.0, dl in 0.0f64..2.0) {
        let f = exp_cdf(t1, l1).unwrap();
        prop_assert!(exp_cdf(t1 + dt, l1).unwrap() >= f);
        prop_assert!(exp_cdf(t1, l1 + dl).unwrap() >= f);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn logrank_is_order_invariant(
        g0 in prop::collection::vec((0.1f64..10.0, any::<bool>()), 1..15),
        g1 in prop::collection::vec((0.1f64..10.0, any::<bool>()), 1..15),
    ) {
        prop_assume!(g0.iter().chain(&g1).any(|o| o.1));
        let a = logrank(&g0, &g1);
        let mut r0 = g0.clone();
        r0.reverse();
        let mut r1 = g1.clone();
        r1.rotate_left(g1.len() / 2);
        let b = logrank(&r0, &r1);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert!((a.statistic - b.statistic).abs() < 1e-9),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }
}

#[test]
fn exp_cdf_examples() {
    assert_eq!(exp_cdf(0.0, 0.043).unwrap(), 0.0);
    assert!((exp_cdf(16.0, 2f64.ln() / 16.0).unwrap() - 0.5).abs() < 1e-15);
    assert!((exp_cdf(1.0, 0.043).unwrap() - 0.042_089).abs() < 5e-7);
    assert!(exp_cdf(1.0, 0.0).is_err());
    assert!(exp_cdf(1.0, f64::NAN).is_err());
}

#[test]
fn logrank_hand_example() {
    let lr = logrank(&[(1.0, true)], &[(2.0, true)]).unwrap();
    assert!((lr.statistic - 1.0).abs() < 1e-12);
    assert!((lr.p_value - 0.317_310_507_862_914_1).abs() < 1e-6);
}

#[test]
fn logrank_null_is_calibrated() {
    // Both groups Exp(0.05) with Exp(0.01) censoring, n = 50 each.
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut draw = |n: usize| -> Vec<(f64, bool)> {
        (0..n)
            .map(|_| {
                let t = rng.sample::<f64, _>(Exp1) / 0.05;
                let c = rng.sample::<f64, _>(Exp1) / 0.01;
                (t.min(c), t <= c)
            })
            .collect()
    };
    let sims = 2000;
    let mut rejections = 0;
    for _ in 0..sims {
        let g0 = draw(50);
        let g1 = draw(50);
        if logrank(&g0, &g1).unwrap().p_value <= 0.15 {
            rejections += 1;
        }
    }
    let rate = f64::from(rejections) / f64::from(sims);
    assert!((rate - 0.15).abs() <= 0.03, "rejection rate {rate}");
}

#[test]
fn logrank_of_identical_groups() {
    let g = SurvivalDataset::new(
        "g",
        vec![
            Subject::new(Arm::TrialControl, 0.0, 1.0, true),
            Subject::new(Arm::TrialControl, 0.0, 2.5, false),
            Subject::new(Arm::TrialControl, 0.0, 3.0, true),
        ],
    );
    let lr = logrank_test(&g, &g).unwrap();
    assert_eq!(lr.statistic, 0.0);
    assert_eq!(lr.p_value, 1.0);
}
