//! CSV tables and run manifests.
//!
//! Numbers are written with six significant digits and a decimal point
//! regardless of locale; undefined values are written as `NA`.

use std::path::{Path, PathBuf};

use borrowsim::planner::{ExpectedEvents, PlannerOutputs};
use borrowsim::runner::{CalibrationReport, CellResult, OCGrid};
use serde::Serialize;

use crate::CliError;

/// Six significant digits in positional notation, or scientific notation
/// outside `[1e-5, 1e15)`.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return "NA".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    // Round through scientific notation so carries update the exponent.
    let sci = format!("{x:.5e}");
    let (_, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..15).contains(&exp) {
        return sci;
    }
    let rounded: f64 = sci.parse().expect("round trip");
    let decimals = (5 - exp).max(0) as usize;
    format!("{rounded:.decimals$}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), fmt_num)
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let runtime = |e: csv::Error| CliError::Runtime(format!("CSV encoding failed: {e}"));
    w.write_record(header).map_err(runtime)?;
    for r in rows {
        w.write_record(r).map_err(runtime)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(format!("CSV encoding failed: {e}")))
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub const OC_GRID_COLUMNS: [&str; 12] = [
    "hr_exp",
    "hr_rwd",
    "method",
    "tuning_value",
    "n_reps",
    "rejection_rate",
    "rejection_mc_se",
    "mse",
    "bias",
    "mean_eff_events",
    "sd_eff_events",
    "n_excluded",
];

pub fn oc_grid_csv(grid: &OCGrid) -> Result<Vec<u8>, CliError> {
    let rows: Vec<Vec<String>> = grid
        .rows
        .iter()
        .map(|r| {
            vec![
                fmt_num(r.hr_experimental),
                fmt_num(r.hr_external),
                r.method.to_string(),
                fmt_opt(r.tuning_value),
                r.oc.n_replicates.to_string(),
                fmt_num(r.oc.rejection_rate),
                fmt_num(r.oc.rejection_mc_se),
                fmt_num(r.oc.mse_log_hr),
                fmt_num(r.oc.bias_log_hr),
                fmt_num(r.oc.mean_effective_events),
                fmt_opt(r.oc.sd_effective_events),
                r.oc.n_excluded.to_string(),
            ]
        })
        .collect();
    csv_bytes(&strings(&OC_GRID_COLUMNS), &rows)
}

/// Long format for plotting: x = hr_rwd, panel = hr_exp, series = method.
pub fn oc_long_csv(grid: &OCGrid) -> Result<Vec<u8>, CliError> {
    let mut rows = Vec::new();
    for r in &grid.rows {
        let metrics: [(&str, Option<f64>); 7] = [
            ("rejection_rate", Some(r.oc.rejection_rate)),
            ("rejection_mc_se", Some(r.oc.rejection_mc_se)),
            ("mse", Some(r.oc.mse_log_hr)),
            ("bias", Some(r.oc.bias_log_hr)),
            ("mean_eff_events", Some(r.oc.mean_effective_events)),
            ("sd_eff_events", r.oc.sd_effective_events),
            ("eff_events_mc_se", r.oc.effective_events_mc_se),
        ];
        for (name, value) in metrics {
            rows.push(vec![
                fmt_num(r.hr_external),
                fmt_num(r.hr_experimental),
                r.method.to_string(),
                name.to_string(),
                fmt_opt(value),
            ]);
        }
    }
    csv_bytes(&strings(&["hr_rwd", "hr_exp", "method", "metric", "value"]), &rows)
}

pub fn calibration_csv(report: &CalibrationReport) -> Result<Vec<u8>, CliError> {
    let type1_hrs: Vec<f64> = report
        .candidates
        .first()
        .map(|c| c.type1.iter().map(|t| t.0).collect())
        .unwrap_or_default();
    let mut header = strings(&[
        "method",
        "value",
        "power",
        "power_mc_se",
        "max_type1",
        "max_type1_hr_rwd",
    ]);
    header.extend(type1_hrs.iter().map(|h| format!("type1_hr_rwd_{}", fmt_num(*h))));
    header.extend(strings(&["meets_target", "selected"]));
    let rows: Vec<Vec<String>> = report
        .candidates
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mut row = vec![
                report.method.to_string(),
                fmt_num(c.value),
                fmt_num(c.power),
                fmt_num(c.power_mc_se),
                fmt_num(c.max_type1),
                fmt_num(c.max_type1_hr_external),
            ];
            row.extend(c.type1.iter().map(|t| fmt_num(t.1)));
            row.push(c.meets_target.to_string());
            row.push((k == report.selected).to_string());
            row
        })
        .collect();
    csv_bytes(&header, &rows)
}

/// Original and hybrid plans side by side, with `original − hybrid`.
pub fn plan_report_csv(
    original: &PlannerOutputs,
    original_events: ExpectedEvents,
    original_external_rate: f64,
    hybrid: &PlannerOutputs,
    hybrid_events: ExpectedEvents,
    hybrid_external_rate: f64,
) -> Result<Vec<u8>, CliError> {
    let quantity = |name: &str, o: f64, h: f64| vec![name.to_string(), fmt_num(o), fmt_num(h), fmt_num(o - h)];
    let count = |name: &str, o: usize, h: usize| {
        vec![
            name.to_string(),
            o.to_string(),
            h.to_string(),
            (o as i64 - h as i64).to_string(),
        ]
    };
    let cutoff = |p: &PlannerOutputs| p.cutoff_months.unwrap_or(f64::NAN);
    let rows = vec![
        quantity("randomization_ratio", original.final_ratio, hybrid.final_ratio),
        quantity("rate_experimental", original.rate_experimental, hybrid.rate_experimental),
        quantity("rate_trial_control", original.rate_control, hybrid.rate_control),
        quantity("rate_external", original_external_rate, hybrid_external_rate),
        count("n_experimental", original.n_experimental, hybrid.n_experimental),
        count("n_trial_control", original.n_trial_control, hybrid.n_trial_control),
        count("n_randomized", original.n_randomized(), hybrid.n_randomized()),
        count(
            "n_external_historical",
            original.n_external_historical,
            hybrid.n_external_historical,
        ),
        count(
            "n_external_concurrent",
            original.n_external_concurrent,
            hybrid.n_external_concurrent,
        ),
        quantity("enrollment_months", original.enrollment_months, hybrid.enrollment_months),
        quantity("cutoff_months", cutoff(original), cutoff(hybrid)),
        quantity(
            "events_experimental_at_cutoff",
            original_events.experimental,
            hybrid_events.experimental,
        ),
        quantity(
            "events_trial_control_at_cutoff",
            original_events.trial_control,
            hybrid_events.trial_control,
        ),
        quantity("events_external_at_cutoff", original_events.external, hybrid_events.external),
        quantity("events_control_at_cutoff", original_events.control(), hybrid_events.control()),
        quantity("events_total_at_cutoff", original_events.total(), hybrid_events.total()),
    ];
    csv_bytes(&strings(&["quantity", "original", "hybrid", "original_minus_hybrid"]), &rows)
}

pub fn event_curves_csv(curve: &[(f64, ExpectedEvents)]) -> Result<Vec<u8>, CliError> {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|(t, e)| {
            vec![
                fmt_num(*t),
                fmt_num(e.experimental),
                fmt_num(e.trial_control),
                fmt_num(e.external),
            ]
        })
        .collect();
    csv_bytes(
        &strings(&[
            "t_months",
            "e_events_experimental",
            "e_events_trial_control",
            "e_events_external",
        ]),
        &rows,
    )
}

/// Per-scenario exclusions and Monte Carlo standard errors.
#[derive(Debug, Serialize)]
pub struct ScenarioSummary {
    pub hr_exp: f64,
    pub hr_rwd: f64,
    pub method: String,
    pub n_reps: usize,
    pub n_excluded: usize,
    /// Bayesian fits with split-R̂ above 1.1.
    pub n_unreliable: usize,
    pub rejection_mc_se: Option<f64>,
    pub eff_events_mc_se: Option<f64>,
}

pub fn scenario_summaries(cells: &[CellResult]) -> Vec<ScenarioSummary> {
    cells
        .iter()
        .flat_map(|c| {
            c.oc.iter().map(move |oc| ScenarioSummary {
                hr_exp: c.hr_experimental,
                hr_rwd: c.hr_external,
                method: oc.method.to_string(),
                n_reps: oc.n_replicates,
                n_excluded: oc.n_excluded,
                n_unreliable: c.unreliable_count(oc.method),
                rejection_mc_se: Some(oc.rejection_mc_se).filter(|v| v.is_finite()),
                eff_events_mc_se: oc.effective_events_mc_se,
            })
        })
        .collect()
}

/// Generator checks over all replicates of a run.
#[derive(Debug, Serialize)]
pub struct AuditSummary {
    pub replicates: usize,
    pub under_target: usize,
    pub min_event_fraction: Option<f64>,
    pub max_event_fraction: Option<f64>,
    pub max_weighted_event_excess: Option<f64>,
}

pub fn audit_summary(cells: &[CellResult], target_events: f64) -> AuditSummary {
    let audits: Vec<_> = cells.iter().flat_map(|c| c.replicates.iter().map(|r| &r.audit)).collect();
    let fold = |f: fn(f64, f64) -> f64, xs: &mut dyn Iterator<Item = f64>| xs.reduce(f);
    AuditSummary {
        replicates: audits.len(),
        under_target: audits.iter().filter(|a| a.under_target).count(),
        min_event_fraction: fold(f64::min, &mut audits.iter().map(|a| a.raw_event_fraction)),
        max_event_fraction: fold(f64::max, &mut audits.iter().map(|a| a.raw_event_fraction)),
        max_weighted_event_excess: fold(
            f64::max,
            &mut audits
                .iter()
                .filter(|a| !a.under_target)
                .map(|a| a.weighted_events - target_events),
        ),
    }
}

/// Write outputs only once every file is encoded, so a failed run leaves no
/// partial tables.
pub fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    files
        .iter()
        .map(|(name, bytes)| {
            let path = dir.join(name);
            let tmp = dir.join(format!(".{name}.partial"));
            std::fs::write(&tmp, bytes)
                .and_then(|()| std::fs::rename(&tmp, &path))
                .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
            Ok(path)
        })
        .collect()
}

pub fn manifest_bytes(manifest: &serde_json::Value) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}
