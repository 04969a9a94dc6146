//! Scenario grids, replicate execution and tuning calibration.
//!
//! Every (cell, replicate) pair owns disjoint random streams derived from the
//! master seed and its grid coordinates, so results are identical for any
//! number of worker threads. Within a replicate all methods analyze the same
//! dataset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::borrowing::{analyze, AnalysisResult, Method, TuningParameters};
use crate::datagen::{derive_hybrid_design, simulate_trial, DesignInputs};
use crate::error::{domain, Result};
use crate::mcmc::SamplerConfig;
use crate::metrics::{aggregate, OperatingCharacteristics};
use crate::seed::{StreamKey, StreamTag};

/// Hazard ratios of the experimental arm in the full grid.
pub const PAPER_HR_EXPERIMENTAL: [f64; 4] = [0.70, 0.78, 0.85, 1.00];

/// Residual-bias hazard ratios 0.5, 0.6, ..., 2.0.
pub fn paper_hr_external() -> Vec<f64> {
    (5..=20).map(|k| f64::from(k) / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Design inputs; their hazard ratios are replaced by each grid cell's.
    pub design: DesignInputs,
    pub tuning: TuningParameters,
    pub methods: Vec<Method>,
    pub n_replicates: u32,
    pub master_seed: u64,
    /// One-sided decision level.
    pub alpha: f64,
    pub sampler: SamplerConfig,
    pub hr_experimental: Vec<f64>,
    pub hr_external: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Preset::Paper.scenario()
    }
}

impl ScenarioConfig {
    /// Check every field and normalize the method list to enum order.
    pub fn validate(&mut self) -> Result<()> {
        if self.n_replicates == 0 {
            return domain("n_replicates must be at least 1");
        }
        if self.methods.is_empty() {
            return domain("at least one method is required");
        }
        self.methods.sort();
        self.methods.dedup();
        for (name, grid) in [
            ("hr_experimental", &self.hr_experimental),
            ("hr_external", &self.hr_external),
        ] {
            if grid.is_empty() {
                return domain(format!("{name} grid is empty"));
            }
            if grid.len() >= 1 << 12 {
                return domain(format!("{name} grid has too many values"));
            }
            if grid.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
                return domain(format!("{name} values must be positive"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return domain("alpha must lie in (0, 1)");
        }
        self.tuning.validate()?;
        self.sampler.validate()?;
        self.design.validate()?;
        derive_hybrid_design(&self.design)?;
        Ok(())
    }

    fn cell_design(&self, cell: CellIndex) -> DesignInputs {
        self.design
            .with_hazard_ratios(self.hr_experimental[cell.0], self.hr_external[cell.1])
    }

    /// All cells, experimental hazard ratio major.
    pub fn all_cells(&self) -> Vec<CellIndex> {
        (0..self.hr_experimental.len())
            .flat_map(|i| (0..self.hr_external.len()).map(move |j| CellIndex(i, j)))
            .collect()
    }

    /// Index of a cell given its hazard ratios.
    pub fn cell(&self, hr_experimental: f64, hr_external: f64) -> Option<CellIndex> {
        let i = self.hr_experimental.iter().position(|&h| h == hr_experimental)?;
        let j = self.hr_external.iter().position(|&h| h == hr_external)?;
        Some(CellIndex(i, j))
    }
}

/// Position of a cell in the (hr_experimental, hr_external) grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex(pub usize, pub usize);

/// The two documented run scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Reduced grid, 500 replicates, 4 chains × 2500 retained draws.
    Desk,
    /// Full grid, 1000 replicates, 4 chains × 10000 iterations (5000 burn-in).
    Paper,
}

impl Preset {
    pub fn scenario(self) -> ScenarioConfig {
        let base = ScenarioConfig {
            design: DesignInputs::default(),
            tuning: TuningParameters::default(),
            methods: Method::ALL.to_vec(),
            n_replicates: 1000,
            master_seed: 1,
            alpha: 0.025,
            sampler: SamplerConfig::default(),
            hr_experimental: PAPER_HR_EXPERIMENTAL.to_vec(),
            hr_external: paper_hr_external(),
        };
        match self {
            Preset::Paper => base,
            Preset::Desk => ScenarioConfig {
                n_replicates: 500,
                sampler: SamplerConfig {
                    n_iter: 5000,
                    n_burnin: 2500,
                    ..SamplerConfig::default()
                },
                hr_experimental: vec![0.78, 1.0],
                hr_external: vec![0.6, 1.0, 1.1, 1.2, 1.3, 1.5, 1.8, 2.0],
                ..base
            },
        }
    }
}

/// Generator checks recorded for every replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateAudit {
    /// Event fraction before administrative censoring.
    pub raw_event_fraction: f64,
    /// Weighted event count after administrative censoring.
    pub weighted_events: f64,
    pub cutoff: Option<f64>,
    pub under_target: bool,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub replicate: u32,
    pub dataset_digest: u64,
    pub audit: ReplicateAudit,
    /// One outcome per configured method, in method order.
    pub outcomes: Vec<Result<AnalysisResult>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub index: CellIndex,
    pub hr_experimental: f64,
    pub hr_external: f64,
    pub methods: Vec<Method>,
    pub replicates: Vec<ReplicateRecord>,
    /// One row per method, in method order.
    pub oc: Vec<OperatingCharacteristics>,
}

impl CellResult {
    pub fn oc_for(&self, method: Method) -> Option<&OperatingCharacteristics> {
        self.oc.iter().find(|o| o.method == method)
    }

    /// Successful results of one method across replicates.
    pub fn results_for(&self, method: Method) -> impl Iterator<Item = &AnalysisResult> + '_ {
        let k = self.methods.iter().position(|&m| m == method);
        self.replicates
            .iter()
            .filter_map(move |r| k.and_then(|k| r.outcomes[k].as_ref().ok()))
    }

    /// Results flagged unreliable by their sampler diagnostics.
    pub fn unreliable_count(&self, method: Method) -> usize {
        self.results_for(method)
            .filter(|r| r.diagnostics.as_ref().is_some_and(|d| d.unreliable))
            .count()
    }
}

fn stream(config: &ScenarioConfig, cell: CellIndex, replicate: u32, tag: StreamTag) -> StreamKey {
    StreamKey {
        master_seed: config.master_seed,
        hr_exp_index: cell.0 as u16,
        hr_rwd_index: cell.1 as u16,
        replicate,
        tag,
    }
}

fn run_replicate(config: &ScenarioConfig, cell: CellIndex, replicate: u32) -> Result<ReplicateRecord> {
    let inputs = config.cell_design(cell);
    let design = derive_hybrid_design(&inputs)?;
    let mut rng = stream(config, cell, replicate, StreamTag::Data).rng();
    let trial = simulate_trial(&design, &inputs, &mut rng)?;
    let data = trial.dataset();

    let outcomes = config
        .methods
        .iter()
        .map(|&method| {
            let tag = match method {
                Method::Commensurate => StreamTag::Commensurate,
                _ => StreamTag::PowerPrior,
            };
            let sampler = config
                .sampler
                .with_seed(stream(config, cell, replicate, tag).derive_seed());
            analyze(method, data, &config.tuning, config.alpha, &sampler)
        })
        .collect();

    Ok(ReplicateRecord {
        replicate,
        dataset_digest: data.digest(),
        audit: ReplicateAudit {
            raw_event_fraction: trial.raw_event_fraction(),
            weighted_events: trial.censored.weighted_events,
            cutoff: trial.censored.cutoff,
            under_target: trial.censored.under_target,
            dropped: trial.censored.dropped,
        },
        outcomes,
    })
}

/// Aggregate one method's outcomes, counting failed replicates as excluded.
fn cell_oc(method: Method, k: usize, reps: &[ReplicateRecord], true_log_hr: f64) -> OperatingCharacteristics {
    let ok: Vec<AnalysisResult> = reps
        .iter()
        .filter_map(|r| r.outcomes[k].as_ref().ok().cloned())
        .collect();
    let excluded = reps.len() - ok.len();
    aggregate(&ok, true_log_hr, excluded)
        .unwrap_or_else(|_| OperatingCharacteristics::all_excluded(method, excluded))
}

/// Run the given cells. Replicates of all cells share one parallel pool;
/// results come back in the order of `cells`.
pub fn run_cells(config: &ScenarioConfig, cells: &[CellIndex]) -> Result<Vec<CellResult>> {
    let mut config = config.clone();
    config.validate()?;
    for &c in cells {
        if c.0 >= config.hr_experimental.len() || c.1 >= config.hr_external.len() {
            return domain(format!("cell {c:?} is outside the grid"));
        }
        derive_hybrid_design(&config.cell_design(c))?;
    }
    let n = config.n_replicates;
    let jobs: Vec<(usize, u32)> = (0..cells.len())
        .flat_map(|c| (0..n).map(move |r| (c, r)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(c, r)| run_replicate(&config, cells[c], r))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::with_capacity(cells.len());
    for (c, chunk) in records.chunks(n as usize).enumerate() {
        let cell = cells[c];
        let hr_e = config.hr_experimental[cell.0];
        let oc = config
            .methods
            .iter()
            .enumerate()
            .map(|(k, &m)| cell_oc(m, k, chunk, hr_e.ln()))
            .collect();
        out.push(CellResult {
            index: cell,
            hr_experimental: hr_e,
            hr_external: config.hr_external[cell.1],
            methods: config.methods.clone(),
            replicates: chunk.to_vec(),
            oc,
        });
    }
    Ok(out)
}

/// One row of the operating-characteristics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OCRow {
    pub hr_experimental: f64,
    pub hr_external: f64,
    pub method: Method,
    pub tuning_value: Option<f64>,
    pub oc: OperatingCharacteristics,
}

/// Operating characteristics keyed by (hr_experimental, hr_external, method),
/// in grid order then method order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OCGrid {
    pub rows: Vec<OCRow>,
}

impl OCGrid {
    pub fn from_cells(cells: &[CellResult], tuning: &TuningParameters) -> Self {
        let rows = cells
            .iter()
            .flat_map(|c| {
                c.oc.iter().map(move |oc| OCRow {
                    hr_experimental: c.hr_experimental,
                    hr_external: c.hr_external,
                    method: oc.method,
                    tuning_value: tuning.value_for(oc.method),
                    oc: oc.clone(),
                })
            })
            .collect();
        OCGrid { rows }
    }

    pub fn get(&self, hr_experimental: f64, hr_external: f64, method: Method) -> Option<&OCRow> {
        self.rows.iter().find(|r| {
            r.hr_experimental == hr_experimental && r.hr_external == hr_external && r.method == method
        })
    }

    pub fn total_excluded(&self) -> usize {
        self.rows.iter().map(|r| r.oc.n_excluded).sum()
    }
}

/// Run every cell of the configured grid.
pub fn run_grid(config: &ScenarioConfig) -> Result<OCGrid> {
    let cells = run_cells(config, &config.all_cells())?;
    Ok(OCGrid::from_cells(&cells, &config.tuning))
}

/// Grid search over one method's tuning parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    pub method: Method,
    pub grid: Vec<f64>,
    pub target_power: f64,
    /// (hr_experimental, hr_external) at which power is measured.
    pub power_scenario: (f64, f64),
    /// hr_external values at hr_experimental = 1 over which the maximum type I
    /// error is taken.
    pub type1_hr_external: Vec<f64>,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec {
            method: Method::TwoStep,
            grid: vec![8.25],
            target_power: 0.88,
            power_scenario: (0.78, 1.0),
            type1_hr_external: vec![1.0, 1.1, 1.2, 1.3, 1.5, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationCandidate {
    pub value: f64,
    pub power: f64,
    pub power_mc_se: f64,
    pub max_type1: f64,
    /// hr_external at which the maximum type I error occurred.
    pub max_type1_hr_external: f64,
    /// (hr_external, type I error) pairs.
    pub type1: Vec<(f64, f64)>,
    pub meets_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub method: Method,
    pub target_power: f64,
    pub candidates: Vec<CalibrationCandidate>,
    pub selected: usize,
    /// False when no candidate met the power target; `selected` is then the
    /// most powerful candidate.
    pub feasible: bool,
    pub rationale: String,
}

impl CalibrationReport {
    pub fn selected_value(&self) -> f64 {
        self.candidates[self.selected].value
    }
}

/// Estimate power and maximum type I error for each candidate value and pick
/// the one with the smallest maximum type I error among those meeting the
/// power target. Ties go to the candidate that borrows less.
pub fn calibrate_tuning(config: &ScenarioConfig, spec: &CalibrationSpec) -> Result<CalibrationReport> {
    if spec.grid.is_empty() {
        return domain("calibration grid is empty");
    }
    if spec.method == Method::NoBorrow {
        return domain("no_borrow has no tuning parameter");
    }
    if spec.type1_hr_external.is_empty() {
        return domain("at least one type I error scenario is required");
    }
    let (hr_e, hr_x) = spec.power_scenario;
    let mut base = config.clone();
    base.methods = vec![spec.method];
    base.hr_experimental = vec![hr_e];
    if hr_e != 1.0 {
        base.hr_experimental.push(1.0);
    }
    base.hr_external = vec![hr_x];
    for &h in &spec.type1_hr_external {
        if !base.hr_external.contains(&h) {
            base.hr_external.push(h);
        }
    }
    let null_row = base.hr_experimental.len() - 1;
    let mut cells = vec![base.cell(hr_e, hr_x).expect("power cell is in the grid")];
    let type1_cells: Vec<CellIndex> = spec
        .type1_hr_external
        .iter()
        .map(|&h| base.cell(1.0, h).expect("type I cell is in the grid"))
        .collect();
    for &c in &type1_cells {
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    debug_assert!(type1_cells.iter().all(|c| c.0 == null_row));

    let mut candidates = Vec::with_capacity(spec.grid.len());
    for &value in &spec.grid {
        let mut cfg = base.clone();
        cfg.tuning = config.tuning.with_value(spec.method, value)?;
        let results = run_cells(&cfg, &cells)?;
        let rate = |c: CellIndex| {
            let r = results.iter().find(|r| r.index == c).expect("cell was run");
            r.oc[0].clone()
        };
        let power_oc = rate(cells[0]);
        let type1: Vec<(f64, f64)> = type1_cells
            .iter()
            .map(|&c| (cfg.hr_external[c.1], rate(c).rejection_rate))
            .collect();
        let (max_h, max_t1) = type1
            .iter()
            .copied()
            .fold((f64::NAN, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        candidates.push(CalibrationCandidate {
            value,
            power: power_oc.rejection_rate,
            power_mc_se: power_oc.rejection_mc_se,
            max_type1: max_t1,
            max_type1_hr_external: max_h,
            type1,
            meets_target: power_oc.rejection_rate >= spec.target_power,
        });
    }

    let less_borrowing_first = config.tuning.larger_borrows_less(spec.method);
    let borrows_less = |a: &CalibrationCandidate, b: &CalibrationCandidate| {
        if less_borrowing_first {
            a.value > b.value
        } else {
            a.value < b.value
        }
    };
    let feasible = candidates.iter().any(|c| c.meets_target);
    let mut best: Option<usize> = None;
    for (k, c) in candidates.iter().enumerate() {
        if feasible && !c.meets_target {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &candidates[b];
                if feasible {
                    c.max_type1 < cur.max_type1
                        || (c.max_type1 == cur.max_type1 && borrows_less(c, cur))
                } else {
                    c.power > cur.power
                        || (c.power == cur.power && c.max_type1 < cur.max_type1)
                }
            }
        };
        if better {
            best = Some(k);
        }
    }
    let selected = best.expect("grid is nonempty");
    let chosen = &candidates[selected];
    let rationale = if feasible {
        format!(
            "{} = {} has the smallest maximum type I error ({:.4} at hr_external {}) \
             among candidates with power >= {}",
            spec.method, chosen.value, chosen.max_type1, chosen.max_type1_hr_external, spec.target_power
        )
    } else {
        format!(
            "no candidate reached power {}; {} = {} has the highest power ({:.4})",
            spec.target_power, spec.method, chosen.value, chosen.power
        )
    };
    Ok(CalibrationReport {
        method: spec.method,
        target_power: spec.target_power,
        candidates,
        selected,
        feasible,
        rationale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            n_replicates: 8,
            methods: vec![Method::TwoStep, Method::NoBorrow, Method::TestThenPool],
            hr_experimental: vec![0.78, 1.0],
            hr_external: vec![1.0, 1.5],
            master_seed: 3,
            ..Preset::Desk.scenario()
        }
    }

    #[test]
    fn grid_shape_and_order() {
        let grid = run_grid(&small()).unwrap();
        assert_eq!(grid.rows.len(), 2 * 2 * 3);
        assert_eq!(grid.rows[0].method, Method::NoBorrow);
        assert_eq!(grid.rows[1].method, Method::TestThenPool);
        assert_eq!(grid.rows[2].method, Method::TwoStep);
        assert_eq!(grid.rows[3].hr_external, 1.5);
        assert_eq!(grid.rows[6].hr_experimental, 1.0);
        assert_eq!(grid.rows[0].tuning_value, None);
        assert_eq!(grid.rows[2].tuning_value, Some(8.25));
    }

    #[test]
    fn methods_see_the_same_dataset() {
        let cells = run_cells(&small(), &[CellIndex(0, 0)]).unwrap();
        for rep in &cells[0].replicates {
            for r in rep.outcomes.iter().flatten() {
                assert_eq!(r.dataset_digest, rep.dataset_digest);
            }
        }
        let digests: std::collections::HashSet<u64> =
            cells[0].replicates.iter().map(|r| r.dataset_digest).collect();
        assert_eq!(digests.len(), 8);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_grid(&small()).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn single_replicate_grid() {
        let cfg = ScenarioConfig {
            n_replicates: 1,
            ..small()
        };
        let grid = run_grid(&cfg).unwrap();
        assert!(grid.rows.iter().all(|r| r.oc.sd_effective_events.is_none()));
    }

    #[test]
    fn infeasible_design_fails_up_front() {
        let mut cfg = small();
        cfg.design.randomization_ratio = 0.5;
        assert!(matches!(run_grid(&cfg), Err(crate::Error::InfeasibleDesign(_))));
    }

    #[test]
    fn calibration_single_value() {
        let spec = CalibrationSpec {
            method: Method::TwoStep,
            grid: vec![8.25],
            target_power: 0.0,
            ..CalibrationSpec::default()
        };
        let cfg = ScenarioConfig {
            n_replicates: 10,
            ..small()
        };
        let rep = calibrate_tuning(&cfg, &spec).unwrap();
        assert_eq!(rep.selected_value(), 8.25);
        assert!(rep.feasible);
        assert_eq!(rep.candidates[0].type1.len(), 6);
    }

    #[test]
    fn calibration_without_feasible_candidate() {
        let spec = CalibrationSpec {
            method: Method::TwoStep,
            grid: vec![2.0, 50.0],
            target_power: 1.01,
            ..CalibrationSpec::default()
        };
        let cfg = ScenarioConfig {
            n_replicates: 10,
            ..small()
        };
        let rep = calibrate_tuning(&cfg, &spec).unwrap();
        assert!(!rep.feasible);
    }
}
