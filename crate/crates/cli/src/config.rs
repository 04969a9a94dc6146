//! Config file parsing, preset merging and the digest recorded in manifests.
//!
//! A config file is TOML with `schema_version = 1`, an optional `preset`, and
//! optional `[simulation]`, `[calibration]` and `[plan]` tables. Tables are
//! merged key by key over the preset defaults, so a file only lists what it
//! changes. Unknown keys anywhere are errors.

use std::path::Path;

use borrowsim::borrowing::Method;
use borrowsim::planner::PlannerInputs;
use borrowsim::runner::{CalibrationSpec, Preset, ScenarioConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: u32,
    preset: Option<Preset>,
    simulation: Option<Table>,
    calibration: Option<Table>,
    plan: Option<Table>,
}

/// Parsed file contents before defaults are applied.
#[derive(Debug, Default)]
pub struct ConfigFile {
    preset: Option<Preset>,
    simulation: Table,
    calibration: Table,
    plan: Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text)
            .map_err(|e| CliError::Config(format!("invalid config: {}", e.message().trim())))?;
        if raw.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                raw.schema_version
            )));
        }
        Ok(ConfigFile {
            preset: raw.preset,
            simulation: raw.simulation.unwrap_or_default(),
            calibration: raw.calibration.unwrap_or_default(),
            plan: raw.plan.unwrap_or_default(),
        })
    }
}

/// Overrides given on the command line; they win over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub reps: Option<u32>,
}

/// Replace `base` values with `overlay` values, recursing into tables.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn to_value<T: Serialize>(defaults: &T) -> Value {
    Value::try_from(defaults).expect("defaults serialize to TOML")
}

/// Deserialize with the offending key path in the error message.
fn from_value<T: DeserializeOwned>(section: &str, value: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." {
            section.to_string()
        } else {
            format!("{section}.{path}")
        };
        CliError::Config(format!("{at}: {}", e.inner()))
    })
}

fn with_defaults<T: Serialize + DeserializeOwned>(
    section: &str,
    defaults: &T,
    table: &Table,
) -> Result<T, CliError> {
    let mut value = to_value(defaults);
    merge(&mut value, Value::Table(table.clone()));
    from_value(section, value)
}

/// `start:stop:step` or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = |why: &str| CliError::Config(format!("grid {spec:?}: {why}"));
    let number = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(&format!("{:?} is not a number", s.trim())))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    let values = match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (number(start)?, number(stop)?, number(step)?);
            if !(step > 0.0) {
                return Err(bad("step must be positive"));
            }
            if stop < start {
                return Err(bad("stop is below start"));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            if n > 100_000 {
                return Err(bad("too many grid points"));
            }
            // Multiply rather than accumulate, and drop representation noise.
            (0..=n)
                .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
                .collect()
        }
        [_] => spec.split(',').map(number).collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad("expected start:stop:step or a comma-separated list")),
    };
    if values.is_empty() {
        return Err(bad("no values"));
    }
    Ok(values)
}

/// Resolved simulation settings.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationSettings {
    pub preset: Preset,
    pub scenario: ScenarioConfig,
}

pub fn resolve_simulation(file: &ConfigFile, cli: &Overrides) -> Result<SimulationSettings, CliError> {
    let preset = cli.preset.or(file.preset).unwrap_or(Preset::Desk);
    let mut scenario: ScenarioConfig =
        with_defaults("simulation", &preset.scenario(), &file.simulation)?;
    if let Some(seed) = cli.seed {
        scenario.master_seed = seed;
    }
    if let Some(reps) = cli.reps {
        scenario.n_replicates = reps;
    }
    scenario.validate().map_err(|e| match CliError::from(e) {
        CliError::Config(m) => CliError::Config(format!("simulation: {m}")),
        other => other,
    })?;
    Ok(SimulationSettings { preset, scenario })
}

/// Resolved calibration settings; the scenario supplies the design, tuning
/// defaults, replicates and sampler.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSettings {
    pub simulation: SimulationSettings,
    pub spec: CalibrationSpec,
}

#[derive(Debug, Default, Clone)]
pub struct CalibrationOverrides {
    pub method: Option<Method>,
    pub grid: Option<String>,
    pub target_power: Option<f64>,
}

pub fn resolve_calibration(
    file: &ConfigFile,
    cli: &Overrides,
    calib: &CalibrationOverrides,
) -> Result<CalibrationSettings, CliError> {
    let simulation = resolve_simulation(file, cli)?;
    let mut table = file.calibration.clone();
    // A grid may be written as a range string as well as an array.
    if let Some(Value::String(s)) = table.get("grid") {
        let values = parse_grid(s)?;
        table.insert("grid".into(), Value::Array(values.into_iter().map(Value::Float).collect()));
    }
    let mut spec: CalibrationSpec = with_defaults("calibration", &CalibrationSpec::default(), &table)?;
    if let Some(m) = calib.method {
        spec.method = m;
    }
    if let Some(g) = &calib.grid {
        spec.grid = parse_grid(g)?;
    }
    if let Some(p) = calib.target_power {
        spec.target_power = p;
    }
    if !table.contains_key("grid") && calib.grid.is_none() {
        // Without an explicit grid, calibrate around the configured value.
        let value = simulation.scenario.tuning.value_for(spec.method);
        spec.grid = value.into_iter().collect();
    }
    if spec.method == Method::NoBorrow {
        return Err(CliError::Config("calibration.method: no_borrow has no tuning parameter".into()));
    }
    if !(spec.target_power > 0.0 && spec.target_power < 1.0) {
        return Err(CliError::Config("calibration.target_power must lie in (0, 1)".into()));
    }
    let tuning = simulation.scenario.tuning;
    for &v in &spec.grid {
        tuning
            .with_value(spec.method, v)
            .map_err(|e| CliError::Config(format!("calibration.grid value {v}: {e}")))?;
    }
    Ok(CalibrationSettings { simulation, spec })
}

/// Time grid of the expected-event curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveSpec {
    pub step_months: f64,
    /// Last time point; by default a quarter beyond the later cutoff.
    pub end_months: Option<f64>,
}

impl Default for CurveSpec {
    fn default() -> Self {
        CurveSpec {
            step_months: 0.5,
            end_months: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanSettings {
    pub inputs: PlannerInputs,
    pub curves: CurveSpec,
}

pub fn resolve_plan(file: &ConfigFile) -> Result<PlanSettings, CliError> {
    let mut table = file.plan.clone();
    let curves = match table.remove("curves") {
        None => CurveSpec::default(),
        Some(v) => from_value("plan.curves", v)?,
    };
    if !(curves.step_months > 0.0 && curves.step_months.is_finite()) {
        return Err(CliError::Config("plan.curves.step_months must be positive".into()));
    }
    if let Some(end) = curves.end_months {
        if !(end >= 0.0 && end.is_finite()) {
            return Err(CliError::Config("plan.curves.end_months must be non-negative".into()));
        }
    }
    let inputs: PlannerInputs = with_defaults("plan", &PlannerInputs::default(), &table)?;
    match inputs.validate() {
        Ok(()) => {}
        Err(borrowsim::Error::InfeasiblePlan(m)) => return Err(CliError::Infeasible(m)),
        Err(e) => return Err(CliError::Config(format!("plan: {e}"))),
    }
    Ok(PlanSettings { inputs, curves })
}

/// SHA-256 of the resolved settings in canonical JSON form.
pub fn digest<T: Serialize>(command: &str, settings: &T) -> String {
    let body = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "settings": settings,
    });
    let bytes = serde_json::to_vec(&body).expect("settings serialize to JSON");
    let hash = Sha256::digest(&bytes);
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_specs() {
        assert_eq!(parse_grid("6:7:0.25").unwrap(), vec![6.0, 6.25, 6.5, 6.75, 7.0]);
        assert_eq!(parse_grid("0.1:0.3:0.1").unwrap(), vec![0.1, 0.2, 0.3]);
        assert_eq!(parse_grid("8.25").unwrap(), vec![8.25]);
        assert_eq!(parse_grid("1, 2,3").unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(parse_grid("1:0:1").is_err());
        assert!(parse_grid("1:2:0").is_err());
        assert!(parse_grid("a,b").is_err());
        assert!(parse_grid("1:2").is_err());
    }

    #[test]
    fn defaults_without_file() {
        let s = resolve_simulation(&ConfigFile::default(), &Overrides::default()).unwrap();
        assert_eq!(s.preset, Preset::Desk);
        assert_eq!(s.scenario, {
            let mut c = Preset::Desk.scenario();
            c.validate().unwrap();
            c
        });
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let file = ConfigFile::parse(
            "schema_version = 1\npreset = \"paper\"\n[simulation]\nn_replicates = 7\n[simulation.design]\ndownweight = 0.5\n",
        )
        .unwrap();
        let s = resolve_simulation(&file, &Overrides::default()).unwrap();
        assert_eq!(s.scenario.n_replicates, 7);
        assert_eq!(s.scenario.design.downweight, 0.5);
        assert_eq!(s.scenario.design.n_experimental, 450);
        assert_eq!(s.scenario.hr_external.len(), 16);
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let file =
            ConfigFile::parse("schema_version = 1\n[simulation.design]\ndownwieght = 0.5\n").unwrap();
        let err = resolve_simulation(&file, &Overrides::default()).unwrap_err();
        let CliError::Config(msg) = err else { panic!() };
        assert!(msg.contains("simulation.design"), "{msg}");
        assert!(msg.contains("downwieght"), "{msg}");

        assert!(ConfigFile::parse("schema_version = 2\n").is_err());
        assert!(ConfigFile::parse("schema_version = 1\n[simulaton]\n").is_err());
        assert!(ConfigFile::parse("preset = \"desk\"\n").is_err());
    }

    #[test]
    fn digest_tracks_every_field() {
        let base = resolve_simulation(&ConfigFile::default(), &Overrides::default()).unwrap();
        let d0 = digest("simulate", &base);
        assert_eq!(d0, digest("simulate", &base.clone()));
        let mut changed = base.clone();
        changed.scenario.tuning.decay_c = 8.0;
        assert_ne!(d0, digest("simulate", &changed));
        let mut changed = base.clone();
        changed.scenario.sampler.n_iter += 1;
        assert_ne!(d0, digest("simulate", &changed));
        let reseeded = resolve_simulation(
            &ConfigFile::default(),
            &Overrides {
                seed: Some(2),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_ne!(d0, digest("simulate", &reseeded));
        assert_ne!(d0, digest("calibrate", &base));
    }

    #[test]
    fn plan_section() {
        let file = ConfigFile::parse(
            "schema_version = 1\n[plan]\nexternal_rate = 0.0\n[plan.curves]\nstep_months = 1.0\n",
        )
        .unwrap();
        let p = resolve_plan(&file).unwrap();
        assert_eq!(p.inputs.external_rate, 0.0);
        assert_eq!(p.curves.step_months, 1.0);
        let file = ConfigFile::parse("schema_version = 1\n[plan]\nhistorical_months = 50.0\n").unwrap();
        assert!(matches!(resolve_plan(&file), Err(CliError::Infeasible(_))));
    }

    #[test]
    fn calibration_grid_string_in_file() {
        let file = ConfigFile::parse(
            "schema_version = 1\n[calibration]\nmethod = \"two_step\"\ngrid = \"8:9:0.5\"\n",
        )
        .unwrap();
        let c = resolve_calibration(&file, &Overrides::default(), &CalibrationOverrides::default())
            .unwrap();
        assert_eq!(c.spec.grid, vec![8.0, 8.5, 9.0]);
        let c = resolve_calibration(
            &ConfigFile::default(),
            &Overrides::default(),
            &CalibrationOverrides {
                method: Some(Method::PowerPrior),
                ..CalibrationOverrides::default()
            },
        )
        .unwrap();
        assert_eq!(c.spec.grid, vec![0.6]);
    }
}
