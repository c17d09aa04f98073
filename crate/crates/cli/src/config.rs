//! Resolved configuration: built-in defaults, then the `--config` file, then
//! `--set key=value` overrides, then dedicated flags.

use std::path::Path;

use millstab_core::controller::ControllerConfig;
use millstab_core::error::{Error, Result};
use millstab_core::params::ProcessParameters;
use millstab_core::roughness::RoughnessCalibration;
use millstab_core::sld::GridSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub omega_rpm: f64,
    pub ap_mm: f64,
    pub duration_s: f64,
    pub noise_std: f64,
    pub initial_perturbation_m: [f64; 2],
    /// Integration step; `τ/1000` when unset.
    pub step_s: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            omega_rpm: 11_500.0,
            ap_mm: 1.0,
            duration_s: 0.1,
            noise_std: 0.0,
            initial_perturbation_m: [1e-5, 1e-5],
            step_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub ap_mm: f64,
    /// Window start; four tooth periods before `t1` when unset.
    pub t0: Option<f64>,
    /// Window end; the end of the record when unset.
    pub t1: Option<f64>,
    pub bounds_factor: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            ap_mm: 1.0,
            t0: None,
            t1: None,
            bounds_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub params: ProcessParameters,
    pub grid: GridSpec,
    pub controller: ControllerConfig,
    pub roughness_calibration: Option<RoughnessCalibration>,
    pub workers: usize,
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub estimate: EstimateConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            params: ProcessParameters::table1(),
            grid: GridSpec::default(),
            controller: ControllerConfig::default(),
            roughness_calibration: None,
            workers: 1,
            seed: 0,
            simulate: SimulateConfig::default(),
            estimate: EstimateConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.grid.validate()?;
        self.controller.validate()?;
        if let Some(cal) = &self.roughness_calibration {
            cal.validate()?;
        }
        if self.workers == 0 {
            return Err(Error::InvalidParameters("workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Recursively overlay `top` onto `base`; objects merge key by key, anything
/// else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

/// Apply one `a.b.c=value` override. The value is read as JSON when it
/// parses, otherwise as a string.
pub fn apply_set(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidParameters(format!("--set expects key=value, got `{assignment}`")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::InvalidParameters(format!("bad key `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for key in path.split('.') {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        node = match node {
            Value::Object(map) => map.entry(key).or_insert(Value::Null),
            Value::Array(items) => {
                let i: usize = key
                    .parse()
                    .map_err(|_| Error::InvalidParameters(format!("`{key}` in `{path}` is not an index")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| Error::InvalidParameters(format!("index {i} in `{path}` beyond length {len}")))?
            }
            _ => return Err(Error::InvalidParameters(format!("`{path}` descends into a scalar"))),
        };
    }
    *node = value;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        msg: e.to_string(),
    })
}

/// Defaults, then the file, then the `--set` overrides.
pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<CliConfig> {
    let mut doc = serde_json::to_value(CliConfig::default())?;
    if let Some(path) = file {
        merge(&mut doc, read_json(path)?);
    }
    for s in sets {
        apply_set(&mut doc, s)?;
    }
    Ok(serde_json::from_value(doc)?)
}
