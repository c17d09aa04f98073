//! Simulator, estimator, online SLD and controller run together on a
//! simulated-time schedule.
//!
//! Decisions fall at `t_k = control_start + W + k·P`, where `W` is four tooth
//! periods at the initial speed and `P` the estimation period. Each decision
//! uses the sensor window `(t_k − W, t_k]` at the current speed; a window that
//! overlaps a speed change (or its delay history) is skipped and logged.

use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::atomic::{write_atomic, write_with};
use crate::controller::{optimize_speed, write_decisions_csv, ControlDecision, ControllerConfig};
use crate::error::{Error, Result};
use crate::estimator::{
    Estimator, EstimatedParameters, LeastSquaresEstimator, ParameterBounds, SensorWindow, MIN_WINDOW_SAMPLES,
};
use crate::params::{OperatingPoint, ProcessParameters};
use crate::roughness::{
    extract_features, feed_per_tooth, FeatureVector, RoughnessCalibration, RoughnessEstimate, RoughnessModel,
    SurrogateModel,
};
use crate::sld::{compute_sld_at, GridSpec, SldGrid};
use crate::simulate::{log_energy_slope, DdeSimulator, Trajectory, DEFAULT_STEPS_PER_DELAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OpenLoop,
    OfflineControl,
    OnlineControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftEvent {
    pub t: f64,
    pub params: ProcessParameters,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialPoint {
    pub omega_rpm: f64,
    pub ap_mm: f64,
}

fn default_perturbation() -> [f64; 2] {
    [1e-5, 1e-5]
}

fn default_feed() -> f64 {
    8.5
}

fn default_bounds_factor() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub nominal_params: ProcessParameters,
    #[serde(default)]
    pub drift_events: Vec<DriftEvent>,
    pub initial: InitialPoint,
    pub mode: Mode,
    pub control_start_s: f64,
    /// Defaults to `2τ·ceil(W/2τ)` at the initial speed, i.e. back-to-back
    /// windows.
    #[serde(default)]
    pub estimation_period_s: Option<f64>,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub controller: ControllerConfig,
    pub roughness_calibration: RoughnessCalibration,
    /// Depth spacing and SDM resolution of the controller's SLD slices; the
    /// full grid when `full_sld_snapshots` is set.
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub full_sld_snapshots: bool,
    #[serde(default = "default_perturbation")]
    pub initial_perturbation_m: [f64; 2],
    #[serde(default = "default_feed")]
    pub feed_rate_mm_s: f64,
    /// Estimator box constraints are `[p/f, p·f]` around the nominal values.
    #[serde(default = "default_bounds_factor")]
    pub estimate_bounds_factor: f64,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.nominal_params;
        p.validate()?;
        OperatingPoint::new(self.initial.omega_rpm, self.initial.ap_mm).validate()?;
        let bad = |msg: String| Err(Error::InvalidParameters(msg));
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration {} s", self.duration_s));
        }
        if !(self.control_start_s >= 0.0 && self.control_start_s <= self.duration_s) {
            return bad(format!("control start {} s outside the run", self.control_start_s));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std {}", self.noise_std));
        }
        if !(self.feed_rate_mm_s.is_finite() && self.feed_rate_mm_s > 0.0) {
            return bad(format!("feed rate {} mm/s", self.feed_rate_mm_s));
        }
        if !(self.estimate_bounds_factor.is_finite() && self.estimate_bounds_factor > 1.0) {
            return bad(format!("estimate bounds factor {}", self.estimate_bounds_factor));
        }
        if self.initial_perturbation_m.iter().any(|v| !v.is_finite()) {
            return bad("initial perturbation must be finite".into());
        }
        for ev in &self.drift_events {
            if !(ev.t >= 0.0 && ev.t <= self.duration_s) {
                return bad(format!("drift event at {} s outside [0, {}]", ev.t, self.duration_s));
            }
            inject_drift(p, ev)?;
        }
        self.controller.validate()?;
        self.roughness_calibration.validate()?;
        self.grid.validate()?;
        let period = self.estimation_period(self.step());
        let min_span = 2.0 * p.delay(self.initial.omega_rpm);
        if !(period.is_finite() && period >= min_span * (1.0 - 1e-9)) {
            return bad(format!("estimation period {period} s is shorter than a window ({min_span} s)"));
        }
        if self.mode != Mode::OpenLoop {
            let [g0, g1] = self.grid.depth_range;
            if self.initial.ap_mm < g0 || self.initial.ap_mm > g1 {
                return bad(format!("depth {} mm outside the grid [{g0}, {g1}]", self.initial.ap_mm));
            }
        }
        Ok(())
    }

    /// Fixed integration step: `τ/1000` at the fastest speed the run can reach.
    pub fn step(&self) -> f64 {
        let mut fastest = self.initial.omega_rpm;
        if self.mode != Mode::OpenLoop {
            fastest = fastest.max(self.controller.speed_bounds[1]);
        }
        self.nominal_params.delay(fastest) / DEFAULT_STEPS_PER_DELAY
    }

    /// Window length at a spindle speed: four tooth periods, rounded up to a
    /// whole number of steps.
    fn window(&self, rpm: f64, step: f64) -> f64 {
        let tau = self.nominal_params.delay(rpm);
        let n = (4.0 * tau / step - 1e-9).ceil().max(MIN_WINDOW_SAMPLES as f64);
        n * step
    }

    fn estimation_period(&self, step: f64) -> f64 {
        self.estimation_period_s.unwrap_or_else(|| {
            // nominal window length, before rounding to whole steps
            let tau = self.nominal_params.delay(self.initial.omega_rpm);
            let w = (4.0 * tau).max(MIN_WINDOW_SAMPLES as f64 * step);
            2.0 * tau * (w / (2.0 * tau) - 1e-9).ceil()
        })
    }

    /// Speed axis and depth slice the controller consults: the lattice, and
    /// five rows centred on the cutting depth.
    pub fn slice_spec(&self) -> GridSpec {
        let lattice = self.controller.lattice();
        let [d0, d1] = self.grid.depth_range;
        let delta = if self.grid.depth_count > 1 {
            (d1 - d0) / (self.grid.depth_count - 1) as f64
        } else {
            0.0
        };
        let ap = self.initial.ap_mm;
        let (lo, hi) = ((ap - 2.0 * delta).max(0.0), ap + 2.0 * delta);
        GridSpec {
            speed_range: [lattice[0], *lattice.last().unwrap()],
            speed_count: lattice.len(),
            depth_range: [lo, hi],
            depth_count: if hi > lo { 5 } else { 1 },
            sdm: self.grid.sdm,
        }
    }
}

/// Replacement parameters for a drift event; the tooth count cannot change.
pub fn inject_drift(params: &ProcessParameters, event: &DriftEvent) -> Result<ProcessParameters> {
    event.params.validate()?;
    if event.params.teeth != params.teeth {
        return Err(Error::InvalidParameters("drift cannot change the tooth count".into()));
    }
    Ok(event.params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stabilized,
    Diverged,
    Held,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub t: f64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub t: f64,
    pub estimate: EstimatedParameters,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoughnessRecord {
    pub t: f64,
    pub omega_rpm: f64,
    pub estimate: RoughnessEstimate,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: Scenario,
    pub trajectory: Trajectory,
    pub decisions: Vec<ControlDecision>,
    pub sld_snapshots: Vec<SldGrid>,
    pub roughness_series: Vec<RoughnessRecord>,
    pub estimates: Vec<EstimateRecord>,
    pub events: Vec<RunEvent>,
    pub verdict: Verdict,
    pub divergence_time: Option<f64>,
    /// Slope of `ln E` over the final 20% of the run, 1/s.
    pub final_energy_slope: f64,
    /// RMS of `|q|` over the first and last 20% of the run.
    pub rms_initial: f64,
    pub rms_final: f64,
    pub final_roughness: Option<RoughnessEstimate>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    verdict: Verdict,
    divergence_time_s: Option<f64>,
    final_energy_slope: f64,
    rms_initial_m: f64,
    rms_final_m: f64,
    final_roughness: Option<RoughnessEstimate>,
    final_omega_rpm: f64,
    decisions: usize,
    applied_changes: Vec<(f64, f64)>,
    parameter_estimates: &'a [EstimateRecord],
    roughness_series: &'a [RoughnessRecord],
    events: &'a [RunEvent],
    sld_snapshots: Vec<serde_json::Value>,
    scenario: &'a Scenario,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        let applied = self.decisions.iter().filter(|d| d.applied).map(|d| (d.t, d.omega_star)).collect();
        let doc = ReportJson {
            verdict: self.verdict,
            divergence_time_s: self.divergence_time,
            final_energy_slope: self.final_energy_slope,
            rms_initial_m: self.rms_initial,
            rms_final_m: self.rms_final,
            final_roughness: self.final_roughness,
            final_omega_rpm: self.trajectory.operating_history.last().map_or(f64::NAN, |&(_, w)| w),
            decisions: self.decisions.len(),
            applied_changes: applied,
            parameter_estimates: &self.estimates,
            roughness_series: &self.roughness_series,
            events: &self.events,
            sld_snapshots: self
                .sld_snapshots
                .iter()
                .enumerate()
                .map(|(k, g)| serde_json::json!({ "file": format!("sld_t{k}.csv"), "sidecar": g.sidecar() }))
                .collect(),
            scenario: &self.scenario,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Write `trajectory.csv`, `decisions.csv`, `sld_t<k>.csv` and
    /// `report.json` into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_with(&dir.join("trajectory.csv"), |b| self.trajectory.write_csv(b))?;
        write_with(&dir.join("decisions.csv"), |b| write_decisions_csv(&self.decisions, b))?;
        for (k, grid) in self.sld_snapshots.iter().enumerate() {
            write_with(&dir.join(format!("sld_t{k}.csv")), |b| grid.write_csv(b))?;
        }
        write_atomic(&dir.join("report.json"), self.to_json()?.as_bytes())
    }
}

struct Runner<'a> {
    s: &'a Scenario,
    workers: usize,
    model: SurrogateModel,
    bounds: ParameterBounds,
    step: f64,
    decisions: Vec<ControlDecision>,
    snapshots: Vec<SldGrid>,
    roughness: Vec<RoughnessRecord>,
    estimates: Vec<EstimateRecord>,
    events: Vec<RunEvent>,
    last_change: Option<f64>,
}

impl Runner<'_> {
    fn log(&mut self, t: f64, message: String) {
        self.events.push(RunEvent { t, message });
    }

    fn features(&self, traj: &Trajectory, rpm: f64, t: f64) -> Result<(SensorWindow, FeatureVector)> {
        let w = self.s.window(rpm, self.step);
        let p = &self.s.nominal_params;
        let window = SensorWindow::from_trajectory(traj, t - w + 0.5 * self.step, t, p.teeth, self.s.initial.ap_mm)?;
        let features = extract_features(&window, p.teeth, self.s.feed_rate_mm_s)?;
        Ok((window, features))
    }

    fn slice(&self, params: &ProcessParameters, t: f64) -> Result<SldGrid> {
        let spec = if self.s.full_sld_snapshots { self.s.grid } else { self.s.slice_spec() };
        compute_sld_at(params, &spec, self.workers, t)
    }

    /// One controller invocation at time `t`; returns the speed to apply.
    fn decide(&mut self, sim: &DdeSimulator, offline: Option<&SldGrid>, t: f64) -> Result<Option<f64>> {
        let rpm = sim.spindle_rpm();
        let (window, features) = match self.features(sim.trajectory(), rpm, t) {
            Ok(x) => x,
            Err(Error::InvalidWindow(msg)) => {
                self.log(t, format!("window skipped: {msg}"));
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let current = self.model.predict(&features, None)?;
        self.roughness.push(RoughnessRecord {
            t,
            omega_rpm: rpm,
            estimate: current,
        });

        let online;
        let grid = match offline {
            Some(g) => g,
            None => {
                let nominal = &self.s.nominal_params;
                let est = match LeastSquaresEstimator.estimate(&window, nominal, &self.bounds) {
                    Ok(e) => e,
                    Err(Error::Unidentifiable(msg)) => {
                        self.log(t, format!("estimate skipped, holding speed: {msg}"));
                        return Ok(None);
                    }
                    Err(e) => return Err(e),
                };
                if est.low_confidence {
                    self.log(t, "estimate clamped to bounds".into());
                }
                self.estimates.push(EstimateRecord { t, estimate: est });
                online = match self.slice(&est.apply_to(nominal), t) {
                    Ok(g) => g,
                    Err(e @ (Error::TooManyFailures { .. } | Error::Numerical { .. })) => {
                        self.log(t, format!("online SLD failed, holding speed: {e}"));
                        return Ok(None);
                    }
                    Err(e) => return Err(e),
                };
                self.snapshots.push(online);
                self.snapshots.last().unwrap()
            }
        };

        let (teeth, feed) = (self.s.nominal_params.teeth, self.s.feed_rate_mm_s);
        let model = self.model;
        let roughness_of = |omega: f64| {
            let f = FeatureVector {
                feed_per_tooth: feed_per_tooth(feed, teeth, omega),
                speed_rpm: omega,
                ..features
            };
            model.predict(&f, None).map_or(f64::NAN, |r| r.r_um)
        };
        let d = optimize_speed(
            grid,
            self.s.initial.ap_mm,
            rpm,
            &roughness_of,
            &self.s.controller,
            self.last_change,
            t,
        )?;
        if !d.feasible {
            self.log(t, "no stable lattice speed, holding".into());
        }
        self.decisions.push(d);
        if d.applied {
            self.last_change = Some(t);
            return Ok(Some(d.omega_star));
        }
        Ok(None)
    }
}

enum Stop {
    Finished,
    Diverged(f64),
}

/// Run a scenario to completion. `workers` bounds the SLD sweeps.
pub fn run_scenario(s: &Scenario, workers: usize) -> Result<RunReport> {
    s.validate()?;
    let step = s.step();
    let mut runner = Runner {
        s,
        workers,
        model: SurrogateModel::new(s.roughness_calibration)?,
        bounds: ParameterBounds::around(&s.nominal_params.uncertain(), s.estimate_bounds_factor),
        step,
        decisions: Vec::new(),
        snapshots: Vec::new(),
        roughness: Vec::new(),
        estimates: Vec::new(),
        events: Vec::new(),
        last_change: None,
    };

    let offline = match s.mode {
        Mode::OfflineControl => Some(runner.slice(&s.nominal_params, 0.0)?),
        _ => None,
    };
    if let Some(g) = &offline {
        runner.snapshots.push(g.clone());
    }

    // merged timeline: drift events first on ties, then decisions
    let mut timeline: Vec<(f64, Option<ProcessParameters>)> = Vec::new();
    let mut current = s.nominal_params;
    let mut drift = s.drift_events.clone();
    drift.sort_by(|a, b| a.t.total_cmp(&b.t));
    for ev in &drift {
        current = inject_drift(&current, ev)?;
        timeline.push((ev.t, Some(current)));
    }
    if s.mode != Mode::OpenLoop {
        let w0 = s.window(s.initial.omega_rpm, step);
        let period = s.estimation_period(step);
        let mut k = 0u32;
        loop {
            let t = s.control_start_s + w0 + k as f64 * period;
            if t > s.duration_s {
                break;
            }
            timeline.push((t, None));
            k += 1;
        }
    }
    timeline.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.is_some().cmp(&a.1.is_some())));

    let [qx, qy] = s.initial_perturbation_m;
    let mut sim = DdeSimulator::new(
        s.nominal_params,
        s.initial.omega_rpm,
        s.initial.ap_mm,
        step,
        Vector2::new(qx, qy),
        s.noise_std,
        s.seed,
    )?;

    let diverged_at = |e: &Error| match e {
        Error::Diverged(d) => Some(d.last_finite_time),
        _ => None,
    };
    let mut stop = Stop::Finished;
    for (t, params) in timeline {
        if let Err(e) = sim.advance_to(t) {
            stop = Stop::Diverged(diverged_at(&e).ok_or(e)?);
            break;
        }
        match params {
            Some(p) => {
                sim.set_params(p)?;
                runner.log(t, "process parameters drifted".into());
            }
            None => {
                if let Some(rpm) = runner.decide(&sim, offline.as_ref(), sim.time())? {
                    sim.set_speed(rpm)?;
                }
            }
        }
    }
    if let Stop::Finished = stop {
        if let Err(e) = sim.advance_to(s.duration_s) {
            stop = Stop::Diverged(diverged_at(&e).ok_or(e)?);
        }
    }

    let final_rpm = sim.spindle_rpm();
    let truth = *sim.params();
    let trajectory = sim.into_trajectory();
    let end = trajectory.duration();
    let tail = 0.8 * end;
    let slope = log_energy_slope(&trajectory, truth.mass_kg, truth.stiffness(), tail, end);
    let rms_initial = trajectory.rms_displacement(0.0, 0.2 * end);
    let rms_final = trajectory.rms_displacement(tail, end);
    let final_roughness = match runner.features(&trajectory, final_rpm, end) {
        Ok((_, f)) => Some(runner.model.predict(&f, None)?),
        Err(_) => None,
    };

    let held = runner.decisions.last().is_some_and(|d| !d.feasible);
    let (verdict, divergence_time) = match stop {
        Stop::Diverged(t) => {
            runner.log(t, "simulation diverged".into());
            (Verdict::Diverged, Some(t))
        }
        Stop::Finished if slope < 0.0 => (Verdict::Stabilized, None),
        Stop::Finished if held => (Verdict::Held, None),
        Stop::Finished => (Verdict::Diverged, None),
    };

    Ok(RunReport {
        scenario: s.clone(),
        trajectory,
        decisions: runner.decisions,
        sld_snapshots: runner.snapshots,
        roughness_series: runner.roughness,
        estimates: runner.estimates,
        events: runner.events,
        verdict,
        divergence_time,
        final_energy_slope: slope,
        rms_initial,
        rms_final,
        final_roughness,
    })
}
