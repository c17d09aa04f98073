//! Surface-roughness prediction and chatter detection from sensor windows.
//!
//! Predictors sit behind [`RoughnessModel`]. The shipped [`SurrogateModel`]
//! is `r̂ = r₀ + c_kin·f_z² + c_vib·rms(q)`: a kinematic feed-mark term plus a
//! vibration term, with `c_vib` calibrated on one reference run.

use std::path::Path;

use nalgebra::Vector2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::SensorWindow;
use crate::params::ProcessParameters;
use crate::simulate::{default_step, simulate_dde};

/// Relative half-width of a tooth-passing harmonic band.
pub const HARMONIC_BAND: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// m
    pub rms_displacement: f64,
    /// N
    pub rms_force: f64,
    pub tooth_passing_energy_fraction: f64,
    pub offband_energy_fraction: f64,
    /// mm
    pub feed_per_tooth: f64,
    /// mm
    pub depth_mm: f64,
    pub speed_rpm: f64,
    /// RMS of `|q|` over the second half of the window divided by the first
    /// half; above one the vibration is not dying out.
    pub growth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoughnessEstimate {
    /// μm
    pub r_um: f64,
    pub chatter: bool,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoughnessCalibration {
    pub r0_um: f64,
    /// μm per mm² of feed per tooth squared.
    pub c_kin: f64,
    /// μm per metre of RMS displacement.
    pub c_vib: f64,
    pub chatter_offband_threshold: f64,
}

impl RoughnessCalibration {
    pub fn validate(&self) -> Result<()> {
        let ok = self.r0_um.is_finite()
            && self.r0_um > 0.0
            && self.c_kin.is_finite()
            && self.c_kin >= 0.0
            && self.c_vib.is_finite()
            && self.c_vib >= 0.0
            && (0.0..=1.0).contains(&self.chatter_offband_threshold);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameters(format!("roughness calibration {self:?}")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cal: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cal.validate()?;
        Ok(cal)
    }
}

/// `c_kin` from the scallop height of a ball of radius `D/2`:
/// `h = f_z²/(8R)`, converted so that `f_z` in mm gives μm.
pub fn kinematic_coefficient(diameter_mm: f64) -> f64 {
    1000.0 / (8.0 * 0.5 * diameter_mm)
}

/// Pluggable roughness predictor.
pub trait RoughnessModel {
    /// `distribution` is the optional parameter-distribution input; the
    /// surrogate ignores it.
    fn predict(&self, features: &FeatureVector, distribution: Option<&[f64]>) -> Result<RoughnessEstimate>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SurrogateModel {
    calibration: Option<RoughnessCalibration>,
}

impl SurrogateModel {
    pub fn new(calibration: RoughnessCalibration) -> Result<Self> {
        calibration.validate()?;
        Ok(Self {
            calibration: Some(calibration),
        })
    }

    pub fn uncalibrated() -> Self {
        Self { calibration: None }
    }

    pub fn calibration(&self) -> Option<&RoughnessCalibration> {
        self.calibration.as_ref()
    }
}

impl RoughnessModel for SurrogateModel {
    fn predict(&self, f: &FeatureVector, _distribution: Option<&[f64]>) -> Result<RoughnessEstimate> {
        let cal = self.calibration.ok_or(Error::Uncalibrated)?;
        let r_um = cal.r0_um + cal.c_kin * f.feed_per_tooth * f.feed_per_tooth + cal.c_vib * f.rms_displacement;
        let th = cal.chatter_offband_threshold;
        let chatter = f.offband_energy_fraction > th && f.growth >= 1.0;
        // distance of the spectral feature from the decision threshold
        let span = th.max(1.0 - th).max(f64::EPSILON);
        let confidence = ((f.offband_energy_fraction - th).abs() / span).clamp(0.0, 1.0);
        Ok(RoughnessEstimate {
            r_um,
            chatter,
            confidence,
        })
    }
}

pub fn predict_roughness(features: &FeatureVector, model: &dyn RoughnessModel) -> Result<RoughnessEstimate> {
    model.predict(features, None)
}

/// Force reconstructed from the motion through the dynamics model,
/// `M q̈ + C q̇ + K q`.
pub fn estimate_force(window: &SensorWindow, params: &ProcessParameters) -> Vec<Vector2<f64>> {
    let (m, c, k) = (params.mass_kg, params.damping(), params.stiffness());
    window
        .samples
        .iter()
        .map(|s| s.ddq * m + s.dq * c + s.q * k)
        .collect()
}

/// Feed per tooth, mm.
pub fn feed_per_tooth(feed_rate_mm_s: f64, teeth: u32, spindle_rpm: f64) -> f64 {
    feed_rate_mm_s * 60.0 / (teeth as f64 * spindle_rpm)
}

/// `(on-band, off-band)` energy fractions of `signal` (mean removed, DC bin
/// excluded) relative to harmonics of `f_tp`.
pub fn spectral_fractions(signal: &[f64], step: f64, f_tp: f64) -> (f64, f64) {
    let n = signal.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let df = 1.0 / (n as f64 * step);
    let (mut on, mut total) = (0.0, 0.0);
    for (k, z) in buf.iter().enumerate().take(n / 2 + 1).skip(1) {
        // one-sided spectrum: interior bins stand for two
        let weight = if 2 * k == n { 1.0 } else { 2.0 };
        let e = weight * z.norm_sqr();
        total += e;
        let f = k as f64 * df;
        let j = (f / f_tp).round();
        if j >= 1.0 && (f - j * f_tp).abs() <= HARMONIC_BAND * j * f_tp {
            on += e;
        }
    }
    if !(total > 0.0) {
        return (0.0, 0.0);
    }
    let on_frac = on / total;
    (on_frac, 1.0 - on_frac)
}

fn rms_norm(values: impl Iterator<Item = Vector2<f64>>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(acc, n), v| (acc + v.norm_squared(), n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

pub fn extract_features(window: &SensorWindow, teeth: u32, feed_rate_mm_s: f64) -> Result<FeatureVector> {
    let rpm = window.op.spindle_rpm;
    let tau = 60.0 / (teeth as f64 * rpm);
    let s = &window.samples;
    if s.len() < 2 {
        return Err(Error::InvalidWindow("feature window needs samples".into()));
    }
    // duration seen by the transform: n samples of width h
    let step = s[1].t - s[0].t;
    let length = s.len() as f64 * step;
    if length < 4.0 * tau * (1.0 - 1e-9) {
        return Err(Error::InvalidWindow(format!(
            "feature window covers {length} s, needs four tooth periods ({} s)",
            4.0 * tau
        )));
    }
    let qx: Vec<f64> = s.iter().map(|x| x.q.x).collect();
    let (on, off) = spectral_fractions(&qx, step, 1.0 / tau);
    let half = s.len() / 2;
    let first = rms_norm(s[..half].iter().map(|x| x.q));
    let second = rms_norm(s[half..].iter().map(|x| x.q));
    let growth = if first > 0.0 { second / first } else { 0.0 };
    Ok(FeatureVector {
        rms_displacement: rms_norm(s.iter().map(|x| x.q)),
        rms_force: rms_norm(s.iter().map(|x| x.force)),
        tooth_passing_energy_fraction: on,
        offband_energy_fraction: off,
        feed_per_tooth: feed_per_tooth(feed_rate_mm_s, teeth, rpm),
        depth_mm: window.op.depth_mm,
        speed_rpm: rpm,
        growth,
    })
}

/// Reference run used to calibrate `c_vib`: open loop at the given point from
/// the perturbation `q0`, features over the last four tooth periods before
/// `t_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationAnchor {
    pub spindle_rpm: f64,
    pub depth_mm: f64,
    pub t_end: f64,
    pub initial_perturbation_m: [f64; 2],
    pub feed_rate_mm_s: f64,
    pub target_r_um: f64,
}

impl Default for CalibrationAnchor {
    fn default() -> Self {
        Self {
            spindle_rpm: 11_500.0,
            depth_mm: 1.0,
            t_end: 0.03,
            initial_perturbation_m: [1e-5, 1e-5],
            feed_rate_mm_s: 8.5,
            target_r_um: 6.10,
        }
    }
}

impl CalibrationAnchor {
    pub fn features(&self, params: &ProcessParameters) -> Result<FeatureVector> {
        let step = default_step(params, self.spindle_rpm);
        let [qx, qy] = self.initial_perturbation_m;
        let traj = simulate_dde(
            params,
            &[(0.0, self.spindle_rpm)],
            self.depth_mm,
            self.t_end,
            step,
            Vector2::new(qx, qy),
            0.0,
            0,
        )?;
        let tau = params.delay(self.spindle_rpm);
        let t1 = traj.duration();
        let window = SensorWindow::from_trajectory(&traj, t1 - 4.0 * tau, t1, params.teeth, self.depth_mm)?;
        extract_features(&window, params.teeth, self.feed_rate_mm_s)
    }
}

/// Solve `c_vib` so that `features` maps to `target_r_um`.
pub fn calibrate(r0_um: f64, c_kin: f64, chatter_offband_threshold: f64, features: &FeatureVector, target_r_um: f64) -> Result<RoughnessCalibration> {
    let kin = r0_um + c_kin * features.feed_per_tooth * features.feed_per_tooth;
    if !(features.rms_displacement > 0.0) || target_r_um <= kin {
        return Err(Error::InvalidParameters(format!(
            "cannot reach {target_r_um} μm from baseline {kin} μm with rms displacement {}",
            features.rms_displacement
        )));
    }
    let cal = RoughnessCalibration {
        r0_um,
        c_kin,
        c_vib: (target_r_um - kin) / features.rms_displacement,
        chatter_offband_threshold,
    };
    cal.validate()?;
    Ok(cal)
}
