//! Cutting-force model of the two-flute milling process.
//!
//! The regenerative force acting on the spindle is
//! `F(t) = a_p · H_d(t) · [q(t − τ) − q(t)]`, which is the sign carried by the
//! state-space form used for the semi-discretization (`A` holds
//! `−M⁻¹(K + a_p H_d)` and `B` holds `+a_p M⁻¹ H_d`). Every module in this
//! crate (simulator, SDM, estimator) uses this one convention.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::params::ProcessParameters;

/// Angular speed of the spindle, rad/s.
pub fn angular_speed(spindle_rpm: f64) -> f64 {
    TAU * spindle_rpm / 60.0
}

/// Angle of tooth `j` at time `t` for a spindle turning at constant speed and
/// starting with tooth 0 at angle zero, reduced to `[0, 2π)`.
pub fn tooth_angle(params: &ProcessParameters, spindle_rpm: f64, t: f64, j: u32) -> f64 {
    debug_assert!(j < params.teeth);
    let pitch = TAU / params.teeth as f64;
    (angular_speed(spindle_rpm) * t + j as f64 * pitch).rem_euclid(TAU)
}

/// Entry and exit angles of the cutting arc for down-milling with exit at π.
pub fn engagement_window(params: &ProcessParameters) -> Result<(f64, f64)> {
    let ratio = params.radial_depth_mm / params.diameter_mm;
    if !(params.radial_depth_mm > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidGeometry {
            radial_depth_mm: params.radial_depth_mm,
            diameter_mm: params.diameter_mm,
        });
    }
    let phi_in = (1.0 - 2.0 * ratio).clamp(-1.0, 1.0).acos();
    Ok((phi_in, PI))
}

/// Cutter geometry needed to evaluate the directional matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutterGeometry {
    pub teeth: u32,
    pub phi_in: f64,
    pub phi_out: f64,
}

impl CutterGeometry {
    pub fn new(params: &ProcessParameters) -> Result<Self> {
        let (phi_in, phi_out) = engagement_window(params)?;
        Ok(Self {
            teeth: params.teeth,
            phi_in,
            phi_out,
        })
    }

    fn pitch(&self) -> f64 {
        TAU / self.teeth as f64
    }

    /// Switching function: open interval `(φ_in, φ_out)`.
    pub fn engaged(&self, angle: f64) -> bool {
        let a = angle.rem_euclid(TAU);
        a > self.phi_in && a < self.phi_out
    }

    /// Directional basis for tooth 0 at `phase` (unreduced angle, radians).
    pub fn basis(&self, phase: f64) -> DirectionalBasis {
        let mut basis = DirectionalBasis::zero();
        for j in 0..self.teeth {
            let phi = phase + j as f64 * self.pitch();
            if !self.engaged(phi) {
                continue;
            }
            let (s2, c2) = (2.0 * phi).sin_cos();
            basis.tangential += 0.5 * Matrix2::new(s2, 1.0 + c2, -(1.0 - c2), -s2);
            basis.radial += 0.5 * Matrix2::new(1.0 - c2, s2, s2, 1.0 + c2);
        }
        basis
    }

    /// Times in the open interval `(t_a, t_b)` at which any tooth crosses the
    /// entry or exit angle, for tooth 0 at `phase0 + Ω t`. Sorted ascending.
    /// Crossings within a relative `1e-9` of either end are treated as the end.
    pub fn switching_times(&self, spindle_rpm: f64, phase0: f64, t_a: f64, t_b: f64) -> Vec<f64> {
        let omega = angular_speed(spindle_rpm);
        let mut out = Vec::new();
        let tol = 1e-9 * (t_b - t_a);
        for j in 0..self.teeth {
            let offset = phase0 + j as f64 * self.pitch();
            for edge in [self.phi_in, self.phi_out] {
                // offset + Ω t = edge + 2πk
                let k_lo = ((offset + omega * t_a - edge) / TAU).floor() as i64;
                let k_hi = ((offset + omega * t_b - edge) / TAU).ceil() as i64;
                for k in k_lo..=k_hi {
                    let t = (edge + TAU * k as f64 - offset) / omega;
                    if t > t_a + tol && t < t_b - tol {
                        out.push(t);
                    }
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * b.abs().max(1.0));
        out
    }
}

/// `H_d` split into the parts multiplying `K_t` and `K_r`, so that
/// `H_d = K_t · tangential + K_r · radial`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalBasis {
    pub tangential: Matrix2<f64>,
    pub radial: Matrix2<f64>,
}

impl DirectionalBasis {
    pub fn zero() -> Self {
        Self {
            tangential: Matrix2::zeros(),
            radial: Matrix2::zeros(),
        }
    }

    pub fn combine(&self, kt: f64, kr: f64) -> Matrix2<f64> {
        self.tangential * kt + self.radial * kr
    }
}

/// Directional cutting-force matrix `H_d(t)` at constant spindle speed.
pub fn directional_matrix(params: &ProcessParameters, spindle_rpm: f64, t: f64) -> Result<Matrix2<f64>> {
    let geom = CutterGeometry::new(params)?;
    Ok(geom
        .basis(angular_speed(spindle_rpm) * t)
        .combine(params.kt, params.kr))
}

/// Regenerative force `a_p H_d (q_τ − q)` with `a_p` in metres.
pub fn regenerative_force(h_d: &Matrix2<f64>, depth_m: f64, q: &Vector2<f64>, q_delayed: &Vector2<f64>) -> Vector2<f64> {
    depth_m * (h_d * (q_delayed - q))
}

/// Piecewise-constant spindle speed with a continuous tool angle.
#[derive(Debug, Clone, PartialEq)]
pub struct SpindleSchedule {
    /// `(t_start, rpm, phase at t_start)`, sorted by time, first at t = 0.
    segments: Vec<(f64, f64, f64)>,
}

impl SpindleSchedule {
    pub fn constant(spindle_rpm: f64) -> Self {
        Self {
            segments: vec![(0.0, spindle_rpm, 0.0)],
        }
    }

    /// Build from `(t, rpm)` change points. The first point must be at t = 0.
    pub fn from_changes(changes: &[(f64, f64)]) -> Result<Self> {
        let Some(&(t0, rpm0)) = changes.first() else {
            return Err(Error::InvalidParameters("empty speed schedule".into()));
        };
        if t0 != 0.0 {
            return Err(Error::InvalidParameters(format!(
                "speed schedule must start at t = 0, got {t0}"
            )));
        }
        let mut schedule = Self::constant(rpm0);
        for &(t, rpm) in &changes[1..] {
            schedule.push_change(t, rpm)?;
        }
        for &(_, rpm) in changes {
            if !(rpm.is_finite() && rpm > 0.0) {
                return Err(Error::InvalidParameters(format!("spindle speed {rpm} rpm")));
            }
        }
        Ok(schedule)
    }

    /// Append a speed change at `t` (must not precede the last change).
    pub fn push_change(&mut self, t: f64, spindle_rpm: f64) -> Result<()> {
        let &(t_last, _, _) = self.segments.last().expect("non-empty");
        if t < t_last {
            return Err(Error::InvalidParameters(format!(
                "speed change at {t} s precedes previous change at {t_last} s"
            )));
        }
        let phase = self.phase_at(t);
        if t == t_last {
            self.segments.pop();
        }
        self.segments.push((t, spindle_rpm, phase));
        Ok(())
    }

    fn segment(&self, t: f64) -> &(f64, f64, f64) {
        let idx = self.segments.partition_point(|s| s.0 <= t);
        &self.segments[idx.saturating_sub(1)]
    }

    pub fn rpm_at(&self, t: f64) -> f64 {
        self.segment(t).1
    }

    /// Unreduced angle of tooth 0 at time `t`.
    pub fn phase_at(&self, t: f64) -> f64 {
        let &(t0, rpm, phase) = self.segment(t);
        phase + angular_speed(rpm) * (t - t0)
    }

    /// Offset `c` such that `phase_at(t) = Ω t + c` within the segment active at `t`.
    pub fn phase_offset_at(&self, t: f64) -> f64 {
        let &(t0, rpm, phase) = self.segment(t);
        phase - angular_speed(rpm) * t0
    }

    /// Start time of the constant-speed segment active at `t`.
    pub fn segment_start(&self, t: f64) -> f64 {
        self.segment(t).0
    }

    /// `(t, rpm)` change points.
    pub fn changes(&self) -> Vec<(f64, f64)> {
        self.segments.iter().map(|&(t, rpm, _)| (t, rpm)).collect()
    }

    pub fn min_rpm(&self) -> f64 {
        self.segments.iter().map(|s| s.1).fold(f64::INFINITY, f64::min)
    }

    pub fn max_rpm(&self) -> f64 {
        self.segments.iter().map(|s| s.1).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table1() -> ProcessParameters {
        ProcessParameters::table1()
    }

    #[test]
    fn tooth_angle_examples() {
        let p = table1();
        assert_eq!(tooth_angle(&p, 11_500.0, 0.0, 0), 0.0);
        assert_relative_eq!(tooth_angle(&p, 11_500.0, 0.0, 1), PI);
        let tau = p.delay(11_500.0);
        assert_relative_eq!(tooth_angle(&p, 11_500.0, tau, 0), PI, epsilon = 1e-12);
        // the rounded delay quoted in the tables
        assert_relative_eq!(tooth_angle(&p, 11_500.0, 2.6087e-3, 0), PI, epsilon = 1e-4);
    }

    #[test]
    fn engagement_examples() {
        let p = table1();
        let (a, b) = engagement_window(&p).unwrap();
        assert_relative_eq!(a, PI / 2.0, epsilon = 1e-12);
        assert_eq!(b, PI);

        let thin = ProcessParameters { radial_depth_mm: 1e-12, ..p };
        let (a, _) = engagement_window(&thin).unwrap();
        assert!(a < 1e-5);

        let full = ProcessParameters { radial_depth_mm: 6.35, ..p };
        let (a, b) = engagement_window(&full).unwrap();
        assert_relative_eq!(a, PI);
        assert_eq!(b, PI);

        let bad = ProcessParameters { radial_depth_mm: 6.36, ..p };
        assert!(engagement_window(&bad).is_err());
    }

    #[test]
    fn single_tooth_at_quarter_turn() {
        // N = 1 and a shallow entry angle so the only tooth at π/2 is engaged.
        let p = ProcessParameters {
            teeth: 1,
            radial_depth_mm: 1.0,
            ..table1()
        };
        let geom = CutterGeometry::new(&p).unwrap();
        let h = geom.basis(PI / 2.0).combine(p.kt, p.kr);
        let expected = Matrix2::new(p.kr, 0.0, -p.kt, 0.0);
        assert_relative_eq!(h, expected, epsilon = 1e-6 * p.kt);
    }

    #[test]
    fn no_tooth_engaged_and_boundary() {
        let p = table1();
        // t = 0: tooth 0 at 0 (outside), tooth 1 at π (exit edge, open interval)
        let h = directional_matrix(&p, 11_500.0, 0.0).unwrap();
        assert_eq!(h, Matrix2::zeros());
        let geom = CutterGeometry::new(&p).unwrap();
        assert!(!geom.engaged(PI));
        assert!(!geom.engaged(PI / 2.0));
        assert!(geom.engaged(PI / 2.0 + 1e-9));
    }

    #[test]
    fn directional_matrix_is_tooth_periodic() {
        let p = table1();
        let rpm = 10_579.0;
        let tau = p.delay(rpm);
        for k in 0..200 {
            let t = k as f64 * tau / 37.0 + 1e-7;
            let a = directional_matrix(&p, rpm, t).unwrap();
            let b = directional_matrix(&p, rpm, t + tau).unwrap();
            assert!((a - b).norm() <= 1e-6 * p.kt, "t = {t}");
        }
    }

    #[test]
    fn switching_times_bracket_engagement_changes() {
        let p = table1();
        let geom = CutterGeometry::new(&p).unwrap();
        let rpm = 11_500.0;
        let tau = p.delay(rpm);
        let times = geom.switching_times(rpm, 0.0, 0.0, 2.0 * tau);
        // two teeth × two edges per revolution, one revolution = 2τ; t = 0
        // itself (tooth 1 at π) is excluded as an endpoint.
        assert_eq!(times.len(), 3);
        for t in times {
            let before = geom.engaged(angular_speed(rpm) * (t - 1e-9));
            let after = geom.engaged(angular_speed(rpm) * (t + 1e-9));
            let before1 = geom.engaged(angular_speed(rpm) * (t - 1e-9) + PI);
            let after1 = geom.engaged(angular_speed(rpm) * (t + 1e-9) + PI);
            assert!(before != after || before1 != after1);
        }
    }

    #[test]
    fn schedule_phase_is_continuous() {
        let mut s = SpindleSchedule::constant(11_500.0);
        s.push_change(0.03, 10_600.0).unwrap();
        let left = s.phase_at(0.03 - 1e-12);
        let right = s.phase_at(0.03);
        assert!((left - right).abs() < 1e-6);
        assert_eq!(s.rpm_at(0.02), 11_500.0);
        assert_eq!(s.rpm_at(0.05), 10_600.0);
        let t = 0.04;
        assert_relative_eq!(
            s.phase_at(t),
            angular_speed(10_600.0) * t + s.phase_offset_at(t),
            epsilon = 1e-9
        );
        assert!(s.push_change(0.01, 9_000.0).is_err());
        assert_eq!(s.changes(), vec![(0.0, 11_500.0), (0.03, 10_600.0)]);
    }
}
