//! Process constants and operating points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tool, cutter and material constants of the two-degree-of-freedom spindle
/// model. The modal mass is shared by the x and y directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessParameters {
    pub teeth: u32,
    /// kg
    pub mass_kg: f64,
    pub diameter_mm: f64,
    pub radial_depth_mm: f64,
    pub zeta: f64,
    /// rad/s
    pub omega_n_rad_s: f64,
    /// Tangential cutting coefficient, N/m^2.
    pub kt: f64,
    /// Radial cutting coefficient, N/m^2.
    pub kr: f64,
}

/// The four parameters that drift during cutting and are re-identified online.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertainParameters {
    pub zeta: f64,
    pub omega_n: f64,
    pub kt: f64,
    pub kr: f64,
}

impl ProcessParameters {
    /// Reference two-flute end mill used throughout the simulations.
    pub fn table1() -> Self {
        Self {
            teeth: 2,
            mass_kg: 0.04,
            diameter_mm: 6.35,
            radial_depth_mm: 3.175,
            zeta: 0.011,
            omega_n_rad_s: 2.0 * std::f64::consts::PI * 1435.0,
            kt: 6.0e8,
            kr: 2.0e8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass_kg", self.mass_kg),
            ("diameter_mm", self.diameter_mm),
            ("radial_depth_mm", self.radial_depth_mm),
            ("omega_n_rad_s", self.omega_n_rad_s),
            ("kt", self.kt),
            ("kr", self.kr),
        ];
        if self.teeth == 0 {
            return Err(Error::InvalidParameters("teeth must be >= 1".into()));
        }
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameters(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(Error::InvalidParameters(format!(
                "zeta must lie in (0, 1), got {}",
                self.zeta
            )));
        }
        if self.radial_depth_mm > self.diameter_mm {
            return Err(Error::InvalidGeometry {
                radial_depth_mm: self.radial_depth_mm,
                diameter_mm: self.diameter_mm,
            });
        }
        Ok(())
    }

    /// Modal stiffness ω_n² M, N/m.
    pub fn stiffness(&self) -> f64 {
        self.omega_n_rad_s * self.omega_n_rad_s * self.mass_kg
    }

    /// Modal viscous damping 2ζω_n M, N·s/m.
    pub fn damping(&self) -> f64 {
        2.0 * self.zeta * self.omega_n_rad_s * self.mass_kg
    }

    pub fn uncertain(&self) -> UncertainParameters {
        UncertainParameters {
            zeta: self.zeta,
            omega_n: self.omega_n_rad_s,
            kt: self.kt,
            kr: self.kr,
        }
    }

    /// Copy with the uncertain parameters replaced.
    pub fn with_uncertain(&self, u: UncertainParameters) -> Self {
        Self {
            zeta: u.zeta,
            omega_n_rad_s: u.omega_n,
            kt: u.kt,
            kr: u.kr,
            ..*self
        }
    }

    /// Tooth-passing period for the given spindle speed, s.
    pub fn delay(&self, spindle_rpm: f64) -> f64 {
        60.0 / (self.teeth as f64 * spindle_rpm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub spindle_rpm: f64,
    pub depth_mm: f64,
}

impl OperatingPoint {
    pub fn new(spindle_rpm: f64, depth_mm: f64) -> Self {
        Self {
            spindle_rpm,
            depth_mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spindle_rpm.is_finite() && self.spindle_rpm > 0.0) {
            return Err(Error::InvalidParameters(format!(
                "spindle speed must be > 0 rpm, got {}",
                self.spindle_rpm
            )));
        }
        if !(self.depth_mm.is_finite() && self.depth_mm >= 0.0) {
            return Err(Error::InvalidParameters(format!(
                "axial depth must be >= 0 mm, got {}",
                self.depth_mm
            )));
        }
        Ok(())
    }

    /// Axial depth in metres.
    pub fn depth_m(&self) -> f64 {
        self.depth_mm * 1e-3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_is_valid() {
        let p = ProcessParameters::table1();
        p.validate().unwrap();
        // τ at 11,500 rpm with two flutes
        assert!((p.delay(11_500.0) - 2.6087e-3).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_values() {
        let base = ProcessParameters::table1();
        for bad in [
            ProcessParameters { teeth: 0, ..base },
            ProcessParameters { zeta: 1.0, ..base },
            ProcessParameters { zeta: 0.0, ..base },
            ProcessParameters { kt: -1.0, ..base },
            ProcessParameters { mass_kg: f64::NAN, ..base },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let wide = ProcessParameters {
            radial_depth_mm: 7.0,
            ..base
        };
        assert!(matches!(wide.validate(), Err(Error::InvalidGeometry { .. })));
    }

    #[test]
    fn uncertain_roundtrip() {
        let p = ProcessParameters::table1();
        let mut u = p.uncertain();
        u.kt *= 1.1;
        let q = p.with_uncertain(u);
        assert_eq!(q.kt, p.kt * 1.1);
        assert_eq!(q.teeth, p.teeth);
    }
}
