//! Spindle-speed selection on the actuation lattice.
//!
//! Every lattice speed is scored with
//! `L = α ln σ_max(Γ) − β ln(1 − ρ) + γ ln max(Δω², δ²) + ln r̂`, infeasible
//! speeds (`ρ ≥ 1`) score `+∞`, and the lowest finite score wins.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::OperatingPoint;
use crate::sld::SldGrid;

/// Floor applied to σ_max(Γ) before taking its logarithm. Only the a_p = 0
/// row, where the input channel vanishes, ever reaches it.
pub const GAMMA_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `[ω_min, ω_max]`, rpm.
    pub speed_bounds: [f64; 2],
    pub speed_step: f64,
    /// Minimum simulated time between applied changes, s.
    pub min_interval: f64,
    /// Floor on `|Δω|` in the speed term; defaults to one lattice step.
    pub delta_floor: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            gamma: 0.05,
            speed_bounds: [6_000.0, 16_000.0],
            speed_step: 100.0,
            min_interval: 0.2,
            delta_floor: None,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.speed_bounds;
        let weights_ok = [self.alpha, self.beta, self.gamma].iter().all(|w| w.is_finite() && *w > 0.0);
        if !weights_ok {
            return Err(Error::InvalidParameters("controller weights must be finite and > 0".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
            return Err(Error::InvalidParameters(format!("speed bounds [{lo}, {hi}]")));
        }
        if !(self.speed_step.is_finite() && self.speed_step > 0.0) {
            return Err(Error::InvalidParameters(format!("speed step {}", self.speed_step)));
        }
        if !(self.min_interval.is_finite() && self.min_interval >= 0.0) {
            return Err(Error::InvalidParameters(format!("min interval {}", self.min_interval)));
        }
        if self.delta_floor.is_some_and(|d| !(d.is_finite() && d > 0.0)) {
            return Err(Error::InvalidParameters("delta floor must be > 0".into()));
        }
        Ok(())
    }

    pub fn delta_floor(&self) -> f64 {
        self.delta_floor.unwrap_or(self.speed_step)
    }

    /// `{ω_min, ω_min + step, …}` up to `ω_max`.
    pub fn lattice(&self) -> Vec<f64> {
        let [lo, hi] = self.speed_bounds;
        let count = ((hi - lo) / self.speed_step + 1e-9).floor() as usize;
        (0..=count).map(|k| lo + k as f64 * self.speed_step).collect()
    }

    pub fn on_lattice(&self, omega: f64) -> bool {
        let [lo, hi] = self.speed_bounds;
        let k = (omega - lo) / self.speed_step;
        omega >= lo - 1e-9 && omega <= hi + 1e-9 && (k - k.round()).abs() <= 1e-9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub rho: f64,
    /// `−β ln(1 − ρ)`, `+∞` when infeasible.
    pub stability: f64,
    pub gamma: f64,
    pub speed: f64,
    pub roughness: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        if self.rho >= 1.0 {
            return f64::INFINITY;
        }
        self.stability + self.gamma + self.speed + self.roughness
    }

    pub fn feasible(&self) -> bool {
        self.total().is_finite()
    }
}

/// Score one lattice speed at depth `a_p`.
pub fn candidate_cost(
    omega: f64,
    grid: &SldGrid,
    ap_mm: f64,
    omega_current: f64,
    roughness_of: &dyn Fn(f64) -> f64,
    cfg: &ControllerConfig,
) -> Result<CostBreakdown> {
    if !cfg.on_lattice(omega) {
        return Err(Error::OutOfRange(format!("{omega} rpm is not a lattice speed")));
    }
    let op = OperatingPoint::new(omega, ap_mm);
    let rho = grid.interpolate_rho(&op)?;
    let gamma_max = grid.interpolate_gamma(&op)?;
    let r = roughness_of(omega);
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidParameters(format!("roughness {r} μm at {omega} rpm")));
    }
    let floor = cfg.delta_floor();
    let d2 = (omega - omega_current).powi(2).max(floor * floor);
    let stability = if rho < 1.0 { -cfg.beta * (1.0 - rho).ln() } else { f64::INFINITY };
    Ok(CostBreakdown {
        rho,
        stability,
        gamma: cfg.alpha * gamma_max.max(GAMMA_FLOOR).ln(),
        speed: cfg.gamma * d2.ln(),
        roughness: r.ln(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub t: f64,
    pub omega_current: f64,
    pub omega_star: f64,
    pub applied: bool,
    pub feasible: bool,
    pub rho_at_star: f64,
    pub cost: CostBreakdown,
}

/// Exhaustive lattice search. Ties go to the smallest `|ω − ω_current|`,
/// then to the lower speed. Without a stable candidate the current speed is
/// held and `feasible` is false. A change is only applied when at least
/// `min_interval` has passed since `last_change_time`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_speed(
    grid: &SldGrid,
    ap_mm: f64,
    omega_current: f64,
    roughness_of: &dyn Fn(f64) -> f64,
    cfg: &ControllerConfig,
    last_change_time: Option<f64>,
    now: f64,
) -> Result<ControlDecision> {
    cfg.validate()?;
    let mut best: Option<(f64, CostBreakdown)> = None;
    for omega in cfg.lattice() {
        let cost = candidate_cost(omega, grid, ap_mm, omega_current, roughness_of, cfg)?;
        if !cost.feasible() {
            continue;
        }
        let better = match &best {
            None => true,
            Some((w, c)) => {
                let (a, b) = (cost.total(), c.total());
                a < b
                    || (a == b
                        && ((omega - omega_current).abs(), omega) < ((w - omega_current).abs(), *w))
            }
        };
        if better {
            best = Some((omega, cost));
        }
    }
    let rate_ok = last_change_time.is_none_or(|t_last| now - t_last >= cfg.min_interval);
    Ok(match best {
        Some((omega_star, cost)) => ControlDecision {
            t: now,
            omega_current,
            omega_star,
            applied: rate_ok && omega_star != omega_current,
            feasible: true,
            rho_at_star: cost.rho,
            cost,
        },
        None => {
            let rho = grid
                .interpolate_rho(&OperatingPoint::new(omega_current, ap_mm))
                .unwrap_or(f64::NAN);
            ControlDecision {
                t: now,
                omega_current,
                omega_star: omega_current,
                applied: false,
                feasible: false,
                rho_at_star: rho,
                cost: CostBreakdown {
                    rho,
                    stability: f64::INFINITY,
                    gamma: f64::NAN,
                    speed: f64::NAN,
                    roughness: f64::NAN,
                },
            }
        }
    })
}

pub const DECISION_HEADER: &str =
    "t,omega_current,omega_star,applied,feasible,rho_at_star,cost_stability,cost_gamma,cost_speed,cost_roughness";

pub fn write_decisions_csv<W: Write>(decisions: &[ControlDecision], mut out: W) -> Result<()> {
    writeln!(out, "{DECISION_HEADER}")?;
    for d in decisions {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            d.t,
            d.omega_current,
            d.omega_star,
            u8::from(d.applied),
            u8::from(d.feasible),
            d.rho_at_star,
            d.cost.stability,
            d.cost.gamma,
            d.cost.speed,
            d.cost.roughness
        )?;
    }
    Ok(())
}
