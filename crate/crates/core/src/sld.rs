//! Stability lobe diagrams: ρ(Φ) and σ_max(Γ) over a speed × depth grid.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::params::{OperatingPoint, ProcessParameters};
use crate::sdm::{stability_metrics, zero_depth_rho, SdmConfig};

/// Fraction of failed grid points above which a sweep is abandoned.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// `[ω_min, ω_max]`, rpm.
    pub speed_range: [f64; 2],
    /// `[a_min, a_max]`, mm.
    pub depth_range: [f64; 2],
    pub speed_count: usize,
    pub depth_count: usize,
    #[serde(default)]
    pub sdm: SdmConfig,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            speed_range: [6_000.0, 16_000.0],
            depth_range: [0.0, 2.5],
            speed_count: 200,
            depth_count: 100,
            sdm: SdmConfig::default(),
        }
    }
}

/// Evenly spaced nodes; the last node is exactly `hi`.
fn nodes(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (count - 1) as f64;
    (0..count)
        .map(|i| if i + 1 == count { hi } else { lo + step * i as f64 })
        .collect()
}

fn check_axis(name: &str, [lo, hi]: [f64; 2], count: usize) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::InvalidParameters(format!("{name} range [{lo}, {hi}]")));
    }
    // a single node is only meaningful for a degenerate range
    let ok = if lo == hi { count == 1 } else { count >= 2 };
    if !ok {
        return Err(Error::InvalidParameters(format!(
            "{name} count {count} does not fit range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        self.sdm.validate()?;
        check_axis("speed", self.speed_range, self.speed_count)?;
        check_axis("depth", self.depth_range, self.depth_count)?;
        if self.speed_range[0] <= 0.0 {
            return Err(Error::InvalidParameters("speeds must be > 0 rpm".into()));
        }
        if self.depth_range[0] < 0.0 {
            return Err(Error::InvalidParameters("depths must be >= 0 mm".into()));
        }
        Ok(())
    }

    pub fn speeds(&self) -> Vec<f64> {
        nodes(self.speed_range[0], self.speed_range[1], self.speed_count)
    }

    pub fn depths(&self) -> Vec<f64> {
        nodes(self.depth_range[0], self.depth_range[1], self.depth_count)
    }

    pub fn len(&self) -> usize {
        self.speed_count * self.depth_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub omega_rpm: f64,
    pub ap_mm: f64,
    pub message: String,
}

/// Evaluated grid. Fields are stored row-major: depth rows, speed columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SldGrid {
    pub spec: GridSpec,
    pub rho: Vec<f64>,
    pub gamma_max: Vec<f64>,
    pub params_used: ProcessParameters,
    /// Process time at which the parameters were estimated, s.
    pub timestamp: f64,
    pub failures: Vec<GridFailure>,
    speeds: Vec<f64>,
    depths: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub stable: bool,
    pub rho: f64,
    /// `1 − ρ`
    pub margin: f64,
}

impl SldGrid {
    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn rho_at(&self, depth_idx: usize, speed_idx: usize) -> f64 {
        self.rho[depth_idx * self.spec.speed_count + speed_idx]
    }

    pub fn gamma_at(&self, depth_idx: usize, speed_idx: usize) -> f64 {
        self.gamma_max[depth_idx * self.spec.speed_count + speed_idx]
    }

    /// Bilinear interpolation of ρ at `op`.
    pub fn interpolate_rho(&self, op: &OperatingPoint) -> Result<f64> {
        self.interpolate(&self.rho, op)
    }

    /// Bilinear interpolation of σ_max(Γ) at `op`.
    pub fn interpolate_gamma(&self, op: &OperatingPoint) -> Result<f64> {
        self.interpolate(&self.gamma_max, op)
    }

    fn interpolate(&self, field: &[f64], op: &OperatingPoint) -> Result<f64> {
        let (s0, s1, fs) = bracket(&self.speeds, op.spindle_rpm)
            .ok_or_else(|| Error::OutOfRange(format!("speed {} rpm outside grid", op.spindle_rpm)))?;
        let (d0, d1, fd) = bracket(&self.depths, op.depth_mm)
            .ok_or_else(|| Error::OutOfRange(format!("depth {} mm outside grid", op.depth_mm)))?;
        let n = self.spec.speed_count;
        let v = |d: usize, s: usize| field[d * n + s];
        // skip zero-weight corners so a node query returns the node value exactly
        let mut acc = (1.0 - fs) * (1.0 - fd) * v(d0, s0);
        if fs != 0.0 {
            acc += fs * (1.0 - fd) * v(d0, s1);
        }
        if fd != 0.0 {
            acc += (1.0 - fs) * fd * v(d1, s0);
            if fs != 0.0 {
                acc += fs * fd * v(d1, s1);
            }
        }
        Ok(acc)
    }

    /// JSON sidecar describing how the grid was produced.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "grid_spec": self.spec,
            "params": self.params_used,
            "timestamp": self.timestamp,
            "failures": self.failures,
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "omega_rpm,ap_mm,rho,gamma_max,stable")?;
        for (d, ap) in self.depths.iter().enumerate() {
            for (s, omega) in self.speeds.iter().enumerate() {
                let rho = self.rho_at(d, s);
                let stable = u8::from(rho < 1.0);
                writeln!(out, "{omega},{ap},{rho},{},{stable}", self.gamma_at(d, s))?;
            }
        }
        Ok(())
    }
}

/// `(i, j, f)` with `x = (1 − f)·nodes[i] + f·nodes[j]`; `f = 0` on a node.
fn bracket(nodes: &[f64], x: f64) -> Option<(usize, usize, f64)> {
    let (&first, &last) = (nodes.first()?, nodes.last()?);
    if !(x >= first && x <= last) {
        return None;
    }
    let hi = nodes.partition_point(|&v| v <= x);
    let i = hi - 1;
    if nodes[i] == x || i + 1 == nodes.len() {
        return Some((i, i, 0.0));
    }
    Some((i, i + 1, (x - nodes[i]) / (nodes[i + 1] - nodes[i])))
}

/// Sweep the grid with the given number of workers; the timestamp is zero.
pub fn compute_sld(params: &ProcessParameters, spec: &GridSpec, workers: usize) -> Result<SldGrid> {
    compute_sld_at(params, spec, workers, 0.0)
}

pub fn compute_sld_at(params: &ProcessParameters, spec: &GridSpec, workers: usize, timestamp: f64) -> Result<SldGrid> {
    params.validate()?;
    spec.validate()?;
    let speeds = spec.speeds();
    let depths = spec.depths();
    let points: Vec<(f64, f64)> = depths
        .iter()
        .flat_map(|&ap| speeds.iter().map(move |&omega| (omega, ap)))
        .collect();
    let cfg = spec.sdm;
    let results = par_map(workers, &points, |&(omega, ap)| {
        if ap == 0.0 {
            return Ok((zero_depth_rho(params, omega), 0.0));
        }
        let (rho, gamma) = stability_metrics(params, &OperatingPoint::new(omega, ap), &cfg)?;
        if rho.is_finite() && gamma.is_finite() {
            Ok((rho, gamma))
        } else {
            Err(Error::Numerical {
                interval: 0,
                what: format!("non-finite metrics rho={rho} gamma={gamma}"),
            })
        }
    })?;

    let mut rho = Vec::with_capacity(points.len());
    let mut gamma_max = Vec::with_capacity(points.len());
    let mut failures = Vec::new();
    for (&(omega, ap), res) in points.iter().zip(results) {
        match res {
            Ok((r, g)) => {
                rho.push(r);
                gamma_max.push(g);
            }
            Err(e) => {
                rho.push(f64::NAN);
                gamma_max.push(f64::NAN);
                failures.push(GridFailure {
                    omega_rpm: omega,
                    ap_mm: ap,
                    message: e.to_string(),
                });
            }
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * points.len() as f64 {
        let first = &failures[0];
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: points.len(),
            first: format!("({} rpm, {} mm): {}", first.omega_rpm, first.ap_mm, first.message),
        });
    }
    Ok(SldGrid {
        spec: *spec,
        rho,
        gamma_max,
        params_used: *params,
        timestamp,
        failures,
        speeds,
        depths,
    })
}

/// Assemble a grid from precomputed fields (row-major, depth then speed).
pub fn grid_from_fields(
    params: &ProcessParameters,
    spec: &GridSpec,
    rho: Vec<f64>,
    gamma_max: Vec<f64>,
    timestamp: f64,
) -> Result<SldGrid> {
    spec.validate()?;
    if rho.len() != spec.len() || gamma_max.len() != spec.len() {
        return Err(Error::InvalidParameters(format!(
            "field length {} / {} does not match grid size {}",
            rho.len(),
            gamma_max.len(),
            spec.len()
        )));
    }
    Ok(SldGrid {
        spec: *spec,
        rho,
        gamma_max,
        params_used: *params,
        timestamp,
        failures: Vec::new(),
        speeds: spec.speeds(),
        depths: spec.depths(),
    })
}

pub fn classify(grid: &SldGrid, op: &OperatingPoint) -> Result<Classification> {
    let rho = grid.interpolate_rho(op)?;
    Ok(Classification {
        stable: rho < 1.0,
        rho,
        margin: 1.0 - rho,
    })
}

/// Lowest depth per speed column at which ρ reaches 1, linearly interpolated
/// between the bracketing rows; `a_max` when the column never crosses.
pub fn extract_boundary(grid: &SldGrid) -> Vec<(f64, f64)> {
    let depths = grid.depths();
    let a_max = *depths.last().expect("non-empty grid");
    grid.speeds()
        .iter()
        .enumerate()
        .map(|(s, &omega)| {
            let mut star = a_max;
            for d in 0..depths.len() {
                let r = grid.rho_at(d, s);
                if !(r >= 1.0) {
                    continue;
                }
                star = if d == 0 {
                    depths[0]
                } else {
                    let r0 = grid.rho_at(d - 1, s);
                    if r0.is_finite() {
                        depths[d - 1] + (1.0 - r0) / (r - r0) * (depths[d] - depths[d - 1])
                    } else {
                        depths[d]
                    }
                };
                break;
            }
            (omega, star)
        })
        .collect()
}

pub fn write_boundary_csv<W: Write>(boundary: &[(f64, f64)], mut out: W) -> Result<()> {
    writeln!(out, "omega_rpm,ap_star_mm")?;
    for (omega, ap) in boundary {
        writeln!(out, "{omega},{ap}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn coarse() -> GridSpec {
        GridSpec {
            speed_range: [6_000.0, 16_000.0],
            depth_range: [0.0, 2.5],
            speed_count: 101,
            depth_count: 26,
            sdm: SdmConfig::default(),
        }
    }

    #[test]
    fn spec_validation() {
        GridSpec::default().validate().unwrap();
        assert_eq!(GridSpec::default().len(), 20_000);
        let bad = [
            GridSpec { speed_count: 1, ..GridSpec::default() },
            GridSpec { speed_range: [0.0, 100.0], ..GridSpec::default() },
            GridSpec { depth_range: [-1.0, 1.0], ..GridSpec::default() },
            GridSpec { depth_range: [2.0, 1.0], ..GridSpec::default() },
            GridSpec { depth_range: [0.0, 0.0], ..GridSpec::default() },
        ];
        for spec in bad {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
        let flat = GridSpec { depth_range: [0.0, 0.0], depth_count: 1, ..GridSpec::default() };
        flat.validate().unwrap();
    }

    #[test]
    fn nodes_hit_the_ends() {
        let spec = GridSpec::default();
        let s = spec.speeds();
        assert_eq!(s[0], 6_000.0);
        assert_eq!(s[199], 16_000.0);
        assert_eq!(spec.depths()[99], 2.5);
    }

    #[test]
    fn zero_depth_row_is_analytic() {
        let p = ProcessParameters::table1();
        let spec = GridSpec { depth_range: [0.0, 0.0], depth_count: 1, speed_count: 11, ..GridSpec::default() };
        let grid = compute_sld(&p, &spec, 1).unwrap();
        for (s, &omega) in grid.speeds().iter().enumerate() {
            assert_eq!(grid.rho_at(0, s), zero_depth_rho(&p, omega));
            assert_eq!(grid.gamma_at(0, s), 0.0);
        }
        let c = classify(&grid, &OperatingPoint::new(11_000.0, 0.0)).unwrap();
        assert!(c.stable);
        assert_relative_eq!(c.margin, 1.0 - zero_depth_rho(&p, 11_000.0));
    }

    fn synthetic(a0: f64) -> SldGrid {
        let spec = GridSpec { speed_count: 4, depth_count: 11, ..GridSpec::default() };
        let depths = spec.depths();
        let rho: Vec<f64> = depths.iter().flat_map(|&a| std::iter::repeat_n(a / a0, 4)).collect();
        let gamma = vec![1.0; rho.len()];
        grid_from_fields(&ProcessParameters::table1(), &spec, rho, gamma, 0.0).unwrap()
    }

    #[test]
    fn linear_synthetic_boundary() {
        let grid = synthetic(1.37);
        for (_, star) in extract_boundary(&grid) {
            assert_relative_eq!(star, 1.37, epsilon = 1e-12);
        }
        let stable = synthetic(10.0);
        assert!(extract_boundary(&stable).iter().all(|&(_, a)| a == 2.5));
    }

    #[test]
    fn node_queries_are_exact() {
        let p = ProcessParameters::table1();
        let spec = GridSpec { speed_count: 7, depth_count: 5, ..coarse() };
        let grid = compute_sld(&p, &spec, 1).unwrap();
        for (d, &ap) in grid.depths().iter().enumerate() {
            for (s, &omega) in grid.speeds().iter().enumerate() {
                let c = classify(&grid, &OperatingPoint::new(omega, ap)).unwrap();
                assert_eq!(c.rho, grid.rho_at(d, s));
                assert_eq!(c.stable, grid.rho_at(d, s) < 1.0);
            }
        }
        assert!(classify(&grid, &OperatingPoint::new(5_999.0, 1.0)).is_err());
        assert!(classify(&grid, &OperatingPoint::new(7_000.0, 2.6)).is_err());
    }

    #[test]
    fn reference_points_and_lobes() {
        let p = ProcessParameters::table1();
        let grid = compute_sld(&p, &coarse(), 1).unwrap();
        assert!(grid.failures.is_empty());
        assert!(!classify(&grid, &OperatingPoint::new(11_500.0, 1.0)).unwrap().stable);
        let c = classify(&grid, &OperatingPoint::new(10_579.0, 1.0)).unwrap();
        assert!(c.stable, "rho {}", c.rho);

        let boundary = extract_boundary(&grid);
        let maxima = boundary
            .windows(3)
            .filter(|w| w[1].1 > w[0].1 && w[1].1 >= w[2].1)
            .count();
        assert!(maxima >= 2, "{maxima} local maxima");
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let p = ProcessParameters::table1();
        let spec = GridSpec { speed_count: 13, depth_count: 6, ..coarse() };
        let render = |workers| {
            let mut buf = Vec::new();
            compute_sld(&p, &spec, workers).unwrap().write_csv(&mut buf).unwrap();
            buf
        };
        assert_eq!(render(1), render(4));
    }

    #[test]
    fn csv_layout() {
        let grid = synthetic(1.37);
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "omega_rpm,ap_mm,rho,gamma_max,stable");
        assert_eq!(lines.len(), 1 + 44);
        assert_eq!(lines[1], "6000,0,0,1,1");
        // second row of the file is the next speed at the same depth
        assert!(lines[2].starts_with("9333.333333333334,0,"));
        let mut b = Vec::new();
        write_boundary_csv(&[(6000.0, 1.37)], &mut b).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "omega_rpm,ap_star_mm\n6000,1.37\n");
    }

    #[test]
    fn too_many_failures_abort() {
        // absurd cutting stiffness overflows every matrix exponential with a_p > 0
        let p = ProcessParameters { kt: 1e300, kr: 1e300, ..ProcessParameters::table1() };
        let spec = GridSpec { speed_count: 5, depth_count: 3, ..coarse() };
        match compute_sld(&p, &spec, 1) {
            Err(Error::TooManyFailures { failed, total, .. }) => {
                assert_eq!((failed, total), (10, 15));
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }
}
