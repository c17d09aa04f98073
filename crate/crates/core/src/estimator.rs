//! Identification of `(ζ, ω_n, K_t, K_r)` from a window of sensor samples.
//!
//! The two force reconstructions
//!
//! ```text
//! F_LHS = M q̈ + C(ζ, ω_n) q̇ + K(ω_n) q
//! F_RHS = a_p H_d(K_t, K_r, t) (q_τ − q)
//! ```
//!
//! are each linear in a pair of unknowns (`c = 2ζω_n M`, `k = ω_n² M` and
//! `K_t`, `K_r`), so minimizing `mean ‖F_LHS − F‖² + ‖F_RHS − F‖²` splits into
//! two small linear least-squares problems.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{angular_speed, CutterGeometry, DirectionalBasis};
use crate::error::{Error, Result};
use crate::params::{OperatingPoint, ProcessParameters, UncertainParameters};
use crate::simulate::{StateSample, Trajectory};
use crate::sld::{compute_sld_at, GridSpec, SldGrid};

/// Smallest usable window, samples.
pub const MIN_WINDOW_SAMPLES: usize = 50;
/// Column-scaled condition number above which a fit is rejected.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct SensorWindow {
    pub samples: Vec<StateSample>,
    pub op: OperatingPoint,
    /// `q(t − τ)` aligned with `samples`.
    pub delayed: Vec<Vector2<f64>>,
    /// Tooth 0 sits at angle `Ω t + phase_offset`.
    pub phase_offset: f64,
}

impl SensorWindow {
    /// Cut the samples with `t` in `[t0, t1]` out of a recorded trajectory.
    /// The window and its delayed history must see a single spindle speed.
    pub fn from_trajectory(traj: &Trajectory, t0: f64, t1: f64, teeth: u32, depth_mm: f64) -> Result<Self> {
        if !(t0 >= 0.0 && t1 > t0) || teeth == 0 {
            return Err(Error::InvalidWindow(format!("bad window [{t0}, {t1}]")));
        }
        let h = traj.step;
        let i0 = (t0 / h - 1e-6).ceil().max(0.0) as usize;
        let i1 = (t1 / h + 1e-6).floor() as usize;
        if i1 >= traj.samples.len() || i0 >= i1 {
            return Err(Error::InvalidWindow(format!(
                "[{t0}, {t1}] not covered by the record ending at {} s",
                traj.duration()
            )));
        }
        let schedule = traj.schedule()?;
        let (ta, tb) = (traj.samples[i0].t, traj.samples[i1].t);
        let rpm = schedule.rpm_at(ta);
        let tau = 60.0 / (teeth as f64 * rpm);
        let seg = schedule.segment_start(tb);
        if schedule.segment_start(ta) != seg || (seg > 0.0 && ta - tau < seg) {
            return Err(Error::InvalidWindow(format!(
                "spindle speed changes within [{}, {tb}]",
                ta - tau
            )));
        }
        let samples = traj.samples[i0..=i1].to_vec();
        let delayed = samples.iter().map(|s| traj.displacement_at(s.t - tau)).collect();
        let window = Self {
            samples,
            op: OperatingPoint::new(rpm, depth_mm),
            delayed,
            phase_offset: schedule.phase_offset_at(ta),
        };
        window.validate(teeth)?;
        Ok(window)
    }

    pub fn validate(&self, teeth: u32) -> Result<()> {
        self.op.validate()?;
        let n = self.samples.len();
        if n < MIN_WINDOW_SAMPLES {
            return Err(Error::InvalidWindow(format!(
                "{n} samples, need at least {MIN_WINDOW_SAMPLES}"
            )));
        }
        if self.delayed.len() != n {
            return Err(Error::InvalidWindow("delayed displacements misaligned".into()));
        }
        let tau = 60.0 / (teeth as f64 * self.op.spindle_rpm);
        if self.span() < 2.0 * tau * (1.0 - 1e-9) {
            return Err(Error::InvalidWindow(format!(
                "window spans {} s, less than two tooth periods ({} s)",
                self.span(),
                2.0 * tau
            )));
        }
        let h = self.samples[1].t - self.samples[0].t;
        if self.samples.windows(2).any(|w| ((w[1].t - w[0].t) - h).abs() > 1e-6 * h) {
            return Err(Error::InvalidWindow("non-uniform sampling".into()));
        }
        Ok(())
    }

    pub fn span(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    pub fn time_range(&self) -> [f64; 2] {
        [
            self.samples.first().map_or(0.0, |s| s.t),
            self.samples.last().map_or(0.0, |s| s.t),
        ]
    }

    /// Replace `q̇` and `q̈` by central differences of `q`, dropping the two
    /// end samples. Fallback for data sets that only carry displacement and
    /// force; less accurate than measured derivatives.
    pub fn with_differentiated_motion(&self) -> Result<Self> {
        let n = self.samples.len();
        if n < 3 {
            return Err(Error::InvalidWindow("need three samples to differentiate".into()));
        }
        let h = self.samples[1].t - self.samples[0].t;
        let samples = (1..n - 1)
            .map(|i| {
                let (a, b, c) = (&self.samples[i - 1].q, &self.samples[i].q, &self.samples[i + 1].q);
                StateSample {
                    dq: (c - a) / (2.0 * h),
                    ddq: (c - 2.0 * b + a) / (h * h),
                    ..self.samples[i]
                }
            })
            .collect();
        Ok(Self {
            samples,
            delayed: self.delayed[1..n - 1].to_vec(),
            ..self.clone()
        })
    }

    fn bases(&self, geom: &CutterGeometry) -> Vec<DirectionalBasis> {
        let omega = angular_speed(self.op.spindle_rpm);
        self.samples
            .iter()
            .map(|s| geom.basis(omega * s.t + self.phase_offset))
            .collect()
    }
}

/// Box constraints on the identified parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterBounds {
    pub zeta: [f64; 2],
    pub omega_n: [f64; 2],
    pub kt: [f64; 2],
    pub kr: [f64; 2],
}

impl ParameterBounds {
    /// `[p/factor, p·factor]` around nominal values, with ζ kept inside (0, 1).
    pub fn around(nominal: &UncertainParameters, factor: f64) -> Self {
        let span = |v: f64| [v / factor, v * factor];
        let [z0, z1] = span(nominal.zeta);
        Self {
            zeta: [z0.max(1e-9), z1.min(1.0 - 1e-9)],
            omega_n: span(nominal.omega_n),
            kt: span(nominal.kt),
            kr: span(nominal.kr),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("zeta", self.zeta), ("omega_n", self.omega_n), ("kt", self.kt), ("kr", self.kr)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo > 0.0) {
                return Err(Error::InvalidParameters(format!("{name} bounds [{lo}, {hi}]")));
            }
        }
        if self.zeta[1] >= 1.0 {
            return Err(Error::InvalidParameters("zeta bounds must stay below 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatedParameters {
    pub zeta: f64,
    pub omega_n_rad_s: f64,
    pub kt: f64,
    pub kr: f64,
    pub loss: f64,
    /// RMS of the LHS correction term, N.
    pub residual_lhs: f64,
    /// RMS of the RHS correction term, N.
    pub residual_rhs: f64,
    pub window: [f64; 2],
    /// Set when an estimate had to be clamped into the bounds.
    pub low_confidence: bool,
}

impl EstimatedParameters {
    pub fn uncertain(&self) -> UncertainParameters {
        UncertainParameters {
            zeta: self.zeta,
            omega_n: self.omega_n_rad_s,
            kt: self.kt,
            kr: self.kr,
        }
    }

    /// The fixed constants of `nominal` with the estimated ones substituted.
    pub fn apply_to(&self, nominal: &ProcessParameters) -> ProcessParameters {
        nominal.with_uncertain(self.uncertain())
    }
}

/// Per-sample `(F_LHS, F_RHS)` for a candidate parameter set. Mass and
/// cutter geometry come from `fixed`.
pub fn residual_forces(
    window: &SensorWindow,
    candidate: &UncertainParameters,
    fixed: &ProcessParameters,
) -> Result<Vec<(Vector2<f64>, Vector2<f64>)>> {
    let geom = CutterGeometry::new(fixed)?;
    let m = fixed.mass_kg;
    let c = 2.0 * candidate.zeta * candidate.omega_n * m;
    let k = candidate.omega_n * candidate.omega_n * m;
    let ap = window.op.depth_m();
    Ok(window
        .samples
        .iter()
        .zip(&window.delayed)
        .zip(window.bases(&geom))
        .map(|((s, qd), basis)| {
            let lhs = s.ddq * m + s.dq * c + s.q * k;
            let rhs = basis.combine(candidate.kt, candidate.kr) * (qd - s.q) * ap;
            (lhs, rhs)
        })
        .collect())
}

/// `mean ‖F_LHS − F‖² + ‖F_RHS − F‖²`.
pub fn total_loss(window: &SensorWindow, candidate: &UncertainParameters, fixed: &ProcessParameters) -> Result<f64> {
    let forces = residual_forces(window, candidate, fixed)?;
    if forces.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = forces
        .iter()
        .zip(&window.samples)
        .map(|((l, r), s)| (l - s.force).norm_squared() + (r - s.force).norm_squared())
        .sum();
    Ok(sum / forces.len() as f64)
}

/// Interface for the parameter-identification model.
pub trait Estimator {
    fn estimate(&self, window: &SensorWindow, fixed: &ProcessParameters, bounds: &ParameterBounds) -> Result<EstimatedParameters>;
}

/// Separable linear least squares; corrections are the post-fit residuals.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LeastSquaresEstimator;

/// Same fit with a quadratic penalty `λ‖∇‖²` on the correction terms. The
/// optimal corrections are `∇ = −r/(1 + λ)`, which leaves the parameter
/// argmin unchanged and scales the loss by `λ/(1 + λ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizedEstimator {
    pub lambda: f64,
}

impl Default for RegularizedEstimator {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl Estimator for LeastSquaresEstimator {
    fn estimate(&self, window: &SensorWindow, fixed: &ProcessParameters, bounds: &ParameterBounds) -> Result<EstimatedParameters> {
        estimate_parameters(window, fixed, bounds)
    }
}

impl Estimator for RegularizedEstimator {
    fn estimate(&self, window: &SensorWindow, fixed: &ProcessParameters, bounds: &ParameterBounds) -> Result<EstimatedParameters> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidParameters(format!("lambda {}", self.lambda)));
        }
        let mut est = estimate_parameters(window, fixed, bounds)?;
        let shrink = 1.0 / (1.0 + self.lambda);
        est.residual_lhs *= shrink;
        est.residual_rhs *= shrink;
        est.loss *= self.lambda * shrink;
        Ok(est)
    }
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(acc, n), v| (acc + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Two-column least squares `y ≈ x0·u + x1·v` with column scaling and a
/// condition-number gate.
fn fit_pair(u: &DVector<f64>, v: &DVector<f64>, y: &DVector<f64>, what: &str) -> Result<(f64, f64)> {
    let (nu, nv) = (u.norm(), v.norm());
    if !(nu > 0.0 && nv > 0.0 && nu.is_finite() && nv.is_finite()) {
        return Err(Error::Unidentifiable(format!("{what}: a regressor is identically zero")));
    }
    let mut a = DMatrix::zeros(u.len(), 2);
    a.set_column(0, &(u / nu));
    a.set_column(1, &(v / nv));
    let svd = a.svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    let cond = smax / smin;
    if !(cond.is_finite() && cond <= MAX_CONDITION) {
        return Err(Error::Unidentifiable(format!("{what}: condition number {cond:e}")));
    }
    let x = svd
        .solve(y, 0.0)
        .map_err(|e| Error::Unidentifiable(format!("{what}: {e}")))?;
    Ok((x[0] / nu, x[1] / nv))
}

fn clamp(v: f64, [lo, hi]: [f64; 2], clamped: &mut bool) -> f64 {
    if v.is_nan() {
        *clamped = true;
        return 0.5 * (lo + hi);
    }
    let c = v.clamp(lo, hi);
    *clamped |= c != v;
    c
}

/// Reference estimator: separable linear least squares.
pub fn estimate_parameters(window: &SensorWindow, fixed: &ProcessParameters, bounds: &ParameterBounds) -> Result<EstimatedParameters> {
    fixed.validate()?;
    bounds.validate()?;
    window.validate(fixed.teeth)?;
    let acc_rms = rms(window.samples.iter().flat_map(|s| [s.ddq.x, s.ddq.y]));
    if !(acc_rms > f64::MIN_POSITIVE && acc_rms.is_finite()) {
        return Err(Error::Unidentifiable("no excitation (RMS acceleration is zero)".into()));
    }
    let n = window.samples.len();
    let m = fixed.mass_kg;
    let geom = CutterGeometry::new(fixed)?;
    let bases = window.bases(&geom);
    let ap = window.op.depth_m();

    // LHS: F − M q̈ = c q̇ + k q
    let stack = |f: &dyn Fn(usize) -> Vector2<f64>| DVector::from_iterator(2 * n, (0..n).flat_map(|i| {
        let v = f(i);
        [v.x, v.y]
    }));
    let s = &window.samples;
    let y_lhs = stack(&|i| s[i].force - s[i].ddq * m);
    let (c, k) = fit_pair(&stack(&|i| s[i].dq), &stack(&|i| s[i].q), &y_lhs, "damping/stiffness")?;
    if !(k > 0.0) {
        return Err(Error::Unidentifiable(format!("fitted stiffness {k} is not positive")));
    }
    let omega_n = (k / m).sqrt();
    let zeta = c / (2.0 * m * omega_n);

    // RHS: F = K_t a_p T Δ + K_r a_p R Δ with Δ = q_τ − q
    let delta = |i: usize| window.delayed[i] - s[i].q;
    let t_col = stack(&|i| bases[i].tangential * delta(i) * ap);
    let r_col = stack(&|i| bases[i].radial * delta(i) * ap);
    let y_rhs = stack(&|i| s[i].force);
    let (kt, kr) = fit_pair(&t_col, &r_col, &y_rhs, "cutting coefficients")?;

    let mut clamped = false;
    let est = UncertainParameters {
        zeta: clamp(zeta, bounds.zeta, &mut clamped),
        omega_n: clamp(omega_n, bounds.omega_n, &mut clamped),
        kt: clamp(kt, bounds.kt, &mut clamped),
        kr: clamp(kr, bounds.kr, &mut clamped),
    };
    let forces = residual_forces(window, &est, fixed)?;
    let residual_lhs = rms(forces.iter().zip(s).flat_map(|((l, _), smp)| {
        let r = l - smp.force;
        [r.x, r.y]
    }));
    let residual_rhs = rms(forces.iter().zip(s).flat_map(|((_, r), smp)| {
        let r = r - smp.force;
        [r.x, r.y]
    }));
    Ok(EstimatedParameters {
        zeta: est.zeta,
        omega_n_rad_s: est.omega_n,
        kt: est.kt,
        kr: est.kr,
        // both correction terms hold two components per sample
        loss: 2.0 * (residual_lhs * residual_lhs + residual_rhs * residual_rhs),
        residual_lhs,
        residual_rhs,
        window: window.time_range(),
        low_confidence: clamped,
    })
}

/// Estimate the parameters and sweep `spec` with them, stamping the grid with
/// the end of the window.
pub fn online_sld(
    window: &SensorWindow,
    fixed: &ProcessParameters,
    bounds: &ParameterBounds,
    spec: &GridSpec,
    workers: usize,
    estimator: &dyn Estimator,
) -> Result<(EstimatedParameters, SldGrid)> {
    let est = estimator.estimate(window, fixed, bounds)?;
    let grid = compute_sld_at(&est.apply_to(fixed), spec, workers, window.time_range()[1])?;
    Ok((est, grid))
}

/// `M q̈ + C q̇ + K q` with the given parameters, per sample.
pub fn dynamics_force(samples: &[StateSample], params: &ProcessParameters) -> Vec<Vector2<f64>> {
    let (m, c, k) = (params.mass_kg, params.damping(), params.stiffness());
    samples.iter().map(|s| s.ddq * m + s.dq * c + s.q * k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{default_step, simulate_dde};
    use proptest::prelude::*;

    fn table1() -> ProcessParameters {
        ProcessParameters::table1()
    }

    fn sim(p: &ProcessParameters, rpm: f64, depth: f64, duration: f64, noise: f64, seed: u64) -> Trajectory {
        simulate_dde(p, &[(0.0, rpm)], depth, duration, default_step(p, rpm), Vector2::new(1e-5, 1e-5), noise, seed).unwrap()
    }

    fn window(traj: &Trajectory, p: &ProcessParameters, t1: f64, depth: f64) -> SensorWindow {
        let tau = p.delay(traj.schedule().unwrap().rpm_at(t1));
        SensorWindow::from_trajectory(traj, t1 - 4.0 * tau, t1, p.teeth, depth).unwrap()
    }

    fn bounds() -> ParameterBounds {
        ParameterBounds::around(&table1().uncertain(), 2.0)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn zero_motion_window() {
        let p = table1();
        let traj = sim(&p, 10_579.0, 1.0, 0.02, 0.0, 0);
        let mut w = window(&traj, &p, 0.02, 1.0);
        for s in &mut w.samples {
            *s = StateSample { t: s.t, ..StateSample { t: 0.0, q: Vector2::zeros(), dq: Vector2::zeros(), ddq: Vector2::zeros(), force: Vector2::zeros() } };
        }
        w.delayed.iter_mut().for_each(|d| *d = Vector2::zeros());
        let forces = residual_forces(&w, &p.uncertain(), &p).unwrap();
        assert!(forces.iter().all(|(l, r)| *l == Vector2::zeros() && *r == Vector2::zeros()));
        assert_eq!(total_loss(&w, &p.uncertain(), &p).unwrap(), 0.0);
        assert!(matches!(estimate_parameters(&w, &p, &bounds()), Err(Error::Unidentifiable(_))));
    }

    #[test]
    fn stiffness_scales_with_omega_squared() {
        let p = table1();
        let traj = sim(&p, 10_579.0, 1.0, 0.02, 0.0, 0);
        let mut w = window(&traj, &p, 0.02, 1.0);
        for s in &mut w.samples {
            s.dq = Vector2::zeros();
            s.ddq = Vector2::zeros();
        }
        let mut doubled = p.uncertain();
        doubled.omega_n *= 2.0;
        let base = residual_forces(&w, &p.uncertain(), &p).unwrap();
        let twice = residual_forces(&w, &doubled, &p).unwrap();
        for ((l0, _), (l1, _)) in base.iter().zip(&twice).step_by(53) {
            assert!((l1 - l0 * 4.0).norm() <= 1e-12 * l1.norm());
        }
    }

    #[test]
    fn truth_reproduces_recorded_force() {
        let p = table1();
        let traj = sim(&p, 11_500.0, 1.0, 0.02, 0.0, 0);
        let w = window(&traj, &p, 0.02, 1.0);
        let f_scale: f64 = w.samples.iter().map(|s| s.force.norm_squared()).sum::<f64>() / w.samples.len() as f64;
        for ((l, r), s) in residual_forces(&w, &p.uncertain(), &p).unwrap().iter().zip(&w.samples) {
            assert!((l - s.force).norm() <= 1e-6 * f_scale.sqrt());
            assert!((r - s.force).norm() <= 1e-6 * f_scale.sqrt());
        }
        let l_true = total_loss(&w, &p.uncertain(), &p).unwrap();
        assert!(l_true < 1e-6 * f_scale);
        let mut bumped = p.uncertain();
        bumped.kt *= 1.1;
        assert!(total_loss(&w, &bumped, &p).unwrap() > l_true);
    }

    #[test]
    fn truth_is_the_grid_minimum() {
        let p = table1();
        let traj = sim(&p, 10_579.0, 1.0, 0.015, 0.0, 0);
        let w = window(&traj, &p, 0.015, 1.0);
        let truth = p.uncertain();
        let l_true = total_loss(&w, &truth, &p).unwrap();
        let axis = |v: f64| (0..10).map(move |i| v * (0.9 + 0.2 * i as f64 / 9.0));
        for zeta in axis(truth.zeta) {
            for omega_n in axis(truth.omega_n) {
                for kt in axis(truth.kt) {
                    for kr in axis(truth.kr) {
                        let l = total_loss(&w, &UncertainParameters { zeta, omega_n, kt, kr }, &p).unwrap();
                        assert!(l_true <= l + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn noise_free_recovery_within_one_percent() {
        let p = table1();
        for (rpm, t1) in [(11_500.0, 0.02), (10_579.0, 0.02)] {
            let traj = sim(&p, rpm, 1.0, t1, 0.0, 0);
            let est = estimate_parameters(&window(&traj, &p, t1, 1.0), &p, &bounds()).unwrap();
            assert!(rel(est.zeta, p.zeta) < 0.01, "{est:?}");
            assert!(rel(est.omega_n_rad_s, p.omega_n_rad_s) < 0.01);
            assert!(rel(est.kt, p.kt) < 0.01);
            assert!(rel(est.kr, p.kr) < 0.01);
            assert!(!est.low_confidence);
            let f_rms = rms(window(&traj, &p, t1, 1.0).samples.iter().flat_map(|s| [s.force.x, s.force.y]));
            assert!(est.residual_lhs < 1e-4 * f_rms && est.residual_rhs < 1e-4 * f_rms);
        }
    }

    #[test]
    fn disjoint_windows_agree() {
        let p = table1();
        let traj = sim(&p, 10_579.0, 1.0, 0.03, 0.0, 0);
        let a = estimate_parameters(&window(&traj, &p, 0.015, 1.0), &p, &bounds()).unwrap();
        let b = estimate_parameters(&window(&traj, &p, 0.03, 1.0), &p, &bounds()).unwrap();
        for (x, y) in [(a.zeta, b.zeta), (a.omega_n_rad_s, b.omega_n_rad_s), (a.kt, b.kt), (a.kr, b.kr)] {
            assert!(rel(x, y) < 0.01);
        }
    }

    #[test]
    fn drifted_natural_frequency_is_recovered() {
        let p = table1();
        let drifted = ProcessParameters { omega_n_rad_s: p.omega_n_rad_s * 1.05, ..p };
        let traj = sim(&drifted, 11_000.0, 1.0, 0.02, 0.0, 0);
        let est = estimate_parameters(&window(&traj, &p, 0.02, 1.0), &p, &bounds()).unwrap();
        assert!(rel(est.omega_n_rad_s, drifted.omega_n_rad_s) < 0.01);
    }

    #[test]
    fn noisy_recovery_within_five_percent() {
        let p = table1();
        let mut worst = Vec::new();
        for seed in 0..20 {
            let traj = sim(&p, 11_500.0, 1.0, 0.02, 0.01, seed);
            let est = estimate_parameters(&window(&traj, &p, 0.02, 1.0), &p, &bounds()).unwrap();
            let errs = [
                rel(est.zeta, p.zeta),
                rel(est.omega_n_rad_s, p.omega_n_rad_s),
                rel(est.kt, p.kt),
                rel(est.kr, p.kr),
            ];
            worst.push(errs.iter().copied().fold(0.0, f64::max));
        }
        worst.sort_by(f64::total_cmp);
        assert!(worst[17] < 0.05, "90th percentile error {}", worst[17]);
    }

    #[test]
    fn regularized_variant_keeps_argmin() {
        let p = table1();
        let traj = sim(&p, 11_500.0, 1.0, 0.02, 0.01, 3);
        let w = window(&traj, &p, 0.02, 1.0);
        let plain = LeastSquaresEstimator.estimate(&w, &p, &bounds()).unwrap();
        let reg = RegularizedEstimator::default().estimate(&w, &p, &bounds()).unwrap();
        assert_eq!(plain.uncertain(), reg.uncertain());
        assert!((reg.loss - 0.5 * plain.loss).abs() <= 1e-12 * plain.loss);
        assert!((reg.residual_lhs - 0.5 * plain.residual_lhs).abs() <= 1e-12 * plain.residual_lhs);
    }

    #[test]
    fn central_difference_fallback() {
        let p = table1();
        let traj = sim(&p, 11_500.0, 1.0, 0.02, 0.0, 0);
        let w = window(&traj, &p, 0.02, 1.0).with_differentiated_motion().unwrap();
        let est = estimate_parameters(&w, &p, &bounds()).unwrap();
        assert!(rel(est.omega_n_rad_s, p.omega_n_rad_s) < 0.01);
        assert!(rel(est.kt, p.kt) < 0.01);
        assert!(rel(est.zeta, p.zeta) < 0.05);
    }

    #[test]
    fn window_rejections() {
        let p = table1();
        let traj = sim(&p, 11_500.0, 1.0, 0.01, 0.0, 0);
        let tau = p.delay(11_500.0);
        assert!(SensorWindow::from_trajectory(&traj, 0.005, 0.005 + tau, 2, 1.0).is_err());
        assert!(SensorWindow::from_trajectory(&traj, 0.005, 0.02, 2, 1.0).is_err());
        let step = default_step(&p, 11_500.0);
        let switched = simulate_dde(&p, &[(0.0, 11_500.0), (0.008, 11_000.0)], 1.0, 0.012, step, Vector2::new(1e-5, 0.0), 0.0, 0).unwrap();
        assert!(SensorWindow::from_trajectory(&switched, 0.006, 0.012, 2, 1.0).is_err());
    }

    #[test]
    fn online_grid_matches_offline_classification() {
        let p = table1();
        let traj = sim(&p, 11_500.0, 1.0, 0.02, 0.0, 0);
        let spec = GridSpec {
            speed_range: [10_000.0, 12_000.0],
            depth_range: [0.5, 1.5],
            speed_count: 21,
            depth_count: 3,
            ..GridSpec::default()
        };
        let (_, grid) = online_sld(&window(&traj, &p, 0.02, 1.0), &p, &bounds(), &spec, 1, &LeastSquaresEstimator).unwrap();
        assert!(!crate::sld::classify(&grid, &OperatingPoint::new(11_500.0, 1.0)).unwrap().stable);
        assert!((grid.timestamp - 0.02).abs() <= traj.step);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn force_and_mass_scaling_equivariance(scale in 0.2f64..5.0) {
            let p = table1();
            let traj = sim(&p, 11_500.0, 1.0, 0.015, 0.0, 0);
            let w = window(&traj, &p, 0.015, 1.0);
            let base = estimate_parameters(&w, &p, &ParameterBounds::around(&p.uncertain(), 10.0)).unwrap();
            let mut scaled = w.clone();
            scaled.samples.iter_mut().for_each(|s| s.force *= scale);
            let heavy = ProcessParameters { mass_kg: p.mass_kg * scale, ..p };
            let wide = ParameterBounds::around(&p.uncertain(), 10.0 * scale.max(1.0 / scale));
            let est = estimate_parameters(&scaled, &heavy, &wide).unwrap();
            prop_assert!(rel(est.zeta, base.zeta) < 1e-9);
            prop_assert!(rel(est.omega_n_rad_s, base.omega_n_rad_s) < 1e-9);
            prop_assert!(rel(est.kt, base.kt * scale) < 1e-9);
            prop_assert!(rel(est.kr, base.kr * scale) < 1e-9);
        }
    }
}
