//! Semi-discretization of the delayed milling dynamics.
//!
//! One tooth period `τ` is split into `m` intervals of length `ε = τ/m`. On
//! each interval the time-periodic coefficients are replaced by their
//! averages and the delayed state by the mean of the two bracketing history
//! samples, which turns the delay equation into the linear map
//! `y_{i+1} = E_i y_i + G_i u_i` on the augmented state
//! `y_i = (q_i, q̇_i, q_{i-1}, …, q_{i-m})`. The product of the `m` maps over a
//! period is the transition matrix `Φ`; its spectral radius decides stability.

use std::ops::AddAssign;

use nalgebra::{DMatrix, Matrix2, Matrix4, Matrix4x2, SMatrix};
use serde::{Deserialize, Serialize};

use crate::dynamics::{angular_speed, CutterGeometry};
use crate::error::{Error, Result};
use crate::params::{OperatingPoint, ProcessParameters};
use crate::quadrature::GaussLegendre;

/// Quadrature nodes per smooth piece of an interval.
pub const QUADRATURE_NODES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdmConfig {
    /// Number of intervals per delay period (`m`).
    pub resolution: usize,
}

impl Default for SdmConfig {
    fn default() -> Self {
        Self { resolution: 40 }
    }
}

impl SdmConfig {
    pub fn new(resolution: usize) -> Result<Self> {
        let cfg = Self { resolution };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 {
            return Err(Error::InvalidParameters(format!(
                "SDM resolution must be >= 4, got {}",
                self.resolution
            )));
        }
        Ok(())
    }

    /// Dimension of the augmented state, `2(m + 2)`.
    pub fn state_dim(&self) -> usize {
        2 * (self.resolution + 2)
    }
}

type Matrix10 = SMatrix<f64, 10, 10>;

/// Assemble `(A, B, D)` from a (possibly averaged) directional matrix.
fn assemble(params: &ProcessParameters, depth_m: f64, h_d: &Matrix2<f64>) -> (Matrix4<f64>, Matrix4<f64>, Matrix4x2<f64>) {
    let m = params.mass_kg;
    let k = params.stiffness() / m;
    let c = params.damping() / m;
    let cut = h_d * (depth_m / m);

    let mut a = Matrix4::zeros();
    a[(0, 2)] = 1.0;
    a[(1, 3)] = 1.0;
    a.fixed_view_mut::<2, 2>(2, 0).copy_from(&(-cut));
    a[(2, 0)] -= k;
    a[(3, 1)] -= k;
    a[(2, 2)] = -c;
    a[(3, 3)] = -c;

    let mut b = Matrix4::zeros();
    b.fixed_view_mut::<2, 2>(2, 0).copy_from(&cut);

    let mut d = Matrix4x2::zeros();
    d.fixed_view_mut::<2, 2>(2, 0).copy_from(&cut);
    (a, b, d)
}

/// `(A(t), B(t), D(t))` of the delayed state-space model at time `t`, with
/// tooth 0 at angle zero at `t = 0`.
pub fn continuous_matrices(
    params: &ProcessParameters,
    op: &OperatingPoint,
    t: f64,
) -> Result<(Matrix4<f64>, Matrix4<f64>, Matrix4x2<f64>)> {
    let geom = CutterGeometry::new(params)?;
    let h = geom
        .basis(angular_speed(op.spindle_rpm) * t)
        .combine(params.kt, params.kr);
    Ok(assemble(params, op.depth_m(), &h))
}

/// Mean of `H_d` over `[t_a, t_b]`, splitting the quadrature at every
/// engagement switch inside the interval.
pub fn mean_directional_matrix(
    params: &ProcessParameters,
    geom: &CutterGeometry,
    spindle_rpm: f64,
    t_a: f64,
    t_b: f64,
    rule: &GaussLegendre,
) -> Matrix2<f64> {
    let omega = angular_speed(spindle_rpm);
    let mut cuts = geom.switching_times(spindle_rpm, 0.0, t_a, t_b);
    cuts.insert(0, t_a);
    cuts.push(t_b);
    let mut acc = Matrix2::zeros();
    for piece in cuts.windows(2) {
        for (t, w) in rule.mapped(piece[0], piece[1]) {
            acc += geom.basis(omega * t).combine(params.kt, params.kr) * w;
        }
    }
    acc / (t_b - t_a)
}

/// Interval averages `(A_i, B_i, D_i)` over `[iε, (i+1)ε]` with the default rule.
pub fn interval_average(
    params: &ProcessParameters,
    op: &OperatingPoint,
    i: usize,
    m: usize,
) -> Result<(Matrix4<f64>, Matrix4<f64>, Matrix4x2<f64>)> {
    interval_average_with(params, op, i, m, &GaussLegendre::new(QUADRATURE_NODES))
}

pub fn interval_average_with(
    params: &ProcessParameters,
    op: &OperatingPoint,
    i: usize,
    m: usize,
    rule: &GaussLegendre,
) -> Result<(Matrix4<f64>, Matrix4<f64>, Matrix4x2<f64>)> {
    if i >= m {
        return Err(Error::OutOfRange(format!("interval {i} of {m}")));
    }
    let geom = CutterGeometry::new(params)?;
    let eps = params.delay(op.spindle_rpm) / m as f64;
    let h = mean_directional_matrix(params, &geom, op.spindle_rpm, i as f64 * eps, (i + 1) as f64 * eps, rule);
    Ok(assemble(params, op.depth_m(), &h))
}

/// Exact discretization of one interval with piecewise-constant coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMatrices {
    pub a: Matrix4<f64>,
    pub b: Matrix4<f64>,
    pub d: Matrix4x2<f64>,
    /// `exp(A ε)`
    pub p: Matrix4<f64>,
    /// `(exp(A ε) − I) A⁻¹ B`
    pub r: Matrix4<f64>,
    /// `(exp(A ε) − I) A⁻¹ D`
    pub q: Matrix4x2<f64>,
}

/// `P`, `R`, `Q` from the exponential of the block matrix
/// `[[A, B, D], [0, 0, 0]] ε`, whose upper-right blocks are `∫₀^ε e^{As} ds · [B D]`.
/// No inverse of `A` is formed.
pub fn step_matrices(a: &Matrix4<f64>, b: &Matrix4<f64>, d: &Matrix4x2<f64>, eps: f64) -> Result<StepMatrices> {
    step_matrices_at(a, b, d, eps, 0)
}

fn step_matrices_at(
    a: &Matrix4<f64>,
    b: &Matrix4<f64>,
    d: &Matrix4x2<f64>,
    eps: f64,
    interval: usize,
) -> Result<StepMatrices> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Numerical {
            interval,
            what: format!("interval length {eps}"),
        });
    }
    let mut z = Matrix10::zeros();
    z.fixed_view_mut::<4, 4>(0, 0).copy_from(&(a * eps));
    z.fixed_view_mut::<4, 4>(0, 4).copy_from(&(b * eps));
    z.fixed_view_mut::<4, 2>(0, 8).copy_from(&(d * eps));
    let e = z.exp();
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            interval,
            what: "non-finite matrix exponential".into(),
        });
    }
    Ok(StepMatrices {
        a: *a,
        b: *b,
        d: *d,
        p: e.fixed_view::<4, 4>(0, 0).into_owned(),
        r: e.fixed_view::<4, 4>(0, 4).into_owned(),
        q: e.fixed_view::<4, 2>(0, 8).into_owned(),
    })
}

/// Dense `(E_i, G_i)` of the augmented one-interval map.
pub fn augmented_step(step: &StepMatrices, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = 2 * (m + 2);
    let mut e = DMatrix::zeros(n, n);
    e.view_mut((0, 0), (4, 4)).copy_from(&step.p);
    let half_r = step.r.fixed_view::<4, 2>(0, 0) * 0.5;
    e.view_mut((0, 2 * m), (4, 2)).copy_from(&half_r);
    e.view_mut((0, 2 * m + 2), (4, 2)).copy_from(&half_r);
    e[(4, 0)] = 1.0;
    e[(5, 1)] = 1.0;
    for r in 6..n {
        e[(r, r - 2)] = 1.0;
    }
    let mut g = DMatrix::zeros(n, 2);
    g.view_mut((0, 0), (4, 2)).copy_from(&step.q);
    (e, g)
}

/// `E_i` applied in place to every column of `x` (an `n × c` matrix), using
/// the shift-register structure instead of a dense product.
fn apply_step(step: &StepMatrices, m: usize, x: &mut DMatrix<f64>) {
    let n = 2 * (m + 2);
    debug_assert_eq!(x.nrows(), n);
    let half_r = step.r.fixed_view::<4, 2>(0, 0) * 0.5;
    for mut col in x.column_iter_mut() {
        let c = col.as_mut_slice();
        let x4 = nalgebra::Vector4::new(c[0], c[1], c[2], c[3]);
        let hist = nalgebra::Vector2::new(c[2 * m] + c[2 * m + 2], c[2 * m + 1] + c[2 * m + 3]);
        let top = step.p * x4 + half_r * hist;
        c.copy_within(4..n - 2, 6);
        c[4] = x4[0];
        c[5] = x4[1];
        c[0] = top[0];
        c[1] = top[1];
        c[2] = top[2];
        c[3] = top[3];
    }
}

/// One-period transition `y_{i+m} = Φ y_i + Γ u_i` with its stability metrics.
#[derive(Debug, Clone)]
pub struct PeriodTransition {
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    /// Spectral radius of `Φ`.
    pub rho: f64,
    /// Largest singular value of `Γ`.
    pub gamma_max: f64,
}

impl PeriodTransition {
    /// Largest singular value of `Φ`; a diagnostic, not the stability metric.
    pub fn phi_singular_max(&self) -> f64 {
        self.phi
            .clone()
            .singular_values()
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }
}

/// Step matrices for all `m` intervals of one period at `op`.
pub fn period_steps(params: &ProcessParameters, op: &OperatingPoint, cfg: &SdmConfig) -> Result<Vec<StepMatrices>> {
    cfg.validate()?;
    params.validate()?;
    op.validate()?;
    let m = cfg.resolution;
    let geom = CutterGeometry::new(params)?;
    let rule = GaussLegendre::new(QUADRATURE_NODES);
    let eps = params.delay(op.spindle_rpm) / m as f64;
    let mut steps: Vec<StepMatrices> = Vec::with_capacity(m);
    for i in 0..m {
        let h = mean_directional_matrix(params, &geom, op.spindle_rpm, i as f64 * eps, (i + 1) as f64 * eps, &rule);
        let (a, b, d) = assemble(params, op.depth_m(), &h);
        // disengaged intervals repeat the same coefficients
        let reuse = steps.iter().rev().find(|s| s.a == a && s.b == b && s.d == d).cloned();
        steps.push(match reuse {
            Some(step) => step,
            None => step_matrices_at(&a, &b, &d, eps, i)?,
        });
    }
    Ok(steps)
}

/// `Φ` and `Γ` from precomputed steps, anchored at interval `start`
/// (`Φ_start = E_{start+m-1} ⋯ E_start`, indices taken modulo `m`).
pub fn compose_period(steps: &[StepMatrices], start: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = steps.len();
    let n = 2 * (m + 2);
    let mut phi = DMatrix::identity(n, n);
    let mut gamma = DMatrix::zeros(n, 2);
    for k in 0..m {
        let step = &steps[(start + k) % m];
        apply_step(step, m, &mut phi);
        apply_step(step, m, &mut gamma);
        gamma.view_mut((0, 0), (4, 2)).add_assign(&step.q);
    }
    (phi, gamma)
}

/// Maximum eigenvalue modulus. The matrix is balanced first: displacement and
/// velocity entries differ by roughly `ω_n` in scale.
///
/// Exactly-zero columns are deflated before the eigensolve. History slots that
/// are shifted out before any cutting interval reads them leave such columns
/// in `Φ`, and removing column `j` together with row `j` keeps every nonzero
/// eigenvalue (the permuted matrix is block lower triangular).
pub fn spectral_radius(mat: &DMatrix<f64>) -> Result<f64> {
    let mut keep: Vec<usize> = (0..mat.ncols()).collect();
    loop {
        let next: Vec<usize> = keep
            .iter()
            .copied()
            .filter(|&j| keep.iter().any(|&i| mat[(i, j)] != 0.0))
            .collect();
        if next.len() == keep.len() {
            break;
        }
        keep = next;
    }
    if keep.is_empty() {
        return Ok(0.0);
    }
    let mut reduced = mat.select_rows(&keep).select_columns(&keep);
    nalgebra::linalg::balancing::balance_parlett_reinsch(&mut reduced);
    // the eigenvalue-only QR iteration has no iteration cap, so refuse
    // anything it could spin on
    if reduced.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            interval: 0,
            what: "non-finite transition matrix".into(),
        });
    }
    let rho = reduced
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if rho.is_finite() {
        Ok(rho)
    } else {
        Err(Error::Numerical {
            interval: 0,
            what: "non-finite eigenvalue".into(),
        })
    }
}

/// Largest singular value of a tall two-column matrix via its 2×2 Gram matrix.
pub fn two_column_singular_max(mat: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(mat.ncols(), 2);
    let a = mat.column(0).norm_squared();
    let c = mat.column(1).norm_squared();
    let b = mat.column(0).dot(&mat.column(1));
    let mean = 0.5 * (a + c);
    let dev = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mean + dev).max(0.0).sqrt()
}

/// Transition matrices anchored at interval 0 (tooth 0 at angle zero).
pub fn period_transition(params: &ProcessParameters, op: &OperatingPoint, cfg: &SdmConfig) -> Result<PeriodTransition> {
    period_transition_from(params, op, cfg, 0)
}

pub fn period_transition_from(
    params: &ProcessParameters,
    op: &OperatingPoint,
    cfg: &SdmConfig,
    start: usize,
) -> Result<PeriodTransition> {
    let steps = period_steps(params, op, cfg)?;
    let (phi, gamma) = compose_period(&steps, start);
    let rho = spectral_radius(&phi)?;
    let gamma_max = two_column_singular_max(&gamma);
    Ok(PeriodTransition {
        phi,
        gamma,
        rho,
        gamma_max,
    })
}

/// `(ρ(Φ), σ_max(Γ))` without keeping the matrices.
pub fn stability_metrics(params: &ProcessParameters, op: &OperatingPoint, cfg: &SdmConfig) -> Result<(f64, f64)> {
    let t = period_transition(params, op, cfg)?;
    Ok((t.rho, t.gamma_max))
}

/// Free-vibration period multiplier `e^{−ζ ω_n τ}`: the spectral radius at zero depth.
pub fn zero_depth_rho(params: &ProcessParameters, spindle_rpm: f64) -> f64 {
    (-params.zeta * params.omega_n_rad_s * params.delay(spindle_rpm)).exp()
}
