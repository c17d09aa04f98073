//! Time-domain integration of the delayed milling dynamics.
//!
//! Fixed-step classical Runge–Kutta on `(q, q̇)` with the delayed displacement
//! read from a ring buffer of past steps by linear interpolation. The recorded
//! samples act as the synthetic sensor stream: optional multiplicative
//! Gaussian noise is applied to what is recorded, never to what is integrated.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{angular_speed, CutterGeometry, SpindleSchedule};
use crate::error::{Divergence, Error, Result};
use crate::params::ProcessParameters;

/// Delay resolution required of the integration step.
pub const MIN_STEPS_PER_DELAY: f64 = 100.0;
/// Default integration step is the tooth period divided by this.
pub const DEFAULT_STEPS_PER_DELAY: f64 = 1000.0;
/// Displacement growth (relative to the initial perturbation) treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateSample {
    pub t: f64,
    pub q: Vector2<f64>,
    pub dq: Vector2<f64>,
    pub ddq: Vector2<f64>,
    /// Regenerative cutting force.
    pub force: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<StateSample>,
    pub step: f64,
    /// `(t, rpm)` speed changes, starting at t = 0.
    pub operating_history: Vec<(f64, f64)>,
}

pub const TRAJECTORY_HEADER: &str = "t,qx,qy,vx,vy,ax,ay,Fx,Fy,omega_rpm";

impl Trajectory {
    pub fn schedule(&self) -> Result<SpindleSchedule> {
        SpindleSchedule::from_changes(&self.operating_history)
    }

    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    /// Index of the sample at (or nearest to) time `t`.
    pub fn index_at(&self, t: f64) -> usize {
        let i = (t / self.step).round();
        (i.max(0.0) as usize).min(self.samples.len().saturating_sub(1))
    }

    /// Mechanical energy `½M|q̇|² + ½k|q|²` per sample.
    pub fn energy(&self, mass: f64, stiffness: f64) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| 0.5 * mass * s.dq.norm_squared() + 0.5 * stiffness * s.q.norm_squared())
            .collect()
    }

    /// RMS of `|q|` over samples with `t` in `[t0, t1]`.
    pub fn rms_displacement(&self, t0: f64, t1: f64) -> f64 {
        let (sum, n) = self
            .samples
            .iter()
            .filter(|s| s.t >= t0 && s.t <= t1)
            .fold((0.0, 0usize), |(acc, n), s| (acc + s.q.norm_squared(), n + 1));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }

    /// Displacement at time `s` by linear interpolation of the recorded
    /// samples; zero before the start of the record.
    pub fn displacement_at(&self, s: f64) -> Vector2<f64> {
        interpolate(s, self.step, self.samples.len(), |i| self.samples[i].q)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let schedule = self.schedule()?;
        writeln!(out, "{TRAJECTORY_HEADER}")?;
        for s in &self.samples {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                s.t,
                s.q.x,
                s.q.y,
                s.dq.x,
                s.dq.y,
                s.ddq.x,
                s.ddq.y,
                s.force.x,
                s.force.y,
                schedule.rpm_at(s.t)
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("ascii csv"))
    }

    /// Parse the trajectory CSV. `path` only labels error messages.
    pub fn read_csv<R: BufRead>(input: R, path: &Path) -> Result<Self> {
        let parse_err = |line: u64, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(input);
        let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let expected: Vec<&str> = TRAJECTORY_HEADER.split(',').collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(parse_err(1, format!("expected header `{TRAJECTORY_HEADER}`")));
        }
        let mut samples = Vec::new();
        let mut history: Vec<(f64, f64)> = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let mut v = [0.0f64; 10];
            for (slot, field) in v.iter_mut().zip(rec.iter()) {
                *slot = field
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line, format!("not a number: `{field}`")))?;
            }
            let [t, qx, qy, vx, vy, ax, ay, fx, fy, rpm] = v;
            if !v.iter().all(|x| x.is_finite()) {
                return Err(parse_err(line, "non-finite value".into()));
            }
            if history.last().is_none_or(|&(_, r)| r != rpm) {
                history.push((t, rpm));
            }
            samples.push(StateSample {
                t,
                q: Vector2::new(qx, qy),
                dq: Vector2::new(vx, vy),
                ddq: Vector2::new(ax, ay),
                force: Vector2::new(fx, fy),
            });
        }
        if samples.len() < 2 {
            return Err(parse_err(0, "trajectory needs at least two samples".into()));
        }
        let step = samples[1].t - samples[0].t;
        if !(step > 0.0) {
            return Err(parse_err(3, "time must be strictly increasing".into()));
        }
        for (i, w) in samples.windows(2).enumerate() {
            let dt = w[1].t - w[0].t;
            if !(dt > 0.0) || (dt - step).abs() > 1e-6 * step {
                return Err(parse_err(i as u64 + 3, format!("non-uniform time step {dt}")));
            }
        }
        if let Some(first) = history.first_mut() {
            first.0 = 0.0;
        }
        Ok(Self {
            samples,
            step,
            operating_history: history,
        })
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), path)
    }
}

/// Linear interpolation on a uniform grid `t_i = i·h`, zero for `s < 0`.
fn interpolate(s: f64, h: f64, len: usize, at: impl Fn(usize) -> Vector2<f64>) -> Vector2<f64> {
    if s < 0.0 || len == 0 {
        return Vector2::zeros();
    }
    let x = s / h;
    let i0 = x.floor();
    let frac = x - i0;
    let i0 = i0 as usize;
    if i0 + 1 >= len {
        return at(len - 1);
    }
    if frac == 0.0 {
        return at(i0);
    }
    at(i0) * (1.0 - frac) + at(i0 + 1) * frac
}

/// Ring buffer of past displacements at step times `t_i = i·h`.
#[derive(Debug, Clone)]
struct DelayLine {
    buf: Vec<Vector2<f64>>,
    /// Index of the newest entry (step count).
    newest: usize,
}

impl DelayLine {
    fn new(capacity: usize, q0: Vector2<f64>) -> Self {
        let mut buf = vec![Vector2::zeros(); capacity.max(4)];
        buf[0] = q0;
        Self { buf, newest: 0 }
    }

    fn push(&mut self, q: Vector2<f64>) {
        self.newest += 1;
        let cap = self.buf.len();
        self.buf[self.newest % cap] = q;
    }

    fn grow(&mut self, capacity: usize) {
        let cap = self.buf.len();
        if capacity <= cap {
            return;
        }
        let mut buf = vec![Vector2::zeros(); capacity];
        let oldest = self.newest.saturating_sub(cap - 1);
        for i in oldest..=self.newest {
            buf[i % capacity] = self.buf[i % cap];
        }
        self.buf = buf;
    }

    fn get(&self, i: usize) -> Vector2<f64> {
        debug_assert!(i <= self.newest && self.newest - i < self.buf.len());
        self.buf[i % self.buf.len()]
    }

    fn at_time(&self, s: f64, h: f64) -> Vector2<f64> {
        interpolate(s, h, self.newest + 1, |i| self.get(i))
    }
}

fn capacity_for(delay: f64, step: f64) -> usize {
    (delay / step).ceil() as usize + 4
}

/// Stateful integrator used by [`simulate_dde`] and the closed-loop runner.
#[derive(Debug, Clone)]
pub struct DdeSimulator {
    params: ProcessParameters,
    geom: CutterGeometry,
    depth_m: f64,
    step: f64,
    steps_done: u64,
    q: Vector2<f64>,
    dq: Vector2<f64>,
    history: DelayLine,
    schedule: SpindleSchedule,
    omega: f64,
    phase_offset: f64,
    delay: f64,
    noise_std: f64,
    rng: ChaCha8Rng,
    guard: f64,
    trajectory: Trajectory,
    diverged: bool,
}

impl DdeSimulator {
    pub fn new(
        params: ProcessParameters,
        spindle_rpm: f64,
        depth_mm: f64,
        step: f64,
        initial_perturbation: Vector2<f64>,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        if !(depth_mm.is_finite() && depth_mm >= 0.0) {
            return Err(Error::InvalidParameters(format!("axial depth {depth_mm} mm")));
        }
        if !(noise_std.is_finite() && noise_std >= 0.0) {
            return Err(Error::InvalidParameters(format!("noise_std {noise_std}")));
        }
        if !(spindle_rpm.is_finite() && spindle_rpm > 0.0) {
            return Err(Error::InvalidParameters(format!("spindle speed {spindle_rpm} rpm")));
        }
        let delay = params.delay(spindle_rpm);
        check_step(step, delay)?;
        let geom = CutterGeometry::new(&params)?;
        let q_norm = initial_perturbation.norm();
        let mut sim = Self {
            params,
            geom,
            depth_m: depth_mm * 1e-3,
            step,
            steps_done: 0,
            q: initial_perturbation,
            dq: Vector2::zeros(),
            history: DelayLine::new(capacity_for(delay, step), initial_perturbation),
            schedule: SpindleSchedule::constant(spindle_rpm),
            omega: angular_speed(spindle_rpm),
            phase_offset: 0.0,
            delay,
            noise_std,
            rng: ChaCha8Rng::seed_from_u64(seed),
            guard: DIVERGENCE_FACTOR * if q_norm > 0.0 { q_norm } else { 1e-12 },
            trajectory: Trajectory {
                samples: Vec::new(),
                step,
                operating_history: vec![(0.0, spindle_rpm)],
            },
            diverged: false,
        };
        sim.record();
        Ok(sim)
    }

    pub fn time(&self) -> f64 {
        self.steps_done as f64 * self.step
    }

    pub fn spindle_rpm(&self) -> f64 {
        self.schedule.rpm_at(self.time())
    }

    pub fn params(&self) -> &ProcessParameters {
        &self.params
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.trajectory
    }

    /// Change the spindle speed from the current time onward.
    pub fn set_speed(&mut self, spindle_rpm: f64) -> Result<()> {
        if !(spindle_rpm.is_finite() && spindle_rpm > 0.0) {
            return Err(Error::InvalidParameters(format!("spindle speed {spindle_rpm} rpm")));
        }
        let delay = self.params.delay(spindle_rpm);
        check_step(self.step, delay)?;
        let t = self.time();
        self.schedule.push_change(t, spindle_rpm)?;
        self.omega = angular_speed(spindle_rpm);
        self.phase_offset = self.schedule.phase_offset_at(t);
        self.delay = delay;
        self.history.grow(capacity_for(delay, self.step));
        let hist = &mut self.trajectory.operating_history;
        if hist.last().is_some_and(|&(t_last, _)| t_last == t) {
            hist.pop();
        }
        if hist.last().is_none_or(|&(_, rpm)| rpm != spindle_rpm) {
            hist.push((t, spindle_rpm));
        }
        Ok(())
    }

    /// Replace the true process parameters from the current time onward.
    pub fn set_params(&mut self, params: ProcessParameters) -> Result<()> {
        params.validate()?;
        if params.teeth != self.params.teeth {
            return Err(Error::InvalidParameters("tooth count cannot change mid-run".into()));
        }
        self.geom = CutterGeometry::new(&params)?;
        self.params = params;
        Ok(())
    }

    fn directional(&self, t: f64) -> nalgebra::Matrix2<f64> {
        self.geom
            .basis(self.omega * t + self.phase_offset)
            .combine(self.params.kt, self.params.kr)
    }

    fn acceleration(&self, t: f64, q: &Vector2<f64>, dq: &Vector2<f64>) -> (Vector2<f64>, Vector2<f64>) {
        let q_delayed = self.history.at_time(t - self.delay, self.step);
        let force = self.directional(t) * (q_delayed - q) * self.depth_m;
        let acc = (force - dq * self.params.damping() - q * self.params.stiffness()) / self.params.mass_kg;
        (acc, force)
    }

    fn record(&mut self) {
        let t = self.time();
        let (acc, force) = self.acceleration(t, &self.q, &self.dq);
        let mut sample = StateSample {
            t,
            q: self.q,
            dq: self.dq,
            ddq: acc,
            force,
        };
        if self.noise_std > 0.0 {
            let sigma = self.noise_std;
            let rng = &mut self.rng;
            let mut jitter = |v: &mut Vector2<f64>| {
                for c in v.iter_mut() {
                    let n: f64 = StandardNormal.sample(rng);
                    *c *= 1.0 + sigma * n;
                }
            };
            jitter(&mut sample.q);
            jitter(&mut sample.dq);
            jitter(&mut sample.ddq);
            jitter(&mut sample.force);
        }
        self.trajectory.samples.push(sample);
    }

    fn rk4_step(&mut self) {
        let h = self.step;
        let t = self.time();
        let (q, v) = (self.q, self.dq);
        let (a1, _) = self.acceleration(t, &q, &v);
        let (q2, v2) = (q + v * (0.5 * h), v + a1 * (0.5 * h));
        let (a2, _) = self.acceleration(t + 0.5 * h, &q2, &v2);
        let (q3, v3) = (q + v2 * (0.5 * h), v + a2 * (0.5 * h));
        let (a3, _) = self.acceleration(t + 0.5 * h, &q3, &v3);
        let (q4, v4) = (q + v3 * h, v + a3 * h);
        let (a4, _) = self.acceleration(t + h, &q4, &v4);
        self.q = q + (v + v2 * 2.0 + v3 * 2.0 + v4) * (h / 6.0);
        self.dq = v + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
        self.steps_done += 1;
        self.history.push(self.q);
    }

    /// Integrate until the last step time not exceeding `t_end`.
    pub fn advance_to(&mut self, t_end: f64) -> Result<()> {
        if self.diverged {
            return Err(self.divergence());
        }
        let target = ((t_end / self.step) + 1e-9).floor() as u64;
        while self.steps_done < target {
            let last_finite = self.time();
            self.rk4_step();
            let ok = self.q.iter().chain(self.dq.iter()).all(|v| v.is_finite()) && self.q.norm() <= self.guard;
            if !ok {
                self.diverged = true;
                let _ = last_finite;
                return Err(self.divergence());
            }
            self.record();
        }
        Ok(())
    }

    fn divergence(&self) -> Error {
        Error::Diverged(Box::new(Divergence {
            last_finite_time: self.trajectory.duration(),
            partial: self.trajectory.clone(),
        }))
    }
}

fn check_step(step: f64, delay: f64) -> Result<()> {
    if !(step.is_finite() && step > 0.0) || step > delay / MIN_STEPS_PER_DELAY {
        return Err(Error::DelayUnderResolved { step, delay });
    }
    Ok(())
}

/// Default integration step for a spindle speed: `τ/1000`.
pub fn default_step(params: &ProcessParameters, spindle_rpm: f64) -> f64 {
    params.delay(spindle_rpm) / DEFAULT_STEPS_PER_DELAY
}

/// Simulate the perturbation dynamics over `[0, duration]`.
///
/// `schedule` lists `(t, rpm)` speed changes starting at t = 0. History before
/// t = 0 is zero, `q(0)` is the initial perturbation and `q̇(0) = 0`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_dde(
    params: &ProcessParameters,
    schedule: &[(f64, f64)],
    depth_mm: f64,
    duration: f64,
    step: f64,
    initial_perturbation: Vector2<f64>,
    noise_std: f64,
    seed: u64,
) -> Result<Trajectory> {
    let plan = SpindleSchedule::from_changes(schedule)?;
    for &(_, rpm) in schedule {
        let delay = params.delay(rpm);
        check_step(step, delay)?;
        if duration < delay {
            return Err(Error::InvalidParameters(format!(
                "duration {duration} s is shorter than the delay {delay} s at {rpm} rpm"
            )));
        }
    }
    let mut sim = DdeSimulator::new(*params, plan.rpm_at(0.0), depth_mm, step, initial_perturbation, noise_std, seed)?;
    for &(t, rpm) in &schedule[1..] {
        if t >= duration {
            break;
        }
        sim.advance_to(t)?;
        sim.set_speed(rpm)?;
    }
    sim.advance_to(duration)?;
    Ok(sim.into_trajectory())
}

/// Least-squares slope of `ln E` against time over samples in `[t0, t1]`.
pub fn log_energy_slope(traj: &Trajectory, mass: f64, stiffness: f64, t0: f64, t1: f64) -> f64 {
    let energy = traj.energy(mass, stiffness);
    let pts: Vec<(f64, f64)> = traj
        .samples
        .iter()
        .zip(&energy)
        .filter(|(s, _)| s.t >= t0 && s.t <= t1)
        .map(|(s, e)| (s.t, e.max(f64::MIN_POSITIVE).ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let me = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - me)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    cov / var
}
