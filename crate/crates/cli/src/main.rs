mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use millstab_core::atomic::{write_atomic, write_with};
use millstab_core::closed_loop::{run_scenario, Scenario, Verdict};
use millstab_core::error::{Error, Result};
use millstab_core::estimator::{estimate_parameters, ParameterBounds, SensorWindow};
use millstab_core::simulate::{default_step, log_energy_slope, simulate_dde, Trajectory};
use millstab_core::sld::{compute_sld, extract_boundary, write_boundary_csv};
use nalgebra::Vector2;
use serde_json::json;

use crate::config::{apply_set, read_json, resolve, CliConfig};

/// Milling stability lobes, parameter estimation and adaptive spindle-speed
/// control.
#[derive(Debug, Parser)]
#[command(name = "millstab", version)]
struct Cli {
    /// JSON config file; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config value by dotted path, e.g. `grid.speed_count=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sweep the stability lobe diagram; writes sld.csv, boundary.csv and sidecar.json.
    Sld,
    /// Time-domain simulation at one operating point; writes trajectory.csv.
    Simulate,
    /// Identify ζ, ω_n, K_t and K_r from a trajectory; writes estimate.json.
    Estimate {
        trajectory: PathBuf,
        #[arg(long)]
        t0: Option<f64>,
        #[arg(long)]
        t1: Option<f64>,
        #[arg(long)]
        ap_mm: Option<f64>,
    },
    /// Run a closed-loop scenario; writes the run report directory.
    ControlSim { scenario: PathBuf },
}

/// Process exit status for each failure class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        Error::TooManyFailures { .. } | Error::Numerical { .. } => 3,
        Error::Diverged(_) => 4,
        Error::Unidentifiable(_) => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    if let Command::ControlSim { scenario } = &cli.command {
        return control_sim(cli, scenario);
    }
    let mut sets = cli.set.clone();
    if let Some(w) = cli.workers {
        sets.push(format!("workers={w}"));
    }
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    if let Command::Estimate { t0, t1, ap_mm, .. } = &cli.command {
        for (key, v) in [("t0", t0), ("t1", t1), ("ap_mm", ap_mm)] {
            if let Some(v) = v {
                sets.push(format!("estimate.{key}={v}"));
            }
        }
    }
    let cfg = resolve(cli.config.as_deref(), &sets)?;
    cfg.validate()?;
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Sld => sld(&cfg, &cli.out),
        Command::Simulate => simulate(&cfg, &cli.out),
        Command::Estimate { trajectory, .. } => estimate(&cfg, trajectory, &cli.out),
        Command::ControlSim { .. } => unreachable!(),
    }
}

fn write_sidecar(out: &Path, doc: serde_json::Value) -> Result<()> {
    write_atomic(&out.join("sidecar.json"), serde_json::to_string_pretty(&doc)?.as_bytes())
}

fn sld(cfg: &CliConfig, out: &Path) -> Result<u8> {
    let grid = compute_sld(&cfg.params, &cfg.grid, cfg.workers)?;
    let boundary = extract_boundary(&grid);
    write_with(&out.join("sld.csv"), |b| grid.write_csv(b))?;
    write_with(&out.join("boundary.csv"), |b| write_boundary_csv(&boundary, b))?;
    let mut side = grid.sidecar();
    side["config"] = serde_json::to_value(cfg)?;
    write_sidecar(out, side)?;

    let stable = grid.rho.iter().filter(|r| **r < 1.0).count();
    println!("stable fraction: {:.4}", stable as f64 / grid.rho.len() as f64);
    if let Some((w, a)) = boundary.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)) {
        println!("minimum boundary depth: {a:.4} mm at {w:.1} rpm");
    }
    if !grid.failures.is_empty() {
        eprintln!("warning: {} grid points failed and were written as NaN", grid.failures.len());
    }
    Ok(0)
}

fn simulate(cfg: &CliConfig, out: &Path) -> Result<u8> {
    let s = &cfg.simulate;
    let step = s.step_s.unwrap_or_else(|| default_step(&cfg.params, s.omega_rpm));
    let [qx, qy] = s.initial_perturbation_m;
    write_sidecar(out, json!({ "command": "simulate", "config": cfg }))?;
    let result = simulate_dde(
        &cfg.params,
        &[(0.0, s.omega_rpm)],
        s.ap_mm,
        s.duration_s,
        step,
        Vector2::new(qx, qy),
        s.noise_std,
        cfg.seed,
    );
    let path = out.join("trajectory.csv");
    match result {
        Ok(traj) => {
            write_with(&path, |b| traj.write_csv(b))?;
            let end = traj.duration();
            let slope = log_energy_slope(&traj, cfg.params.mass_kg, cfg.params.stiffness(), 0.8 * end, end);
            println!(
                "rms displacement: {:.4e} m (first 20%) -> {:.4e} m (last 20%)",
                traj.rms_displacement(0.0, 0.2 * end),
                traj.rms_displacement(0.8 * end, end)
            );
            println!("energy slope over last 20%: {slope:.3} 1/s");
            Ok(0)
        }
        Err(Error::Diverged(d)) => {
            write_with(&path, |b| d.partial.write_csv(b))?;
            eprintln!("diverged after t = {:.6} s; partial trajectory written", d.last_finite_time);
            Ok(4)
        }
        Err(e) => Err(e),
    }
}

fn estimate(cfg: &CliConfig, trajectory: &Path, out: &Path) -> Result<u8> {
    let traj = Trajectory::read_csv_file(trajectory)?;
    let e = &cfg.estimate;
    let t1 = e.t1.unwrap_or_else(|| traj.duration());
    let rpm = traj.schedule()?.rpm_at(t1);
    let t0 = e.t0.unwrap_or_else(|| (t1 - 4.0 * cfg.params.delay(rpm)).max(0.0));
    let window = SensorWindow::from_trajectory(&traj, t0, t1, cfg.params.teeth, e.ap_mm)?;
    let bounds = ParameterBounds::around(&cfg.params.uncertain(), e.bounds_factor);
    let est = estimate_parameters(&window, &cfg.params, &bounds)?;
    let text = serde_json::to_string_pretty(&est)?;
    write_atomic(&out.join("estimate.json"), text.as_bytes())?;
    write_sidecar(out, json!({ "command": "estimate", "trajectory": trajectory, "config": cfg }))?;
    println!("{text}");
    Ok(0)
}

fn control_sim(cli: &Cli, path: &Path) -> Result<u8> {
    let mut doc = read_json(path)?;
    if let Some(extra) = &cli.config {
        config::merge(&mut doc, read_json(extra)?);
    }
    for s in &cli.set {
        apply_set(&mut doc, s)?;
    }
    if let Some(seed) = cli.seed {
        doc["seed"] = json!(seed);
    }
    let scenario: Scenario = serde_json::from_value(doc)?;
    scenario.validate()?;
    let report = run_scenario(&scenario, cli.workers.unwrap_or(1))?;
    report.write(&cli.out)?;

    let final_rpm = report.trajectory.operating_history.last().map_or(f64::NAN, |&(_, w)| w);
    println!("verdict: {:?}", report.verdict);
    println!("final spindle speed: {final_rpm} rpm");
    println!(
        "decisions: {} ({} applied)",
        report.decisions.len(),
        report.decisions.iter().filter(|d| d.applied).count()
    );
    if let Some(r) = report.final_roughness {
        println!("final roughness: {:.3} um", r.r_um);
    }
    if let Some(t) = report.divergence_time {
        println!("diverged after t = {t:.6} s");
    }
    Ok(match report.verdict {
        Verdict::Stabilized => 0,
        Verdict::Diverged => 4,
        Verdict::Held => 6,
    })
}
