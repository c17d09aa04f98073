use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn millstab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_millstab"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

const SMALL_GRID: &[&str] = &[
    "--set",
    "grid.speed_range=[11000,12000]",
    "--set",
    "grid.speed_count=11",
    "--set",
    "grid.depth_range=[0,2]",
    "--set",
    "grid.depth_count=11",
];

#[test]
fn sld_writes_grid_boundary_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let o = millstab(dir.path(), &[&["sld"], SMALL_GRID].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&dir.path().join("sld.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "omega_rpm,ap_mm,rho,gamma_max,stable");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 121);
    let unstable = rows.iter().find(|r| r.starts_with("11500,1,")).expect("node (11500, 1)");
    assert!(unstable.ends_with(",0"), "{unstable}");
    assert!(read(&dir.path().join("boundary.csv")).starts_with("omega_rpm,ap_star_mm\n"));
    let side: serde_json::Value = serde_json::from_str(&read(&dir.path().join("sidecar.json"))).unwrap();
    assert_eq!(side["config"]["grid"]["speed_count"], 11);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("stable fraction"));
    assert!(stdout.contains("minimum boundary depth"));
}

#[test]
fn sld_is_identical_for_any_worker_count() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(code(&millstab(a.path(), &[&["sld", "--workers", "1"], SMALL_GRID].concat())), 0);
    assert_eq!(code(&millstab(b.path(), &[&["sld", "--workers", "8"], SMALL_GRID].concat())), 0);
    assert_eq!(read(&a.path().join("sld.csv")), read(&b.path().join("sld.csv")));
}

#[test]
fn zero_depth_range_is_one_stable_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = millstab(
        dir.path(),
        &["sld", "--set", "grid.depth_range=[0,0]", "--set", "grid.depth_count=1", "--set", "grid.speed_count=50"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&dir.path().join("sld.csv"));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|r| r.ends_with(",1")));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&millstab(dir.path(), &["sld", "--set", "grid.speed_cnt=3"])), 2);
    assert_eq!(code(&millstab(dir.path(), &["sld", "--set", "grid.speed_count=1"])), 2);
    assert_eq!(code(&millstab(dir.path(), &["sld", "--workers", "0"])), 2);
    assert_eq!(code(&millstab(dir.path(), &["frobnicate"])), 2);
    assert!(!dir.path().join("sld.csv").exists());
}

#[test]
fn shipped_config_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo("configs/table1.json");
    let o = millstab(
        dir.path(),
        &[&["sld", "--config", cfg.to_str().unwrap()], SMALL_GRID].concat(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_stable_and_unstable_points() {
    let dir = tempfile::tempdir().unwrap();
    let o = millstab(dir.path(), &["simulate", "--set", "simulate.ap_mm=0.2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(&dir.path().join("trajectory.csv"));
    assert!(text.starts_with("t,qx,qy,vx,vy,ax,ay,Fx,Fy,omega_rpm\n"));

    let dir = tempfile::tempdir().unwrap();
    let o = millstab(dir.path(), &["simulate", "--set", "simulate.duration_s=0.5"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged after t ="));
    assert!(dir.path().join("trajectory.csv").exists());
}

#[test]
fn simulate_is_reproducible_with_a_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["simulate", "--seed", "11", "--set", "simulate.noise_std=0.01", "--set", "simulate.duration_s=0.02"];
    assert_eq!(code(&millstab(a.path(), &args)), 0);
    assert_eq!(code(&millstab(b.path(), &args)), 0);
    assert_eq!(read(&a.path().join("trajectory.csv")), read(&b.path().join("trajectory.csv")));
}

#[test]
fn estimate_round_trip_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let sim = ["simulate", "--set", "simulate.ap_mm=0.5", "--set", "simulate.duration_s=0.03"];
    assert_eq!(code(&millstab(dir.path(), &sim)), 0);
    let traj = dir.path().join("trajectory.csv");
    let o = millstab(dir.path(), &["estimate", traj.to_str().unwrap(), "--ap-mm", "0.5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let est: serde_json::Value = serde_json::from_str(&read(&dir.path().join("estimate.json"))).unwrap();
    let rel = |key: &str, truth: f64| (est[key].as_f64().unwrap() - truth).abs() / truth;
    assert!(rel("zeta", 0.011) < 0.01);
    assert!(rel("omega_n_rad_s", 2.0 * std::f64::consts::PI * 1435.0) < 0.01);
    assert!(rel("kt", 6e8) < 0.01);
    assert!(rel("kr", 2e8) < 0.01);
    assert_eq!(est["window"].as_array().unwrap().len(), 2);

    // a record with no motion at all
    let still = tempfile::tempdir().unwrap();
    let sim = ["simulate", "--set", "simulate.initial_perturbation_m=[0,0]", "--set", "simulate.duration_s=0.02"];
    assert_eq!(code(&millstab(still.path(), &sim)), 0);
    let traj = still.path().join("trajectory.csv");
    assert_eq!(code(&millstab(still.path(), &["estimate", traj.to_str().unwrap()])), 5);

    // a truncated record
    let text = read(&dir.path().join("trajectory.csv"));
    let mut lines: Vec<&str> = text.lines().take(200).collect();
    let cut = &lines[150][..lines[150].len() / 2];
    lines[150] = cut;
    let broken = dir.path().join("broken.csv");
    std::fs::write(&broken, lines.join("\n")).unwrap();
    let o = millstab(dir.path(), &["estimate", broken.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":151:"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn control_sim_exit_codes() {
    let online = repo("scenarios/drift_online.json");
    let offline = repo("scenarios/drift_offline.json");

    let dir = tempfile::tempdir().unwrap();
    let o = millstab(dir.path(), &["control-sim", online.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trajectory.csv", "decisions.csv", "sld_t0.csv", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&read(&dir.path().join("report.json"))).unwrap();
    assert_eq!(report["verdict"], "stabilized");

    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&millstab(dir.path(), &["control-sim", offline.to_str().unwrap()])), 4);

    let dir = tempfile::tempdir().unwrap();
    let o = millstab(
        dir.path(),
        &["control-sim", online.to_str().unwrap(), "--set", "mode=open_loop", "--set", "drift_events=[]"],
    );
    assert_eq!(code(&o), 4);
}

#[test]
fn control_sim_holds_when_nothing_is_stable() {
    let online = repo("scenarios/drift_online.json");
    let dir = tempfile::tempdir().unwrap();
    let o = millstab(
        dir.path(),
        &[
            "control-sim",
            online.to_str().unwrap(),
            "--set",
            "controller.speed_bounds=[11200,11800]",
            "--set",
            "drift_events=[]",
            "--set",
            "duration_s=0.06",
            "--set",
            "initial_perturbation_m=[1e-9,1e-9]",
        ],
    );
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stdout));
}
