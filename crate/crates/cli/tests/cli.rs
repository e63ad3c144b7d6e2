use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCENE: &str = "\
room min=-8,-6,-1.5 max=8,6,2.5 reflectivity=0.5
box min=-3,-2,-1.5 max=-2.4,-1.4,2.5 reflectivity=0.8
box min=3,1,-1.5 max=3.6,1.6,2.5 reflectivity=0.3
plane corner=-8,-5.99,-1.5 u=16,0,0 v=0,0,4 reflectivity=0.4 stripe_period=2 stripe_reflectivity=0.8
";

const TRAJECTORY: &str = "\
1 0 0 0 0 1 0 0 0 0 1 0
1 0 0 0.1 0 1 0 0 0 0 1 0
1 0 0 0.2 0 1 0 0 0 0 1 0
1 0 0 0.3 0 1 0 0 0 0 1 0
1 0 0 0.4 0 1 0 0 0 0 1 0
1 0 0 0.5 0 1 0 0 0 0 1 0
";

fn slam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path) -> std::path::PathBuf {
    fs::write(dir.join("scene.txt"), SCENE).unwrap();
    fs::write(dir.join("traj.txt"), TRAJECTORY).unwrap();
    let seq = dir.join("seq");
    let out = slam(&[
        "simulate",
        "--scene",
        s(&dir.join("scene.txt")),
        "--trajectory",
        s(&dir.join("traj.txt")),
        "--output",
        s(&seq),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    seq
}

#[test]
fn empty_input_fails_with_no_scans() {
    let dir = tempfile::tempdir().unwrap();
    let out = slam(&["run", "--input", s(dir.path()), "--sync"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no scans found"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "odometry.bogus = 3\n").unwrap();
    let out = slam(&["run", "--input", s(dir.path()), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));

    let out = slam(&["run", "--input", s(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = slam(&["run", "--input", s(dir.path()), "--set", "map.cell_size=-1"]);
    assert_eq!(out.status.code(), Some(1));

    let out = slam(&["run", "--input", s(dir.path()), "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(1));

    let out = slam(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_run_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let seq = simulate(dir.path());
    assert_eq!(fs::read_dir(seq.join("velodyne")).unwrap().count(), 6);

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# short test run\nodometry.max_iterations = 15\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = slam(&[
        "run",
        "--input",
        s(&seq),
        "--config",
        s(&cfg),
        "--output",
        s(&out_dir),
        "--mode",
        "odometry",
        "--sync",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("6 frames"), "{stdout}");
    assert!(stdout.contains("ATE"), "{stdout}");

    let traj = fs::read_to_string(out_dir.join("trajectory.txt")).unwrap();
    assert_eq!(traj.lines().count(), 6);
    let timing = fs::read_to_string(out_dir.join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 7);
    for name in ["map.ply", "loops.txt", "eval.csv"] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }

    let out = slam(&[
        "eval",
        "--est",
        s(&out_dir.join("trajectory.txt")),
        "--gt",
        s(&seq.join("poses.txt")),
    ]);
    assert!(out.status.success());
    let line = String::from_utf8_lossy(&out.stdout);
    let fields: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(fields[0], "ATE");
    assert!(fields[1].ends_with('%'));
    assert_eq!(&fields[2..], ["ARE", fields[3], "deg/m"]);
    let ate: f64 = fields[1].trim_end_matches('%').parse().unwrap();
    assert!(ate < 5.0, "{line}");
}

#[test]
fn identical_runs_write_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let seq = simulate(dir.path());
    let mut outputs = Vec::new();
    for (k, extra) in [[""; 0].as_slice(), ["--sync"].as_slice()].iter().enumerate() {
        let out_dir = dir.path().join(format!("out{k}"));
        let mut args = vec!["run", "--input", s(&seq), "--output", s(&out_dir), "--mode", "full"];
        args.extend_from_slice(extra);
        let out = slam(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(fs::read_to_string(out_dir.join("trajectory.txt")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn ablate_single_mode_prints_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let seq = simulate(dir.path());
    let out = slam(&["ablate", "--input", s(&seq), "--modes", "geometric", "--sync"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "mode,ate_percent,are_deg_per_m,mean_ms_per_frame");
    assert!(lines[1].starts_with("geometric,"));

    let out = slam(&["ablate", "--input", s(&seq), "--modes", "geometric,upside-down"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_rejects_mismatched_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    fs::write(&a, TRAJECTORY).unwrap();
    fs::write(&b, TRAJECTORY.lines().take(3).collect::<Vec<_>>().join("\n")).unwrap();
    let out = slam(&["eval", "--est", s(&a), "--gt", s(&b)]);
    assert_eq!(out.status.code(), Some(2));

    let out = slam(&["eval", "--est", s(&a), "--gt", s(&a)]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ATE 0.0000% ARE 0.000000 deg/m");
}
