use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn inmult(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inmult")).args(args).output().expect("spawn inmult")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

fn data_rows(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn instances_writes_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = inmult(&["--out", &out_arg(dir.path()), "instances"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("instances.csv")).unwrap();
    assert!(csv.starts_with("# inmult instances"));
    assert!(csv.contains("# setpoint = [0.49, 0.37]"));
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("1,0.914371"));
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}

#[test]
fn basin_artifacts_do_not_depend_on_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["basins", "--res", "6", "--levels", "1", "--max-steps", "150"];
    for (dir, threads) in [(&a, "1"), (&b, "4")] {
        let out = out_arg(dir.path());
        let mut full = vec!["--out", out.as_str(), "--threads", threads];
        full.extend(args);
        let o = inmult(&full);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["basins.csv", "basins.pgm", "basins_refined.csv", "basins_levels.csv"] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs");
    }
    let pgm = fs::read(a.path().join("basins.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n6 6\n255\n"));
    assert_eq!(pgm.len(), b"P5\n6 6\n255\n".len() + 36);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let run = || {
        let o = inmult(&["--out", &out, "mpc-sim", "--max-steps", "200"]);
        assert!(o.status.success());
        fs::read(dir.path().join("mpc.csv")).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "setpoint = [0.5, 0.3]\n[search]\ngrid = [10, 10]\n").unwrap();
    let o = inmult(&["--config", cfg.to_str().unwrap(), "--out", &out_arg(dir.path()), "--r", "0.49,0.37", "instances"]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("instances.csv")).unwrap();
    assert!(csv.contains("# setpoint = [0.49, 0.37]"));
    assert!(csv.contains("# grid = [10, 10]"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[mpc]\nhorizon_len = 3\n").unwrap();
    assert_eq!(inmult(&["--config", cfg.to_str().unwrap(), "instances"]).status.code(), Some(2));
    assert_eq!(inmult(&["--out", &out_arg(dir.path()), "basins", "--res", "0"]).status.code(), Some(2));
    assert_eq!(inmult(&["iloop-sim", "--signs", "+x"]).status.code(), Some(2));
    assert_eq!(inmult(&["--r", "0.49", "instances"]).status.code(), Some(2));
    assert_eq!(inmult(&["--config", "/nonexistent/run.toml", "instances"]).status.code(), Some(2));
}

#[test]
fn computational_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = inmult(&["--out", &out_arg(dir.path()), "iloop-sim", "--instance", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("3 found"));
    let o = inmult(&["--out", &out_arg(dir.path()), "iloop-eigs", "--signs", "+-"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn table_lists_sign_sets() {
    let dir = tempfile::tempdir().unwrap();
    let o = inmult(&["--out", &out_arg(dir.path()), "table1"]);
    assert!(o.status.success());
    let md = fs::read_to_string(dir.path().join("table1.md")).unwrap();
    assert!(md.starts_with("<!--\ninmult table1"));
    assert!(md.contains("| 1 | (0.914371328, 0.579949851) |"));
    assert!(md.contains("| -+ | ++ -- |"));
    let csv = fs::read_to_string(dir.path().join("table1.csv")).unwrap();
    assert_eq!(data_rows(&csv).len(), 3);
}

#[test]
fn uniqueness_summary_names_single_instances() {
    let dir = tempfile::tempdir().unwrap();
    let o = inmult(&["--out", &out_arg(dir.path()), "gains"]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("direct ++: integral controllable at {2}  unique"));
    assert!(stdout.contains("swapped -+: integral controllable at {2}  unique"));
    let seq = fs::read_to_string(dir.path().join("sequential.csv")).unwrap();
    assert_eq!(data_rows(&seq).len(), 12);
}
