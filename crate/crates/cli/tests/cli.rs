use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cooploc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cooploc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

#[test]
fn default_config_is_valid_json_and_reloads() {
    let text = stdout(&cooploc(&["default-config"]));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["frames"], 150);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, text).unwrap();
    let out = dir.path().join("run");
    let o = cooploc(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--frames",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    stdout(&o);
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = cooploc(&[
        "run",
        "--scenario",
        "sim1",
        "--permutation",
        "2_infra",
        "--frames",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    let table = stdout(&o);
    assert!(table.contains("sim1") && table.contains("2_infra"), "{table}");
    for name in ["slam.csv", "ground_truth.csv"] {
        assert_eq!(header(&out.join(name)), "t,x,y,z,qw,qx,qy,qz");
        assert_eq!(fs::read_to_string(out.join(name)).unwrap().lines().count(), 5);
    }
    assert_eq!(header(&out.join("gps.csv")), "t,x,y,z,mp,iono,noise");
    assert!(header(&out.join("fusion.csv")).starts_with("t,valid,fitness,rmse,f_env,r_env"));
    assert!(header(&out.join("frame_errors.csv")).starts_with("frame,t,"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["scenario"], "sim1");
    assert_eq!(summary["report"]["frames_total"], 4);
    assert_eq!(summary["icp_violations"], 0);
}

#[test]
fn sweep_csv_has_twelve_rows_and_is_reproducible() {
    let args = ["sweep", "--frames", "2", "--format", "csv"];
    let first = stdout(&cooploc(&args));
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines.len(), 13);
    assert!(lines[0].starts_with("scenario,permutation,slam,gps"));
    assert!(lines[1..].iter().all(|l| l.matches(',').count() == 11));
    assert_eq!(first, stdout(&cooploc(&args)));
}

#[test]
fn export_clouds_writes_ply() {
    let dir = tempfile::tempdir().unwrap();
    let o = cooploc(&[
        "export-clouds",
        "--frame",
        "1",
        "--frames",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    stdout(&o);
    for name in ["ego_1.ply", "map_4_infra_2_agent_1.ply"] {
        let bytes = fs::read(dir.path().join(name)).unwrap();
        assert!(bytes.starts_with(b"ply\n"), "{name}");
    }
}

#[test]
fn bad_arguments_fail() {
    assert!(!cooploc(&["run", "--scenario", "sim9", "--out", "x"]).status.success());
    assert!(!cooploc(&["sweep", "--format", "xml"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let o = cooploc(&["export-clouds", "--frame", "5", "--frames", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("out of range"));
}
