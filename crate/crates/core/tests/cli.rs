use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn evuas(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_evuas"));
    c.args(args).env_remove("EVUAS_SCENARIO_PATH");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_scenario(dir: &Path, file: &str, body: &str) -> String {
    let p = dir.join(file);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn list_shows_builtin_catalogs() {
    let o = evuas(&["list"], &[]);
    assert!(o.status.success());
    let s = stdout(&o);
    for name in ["chain", "cubic", "tanh", "cos_exp", "t_cos_t4", "example1_unbounded", "example1_bounded", "remark1_bounds", "tracking_demo", "pole_placement_demo"] {
        assert!(s.contains(name), "missing {name}");
    }
}

#[test]
fn list_includes_user_scenarios() {
    let empty = TempDir::new().unwrap();
    let base = stdout(&evuas(&["list"], &[]));
    let with_empty = stdout(&evuas(&["list", "--scenario-dir", empty.path().to_str().unwrap()], &[]));
    assert_eq!(base, with_empty);

    let user = TempDir::new().unwrap();
    write_scenario(user.path(), "mine.json", r#"{"name": "my_custom_run", "description": "user run", "run": {"t_end": 1.0}}"#);
    write_scenario(user.path(), "broken.json", "{ not json");
    let s = stdout(&evuas(&["list", "--scenario-dir", user.path().to_str().unwrap()], &[]));
    assert!(s.contains("my_custom_run"));
    let s = stdout(&evuas(&["list"], &[("EVUAS_SCENARIO_PATH", user.path().to_str().unwrap())]));
    assert!(s.contains("my_custom_run"));
}

#[test]
fn user_scenarios_run_by_name() {
    let user = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    write_scenario(user.path(), "mine.json", r#"{"name": "my_custom_run", "run": {"t_end": 1.0}}"#);
    let o = evuas(&["run", "my_custom_run", "--out", out.path().to_str().unwrap()], &[("EVUAS_SCENARIO_PATH", user.path().to_str().unwrap())]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn empty_pipeline_writes_only_the_manifest() {
    let dir = TempDir::new().unwrap();
    let path = write_scenario(dir.path(), "s.json", r#"{"name": "nothing", "run": {"t_end": 1.0}, "stages": []}"#);
    let out = dir.path().join("out");
    let o = evuas(&["run", &path, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(files(&out), vec!["manifest.json"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "ok");
    assert!(m["artifacts"].as_array().unwrap().is_empty());
}

#[test]
fn schema_violation_exits_2_with_field_path() {
    let dir = TempDir::new().unwrap();
    let path = write_scenario(dir.path(), "s.json", r#"{"name": "bad", "run": {"t_end": 1.0, "tol": "tight"}}"#);
    let o = evuas(&["run", &path, "--out", dir.path().join("o").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run.tol"), "{}", stderr(&o));

    let path = write_scenario(dir.path(), "s2.json", r#"{"name": "bad", "model": {"name": "unicycle"}, "run": {"t_end": 1.0}}"#);
    let o = evuas(&["run", &path, "--out", dir.path().join("o2").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.name"));

    let o = evuas(&["run", "no_such_scenario"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stage_failure_exits_1_with_stage_name() {
    let dir = TempDir::new().unwrap();
    let path = write_scenario(
        dir.path(),
        "s.json",
        r#"{"name": "unstable", "design": {"a_h": [[0.5]]}, "run": {"t_end": 1.0, "initial": [1.0]}, "stages": ["simulate"]}"#,
    );
    let out = dir.path().join("out");
    let o = evuas(&["run", &path, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("simulate"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(m["status"].as_str().unwrap().starts_with("failed"));
}

#[test]
fn remark_bounds_profile_respects_bound() {
    let out = TempDir::new().unwrap();
    let o = evuas(&["run", "remark1_bounds", "--out", out.path().to_str().unwrap(), "--format", "csv"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(files(out.path()), vec!["manifest.json", "profile_cos_exp.csv", "profile_vec_cos_sin_exp.csv"]);
    let mut r = csv::Reader::from_path(out.path().join("profile_cos_exp.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["t", "value", "bound"]);
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let t: f64 = rec[0].parse().unwrap();
        let value: f64 = rec[1].parse().unwrap();
        let bound: f64 = rec[2].parse().unwrap();
        assert!((bound - 4.0 * (-t).exp()).abs() < 1e-12);
        assert!(value <= bound, "t={t}: {value} > {bound}");
        rows += 1;
    }
    assert_eq!(rows, 9);
}

#[test]
fn single_stage_commands() {
    let out = TempDir::new().unwrap();
    let o = evuas(&["synthesize", "pole_placement_demo", "--out", out.path().to_str().unwrap()], &[]);
    assert!(o.status.success());
    assert_eq!(files(out.path()), vec!["controller.json", "manifest.json"]);
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("controller.json")).unwrap()).unwrap();
    assert_eq!(c["controller"]["mode"], "linear-gain");

    let out = TempDir::new().unwrap();
    let o = evuas(&["simulate", "tracking_demo", "--out", out.path().to_str().unwrap(), "--norm", "inf", "--format", "csv,json"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("trajectory_diagnostics.json")).unwrap()).unwrap();
    assert_eq!(d["norm"], "inf");
    let header = fs::read_to_string(out.path().join("trajectory.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "t,x_1,x_2,u_1,norm");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        let o = evuas(&["run", "pole_placement_demo", "--out", d.path().to_str().unwrap(), "--seed", "42"], &[]);
        assert!(o.status.success());
    }
    let names = files(a.path());
    assert_eq!(names, files(b.path()));
    for n in names.iter().filter(|n| *n != "manifest.json") {
        assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap(), "{n}");
    }
    let ma: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["artifacts"], mb["artifacts"]);
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
    assert_eq!(ma["seed"], 42);
}
