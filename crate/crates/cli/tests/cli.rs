use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn sekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sekit")).args(args).env_remove("SEKIT_SEED").output().expect("spawn sekit")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_supervised_reaches_empirical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = sekit(&["run", "--config", p(&fixture("supervised.json")), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trace.csv", "trace.json", "final_model.json", "resolved_config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m = read_json(&out.join("final_model.json"));
    let theta: Vec<f64> =
        m["model"]["theta"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap_or(f64::NEG_INFINITY)).collect();
    let z: f64 = theta.iter().map(|t| t.exp()).sum();
    let counts = [4.0, 0.0, 7.0, 2.0, 1.0, 6.0, 3.0, 1.0];
    let n: f64 = counts.iter().sum();
    let tv: f64 = theta.iter().zip(counts).map(|(t, c)| (t.exp() / z - c / n).abs()).sum::<f64>() / 2.0;
    assert!(tv < 1e-6, "tv {tv}");
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = sekit(&["run", "--config", p(&fixture("unknown_key.json")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sede"));
    let o = sekit(&[
        "run",
        "--config",
        p(&fixture("supervised.json")),
        "--out",
        p(&dir.path().join("y")),
        "--override",
        "settings.config.betta=0.5",
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("betta"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let traces: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|d| {
            let out = dir.path().join(d);
            let o = sekit(&["run", "--config", p(&fixture("em.json")), "--out", p(&out)]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            fs::read(out.join("trace.csv")).unwrap()
        })
        .collect();
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn resolved_config_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&sekit(&["run", "--config", p(&fixture("em.json")), "--out", p(&a)])), 0);
    let o = sekit(&["run", "--config", p(&a.join("resolved_config.json")), "--out", p(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());
    assert_eq!(fs::read(a.join("final_model.json")).unwrap(), fs::read(b.join("final_model.json")).unwrap());
}

#[test]
fn seed_falls_back_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e");
    let o = Command::new(env!("CARGO_BIN_EXE_sekit"))
        .args(["run", "--recipe", "em", "--problem", p(&fixture("mixture.json")), "--out", p(&out)])
        .env("SEKIT_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&out.join("resolved_config.json"))["seed"], 42);
}

#[test]
fn nonconvergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("n");
    let o = sekit(&["run", "--config", p(&fixture("nonconvergent.json")), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(out.join("trace.csv").exists());
}

#[test]
fn check_pairs() {
    let o = sekit(&[
        "check",
        "--recipe",
        "em",
        "--oracle",
        "oracle-em",
        "--problem",
        p(&fixture("mixture.json")),
        "--tol",
        "1e-10",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["pass"], true);

    let o = sekit(&[
        "check",
        "--recipe",
        "mw",
        "--oracle",
        "hedge",
        "--problem",
        p(&fixture("experts.json")),
        "--tol",
        "1e-12",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));

    let o = sekit(&[
        "check",
        "--recipe",
        "pg",
        "--oracle",
        "reinforce",
        "--problem",
        p(&fixture("mdp.json")),
        "--tol",
        "1e-12",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn check_failures() {
    // Too tight a tolerance is a failed comparison, not an error.
    let o = sekit(&[
        "check",
        "--recipe",
        "mw",
        "--oracle",
        "hedge",
        "--problem",
        p(&fixture("experts.json")),
        "--tol",
        "0",
    ]);
    assert_eq!(code(&o), 3);
    let o = sekit(&["check", "--recipe", "pg", "--oracle", "hedge", "--problem", p(&fixture("mdp.json"))]);
    assert_eq!(code(&o), 1);
    let o = sekit(&["check", "--recipe", "nope", "--oracle", "hedge", "--problem", p(&fixture("mdp.json"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sweep_writes_cells_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = sekit(&["sweep", "--config", p(&fixture("interpolation_sweep.json")), "--out", p(&out), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..3 {
        assert!(out.join(format!("cell_{i:03}")).join("trace.csv").exists());
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn sweep_partial_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let o = sekit(&["sweep", "--config", p(&fixture("partial_sweep.json")), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.contains(",failed,")).count(), 1);
    assert_eq!(
        fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().join("trace.csv").exists()).count(),
        3
    );

    let o = sekit(&["sweep", "--config", p(&fixture("empty_grid.json")), "--out", p(&dir.path().join("e"))]);
    assert_eq!(code(&o), 1);
}
