use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fbsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsde")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn trivial_run_passes_and_writes_its_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "problem = fbsde\npaths = 2000\n[model]\nfixture = trivial\n");
    let out = tmp.path().join("out");
    let o = fbsde(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["picard.csv", "solution.csv", "solution.json", "report.json", "summary.csv", "timings.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join(".fbsde.lock").exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"]["master"], 42);
    assert_eq!(report["config"]["paths"], 2000);
}

#[test]
fn missing_required_field_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "problem = portfolio\n[market]\nmu_s = 0.1\nsigma_bar_s = 0.2\n");
    let o = fbsde(&["run", &cfg, "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("market.gamma"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn unknown_key_reports_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "problem = fbsde\n[model]\nfixture = trivial\nfixtrue = heat-tanh\n");
    let o = fbsde(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("line 4") && e.contains("fixtrue"), "{e}");
}

#[test]
fn invalid_market_is_rejected_before_solving() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "problem = portfolio\n[market]\nmu_s = 0.1\nsigma_bar_s = 0.0\ngamma = 1\n");
    let o = fbsde(&["run", &cfg, "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".fbsde.lock"), "1\n").unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "problem = fbsde\npaths = 100\n[model]\nfixture = trivial\n");
    let o = fbsde(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
    assert!(!out.join("report.json").exists());
}

#[test]
fn same_seed_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "problem = qbsde-weak\npaths = 3000\n[model]\nfixture = coupled\n[tolerances]\nweak_residual = 1\n",
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    fbsde(&["run", &cfg, "--out", a.to_str().unwrap(), "--quiet"]);
    fbsde(&["run", &cfg, "--out", b.to_str().unwrap(), "--quiet"]);
    for f in ["picard.csv", "solution.csv", "solution.json", "weak_solution.csv", "weak_solution.json", "report.json", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = tmp.path().join("c");
    fbsde(&["run", &cfg, "--out", c.to_str().unwrap(), "--seed", "7", "--quiet"]);
    assert_ne!(fs::read(a.join("solution.csv")).unwrap(), fs::read(c.join("solution.csv")).unwrap());
}

#[test]
fn small_suite_still_reports_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("suite");
    let o = fbsde(&["verify", "--paths", "1000", "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(matches!(o.status.code(), Some(0 | 1 | 3)), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    for subject in ["trivial", "heat-tanh", "linear-sin", "constant-drift", "coupled", "portfolio", "merton"] {
        assert!(summary.contains(&format!(",{subject},")), "{subject} missing");
    }
    for f in ["surfaces.csv", "picard.csv", "drifts.csv", "report.json", "timings.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}
