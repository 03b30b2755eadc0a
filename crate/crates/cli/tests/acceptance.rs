//! Acceptance run: the verification suite at full size, mapped onto the
//! eleven acceptance criteria. Prints one verdict line per criterion and
//! exits non-zero if any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use fbsde_cli::{run, Assertion, ExperimentConfig, RunReport};
use support::{crank_nicolson_linear, heat_expectation, interpolate};

const SEED: u64 = 42;
const OTHER_SEEDS: [u64; 4] = [7, 2024, 31337, 123456];
const FIXTURES: [&str; 6] = ["trivial", "constant-driver", "heat-tanh", "linear-sin", "constant-drift", "coupled"];
const SUITE_FILES: [&str; 5] = ["summary.csv", "surfaces.csv", "picard.csv", "drifts.csv", "report.json"];

struct Run {
    report: RunReport,
    files: BTreeMap<&'static str, Vec<u8>>,
}

fn suite(seed: u64, dir: &Path) -> Run {
    let mut cfg = ExperimentConfig::default_suite();
    cfg.seed = seed;
    cfg.output.dir = dir.to_path_buf();
    let report = run(&cfg).unwrap_or_else(|e| panic!("suite with seed {seed} stopped: {e}"));
    let files = SUITE_FILES.iter().map(|&f| (f, fs::read(dir.join(f)).unwrap_or_default())).collect();
    Run { report, files }
}

/// Outcome of one criterion: verdict plus the lines explaining it.
struct Verdict {
    passed: bool,
    notes: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Self { passed: true, notes: Vec::new() }
    }

    fn check(&mut self, ok: bool, note: String) {
        if !ok {
            self.passed = false;
            self.notes.push(note);
        }
    }

    /// Every assertion in the group passes and the group covers `subjects`.
    fn group(&mut self, r: &RunReport, group: &str, subjects: &[&str]) {
        let rows: Vec<&Assertion> = r.group(group).collect();
        for s in subjects {
            self.check(rows.iter().any(|a| a.subject == *s), format!("{group}: no check ran on {s}"));
        }
        for a in rows.iter().filter(|a| subjects.contains(&a.subject.as_str())) {
            self.check(a.passed, format!("{group}/{}: {} = {:e} (threshold {:e}) {}", a.subject, a.name, a.value, a.threshold, a.detail));
        }
    }

    fn runtime(&mut self, r: &RunReport, prefix: &str) {
        let mut seen = false;
        for a in r.runtime_checks.iter().filter(|a| a.subject.starts_with(prefix)) {
            seen = true;
            self.check(a.passed, format!("runtime {}: {:.1} s > {} s", a.subject, a.value, a.threshold));
        }
        self.check(seen, format!("no runtime recorded for {prefix}"));
    }
}

struct SurfaceRow {
    t: f64,
    x: f64,
    y: f64,
}

fn surface_rows(csv: &[u8], fixture: &str) -> Vec<SurfaceRow> {
    String::from_utf8_lossy(csv)
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0] == fixture).then(|| SurfaceRow { t: f[1].parse().unwrap(), x: f[2].parse().unwrap(), y: f[3].parse().unwrap() })
        })
        .collect()
}

fn surface_criterion(v: &mut Verdict, rows: &[SurfaceRow], mut reference: impl FnMut(f64, f64) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for t in [0.0, 0.25, 0.5, 0.75] {
        let at_t: Vec<&SurfaceRow> = rows.iter().filter(|r| r.t == t).collect();
        v.check(at_t.len() == 41, format!("t = {t}: {} surface points", at_t.len()));
        for r in at_t {
            worst = worst.max((r.y - reference(r.t, r.x)).abs());
        }
    }
    v.check(worst <= 0.02, format!("sup error {worst:.4} > 0.02"));
    worst
}

fn verdicts(r: &RunReport) -> Vec<(String, String, String, bool)> {
    r.assertions.iter().map(|a| (a.group.clone(), a.subject.clone(), a.name.clone(), a.passed)).collect()
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let first = suite(SEED, &tmp.path().join("first"));
    let r = &first.report;
    let all: Vec<&str> = FIXTURES.to_vec();
    let mut with_portfolio = all.clone();
    with_portfolio.extend(["portfolio", "merton"]);
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();

    let mut v = Verdict::new();
    v.group(r, "contraction", &with_portfolio);
    for f in FIXTURES {
        v.runtime(r, &format!("solve {f}"));
    }
    results.push((1, "contraction", v));

    let mut v = Verdict::new();
    v.group(r, "equivalence", &with_portfolio);
    results.push((2, "FDE/FBSDE equivalence", v));

    let surfaces = &first.files["surfaces.csv"];
    let mut v = Verdict::new();
    v.group(r, "oracle", &["heat-tanh"]);
    let heat = surface_criterion(&mut v, &surface_rows(surfaces, "heat-tanh"), |t, x| heat_expectation(f64::tanh, x, 1.0 - t));
    v.notes.push(format!("sup |Y - Gauss-Hermite| = {heat:.4}"));
    results.push((3, "heat-kernel oracle", v));

    let mut v = Verdict::new();
    v.group(r, "oracle", &["linear-sin"]);
    let mut cache: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let lin = surface_criterion(&mut v, &surface_rows(surfaces, "linear-sin"), |t, x| {
        let (xs, u) = cache.entry(t.to_bits()).or_insert_with(|| crank_nicolson_linear(0.5, f64::sin, -6.0, 6.0, 400, 1.0 - t, 200));
        interpolate(xs, u, x)
    });
    v.notes.push(format!("sup |Y - finite differences| = {lin:.4}"));
    results.push((4, "linear-driver PDE oracle", v));

    let mut v = Verdict::new();
    v.group(r, "girsanov", &with_portfolio);
    let closed_form = r.group("girsanov").any(|a| a.subject == "constant-drift" && a.name.starts_with("max relative error"));
    let fresh = r.group("girsanov").filter(|a| a.subject == "constant-drift" && a.name.contains("fresh Brownian")).count();
    v.check(closed_form && fresh == 2, "constant-drift closed-form or fresh-Brownian checks missing".into());
    results.push((5, "Girsanov weights", v));

    let mut v = Verdict::new();
    v.group(r, "z-invariance", &all);
    results.push((6, "Z-invariance", v));

    let mut v = Verdict::new();
    v.group(r, "weak-residual", &["portfolio"]);
    results.push((7, "weak-solution residual", v));

    let mut v = Verdict::new();
    v.group(r, "merton", &["merton"]);
    v.runtime(r, "merton benchmark");
    results.push((8, "Merton benchmark", v));

    let mut v = Verdict::new();
    v.group(r, "optimality", &["merton", "flat-market"]);
    results.push((9, "martingale optimality", v));

    let mut v = Verdict::new();
    let mut unique = all.clone();
    unique.push("portfolio");
    v.group(r, "uniqueness", &unique);
    results.push((10, "pathwise uniqueness", v));

    let mut v = Verdict::new();
    let second = suite(SEED, &tmp.path().join("second"));
    for f in SUITE_FILES {
        v.check(first.files[f] == second.files[f], format!("{f} differs between two seed-{SEED} runs"));
        v.check(!first.files[f].is_empty(), format!("{f} is empty"));
    }
    let base = verdicts(r);
    for seed in OTHER_SEEDS {
        let other = suite(seed, &tmp.path().join(format!("seed-{seed}")));
        let got = verdicts(&other.report);
        v.check(got.len() == base.len(), format!("seed {seed}: {} checks vs {}", got.len(), base.len()));
        for (a, b) in base.iter().zip(&got) {
            v.check(a == b, format!("seed {seed}: {}/{}/{} {} vs {}", b.0, b.1, b.2, a.3, b.3));
        }
    }
    results.push((11, "determinism", v));

    let mut ok = true;
    for (n, name, v) in &results {
        println!("criterion {n:>2} ({name}): {}", if v.passed { "PASS" } else { "FAIL" });
        for note in &v.notes {
            println!("    {note}");
        }
        ok &= v.passed;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
