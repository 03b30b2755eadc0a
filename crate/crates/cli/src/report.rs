use std::path::PathBuf;

use serde::Serialize;

/// One declared check with its verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    /// Check family, e.g. `contraction` or `merton`.
    pub group: String,
    /// Fixture or subject the check ran on.
    pub subject: String,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

/// Wall-clock duration of one pipeline phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub problem: String,
    pub assertions: Vec<Assertion>,
    /// Wall-clock limits. Kept apart from `assertions` because their values
    /// differ between runs; written to `timings.json` instead.
    #[serde(skip)]
    pub runtime_checks: Vec<Assertion>,
    /// Convergence summaries and other run-specific numbers.
    pub summary: serde_json::Value,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    #[serde(skip)]
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    pub timings: Vec<Timing>,
    /// Set when a Picard solve diverged; the report is still complete.
    #[serde(skip)]
    pub diverged: bool,
}

impl RunReport {
    pub fn new(problem: &str, config: serde_json::Value, seeds: serde_json::Value) -> Self {
        Self {
            problem: problem.to_string(),
            assertions: Vec::new(),
            runtime_checks: Vec::new(),
            summary: serde_json::Value::Object(Default::default()),
            config,
            seeds,
            outputs: Vec::new(),
            timings: Vec::new(),
            diverged: false,
        }
    }

    /// `value <= threshold`.
    pub fn at_most(&mut self, group: &str, subject: &str, name: &str, value: f64, threshold: f64) -> bool {
        let passed = value <= threshold;
        self.push(group, subject, name, value, threshold, passed, String::new())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(&mut self, group: &str, subject: &str, name: &str, value: f64, threshold: f64, passed: bool, detail: String) -> bool {
        self.assertions.push(Assertion {
            group: group.into(),
            subject: subject.into(),
            name: name.into(),
            value,
            threshold,
            passed,
            detail,
        });
        passed
    }

    /// Failed check for a step that could not run at all.
    pub fn error(&mut self, group: &str, subject: &str, err: &fbsde::Error) {
        if matches!(err, fbsde::Error::Diverged { .. }) {
            self.diverged = true;
        }
        self.push(group, subject, "completed", f64::NAN, f64::NAN, false, err.to_string());
    }

    pub fn runtime(&mut self, subject: &str, seconds: f64, limit: f64) {
        self.runtime_checks.push(Assertion {
            group: "runtime".into(),
            subject: subject.into(),
            name: "wall-clock seconds".into(),
            value: seconds,
            threshold: limit,
            passed: seconds <= limit,
            detail: String::new(),
        });
    }

    pub fn time(&mut self, phase: impl Into<String>, seconds: f64) {
        self.timings.push(Timing { phase: phase.into(), seconds });
    }

    pub fn summarize(&mut self, key: &str, value: serde_json::Value) {
        if let serde_json::Value::Object(map) = &mut self.summary {
            map.insert(key.to_string(), value);
        }
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.iter().filter(|a| !a.passed)
    }

    pub fn group(&self, group: &str) -> impl Iterator<Item = &Assertion> + '_ {
        let group = group.to_string();
        self.assertions.iter().filter(move |a| a.group == group)
    }

    /// Exit status: 0 all pass, 3 divergence, 1 any other failure.
    pub fn exit_code(&self) -> i32 {
        if self.diverged {
            3
        } else if self.passed() {
            0
        } else {
            1
        }
    }

    /// Fixed-width verdict table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<14} {:<16} {:<34} {:>14} {:>12}  verdict\n", "group", "subject", "check", "value", "threshold");
        for a in &self.assertions {
            out.push_str(&format!(
                "{:<14} {:<16} {:<34} {:>14.6e} {:>12.3e}  {}\n",
                a.group,
                a.subject,
                a.name,
                a.value,
                a.threshold,
                if a.passed { "PASS" } else { "FAIL" }
            ));
            if !a.detail.is_empty() && !a.passed {
                out.push_str(&format!("    {}\n", a.detail));
            }
        }
        out
    }

    /// `group,subject,check,value,threshold,verdict` rows.
    pub fn csv(&self) -> String {
        let mut out = String::from("group,subject,check,value,threshold,verdict\n");
        for a in &self.assertions {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{}\n",
                a.group,
                a.subject,
                a.name,
                a.value,
                a.threshold,
                if a.passed { "pass" } else { "fail" }
            ));
        }
        out
    }
}
