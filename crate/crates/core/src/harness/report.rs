use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aps::ApsResult;
use crate::exposure::{FeatureSet, Observation};
use crate::servo::{ServoTrace, StopReason};

use super::{AssistChoice, HarnessError, Scenario};

/// Environment variable naming the output directory.
pub const OUTPUT_ENV: &str = "DISSECT_OUT";

/// Success threshold on the expansion ratio.
pub const SUCCESS_RHO: f64 = 1.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub category: String,
    pub message: String,
}

/// Block norms of an error vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub wedge: f64,
    pub shear: f64,
    pub stretch: f64,
    pub mean_wedge_cosine: f64,
}

impl ErrorSummary {
    pub fn of(features: &FeatureSet, obs: &Observation) -> Self {
        let e = features.error(obs);
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let stretch: Vec<f64> = e.stretch_v.iter().chain(&e.stretch_w).copied().collect();
        Self {
            wedge: n(&e.wedge),
            shear: n(&e.shear),
            stretch: n(&stretch),
            mean_wedge_cosine: obs.mean_wedge(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub aps_ms: f64,
    pub servo_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub scenario_digest: String,
    pub seed: u64,
    pub assist: Option<AssistChoice>,
    pub steps: usize,
    pub stop: Option<StopReason>,
    pub rho: Option<f64>,
    pub area_initial: usize,
    pub area_final: usize,
    /// Exactly `rho > 1.25`.
    pub success: bool,
    pub failure: Option<Failure>,
    /// True-state errors before and after the loop.
    pub initial_error: Option<ErrorSummary>,
    pub final_error: Option<ErrorSummary>,
    pub final_hard_error: f64,
    pub path_length: f64,
    pub trace_digest: String,
    /// Wall times; excluded from the digest.
    pub timings: Timings,
    /// SHA-256 of the report with timings zeroed and this field empty.
    pub digest: String,
}

impl RunReport {
    pub fn new(scenario: &str, scenario_digest: &str, seed: u64) -> Self {
        Self {
            scenario: scenario.into(),
            scenario_digest: scenario_digest.into(),
            seed,
            assist: None,
            steps: 0,
            stop: None,
            rho: None,
            area_initial: 0,
            area_final: 0,
            success: false,
            failure: None,
            initial_error: None,
            final_error: None,
            final_hard_error: 0.0,
            path_length: 0.0,
            trace_digest: String::new(),
            timings: Timings::default(),
            digest: String::new(),
        }
    }

    /// Fills the trace-derived fields, the success flag and the digest.
    pub fn finish(&mut self, trace: &ServoTrace) {
        self.steps = trace.steps.len();
        self.stop = trace.stop.clone();
        self.path_length = trace.path_length();
        self.trace_digest = trace_digest(trace);
        self.success = self.rho.is_some_and(|r| r > SUCCESS_RHO);
        self.digest = self.compute_digest();
    }

    pub fn compute_digest(&self) -> String {
        let mut canon = self.clone();
        canon.timings = Timings::default();
        canon.digest = String::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&canon).expect("reports serialize")))
    }

    pub fn final_wedge_decreased(&self) -> bool {
        match (&self.initial_error, &self.final_error) {
            (Some(a), Some(b)) => b.wedge < a.wedge,
            _ => false,
        }
    }
}

/// Digest of a trace without its wall times.
pub fn trace_digest(trace: &ServoTrace) -> String {
    let mut canon = trace.clone();
    for r in &mut canon.steps {
        r.wall_ms = 0.0;
    }
    hex::encode(Sha256::digest(serde_json::to_vec(&canon).expect("traces serialize")))
}

/// Everything a request produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub trace: ServoTrace,
    pub aps: Option<ApsResult>,
}

impl RunOutput {
    pub(super) fn failed(scenario: &Scenario, seed: u64, e: &HarnessError) -> Self {
        let mut report = RunReport::new(&scenario.name, &scenario.digest(), seed);
        report.failure = Some(Failure {
            category: e.category().into(),
            message: e.to_string(),
        });
        let trace = ServoTrace::default();
        report.finish(&trace);
        Self {
            report,
            trace,
            aps: None,
        }
    }
}

/// Mean, sample standard deviation and success rate of a column of trials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub success_rate: f64,
}

impl ColumnStats {
    pub fn of(reports: &[&RunReport]) -> Self {
        let n = reports.len();
        if n == 0 {
            return Self::default();
        }
        let rho: Vec<f64> = reports.iter().map(|r| r.rho.unwrap_or(0.0)).collect();
        let mean = rho.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (rho.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let success = reports.iter().filter(|r| r.success).count();
        Self {
            n,
            mean,
            std,
            success_rate: success as f64 / n as f64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchSummary {
    pub outputs: Vec<RunOutput>,
    pub stats: ColumnStats,
}

impl BatchSummary {
    pub fn from_outputs(outputs: Vec<RunOutput>) -> Self {
        let refs: Vec<&RunReport> = outputs.iter().map(|o| &o.report).collect();
        let stats = ColumnStats::of(&refs);
        Self { outputs, stats }
    }

    pub fn reports(&self) -> impl Iterator<Item = &RunReport> {
        self.outputs.iter().map(|o| &o.report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPair {
    pub seed: u64,
    pub aps: RunReport,
    pub fixed: RunReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<TrialPair>,
    pub aps: ColumnStats,
    pub fixed: ColumnStats,
}

impl ComparisonTable {
    pub fn from_pairs(pairs: Vec<(RunOutput, RunOutput)>) -> Self {
        let rows: Vec<TrialPair> = pairs
            .into_iter()
            .map(|(a, f)| TrialPair {
                seed: a.report.seed,
                aps: a.report,
                fixed: f.report,
            })
            .collect();
        let aps = ColumnStats::of(&rows.iter().map(|r| &r.aps).collect::<Vec<_>>());
        let fixed = ColumnStats::of(&rows.iter().map(|r| &r.fixed).collect::<Vec<_>>());
        Self { rows, aps, fixed }
    }

    /// Method / final expansion / success rate table.
    pub fn to_markdown(&self) -> String {
        let line = |name: &str, s: &ColumnStats| {
            format!(
                "| {name} | {:.2} ± {:.2} | {:.0}% |\n",
                s.mean,
                s.std,
                100.0 * s.success_rate
            )
        };
        let mut out = String::from("| Method | Final expansion | Success rate |\n|---|---|---|\n");
        out.push_str(&line("APS", &self.aps));
        out.push_str(&line("Fixed", &self.fixed));
        out
    }
}

pub fn output_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

/// Writes `scenario.json`, `trace.jsonl`, `report.json` and, when present,
/// `aps_map.json` into `<root>/<name>-seed<seed>-<digest prefix>/`.
pub fn persist_run(root: &Path, scenario: &Scenario, output: &RunOutput) -> super::Result<PathBuf> {
    let r = &output.report;
    let dir = root.join(format!("{}-{}-seed{}-{}", r.scenario, method(r), r.seed, &r.digest[..12]));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let write = |name: &str, body: &[u8]| -> super::Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))
    };
    write("scenario.json", scenario.to_json().as_bytes())?;
    write("trace.jsonl", output.trace.to_jsonl().as_bytes())?;
    write(
        "report.json",
        serde_json::to_string_pretty(r).expect("reports serialize").as_bytes(),
    )?;
    if let Some(aps) = &output.aps {
        write(
            "aps_map.json",
            serde_json::to_string_pretty(&aps.to_json()).expect("json").as_bytes(),
        )?;
    }
    Ok(dir)
}

fn method(r: &RunReport) -> &str {
    r.assist.as_ref().map(|a| a.method.as_str()).unwrap_or("none")
}

pub const SUMMARY_HEADER: &str = "scenario,method,seed,face,rho,success,stop,steps,failure,digest";

/// Appends one row per report to `<root>/summary.csv`, writing the header
/// when the file is new.
pub fn append_summary_csv<'a>(root: &Path, reports: impl IntoIterator<Item = &'a RunReport>) -> super::Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let path = root.join("summary.csv");
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_err(&path, e))?;
    let mut body = String::new();
    if fresh {
        body.push_str(SUMMARY_HEADER);
        body.push('\n');
    }
    for r in reports {
        let stop = r
            .stop
            .as_ref()
            .map(|s| match s {
                StopReason::IterationCap => "iteration_cap",
                StopReason::Converged => "converged",
                StopReason::LocalMinimum => "local_minimum",
                StopReason::Aborted { .. } => "aborted",
            })
            .unwrap_or("none");
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.scenario,
            method(r),
            r.seed,
            r.assist.as_ref().map(|a| a.face.to_string()).unwrap_or_default(),
            r.rho.map(|x| format!("{x:.6}")).unwrap_or_default(),
            r.success,
            stop,
            r.steps,
            r.failure.as_ref().map(|f| f.category.as_str()).unwrap_or(""),
            r.digest
        ));
    }
    f.write_all(body.as_bytes()).map_err(|e| io_err(&path, e))?;
    Ok(path)
}
