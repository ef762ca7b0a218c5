//! Batch runner for the verification and reproduction experiments.
//!
//! A run reads one JSON config, executes the experiment in memory and only
//! then writes `report.json` plus the CSV series into the output directory.
//! Config errors are caught before anything touches the disk.

mod diff;
mod investment;
mod lqr;
mod pendulum;
mod tabular;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use diff::{report_diff, DiffError, DiffOptions};
pub use investment::{InvestmentParams, InvestmentVariant};
pub use lqr::{LqrParams, ScalarCase};
pub use pendulum::{DpParams, LearnParams, ProbeGrid};
pub use tabular::TabularParams;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit code: 2 for config and path problems, 3 for solver
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io(_) => 2,
            RunError::Solver(_) => 3,
        }
    }
}

pub(crate) fn config_err(msg: impl fmt::Display) -> RunError {
    RunError::Config(msg.to_string())
}

pub(crate) fn solver_err(msg: impl fmt::Display) -> RunError {
    RunError::Solver(msg.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TabularVerify,
    LqrVerify,
    Investment,
    PendulumDp,
    PendulumLearn,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        write!(f, "{}", s.as_str().unwrap_or("?"))
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

/// One experiment. `params` is checked against the experiment's own
/// parameter type; `tolerances` override named check limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, relation: Relation, limit: f64) -> Self {
        let passed = match relation {
            Relation::AtMost => value <= limit,
            Relation::AtLeast => value >= limit,
            Relation::Below => value < limit,
        };
        Check {
            name: name.into(),
            value,
            relation,
            limit,
            passed,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.relation {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
            Relation::Below => "<",
        };
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {:e} {op} {:e}", self.name, self.value, self.limit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub columns: Vec<String>,
}

/// Machine-readable result of a run. Contains no timings or paths, so equal
/// configs give byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub tolerances: BTreeMap<String, f64>,
    pub params: Value,
    pub outputs: Vec<OutputFile>,
    pub results: Value,
}

impl Report {
    /// Human-readable summary, one line per check.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!("{c}\n"));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out.push_str(&format!(
            "{}: {} checks, {failed} failed\n",
            self.experiment,
            self.checks.len()
        ));
        out
    }
}

/// Named check limits: experiment defaults merged with config overrides.
#[derive(Debug, Clone)]
pub(crate) struct Tolerances(BTreeMap<String, f64>);

impl Tolerances {
    fn resolve(defaults: &[(&str, f64)], overrides: &BTreeMap<String, f64>) -> Result<Self, RunError> {
        let mut map: BTreeMap<String, f64> = defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        for (k, v) in overrides {
            if !map.contains_key(k) {
                let known: Vec<&str> = defaults.iter().map(|d| d.0).collect();
                return Err(config_err(format!("unknown tolerance '{k}' (known: {})", known.join(", "))));
            }
            if !v.is_finite() {
                return Err(config_err(format!("tolerance '{k}' is not finite")));
            }
            map.insert(k.clone(), *v);
        }
        Ok(Tolerances(map))
    }

    pub(crate) fn get(&self, key: &str) -> f64 {
        *self.0.get(key).unwrap_or_else(|| panic!("tolerance '{key}' has no default"))
    }
}

/// Collects checks and output files while an experiment runs.
pub(crate) struct Context {
    pub(crate) seed: u64,
    tolerances: Tolerances,
    checks: Vec<Check>,
    files: Vec<(OutputFile, Vec<u8>)>,
}

impl Context {
    pub(crate) fn at_most(&mut self, name: impl Into<String>, value: f64, tolerance: &str) {
        let limit = self.tolerances.get(tolerance);
        self.checks.push(Check::new(name, value, Relation::AtMost, limit));
    }

    pub(crate) fn at_least(&mut self, name: impl Into<String>, value: f64, tolerance: &str) {
        let limit = self.tolerances.get(tolerance);
        self.checks.push(Check::new(name, value, Relation::AtLeast, limit));
    }

    pub(crate) fn below(&mut self, name: impl Into<String>, value: f64, limit: f64) {
        self.checks.push(Check::new(name, value, Relation::Below, limit));
    }

    pub(crate) fn tolerance(&self, key: &str) -> f64 {
        self.tolerances.get(key)
    }

    pub(crate) fn add_file(&mut self, file: impl Into<String>, bytes: Vec<u8>) {
        let columns = bytes
            .split(|&b| b == b'\n')
            .next()
            .map(|h| String::from_utf8_lossy(h).split(',').map(str::to_string).collect())
            .unwrap_or_default();
        self.files.push((
            OutputFile {
                file: file.into(),
                columns,
            },
            bytes,
        ));
    }

    pub(crate) fn add_csv<S: Serialize>(&mut self, file: impl Into<String>, rows: &[S]) -> Result<(), RunError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| solver_err(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| solver_err(format!("csv: {e}")))?;
        self.add_file(file, bytes);
        Ok(())
    }
}

fn parse_params<P: DeserializeOwned + Default>(v: &Value) -> Result<P, RunError> {
    if v.is_null() {
        return Ok(P::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| config_err(format!("params: {e}")))
}

/// A validated experiment, ready to execute.
#[derive(Debug, Clone)]
pub struct Plan {
    pub kind: ExperimentKind,
    pub seed: u64,
    params: Params,
    tolerances: Tolerances,
}

#[derive(Debug, Clone)]
enum Params {
    Tabular(TabularParams),
    Lqr(LqrParams),
    Investment(InvestmentParams),
    PendulumDp(DpParams),
    PendulumLearn(LearnParams),
}

impl Params {
    fn to_value(&self) -> Value {
        let v = match self {
            Params::Tabular(p) => serde_json::to_value(p),
            Params::Lqr(p) => serde_json::to_value(p),
            Params::Investment(p) => serde_json::to_value(p),
            Params::PendulumDp(p) => serde_json::to_value(p),
            Params::PendulumLearn(p) => serde_json::to_value(p),
        };
        v.expect("params serialise")
    }
}

impl Plan {
    /// Parses and validates the experiment block without running anything.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        let (params, defaults): (Params, &[(&str, f64)]) = match cfg.experiment {
            ExperimentKind::TabularVerify => {
                let p: TabularParams = parse_params(&cfg.params)?;
                p.validate()?;
                (Params::Tabular(p), tabular::TOLERANCES)
            }
            ExperimentKind::LqrVerify => {
                let p: LqrParams = parse_params(&cfg.params)?;
                p.validate()?;
                (Params::Lqr(p), lqr::TOLERANCES)
            }
            ExperimentKind::Investment => {
                let p: InvestmentParams = parse_params(&cfg.params)?;
                p.validate()?;
                (Params::Investment(p), investment::TOLERANCES)
            }
            ExperimentKind::PendulumDp => {
                let p: DpParams = parse_params(&cfg.params)?;
                p.validate()?;
                (Params::PendulumDp(p), pendulum::DP_TOLERANCES)
            }
            ExperimentKind::PendulumLearn => {
                let p: LearnParams = parse_params(&cfg.params)?;
                p.validate()?;
                (Params::PendulumLearn(p), pendulum::LEARN_TOLERANCES)
            }
        };
        Ok(Plan {
            kind: cfg.experiment,
            seed: cfg.seed,
            params,
            tolerances: Tolerances::resolve(defaults, &cfg.tolerances)?,
        })
    }

    pub fn execute(&self) -> Result<Outcome, RunError> {
        let mut ctx = Context {
            seed: self.seed,
            tolerances: self.tolerances.clone(),
            checks: Vec::new(),
            files: Vec::new(),
        };
        let results = match &self.params {
            Params::Tabular(p) => tabular::run(&mut ctx, p)?,
            Params::Lqr(p) => lqr::run(&mut ctx, p)?,
            Params::Investment(p) => investment::run(&mut ctx, p)?,
            Params::PendulumDp(p) => pendulum::run_dp(&mut ctx, p)?,
            Params::PendulumLearn(p) => pendulum::run_learn(&mut ctx, p)?,
        };
        let report = Report {
            experiment: self.kind,
            seed: self.seed,
            passed: ctx.checks.iter().all(|c| c.passed),
            checks: ctx.checks,
            tolerances: self.tolerances.0.clone(),
            params: self.params.to_value(),
            outputs: ctx.files.iter().map(|f| f.0.clone()).collect(),
            results,
        };
        Ok(Outcome {
            report,
            files: ctx.files.into_iter().map(|(o, b)| (o.file, b)).collect(),
        })
    }
}

/// A finished run held in memory.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    /// CSV files as `(name, bytes)`.
    pub files: Vec<(String, Vec<u8>)>,
}

impl Outcome {
    pub fn report_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report).expect("report serialises");
        s.push('\n');
        s
    }

    /// Creates `dir` and writes the CSVs and `report.json` into it.
    pub fn write(&self, dir: &Path) -> Result<(), RunError> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
        }
        fs::write(dir.join(REPORT_FILE), self.report_json())?;
        Ok(())
    }
}

/// Plans, executes and writes one experiment.
pub fn run(cfg: &ExperimentConfig, output_dir: &Path) -> Result<Report, RunError> {
    let outcome = Plan::new(cfg)?.execute()?;
    outcome.write(output_dir)?;
    Ok(outcome.report)
}
