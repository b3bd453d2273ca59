//! Experiment runner: JSON config, scenario dispatch and artifact output.
//!
//! A run writes `report.json`, `riccati.csv`, `sweep.csv` and
//! `regularity.csv` into the output directory. CSV floats use 17
//! significant digits so that values round-trip exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Result, SlqError};
use crate::evaluate::{
    self, completion_of_squares_suite, counterexample_divergence_probe, optimality_sweep, value_identity_check, InitialCondition, Perturbation, StationarityCheck, SweepConfig,
    VerificationReport,
};
use crate::feedback::{self, calibrated_threshold, regularity_diagnostics, stationarity_residual, RegularityReport};
use crate::grid::{BrownianBatch, TimeGrid};
use crate::problem::{self, CoefficientModel};
use crate::riccati::{self, BasisConfig, RiccatiSolution};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Scenario {
    Example1,
    Counterexample,
    /// Scalar constant coefficients `(a, b, c, d, q, r, g)`.
    Deterministic {
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        q: f64,
        r: f64,
        g: f64,
    },
    /// Constant matrices read from a JSON file with keys `A`..`G`.
    Custom { path: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    ClosedForm,
    Regression,
    DeterministicOde,
}

impl SolverChoice {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "closed_form" => Some(Self::ClosedForm),
            "regression" => Some(Self::Regression),
            "deterministic_ode" => Some(Self::DeterministicOde),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    ValueIdentity,
    CompletionOfSquares,
    Stationarity,
    OptimalitySweep,
    DivergenceProbe,
}

impl Check {
    pub const ALL: [Check; 5] = [
        Check::ValueIdentity,
        Check::CompletionOfSquares,
        Check::Stationarity,
        Check::OptimalitySweep,
        Check::DivergenceProbe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Check::ValueIdentity => "value_identity",
            Check::CompletionOfSquares => "completion_of_squares",
            Check::Stationarity => "stationarity",
            Check::OptimalitySweep => "optimality_sweep",
            Check::DivergenceProbe => "divergence_probe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Tolerance names accepted in `tolerances` and `--tol`.
pub const TOLERANCE_NAMES: [&str; 6] = ["n_se", "c", "stationarity", "quadratic_slack", "pinv", "bound_threshold"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub start_index: usize,
    pub eta: Vec<f64>,
    pub solver: SolverChoice,
    pub checks: Vec<Check>,
    pub tolerances: BTreeMap<String, f64>,
    pub output_dir: String,
    /// Number of paths written to `riccati.csv`.
    pub export_paths: usize,
    /// Antithetic Brownian batch; defaults to on for the regression solver.
    pub antithetic: bool,
    /// `(N, n_paths)` levels of the divergence probe.
    pub probe_levels: Vec<(usize, usize)>,
}

const KEYS: [&str; 16] = [
    "scenario",
    "coefficients",
    "custom_path",
    "T",
    "steps",
    "paths",
    "seed",
    "start_index",
    "eta",
    "solver",
    "checks",
    "tolerances",
    "output_dir",
    "export_paths",
    "antithetic",
    "probe_levels",
];

fn field<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    map.get(key).filter(|v| !v.is_null())
}

fn as_f64(v: &Value, key: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| SlqError::config(key, "expected a number"))
}

fn as_usize(v: &Value, key: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| SlqError::config(key, "expected a nonnegative integer"))
}

fn as_str<'a>(v: &'a Value, key: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| SlqError::config(key, "expected a string"))
}

fn required<'a>(map: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    field(map, key).ok_or_else(|| SlqError::config(key, "missing required field"))
}

pub const DEFAULT_PROBE_LEVELS: [(usize, usize); 3] = [(256, 1_000), (1024, 10_000), (4096, 100_000)];

impl ExperimentConfig {
    /// Parses and validates a config object, filling defaults.
    pub fn from_json(value: &Value) -> Result<Self> {
        let map = value
            .as_object()
            .ok_or_else(|| SlqError::config("config", "expected a JSON object"))?;
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(SlqError::config(k, "unknown field"));
        }
        let scenario = match as_str(required(map, "scenario")?, "scenario")? {
            "example1" => Scenario::Example1,
            "counterexample" => Scenario::Counterexample,
            "deterministic" => {
                let co = required(map, "coefficients")?
                    .as_object()
                    .ok_or_else(|| SlqError::config("coefficients", "expected an object with keys a..g"))?;
                let get = |k: &str| -> Result<f64> {
                    let name = format!("coefficients.{k}");
                    as_f64(co.get(k).ok_or_else(|| SlqError::config(&name, "missing"))?, &name)
                };
                if let Some(k) = co.keys().find(|k| !["a", "b", "c", "d", "q", "r", "g"].contains(&k.as_str())) {
                    return Err(SlqError::config(format!("coefficients.{k}"), "unknown coefficient"));
                }
                Scenario::Deterministic {
                    a: get("a")?,
                    b: get("b")?,
                    c: get("c")?,
                    d: get("d")?,
                    q: get("q")?,
                    r: get("r")?,
                    g: get("g")?,
                }
            }
            "custom" => Scenario::Custom {
                path: as_str(required(map, "custom_path")?, "custom_path")?.to_string(),
            },
            other => return Err(SlqError::config("scenario", format!("unknown scenario `{other}`"))),
        };
        let horizon = as_f64(required(map, "T")?, "T")?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(SlqError::config("T", "must be positive"));
        }
        let steps = as_usize(required(map, "steps")?, "steps")?;
        if steps < 2 {
            return Err(SlqError::config("steps", "must be at least 2"));
        }
        let paths = as_usize(required(map, "paths")?, "paths")?;
        if paths < 1 {
            return Err(SlqError::config("paths", "must be at least 1"));
        }
        let seed = required(map, "seed")?
            .as_u64()
            .ok_or_else(|| SlqError::config("seed", "expected a nonnegative integer"))?;
        let start_index = field(map, "start_index").map(|v| as_usize(v, "start_index")).transpose()?.unwrap_or(0);
        if start_index >= steps {
            return Err(SlqError::config("start_index", "must be below steps"));
        }
        let eta = match field(map, "eta") {
            None => vec![1.0],
            Some(Value::Array(a)) => a.iter().map(|v| as_f64(v, "eta")).collect::<Result<_>>()?,
            Some(v) => vec![as_f64(v, "eta")?],
        };
        let solver = match field(map, "solver") {
            None => SolverChoice::ClosedForm,
            Some(v) => {
                let s = as_str(v, "solver")?;
                SolverChoice::parse(s).ok_or_else(|| SlqError::config("solver", format!("unknown solver `{s}`")))?
            }
        };
        let checks = match field(map, "checks") {
            None => default_checks(&scenario),
            Some(Value::String(s)) if s == "all" => default_checks(&scenario),
            Some(Value::Array(a)) => {
                let mut out = Vec::new();
                for v in a {
                    let s = as_str(v, "checks")?;
                    if s == "all" {
                        out.extend(default_checks(&scenario));
                        continue;
                    }
                    out.push(Check::parse(s).ok_or_else(|| SlqError::config("checks", format!("unknown check `{s}`")))?);
                }
                out.sort();
                out.dedup();
                out
            }
            Some(_) => return Err(SlqError::config("checks", "expected a list of check names")),
        };
        let mut tolerances = BTreeMap::new();
        if let Some(v) = field(map, "tolerances") {
            let t = v
                .as_object()
                .ok_or_else(|| SlqError::config("tolerances", "expected an object"))?;
            for (k, v) in t {
                if !TOLERANCE_NAMES.contains(&k.as_str()) {
                    return Err(SlqError::config("tolerances", format!("unknown tolerance `{k}`")));
                }
                tolerances.insert(k.clone(), as_f64(v, "tolerances")?);
            }
        }
        let output_dir = field(map, "output_dir")
            .map(|v| as_str(v, "output_dir").map(str::to_string))
            .transpose()?
            .unwrap_or_else(|| "out".to_string());
        let export_paths = field(map, "export_paths").map(|v| as_usize(v, "export_paths")).transpose()?.unwrap_or(8);
        let antithetic = match field(map, "antithetic") {
            None => solver == SolverChoice::Regression,
            Some(v) => v.as_bool().ok_or_else(|| SlqError::config("antithetic", "expected a boolean"))?,
        };
        let probe_levels = match field(map, "probe_levels") {
            None => DEFAULT_PROBE_LEVELS.to_vec(),
            Some(Value::Array(a)) => a
                .iter()
                .map(|row| match row.as_array().map(|r| r.as_slice()) {
                    Some([n, p]) => Ok((as_usize(n, "probe_levels")?, as_usize(p, "probe_levels")?)),
                    _ => Err(SlqError::config("probe_levels", "expected [steps, paths] pairs")),
                })
                .collect::<Result<_>>()?,
            Some(_) => return Err(SlqError::config("probe_levels", "expected a list")),
        };
        let cfg = Self {
            scenario,
            horizon,
            steps,
            paths,
            seed,
            start_index,
            eta,
            solver,
            checks,
            tolerances,
            output_dir,
            export_paths,
            antithetic,
            probe_levels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks that also apply after command-line overrides.
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(SlqError::config("steps", "must be at least 2"));
        }
        if self.paths < 1 {
            return Err(SlqError::config("paths", "must be at least 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SlqError::config("T", "must be positive"));
        }
        if self.start_index >= self.steps {
            return Err(SlqError::config("start_index", "must be below steps"));
        }
        if self.checks.contains(&Check::DivergenceProbe) && self.scenario != Scenario::Counterexample {
            return Err(SlqError::config("checks", "divergence_probe needs the counterexample scenario"));
        }
        if self.checks.contains(&Check::DivergenceProbe) && self.probe_levels.is_empty() {
            return Err(SlqError::config("probe_levels", "must not be empty"));
        }
        if let Some(k) = self.tolerances.keys().find(|k| !TOLERANCE_NAMES.contains(&k.as_str())) {
            return Err(SlqError::config("tolerances", format!("unknown tolerance `{k}`")));
        }
        let closed_form_scenario = matches!(self.scenario, Scenario::Example1 | Scenario::Counterexample);
        if self.solver == SolverChoice::DeterministicOde && closed_form_scenario {
            return Err(SlqError::config("solver", "deterministic_ode needs deterministic coefficients"));
        }
        Ok(())
    }

    pub fn tolerance(&self, name: &str, default: f64) -> f64 {
        self.tolerances.get(name).copied().unwrap_or(default)
    }
}

fn default_checks(scenario: &Scenario) -> Vec<Check> {
    let mut out = vec![
        Check::ValueIdentity,
        Check::CompletionOfSquares,
        Check::Stationarity,
        Check::OptimalitySweep,
    ];
    if *scenario == Scenario::Counterexample {
        out.push(Check::DivergenceProbe);
    }
    out
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| SlqError::config("config", e.to_string()))?;
    ExperimentConfig::from_json(&value)
}

fn matrix_from_json(map: &Map<String, Value>, key: &str) -> Result<DMatrix<f64>> {
    let name = format!("custom.{key}");
    let rows = map
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| SlqError::config(&name, "expected a list of rows"))?;
    let data: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            r.as_array()
                .ok_or_else(|| SlqError::config(&name, "expected a list of rows"))?
                .iter()
                .map(|v| as_f64(v, &name))
                .collect()
        })
        .collect::<Result<_>>()?;
    let ncols = data.first().map_or(0, Vec::len);
    if data.is_empty() || ncols == 0 || data.iter().any(|r| r.len() != ncols) {
        return Err(SlqError::config(&name, "rows must be nonempty and of equal length"));
    }
    Ok(DMatrix::from_fn(data.len(), ncols, |i, j| data[i][j]))
}

/// Reads a constant-coefficient model: a JSON object with matrices
/// `A, B, C, D, Q, R, G` given as lists of rows.
pub fn load_custom_model(path: &Path) -> Result<CoefficientModel> {
    let text = fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| SlqError::config("custom_path", e.to_string()))?;
    let map = value
        .as_object()
        .ok_or_else(|| SlqError::config("custom_path", "expected a JSON object"))?;
    let m = |k| matrix_from_json(map, k);
    CoefficientModel::constant("custom", m("A")?, m("B")?, m("C")?, m("D")?, m("Q")?, m("R")?, m("G")?)
        .map_err(|e| SlqError::config("custom_path", e.to_string()))
}

pub fn build_model(cfg: &ExperimentConfig, base: &Path) -> Result<CoefficientModel> {
    match &cfg.scenario {
        Scenario::Example1 => problem::scenario_example1(cfg.horizon),
        Scenario::Counterexample => problem::scenario_counterexample(cfg.horizon),
        Scenario::Deterministic { a, b, c, d, q, r, g } => {
            problem::scenario_deterministic(*a, *b, *c, *d, *q, *r, *g, cfg.horizon)
        }
        Scenario::Custom { path } => load_custom_model(&base.join(path)),
    }
}

/// `closed_form` on data without a closed form falls back to the
/// deterministic ODE.
fn solve(cfg: &ExperimentConfig, model: &CoefficientModel, grid: &TimeGrid, batch: &BrownianBatch) -> Result<RiccatiSolution> {
    match (cfg.solver, &cfg.scenario) {
        (SolverChoice::ClosedForm, Scenario::Example1) => riccati::closed_form_example1(grid, batch),
        (SolverChoice::ClosedForm, Scenario::Counterexample) => riccati::closed_form_counterexample(grid, batch),
        (SolverChoice::Regression, _) => riccati::solve_bsre_regression(model, grid, batch, BasisConfig::default()),
        _ => riccati::solve_deterministic(model, grid),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RiccatiSummary {
    pub solver: &'static str,
    /// Sample mean of `P` at the start index, row-major.
    pub p_at_start: Vec<Vec<f64>>,
    pub terminal_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub status: &'static str,
    pub exit_code: i32,
    /// Set when the run stopped on an error.
    pub failed: Option<FailureInfo>,
    pub riccati: Option<RiccatiSummary>,
    pub regularity: Option<RegularityReport>,
    pub verification: VerificationReport,
    pub failed_checks: Vec<&'static str>,
    pub timings_s: BTreeMap<String, f64>,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FailureInfo {
    pub module: &'static str,
    pub message: String,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

/// Matrix entries as one CSV field: a plain number for `1×1`, otherwise
/// row-major entries joined by `;`.
fn fmt_m(m: nalgebra::DMatrixView<'_, f64>) -> String {
    if m.len() == 1 {
        return fmt_f(m[0]);
    }
    let mut parts = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            parts.push(fmt_f(m[(i, j)]));
        }
    }
    parts.join(";")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| SlqError::Io(std::io::Error::other(e)))
}

fn csv_err(e: csv::Error) -> SlqError {
    SlqError::Io(std::io::Error::other(e))
}

fn write_riccati_csv(path: &Path, sol: &RiccatiSolution, export_paths: usize) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", "path_id", "P", "Lambda", "K", "L"]).map_err(csv_err)?;
    let n_paths = sol.n_paths().min(export_paths.max(1));
    for p in 0..n_paths {
        for i in 0..sol.grid.n_points() {
            w.write_record([
                fmt_f(sol.grid.time(i)),
                p.to_string(),
                fmt_m(sol.p.get(i, p)),
                fmt_m(sol.lambda.get(i, p)),
                fmt_m(sol.k.get(i, p)),
                fmt_m(sol.l.get(i, p)),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_sweep_csv(path: &Path, rows: &[evaluate::SweepRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["perturbation_id", "epsilon", "J", "J_minus_Jfb", "std_err"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([r.perturbation_id.clone(), fmt_f(r.epsilon), fmt_f(r.j), fmt_f(r.gap), fmt_f(r.std_err)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_regularity_csv(path: &Path, reg: &RegularityReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["path_id", "sqnorm_theta"]).map_err(csv_err)?;
    for (p, v) in reg.pathwise_sqnorm.iter().enumerate() {
        w.write_record([p.to_string(), fmt_f(*v)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    report: RunReport,
}

impl Run<'_> {
    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f();
        self.report.timings_s.insert(name.to_string(), t0.elapsed().as_secs_f64());
        out
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        self.report.artifacts.push(name.to_string());
        self.out.join(name)
    }

    fn execute(&mut self, base: &Path) -> Result<()> {
        let cfg = self.cfg;
        let model = build_model(cfg, base)?;
        if cfg.eta.len() != model.n {
            return Err(SlqError::config("eta", format!("expected {} entries", model.n)));
        }
        let grid = TimeGrid::new(cfg.horizon, cfg.steps)?;
        let batch = BrownianBatch::sample(&grid, cfg.paths, cfg.seed, cfg.antithetic)?;
        let sol = self.time("riccati", || solve(cfg, &model, &grid, &batch))?;
        let s = cfg.start_index;
        let p_s = sol.mean_p(s);
        self.report.riccati = Some(RiccatiSummary {
            solver: sol.solver.as_str(),
            p_at_start: (0..p_s.nrows()).map(|i| p_s.row(i).iter().copied().collect()).collect(),
            terminal_error: sol.terminal_error(&model, Some(&batch)),
        });
        let path = self.artifact("riccati.csv");
        write_riccati_csv(&path, &sol, cfg.export_paths)?;

        // the probe does not depend on the law, so it is reported even when
        // synthesis fails on this batch
        if cfg.checks.contains(&Check::DivergenceProbe) {
            let probe = self.time(Check::DivergenceProbe.name(), || {
                counterexample_divergence_probe(cfg.horizon, &cfg.probe_levels, cfg.seed)
            })?;
            self.report.verification.divergence_probe = Some(probe);
        }

        let pinv_tol = cfg.tolerance("pinv", 1e-10);
        let law = self.time("feedback", || feedback::synthesize(&sol, &model, None, pinv_tol))?;
        let reg0 = regularity_diagnostics(&law, &grid, f64::INFINITY);
        // calibrated on the coarsest run: the first probe level when there is one
        let probe = self.report.verification.divergence_probe.as_ref();
        let threshold = match (cfg.tolerances.get("bound_threshold"), probe) {
            (Some(t), _) => *t,
            (None, Some(pr)) => 10.0 * pr.rows[0].median_theta_sq,
            (None, None) => calibrated_threshold(&reg0),
        };
        let probe_ok = probe.is_none_or(|pr| pr.rows.iter().all(|r| r.max_theta_sq <= threshold));
        let reg = RegularityReport {
            bound_threshold: threshold,
            qualified: reg0.max <= threshold && probe_ok,
            ..reg0
        };
        let path = self.artifact("regularity.csv");
        write_regularity_csv(&path, &reg)?;
        self.report.regularity = Some(reg);

        let n_se = cfg.tolerance("n_se", evaluate::DEFAULT_N_SE);
        let c = cfg.tolerance("c", evaluate::DISCRETIZATION_C);
        let init = InitialCondition::fixed(s, &cfg.eta);
        let v = &mut self.report.verification;
        v.seed = cfg.seed;
        v.tolerances = [("n_se", n_se), ("c", c), ("pinv", pinv_tol)]
            .into_iter()
            .map(|(k, x)| (k.to_string(), x))
            .collect();
        let mut sweep_rows = Vec::new();
        for check in &cfg.checks {
            let t0 = Instant::now();
            let v = &mut self.report.verification;
            match check {
                Check::ValueIdentity => {
                    v.value_identity = Some(value_identity_check(&sol, &law, &model, &init, &batch, n_se, c)?);
                }
                Check::CompletionOfSquares => {
                    v.completion_of_squares = Some(completion_of_squares_suite(
                        &sol,
                        &law,
                        &model,
                        &init,
                        &batch,
                        &Perturbation::library(),
                        n_se,
                        c,
                    )?);
                }
                Check::Stationarity => {
                    let tol = cfg.tolerance("stationarity", riccati::RANGE_TOL);
                    v.tolerances.insert("stationarity".into(), tol);
                    let report = stationarity_residual(&law, &sol, &model, Some(&batch));
                    v.stationarity = Some(StationarityCheck {
                        report,
                        tolerance: tol,
                        pass: report.max_residual <= tol,
                    });
                }
                Check::OptimalitySweep => {
                    let sc = SweepConfig {
                        n_se,
                        c,
                        quadratic_slack: cfg.tolerance("quadratic_slack", 0.1),
                        control_variate: true,
                    };
                    v.tolerances.insert("quadratic_slack".into(), sc.quadratic_slack);
                    let rep = optimality_sweep(&sol, &law, &model, &init, &batch, &Perturbation::library(), sc)?;
                    sweep_rows = rep.rows.clone();
                    v.optimality_sweep = Some(rep);
                }
                Check::DivergenceProbe => continue,
            }
            self.report.timings_s.insert(check.name().to_string(), t0.elapsed().as_secs_f64());
        }
        let path = self.artifact("sweep.csv");
        write_sweep_csv(&path, &sweep_rows)?;
        Ok(())
    }
}

/// Runs an experiment and writes all artifacts. `base` resolves relative
/// paths inside the config. The returned report carries the exit code.
pub fn run(cfg: &ExperimentConfig, base: &Path) -> RunReport {
    let out = PathBuf::from(&cfg.output_dir);
    let mut run = Run {
        cfg,
        out: out.clone(),
        report: RunReport {
            config: cfg.clone(),
            status: "ok",
            exit_code: EXIT_OK,
            failed: None,
            riccati: None,
            regularity: None,
            verification: VerificationReport::default(),
            failed_checks: Vec::new(),
            timings_s: BTreeMap::new(),
            artifacts: Vec::new(),
        },
    };
    let t0 = Instant::now();
    let result = fs::create_dir_all(&out).map_err(SlqError::from).and_then(|_| run.execute(base));
    let mut report = run.report;
    report.timings_s.insert("total".into(), t0.elapsed().as_secs_f64());
    match result {
        Ok(()) => {
            report.failed_checks = report.verification.failures();
            if !report.failed_checks.is_empty() {
                report.status = "check_failed";
                report.exit_code = EXIT_CHECK_FAILED;
            }
        }
        Err(e) => {
            report.status = "failed";
            report.exit_code = if matches!(e, SlqError::Config { .. }) {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            };
            report.failed = Some(FailureInfo {
                module: e.module_tag(),
                message: e.to_string(),
            });
        }
    }
    report.artifacts.push("report.json".into());
    if let Err(e) = write_report(&out.join("report.json"), &report) {
        report.status = "failed";
        report.exit_code = EXIT_RUNTIME;
        report.failed = Some(FailureInfo {
            module: e.module_tag(),
            message: e.to_string(),
        });
    }
    report
}

fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| SlqError::Internal(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
