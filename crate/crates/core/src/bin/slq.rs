use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde_json::{json, Map, Value};

use slq_core::cli::{self, Check, ExperimentConfig, EXIT_CONFIG};
use slq_core::SlqError;

/// Run a stochastic LQ experiment and write its report and datasets.
#[derive(Debug, Parser)]
#[command(name = "slq", version)]
struct Args {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// example1, counterexample, deterministic or custom.
    #[arg(long)]
    scenario: Option<String>,
    /// Horizon.
    #[arg(long = "T")]
    horizon: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides OUTPUT_DIR and the config file.
    #[arg(long)]
    out: Option<String>,
    /// closed_form, regression or deterministic_ode.
    #[arg(long)]
    solver: Option<String>,
    /// Check to run; repeatable. Replaces the config list.
    #[arg(long = "check")]
    checks: Vec<String>,
    /// Tolerance override NAME=VAL; repeatable.
    #[arg(long = "tol")]
    tols: Vec<String>,
}

fn overrides(args: &Args, map: &mut Map<String, Value>) -> Result<(), SlqError> {
    if let Some(s) = &args.scenario {
        map.insert("scenario".into(), json!(s));
    }
    if let Some(t) = args.horizon {
        map.insert("T".into(), json!(t));
    }
    if let Some(n) = args.steps {
        map.insert("steps".into(), json!(n));
    }
    if let Some(n) = args.paths {
        map.insert("paths".into(), json!(n));
    }
    if let Some(n) = args.seed {
        map.insert("seed".into(), json!(n));
    }
    if let Some(s) = &args.solver {
        map.insert("solver".into(), json!(s));
    }
    if !args.checks.is_empty() {
        for c in &args.checks {
            if c != "all" && Check::parse(c).is_none() {
                return Err(SlqError::config("checks", format!("unknown check `{c}`")));
            }
        }
        map.insert("checks".into(), json!(args.checks));
    }
    if !args.tols.is_empty() {
        let tol = map
            .entry("tolerances")
            .or_insert_with(|| json!({}))
            .as_object_mut()
            .ok_or_else(|| SlqError::config("tolerances", "expected an object"))?;
        for item in &args.tols {
            let (name, val) = item
                .split_once('=')
                .ok_or_else(|| SlqError::config("tolerances", format!("expected NAME=VAL, got `{item}`")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| SlqError::config("tolerances", format!("`{val}` is not a number")))?;
            tol.insert(name.to_string(), json!(val));
        }
    }
    if let Ok(dir) = std::env::var("OUTPUT_DIR") {
        map.insert("output_dir".into(), json!(dir));
    }
    if let Some(o) = &args.out {
        map.insert("output_dir".into(), json!(o));
    }
    Ok(())
}

fn load(args: &Args) -> Result<(ExperimentConfig, PathBuf), SlqError> {
    let (mut value, base) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let value: Value = serde_json::from_str(&text).map_err(|e| SlqError::config("config", e.to_string()))?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (value, base)
        }
        None => (json!({}), PathBuf::from(".")),
    };
    let map = value
        .as_object_mut()
        .ok_or_else(|| SlqError::config("config", "expected a JSON object"))?;
    overrides(args, map)?;
    Ok((ExperimentConfig::from_json(&value)?, base))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let (cfg, base) = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("slq: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let report = cli::run(&cfg, &base);
    match &report.failed {
        Some(f) => eprintln!("slq: {} error: {}", f.module, f.message),
        None if !report.failed_checks.is_empty() => {
            eprintln!("slq: failed checks: {}", report.failed_checks.join(", "))
        }
        None => {}
    }
    if let Some(r) = &report.riccati {
        println!("solver {}  P(s) {:?}", r.solver, r.p_at_start);
    }
    println!("status {}  output {}", report.status, cfg.output_dir);
    ExitCode::from(report.exit_code as u8)
}
