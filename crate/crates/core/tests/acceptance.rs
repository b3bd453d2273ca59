//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits nonzero when any criterion fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slq_core::evaluate::{
    completion_of_squares_suite, counterexample_divergence_probe, optimality_sweep, value_identity_check,
    InitialCondition, Perturbation, SweepConfig, GROWTH_TARGET,
};
use slq_core::feedback::{stationarity_residual, synthesize};
use slq_core::pinv::{pinv, pinv_limit};
use slq_core::problem::{scenario_counterexample, scenario_example1, ZETA_SCALE};
use slq_core::riccati::{
    closed_form_counterexample, closed_form_example1, discrete_recursion_oracle, solve_bsre_regression,
    solve_deterministic, BasisConfig, RANGE_TOL,
};
use slq_core::{make_grid, sample_brownian, BrownianBatch, CoefficientModel, FeedbackLaw, RiccatiSolution};

const SEED: u64 = 7;
const N_SE: f64 = 3.0;
const C_ALLOW: f64 = 0.5;

/// `P(0) = 1/y(0) − R` with `y(0) = 2 + T/2` and `R = 1/(2(3+T))`.
fn example1_p0(t: f64) -> f64 {
    1.0 / (2.0 + 0.5 * t) - 1.0 / (2.0 * (3.0 + t))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Example1Setup {
    model: CoefficientModel,
    batch: BrownianBatch,
    sol: RiccatiSolution,
    law: FeedbackLaw,
    init: InitialCondition,
}

fn example1_setup() -> Example1Setup {
    let model = scenario_example1(1.0).unwrap();
    let grid = make_grid(1.0, 256).unwrap();
    let batch = sample_brownian(&grid, 50_000, SEED, false).unwrap();
    let sol = closed_form_example1(&grid, &batch).unwrap();
    let law = synthesize(&sol, &model, None, 1e-10).unwrap();
    Example1Setup {
        model,
        batch,
        sol,
        law,
        init: InitialCondition::fixed(0, &[1.0]),
    }
}

fn c1_value_identity(s: &Example1Setup) -> Outcome {
    let check = value_identity_check(&s.sol, &s.law, &s.model, &s.init, &s.batch, N_SE, C_ALLOW).unwrap();
    let target = 0.5 * example1_p0(1.0);
    let pinned = (check.rhs - target).abs() < 1e-12;
    let pass = pinned && (check.lhs - target).abs() <= check.tolerance;
    outcome(
        pass,
        format!(
            "J = {:.6}, ½P(0) = {:.6}, |diff| = {:.2e}, tol = {:.2e} (SE {:.2e})",
            check.lhs,
            target,
            (check.lhs - target).abs(),
            check.tolerance,
            check.std_error
        ),
    )
}

fn c2_regression() -> Outcome {
    let model = scenario_example1(1.0).unwrap();
    let exact = example1_p0(1.0);
    let mut errs = Vec::new();
    let mut last = (0.0, 0.0);
    for (n, paths) in [(64, 5_000), (128, 20_000), (256, 50_000)] {
        let grid = make_grid(1.0, n).unwrap();
        let batch = sample_brownian(&grid, paths, 20260, true).unwrap();
        let t0 = Instant::now();
        let sol = solve_bsre_regression(&model, &grid, &batch, BasisConfig::default()).unwrap();
        let p0 = sol.p.scalar(0, 0);
        errs.push((p0 - exact).abs() / exact);
        last = (p0, t0.elapsed().as_secs_f64());
    }
    let monotone = errs.windows(2).all(|w| w[1] <= 1.2 * w[0]);
    let pass = errs[2] <= 0.02 && monotone && last.1 <= 120.0;
    outcome(
        pass,
        format!(
            "P̂(0) = {:.6} vs {exact}, rel errors {:.2e} / {:.2e} / {:.2e}, monotone {monotone}, final run {:.1}s",
            last.0, errs[0], errs[1], errs[2], last.1
        ),
    )
}

fn c3_completion_of_squares(s: &Example1Setup) -> Outcome {
    let library = Perturbation::library();
    let checks =
        completion_of_squares_suite(&s.sol, &s.law, &s.model, &s.init, &s.batch, &library, N_SE, C_ALLOW).unwrap();
    let feedback_zero = checks[0].1.residual == 0.0;
    let perturbed = &checks[1..];
    let worst = perturbed
        .iter()
        .map(|(_, c)| c.residual / c.tolerance)
        .fold(0.0, f64::max);
    let pass = feedback_zero && perturbed.len() == 10 && perturbed.iter().all(|(_, c)| c.pass);
    outcome(
        pass,
        format!(
            "{} perturbations, worst residual/tol = {worst:.3}, residual at u = Θx̄: {:e}",
            perturbed.len(),
            checks[0].1.residual
        ),
    )
}

fn c4_optimality_sweep(s: &Example1Setup) -> Outcome {
    let rep = optimality_sweep(
        &s.sol,
        &s.law,
        &s.model,
        &s.init,
        &s.batch,
        &Perturbation::library(),
        SweepConfig::default(),
    )
    .unwrap();
    let worst_ratio = rep
        .perturbations
        .iter()
        .map(|p| (p.quadratic_ratio - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(
        rep.one_sided_ok && rep.quadratic_ok,
        format!(
            "min gap = {:.3e} ≥ −{:.3e}, worst |ratio − 1| = {worst_ratio:.3}, first order vanishing: {}",
            rep.min_gap, rep.min_gap_tolerance, rep.first_order_ok
        ),
    )
}

fn c5_counterexample() -> Outcome {
    let rep = counterexample_divergence_probe(1.0, &[(256, 1_000), (4096, 100_000)], SEED).unwrap();
    let int_bound = (std::f64::consts::PI / (2.0 * 2f64.sqrt()) - ZETA_SCALE).abs() < 1e-15;
    let (a, b) = (&rep.rows[0], &rep.rows[1]);
    let pass = int_bound && rep.bounds_ok && rep.growth_ratio >= GROWTH_TARGET;
    outcome(
        pass,
        format!(
            "max∫|Θ|² {:.3} → {:.3} (growth {:.2}×, need {GROWTH_TARGET}×); \
             |∫ζdW| violations {}/{} and {}/{}; Y violations {}/{} and {}/{}; Y ∈ [{:.3}, {:.3}]",
            a.max_theta_sq,
            b.max_theta_sq,
            rep.growth_ratio,
            a.integral_violations,
            a.n_paths,
            b.integral_violations,
            b.n_paths,
            a.y_violations_two_sided,
            a.n_paths,
            b.y_violations_two_sided,
            b.n_paths,
            a.min_y.min(b.min_y),
            a.max_y.max(b.max_y)
        ),
    )
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let f = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&f * f.transpose()) / n as f64
}

fn c6_deterministic_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let steps = 200;
    let grid = make_grid(1.0, steps).unwrap();
    let h = grid.step();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for k in 0..100 {
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=3);
        let mut unif = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let (a, b, c, d) = (unif(n, n), unif(n, m), unif(n, n), unif(n, m));
        let q = random_psd(&mut rng, n);
        let g = random_psd(&mut rng, n);
        let r = random_psd(&mut rng, m) + DMatrix::identity(m, m) * 0.1;
        let model = CoefficientModel::constant(&format!("random{k}"), a, b, c, d, q, r, g).unwrap();
        let ode = solve_deterministic(&model, &grid).unwrap();
        let disc = discrete_recursion_oracle(&model, &grid).unwrap();
        let diff = (ode.p.get(0, 0) - disc.p.get(0, 0)).norm();
        worst = worst.max(diff);
        if diff > 5.0 * h {
            failures += 1;
        }
    }
    let analytic = slq_core::problem::scenario_deterministic(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
    let p0 = solve_deterministic(&analytic, &make_grid(1.0, 256).unwrap()).unwrap().p.scalar(0, 0);
    let analytic_err = (p0 - 0.5).abs();
    outcome(
        failures == 0 && analytic_err <= 1e-6,
        format!(
            "max ‖P_ode(0) − P_disc(0)‖ = {worst:.2e} ≤ 5h = {:.2e} ({failures} over); analytic |P(0) − 0.5| = {analytic_err:.1e}",
            5.0 * h
        ),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let rows = rng.random_range(1..=6);
    let cols = rng.random_range(1..=6);
    let kind = rng.random_range(0..3);
    let mut unif = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    match kind {
        0 => unif(rows, cols),
        // exactly rank deficient
        1 => {
            let rank = rows.min(cols).saturating_sub(1).max(1);
            unif(rows, rank) * unif(rank, cols)
        }
        _ => {
            let mut m = unif(rows, cols);
            if cols > 1 {
                let first = m.column(0).into_owned();
                m.set_column(cols - 1, &first);
            }
            m
        }
    }
}

fn c7_penrose() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    let mut non_monotone = 0;
    let mut worst_limit: f64 = 0.0;
    for _ in 0..1000 {
        let m = random_matrix(&mut rng);
        let x = pinv(&m, None).unwrap().pinv;
        let mx = &m * &x;
        let xm = &x * &m;
        let ids = [
            (&mx * &m - &m).norm(),
            (&xm * &x - &x).norm(),
            (&mx - mx.transpose()).norm(),
            (&xm - xm.transpose()).norm(),
        ];
        worst = ids.iter().fold(worst, |a, b| a.max(*b));
        let errs: Vec<f64> = (2..=8)
            .map(|k| (pinv_limit(&m, 10f64.powi(-k)).unwrap() - &x).norm())
            .collect();
        if errs.windows(2).any(|w| w[1] > w[0]) {
            non_monotone += 1;
        }
        worst_limit = worst_limit.max(errs[errs.len() - 1]);
    }
    outcome(
        worst <= 1e-10 && non_monotone == 0,
        format!(
            "max Penrose residual {worst:.2e} over 1000 matrices; limit non-monotone on {non_monotone}; \
             max error at δ = 1e−8: {worst_limit:.2e}"
        ),
    )
}

fn c8_stationarity(s: &Example1Setup) -> Outcome {
    let e1 = stationarity_residual(&s.law, &s.sol, &s.model, Some(&s.batch)).max_residual;

    let ce_model = scenario_counterexample(1.0).unwrap();
    let grid = make_grid(1.0, 256).unwrap();
    let ce_batch = sample_brownian(&grid, 100, SEED, false).unwrap();
    let ce_sol = closed_form_counterexample(&grid, &ce_batch).unwrap();
    let ce = match synthesize(&ce_sol, &ce_model, None, 1e-10) {
        Ok(law) => Ok(stationarity_residual(&law, &ce_sol, &ce_model, Some(&ce_batch)).max_residual),
        Err(e) => Err(e.to_string()),
    };

    let reg_batch = sample_brownian(&grid, 50_000, 20260, true).unwrap();
    let reg_sol = solve_bsre_regression(&s.model, &grid, &reg_batch, BasisConfig::default()).unwrap();
    let reg_law = synthesize(&reg_sol, &s.model, None, 1e-10).unwrap();
    let reg = stationarity_residual(&reg_law, &reg_sol, &s.model, Some(&reg_batch)).max_residual;

    let ce_ok = ce.as_ref().is_ok_and(|r| *r <= 1e-8);
    let ce_text = match &ce {
        Ok(r) => format!("{r:.1e}"),
        Err(e) => format!("synthesis failed: {e}"),
    };
    outcome(
        e1 <= 1e-8 && ce_ok && reg <= RANGE_TOL,
        format!("example1 {e1:.1e}, counterexample {ce_text}, regression {reg:.1e} (tol {RANGE_TOL:e})"),
    )
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"scenario": "example1", "T": 1.0, "steps": 64, "paths": 2000, "seed": 11}"#,
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_slq"))
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap()
            .status;
        (out, status.code())
    };
    let (a, code_a) = run("a");
    let (b, code_b) = run("b");
    let mut identical = code_a == code_b && matches!(code_a, Some(0) | Some(2));
    let mut sizes = Vec::new();
    for f in ["riccati.csv", "sweep.csv", "regularity.csv"] {
        let (x, y) = (std::fs::read(a.join(f)), std::fs::read(b.join(f)));
        match (x, y) {
            (Ok(x), Ok(y)) => {
                identical &= x == y && !x.is_empty();
                sizes.push(format!("{f} {}B", x.len()));
            }
            _ => identical = false,
        }
    }
    outcome(identical, format!("exit codes {code_a:?}/{code_b:?}; {}", sizes.join(", ")))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, t0: Instant, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("[{tag}] {id} {name}: {} [{:.1}s]", o.detail, t0.elapsed().as_secs_f64());
    };
    let t0 = Instant::now();
    let setup = example1_setup();
    report(1, "example1 value identity", t0, c1_value_identity(&setup));
    let t0 = Instant::now();
    report(2, "regression BSRE vs closed form", t0, c2_regression());
    let t0 = Instant::now();
    report(3, "completion of squares", t0, c3_completion_of_squares(&setup));
    let t0 = Instant::now();
    report(4, "optimality sweep", t0, c4_optimality_sweep(&setup));
    let t0 = Instant::now();
    report(5, "counterexample divergence", t0, c5_counterexample());
    let t0 = Instant::now();
    report(6, "deterministic Riccati oracle", t0, c6_deterministic_oracle());
    let t0 = Instant::now();
    report(7, "Moore-Penrose suite", t0, c7_penrose());
    let t0 = Instant::now();
    report(8, "stationarity", t0, c8_stationarity(&setup));
    let t0 = Instant::now();
    report(9, "CLI determinism", t0, c9_determinism());
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
