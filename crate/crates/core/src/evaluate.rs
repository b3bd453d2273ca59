//! Forward simulation, Monte Carlo costs and the verification checks.
//!
//! Every state recursion is Euler–Maruyama,
//! `x_{i+1} = x_i + h(A x_i + B u_i) + (C x_i + D u_i)ΔW_i`, with left-point
//! running costs. All terms of one check are evaluated on the same batch.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, SlqError};
use crate::feedback::{FeedbackLaw, StationarityReport};
use crate::grid::{mean_and_se, BrownianBatch, BrownianPath, PathArray, TimeGrid};
use crate::problem::{self, CoefficientModel, CoefficientsAt, CounterexamplePath};
use crate::riccati::{DiscreteRecursion, RiccatiSolution};

/// Default coefficient of the `c·√h` discretization allowance. Calibrated on
/// the deterministic instance `(0, 1, 0, 0, 0, 1, 1)` and frozen.
pub const DISCRETIZATION_C: f64 = 0.5;
/// Default number of standard errors in Monte Carlo tolerances.
pub const DEFAULT_N_SE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Eta {
    /// The same initial state on every path.
    Fixed(DVector<f64>),
    /// One `F_s`-measurable initial state per path.
    PerPath(Vec<DVector<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitialCondition {
    pub start_index: usize,
    pub eta: Eta,
}

impl InitialCondition {
    pub fn fixed(start_index: usize, eta: &[f64]) -> Self {
        Self {
            start_index,
            eta: Eta::Fixed(DVector::from_column_slice(eta)),
        }
    }

    pub fn eta(&self, p: usize) -> &DVector<f64> {
        match &self.eta {
            Eta::Fixed(v) => v,
            Eta::PerPath(v) => &v[p],
        }
    }

    fn check(&self, model: &CoefficientModel, batch: &BrownianBatch) -> Result<()> {
        if self.start_index >= batch.grid().steps() {
            return Err(SlqError::invalid(format!(
                "start index {} must be below N = {}",
                self.start_index,
                batch.grid().steps()
            )));
        }
        let ok = match &self.eta {
            Eta::Fixed(v) => v.len() == model.n,
            Eta::PerPath(v) => v.len() == batch.n_paths() && v.iter().all(|e| e.len() == model.n),
        };
        if !ok {
            return Err(SlqError::invalid(format!("initial state must have dimension {}", model.n)));
        }
        Ok(())
    }
}

/// State (`n×1`) and control (`m×1`) paths. Entries before the start index
/// are zero.
#[derive(Clone, Debug)]
pub struct Trajectories {
    pub x: PathArray,
    pub u: PathArray,
}

#[inline]
fn euler_step(at: &CoefficientsAt<'_>, x: &DVector<f64>, u: &DVector<f64>, h: f64, dw: f64) -> DVector<f64> {
    x + (&*at.a * x + &*at.b * u) * h + (&*at.c * x + &*at.d * u) * dw
}

#[inline]
fn euler_step_scalar(at: &CoefficientsAt<'_>, x: f64, u: f64, h: f64, dw: f64) -> f64 {
    x + h * (at.a[0] * x + at.b[0] * u) + (at.c[0] * x + at.d[0] * u) * dw
}

/// One path of the recursion with `u_i = control(i, x_i)`. Returns the
/// flattened `x` and `u` from `start_index` on, or the first index where
/// the state stops being finite.
fn run_path<F>(
    model: &CoefficientModel,
    batch: &BrownianBatch,
    init: &InitialCondition,
    p: usize,
    control: F,
) -> PathResult
where
    F: Fn(usize, &DVector<f64>) -> DVector<f64>,
{
    let grid = batch.grid();
    let (n, m, h) = (model.n, model.m, grid.step());
    let s = init.start_index;
    let len = grid.n_points() - s;
    let mut xs = Vec::with_capacity(len * n);
    let mut us = Vec::with_capacity(len * m);
    let mut x = init.eta(p).clone();
    if n == 1 && m == 1 {
        return run_path_scalar(model, batch, s, x[0], p, |i, xv| {
            x[0] = xv;
            control(i, &x)[0]
        });
    }
    for i in s..grid.n_points() {
        let u = control(i, &x);
        xs.extend(x.iter());
        us.extend(u.iter());
        if i == grid.steps() {
            break;
        }
        let at = model.at(grid, i, batch.prefix(p, i));
        x = euler_step(&at, &x, &u, h, batch.dw(i, p));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(i + 1);
        }
    }
    Ok((xs, us))
}

type PathResult = std::result::Result<(Vec<f64>, Vec<f64>), usize>;

fn run_path_scalar<F>(model: &CoefficientModel, batch: &BrownianBatch, s: usize, x0: f64, p: usize, mut control: F) -> PathResult
where
    F: FnMut(usize, f64) -> f64,
{
    let grid = batch.grid();
    let h = grid.step();
    let len = grid.n_points() - s;
    let mut xs = Vec::with_capacity(len);
    let mut us = Vec::with_capacity(len);
    let mut x = x0;
    for i in s..grid.n_points() {
        let u = control(i, x);
        xs.push(x);
        us.push(u);
        if i == grid.steps() {
            break;
        }
        let at = model.at(grid, i, batch.prefix(p, i));
        x = euler_step_scalar(&at, x, u, h, batch.dw(i, p));
        if !x.is_finite() {
            return Err(i + 1);
        }
    }
    Ok((xs, us))
}

fn assemble(
    model: &CoefficientModel,
    batch: &BrownianBatch,
    s: usize,
    results: Vec<PathResult>,
) -> Result<Trajectories> {
    let grid = batch.grid();
    if let Some((index, path)) = results
        .iter()
        .enumerate()
        .filter_map(|(p, r)| r.as_ref().err().map(|i| (*i, p)))
        .min()
    {
        return Err(SlqError::FiniteEscape { index, path });
    }
    let (n, m) = (model.n, model.m);
    let mut x = PathArray::zeros(grid.n_points(), batch.n_paths(), n, 1);
    let mut u = PathArray::zeros(grid.n_points(), batch.n_paths(), m, 1);
    for (p, r) in results.into_iter().enumerate() {
        let (xs, us) = r.expect("checked above");
        for (k, i) in (s..grid.n_points()).enumerate() {
            x.slice_mut(i)[p * n..(p + 1) * n].copy_from_slice(&xs[k * n..(k + 1) * n]);
            u.slice_mut(i)[p * m..(p + 1) * m].copy_from_slice(&us[k * m..(k + 1) * m]);
        }
    }
    Ok(Trajectories { x, u })
}

/// Closed loop `u = Θx` from `x_s = η`. `u_N = Θ_N x_N` is recorded but
/// never enters a cost.
pub fn simulate_closed_loop(
    model: &CoefficientModel,
    law: &FeedbackLaw,
    init: &InitialCondition,
    batch: &BrownianBatch,
) -> Result<Trajectories> {
    init.check(model, batch)?;
    if law.theta.shape() != (model.m, model.n) || law.theta.n_times() != batch.grid().n_points() {
        return Err(SlqError::invalid("feedback law does not match model and grid"));
    }
    let results: Vec<_> = (0..batch.n_paths())
        .into_par_iter()
        .map(|p| {
            if model.n == 1 && model.m == 1 {
                run_path_scalar(model, batch, init.start_index, init.eta(p)[0], p, |i, x| law.theta.scalar(i, p) * x)
            } else {
                run_path(model, batch, init, p, |i, x| law.theta.get(i, p) * x)
            }
        })
        .collect();
    assemble(model, batch, init.start_index, results)
}

/// Open loop with a given adapted control.
pub fn simulate_open_loop(
    model: &CoefficientModel,
    u: &PathArray,
    init: &InitialCondition,
    batch: &BrownianBatch,
) -> Result<PathArray> {
    init.check(model, batch)?;
    if u.shape() != (model.m, 1) || u.n_times() != batch.grid().n_points() {
        return Err(SlqError::invalid("control paths do not match model and grid"));
    }
    let results: Vec<_> = (0..batch.n_paths())
        .into_par_iter()
        .map(|p| {
            if model.n == 1 && model.m == 1 {
                run_path_scalar(model, batch, init.start_index, init.eta(p)[0], p, |i, _| u.scalar(i, p))
            } else {
                run_path(model, batch, init, p, |i, _| u.get(i, p).column(0).into_owned())
            }
        })
        .collect();
    Ok(assemble(model, batch, init.start_index, results)?.x)
}

/// Per-path halves of the three cost terms.
#[derive(Clone, Debug)]
pub struct PathCosts {
    pub running_state: Vec<f64>,
    pub running_control: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl PathCosts {
    pub fn totals(&self) -> Vec<f64> {
        (0..self.terminal.len())
            .map(|p| self.running_state[p] + self.running_control[p] + self.terminal[p])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CostComponents {
    pub running_state: f64,
    pub running_control: f64,
    pub terminal: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub components: CostComponents,
}

fn check_traj(model: &CoefficientModel, x: &PathArray, u: &PathArray, batch: &BrownianBatch) -> Result<()> {
    let n_pts = batch.grid().n_points();
    let paths_ok = |a: &PathArray| a.n_paths() == batch.n_paths() || a.n_paths() == 1;
    if x.shape() != (model.n, 1) || u.shape() != (model.m, 1) {
        return Err(SlqError::invalid(format!(
            "state/control shapes {:?}/{:?}, expected ({}, 1)/({}, 1)",
            x.shape(),
            u.shape(),
            model.n,
            model.m
        )));
    }
    if x.n_times() != n_pts || u.n_times() != n_pts || !paths_ok(x) || !paths_ok(u) {
        return Err(SlqError::invalid("state/control arrays are not aligned with the batch"));
    }
    Ok(())
}

/// `G` on every path of a batch, for repeated cost evaluations.
pub fn terminal_weights(model: &CoefficientModel, batch: &BrownianBatch) -> Vec<DMatrix<f64>> {
    match model.g.constant() {
        Some(g) => vec![g.clone()],
        None => (0..batch.n_paths())
            .into_par_iter()
            .map(|p| model.terminal(batch.grid(), batch.path(p)).into_owned())
            .collect(),
    }
}

/// `½[Σ_{i≥s} h(⟨Qx,x⟩ + ⟨Ru,u⟩) + ⟨Gx_N,x_N⟩]` on every path.
pub fn pathwise_costs(
    model: &CoefficientModel,
    x: &PathArray,
    u: &PathArray,
    init: &InitialCondition,
    batch: &BrownianBatch,
) -> Result<PathCosts> {
    pathwise_costs_with(model, x, u, init, batch, &terminal_weights(model, batch))
}

fn pathwise_costs_with(
    model: &CoefficientModel,
    x: &PathArray,
    u: &PathArray,
    init: &InitialCondition,
    batch: &BrownianBatch,
    gs: &[DMatrix<f64>],
) -> Result<PathCosts> {
    check_traj(model, x, u, batch)?;
    let grid = batch.grid();
    let h = grid.step();
    let s = init.start_index;
    let scalar = model.n == 1 && model.m == 1;
    let per_path: Vec<(f64, f64, f64)> = (0..batch.n_paths())
        .into_par_iter()
        .map(|p| {
            let (mut rs, mut rc) = (0.0, 0.0);
            for i in s..grid.steps() {
                let at = model.at(grid, i, batch.prefix(p, i));
                if scalar {
                    let (xv, uv) = (x.scalar(i, p), u.scalar(i, p));
                    rs += h * at.q[0] * xv * xv;
                    rc += h * at.r[0] * uv * uv;
                } else {
                    let xv = x.get(i, p);
                    let uv = u.get(i, p);
                    rs += h * (xv.transpose() * &*at.q * xv)[0];
                    rc += h * (uv.transpose() * &*at.r * uv)[0];
                }
            }
            let g = &gs[if gs.len() == 1 { 0 } else { p }];
            let term = if scalar {
                let xn = x.scalar(grid.steps(), p);
                g[0] * xn * xn
            } else {
                let xn = x.get(grid.steps(), p);
                (xn.transpose() * g * xn)[0]
            };
            (0.5 * rs, 0.5 * rc, 0.5 * term)
        })
        .collect();
    Ok(PathCosts {
        running_state: per_path.iter().map(|c| c.0).collect(),
        running_control: per_path.iter().map(|c| c.1).collect(),
        terminal: per_path.iter().map(|c| c.2).collect(),
    })
}

pub fn summarize(costs: &PathCosts) -> CostEstimate {
    let (rs, _) = mean_and_se(&costs.running_state);
    let (rc, _) = mean_and_se(&costs.running_control);
    let (tm, _) = mean_and_se(&costs.terminal);
    let (_, se) = mean_and_se(&costs.totals());
    CostEstimate {
        mean: rs + rc + tm,
        std_error: se,
        n_paths: costs.terminal.len(),
        components: CostComponents {
            running_state: rs,
            running_control: rc,
            terminal: tm,
        },
    }
}

pub fn cost(
    model: &CoefficientModel,
    x: &PathArray,
    u: &PathArray,
    init: &InitialCondition,
    batch: &BrownianBatch,
) -> Result<CostEstimate> {
    Ok(summarize(&pathwise_costs(model, x, u, init, batch)?))
}

/// Zero-mean pathwise martingale terms of `½⟨P x, x⟩` along a trajectory:
///
/// ```text
/// ½ Σ_{i≥s} [⟨Λx,x⟩ + 2⟨P x, Cx + Du⟩] ΔW_i + ⟨P b, b⟩(ΔW_i² − h),  b = Cx + Du
/// ```
///
/// Each coefficient is known at `t_i`, so the sum has mean zero. Subtracting
/// it from the pathwise cost is a control variate.
pub fn martingale_control(
    model: &CoefficientModel,
    sol: &RiccatiSolution,
    x: &PathArray,
    u: &PathArray,
    init: &InitialCondition,
    batch: &BrownianBatch,
) -> Result<Vec<f64>> {
    check_traj(model, x, u, batch)?;
    let grid = batch.grid();
    let h = grid.step();
    let s = init.start_index;
    let scalar = model.n == 1 && model.m == 1;
    Ok((0..batch.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for i in s..grid.steps() {
                let at = model.at(grid, i, batch.prefix(p, i));
                let dw = batch.dw(i, p);
                if scalar {
                    let (xv, pv) = (x.scalar(i, p), sol.p.scalar(i, p));
                    let b = at.c[0] * xv + at.d[0] * u.scalar(i, p);
                    let first = sol.lambda.scalar(i, p) * xv * xv + 2.0 * xv * pv * b;
                    acc += first * dw + pv * b * b * (dw * dw - h);
                    continue;
                }
                let xv = x.get(i, p);
                let pm = sol.p.get(i, p);
                let b = &*at.c * xv + &*at.d * u.get(i, p);
                let first = (xv.transpose() * sol.lambda.get(i, p) * xv)[0] + 2.0 * (xv.transpose() * pm * &b)[0];
                let second = (b.transpose() * pm * &b)[0];
                acc += first * dw + second * (dw * dw - h);
            }
            0.5 * acc
        })
        .collect())
}

/// Residual of one identity with its Monte Carlo tolerance.
#[derive(Clone, Debug, Serialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub std_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn tolerance(n_se: f64, se: f64, c: f64, grid: &TimeGrid) -> f64 {
    n_se * se + c * grid.step().sqrt()
}

/// `|J(Θx̄) − ½ mean⟨P_s η, η⟩|` against `n_se·SE + c·√h`. The standard
/// error is that of the per-path difference.
pub fn value_identity_check(
    sol: &RiccatiSolution,
    law: &FeedbackLaw,
    model: &CoefficientModel,
    init: &InitialCondition,
    batch: &BrownianBatch,
    n_se: f64,
    c: f64,
) -> Result<IdentityCheck> {
    let traj = simulate_closed_loop(model, law, init, batch)?;
    let costs = pathwise_costs(model, &traj.x, &traj.u, init, batch)?.totals();
    let s = init.start_index;
    let values: Vec<f64> = (0..batch.n_paths())
        .map(|p| {
            let eta = init.eta(p);
            0.5 * (eta.transpose() * sol.p.get(s, p) * eta)[0]
        })
        .collect();
    let diff: Vec<f64> = costs.iter().zip(&values).map(|(a, b)| a - b).collect();
    let (lhs, _) = mean_and_se(&costs);
    let (rhs, _) = mean_and_se(&values);
    let (_, se) = mean_and_se(&diff);
    let residual = (lhs - rhs).abs();
    let tol = tolerance(n_se, se, c, batch.grid());
    Ok(IdentityCheck {
        lhs,
        rhs,
        residual,
        std_error: se,
        tolerance: tol,
        pass: residual <= tol,
    })
}

/// `J(u) − J(Θx̄) − ½ mean Σ h⟨K(u − Θx), u − Θx⟩`, `x` the state under `u`.
#[allow(clippy::too_many_arguments)]
pub fn completion_of_squares_check(
    sol: &RiccatiSolution,
    law: &FeedbackLaw,
    model: &CoefficientModel,
    u: &PathArray,
    init: &InitialCondition,
    batch: &BrownianBatch,
    n_se: f64,
    c: f64,
) -> Result<IdentityCheck> {
    let closed = simulate_closed_loop(model, law, init, batch)?;
    let gs = terminal_weights(model, batch);
    completion_of_squares_with(sol, law, model, &closed, &gs, u, init, batch, n_se, c)
}

/// Completion of squares for `u = Θx̄` (id `feedback`) and for
/// `u = Θx̄ + v` over each perturbation, all on one batch.
#[allow(clippy::too_many_arguments)]
pub fn completion_of_squares_suite(
    sol: &RiccatiSolution,
    law: &FeedbackLaw,
    model: &CoefficientModel,
    init: &InitialCondition,
    batch: &BrownianBatch,
    perturbations: &[Perturbation],
    n_se: f64,
    c: f64,
) -> Result<Vec<(String, IdentityCheck)>> {
    let closed = simulate_closed_loop(model, law, init, batch)?;
    let gs = terminal_weights(model, batch);
    let mut out = vec![(
        "feedback".to_string(),
        completion_of_squares_with(sol, law, model, &closed, &gs, &closed.u, init, batch, n_se, c)?,
    )];
    for v in perturbations {
        let u = perturbed_control(&closed.u, v, 1.0, init.start_index, batch);
        out.push((v.id(), completion_of_squares_with(sol, law, model, &closed, &gs, &u, init, batch, n_se, c)?));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn completion_of_squares_with(
    sol: &RiccatiSolution,
    law: &FeedbackLaw,
    model: &CoefficientModel,
    closed: &Trajectories,
    gs: &[DMatrix<f64>],
    u: &PathArray,
    init: &InitialCondition,
    batch: &BrownianBatch,
    n_se: f64,
    c: f64,
) -> Result<IdentityCheck> {
    let grid = batch.grid();
    let x = simulate_open_loop(model, u, init, batch)?;
    let ju = pathwise_costs_with(model, &x, u, init, batch, gs)?.totals();
    let jfb = pathwise_costs_with(model, &closed.x, &closed.u, init, batch, gs)?.totals();
    let h = grid.step();
    let s = init.start_index;
    let scalar = model.n == 1 && model.m == 1;
    let penalty: Vec<f64> = (0..batch.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for i in s..grid.steps() {
                if scalar {
                    let delta = u.scalar(i, p) - law.theta.scalar(i, p) * x.scalar(i, p);
                    acc += h * sol.k.scalar(i, p) * delta * delta;
                    continue;
                }
                let delta = u.get(i, p) - law.theta.get(i, p) * x.get(i, p);
                acc += h * (delta.transpose() * sol.k.get(i, p) * &delta)[0];
            }
            0.5 * acc
        })
        .collect();
    let resid: Vec<f64> = (0..batch.n_paths()).map(|p| ju[p] - jfb[p] - penalty[p]).collect();
    let (lhs, _) = mean_and_se(&ju);
    let (jf, _) = mean_and_se(&jfb);
    let (pen, _) = mean_and_se(&penalty);
    let (mean_resid, se) = mean_and_se(&resid);
    let tol = tolerance(n_se, se, c, grid);
    Ok(IdentityCheck {
        lhs,
        rhs: jf + pen,
        residual: mean_resid.abs(),
        std_error: se,
        tolerance: tol,
        pass: mean_resid.abs() <= tol,
    })
}

/// Largest pathwise defect of the discrete identity
/// `2J_h(u) = ⟨P_s η,η⟩ + Σ h⟨H(u − Θx), u − Θx⟩ + Σ M_i` for the Euler
/// scheme, where `(P, H, Θ)` come from the discrete recursion and
/// `M_i = 2⟨P' a, b⟩ΔW + ⟨P' b, b⟩(ΔW² − h)` with `a = Φx + hBu`,
/// `b = Cx + Du`. Exact up to rounding for any control.
pub fn discrete_completion_of_squares(
    rec: &DiscreteRecursion,
    model: &CoefficientModel,
    u: &PathArray,
    init: &InitialCondition,
    batch: &BrownianBatch,
) -> Result<f64> {
    let grid = batch.grid();
    let x = simulate_open_loop(model, u, init, batch)?;
    let costs = pathwise_costs(model, &x, u, init, batch)?.totals();
    let h = grid.step();
    let s = init.start_index;
    let p_arr = &rec.solution.p;
    let worst = (0..batch.n_paths())
        .map(|p| {
            let eta = init.eta(p);
            let mut rhs = (eta.transpose() * p_arr.get(s, 0) * eta)[0];
            for i in s..grid.steps() {
                let at = model.at(grid, i, batch.prefix(p, i));
                let xv = x.get(i, p).into_owned();
                let uv = u.get(i, p).into_owned();
                let delta = &uv - &rec.gains[i] * &xv;
                rhs += h * (delta.transpose() * &rec.hessians[i] * &delta)[0];
                let phi = DMatrix::identity(model.n, model.n) + &*at.a * h;
                let a = &phi * &xv + &*at.b * &uv * h;
                let b = &*at.c * &xv + &*at.d * &uv;
                let pn = p_arr.get(i + 1, 0);
                let dw = batch.dw(i, p);
                rhs += 2.0 * (a.transpose() * pn * &b)[0] * dw + (b.transpose() * pn * &b)[0] * (dw * dw - h);
            }
            let lhs = 2.0 * costs[p];
            (lhs - rhs).abs() / (1.0 + lhs.abs())
        })
        .fold(0.0, f64::max);
    Ok(worst)
}

// ---------------------------------------------------------------------------
// optimality sweep

/// Bounded adapted perturbations `v_i`, applied to every control component.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    Constant { level: f64 },
    Sine { amplitude: f64, frequency: f64, phase: f64 },
    Step { time: f64, level: f64 },
    /// `level·sign(W_t)`, with `sign(0) = 1`.
    SignW { level: f64 },
}

impl Perturbation {
    pub fn id(&self) -> String {
        match self {
            Perturbation::Constant { level } => format!("constant({level})"),
            Perturbation::Sine { amplitude, frequency, phase } => {
                format!("sine({amplitude},{frequency},{phase})")
            }
            Perturbation::Step { time, level } => format!("step({time},{level})"),
            Perturbation::SignW { level } => format!("sign_w({level})"),
        }
    }

    pub fn value(&self, grid: &TimeGrid, i: usize, w: f64) -> f64 {
        let t = grid.time(i);
        match *self {
            Perturbation::Constant { level } => level,
            Perturbation::Sine { amplitude, frequency, phase } => {
                amplitude * (2.0 * std::f64::consts::PI * frequency * t + phase).sin()
            }
            Perturbation::Step { time, level } => {
                if t >= time {
                    level
                } else {
                    0.0
                }
            }
            Perturbation::SignW { level } => {
                if w >= 0.0 {
                    level
                } else {
                    -level
                }
            }
        }
    }

    /// The default library of ten perturbations over the four families.
    pub fn library() -> Vec<Perturbation> {
        vec![
            Perturbation::Constant { level: 1.0 },
            Perturbation::Constant { level: -0.5 },
            Perturbation::Sine { amplitude: 1.0, frequency: 1.0, phase: 0.0 },
            Perturbation::Sine { amplitude: 0.5, frequency: 2.0, phase: 0.0 },
            Perturbation::Sine { amplitude: 1.0, frequency: 0.5, phase: std::f64::consts::FRAC_PI_2 },
            Perturbation::Step { time: 0.25, level: 1.0 },
            Perturbation::Step { time: 0.5, level: 1.0 },
            Perturbation::Step { time: 0.75, level: -1.0 },
            Perturbation::SignW { level: 1.0 },
            Perturbation::SignW { level: -0.5 },
        ]
    }
}

/// `base + ε·v` on every path from `start_index` on.
pub fn perturbed_control(
    base: &PathArray,
    v: &Perturbation,
    epsilon: f64,
    start_index: usize,
    batch: &BrownianBatch,
) -> PathArray {
    let grid = batch.grid();
    let mut out = base.clone();
    let (m, _) = base.shape();
    for i in start_index..grid.n_points() {
        let slice = out.slice_mut(i);
        for p in 0..batch.n_paths() {
            let dv = epsilon * v.value(grid, i, batch.w(i, p));
            for j in 0..m {
                slice[p * m + j] += dv;
            }
        }
    }
    out
}

pub const SWEEP_EPSILONS: [f64; 3] = [1.0, 0.1, 0.01];

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub perturbation_id: String,
    pub epsilon: f64,
    /// `J(Θx̄ + εv)`.
    pub j: f64,
    /// `J(Θx̄ + εv) − J(Θx̄)` with common random numbers.
    pub gap: f64,
    pub std_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PerturbationSummary {
    pub perturbation_id: String,
    /// `[J(+εv) − J(−εv)]/(2ε)` at each sweep ε.
    pub first_order: Vec<(f64, f64, f64)>,
    /// `(gap(0.1)/0.1²) / (gap(0.01)/0.01²)`.
    pub quadratic_ratio: f64,
    pub quadratic_ok: bool,
    pub first_order_ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub j_feedback: f64,
    pub rows: Vec<SweepRow>,
    pub perturbations: Vec<PerturbationSummary>,
    pub min_gap: f64,
    pub min_gap_tolerance: f64,
    pub one_sided_ok: bool,
    pub quadratic_ok: bool,
    pub first_order_ok: bool,
    pub control_variate: bool,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SweepConfig {
    pub n_se: f64,
    pub c: f64,
    /// Relative slack on the quadratic ratio.
    pub quadratic_slack: f64,
    /// Subtract [`martingale_control`] from every pathwise cost.
    pub control_variate: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_se: DEFAULT_N_SE,
            c: DISCRETIZATION_C,
            quadratic_slack: 0.1,
            control_variate: true,
        }
    }
}

/// Evaluates `J(Θx̄ + εv)` over the perturbation library and the sweep ε,
/// checking one-sided optimality, the vanishing first variation and the
/// `ε²` scaling of the gap.
pub fn optimality_sweep(
    sol: &RiccatiSolution,
    law: &FeedbackLaw,
    model: &CoefficientModel,
    init: &InitialCondition,
    batch: &BrownianBatch,
    perturbations: &[Perturbation],
    cfg: SweepConfig,
) -> Result<SweepReport> {
    let grid = batch.grid();
    let s = init.start_index;
    let closed = simulate_closed_loop(model, law, init, batch)?;
    let gs = terminal_weights(model, batch);
    let adjusted = |x: &PathArray, u: &PathArray| -> Result<Vec<f64>> {
        let mut j = pathwise_costs_with(model, x, u, init, batch, &gs)?.totals();
        if cfg.control_variate {
            let mc = martingale_control(model, sol, x, u, init, batch)?;
            for (a, b) in j.iter_mut().zip(mc) {
                *a -= b;
            }
        }
        Ok(j)
    };
    let j_fb = adjusted(&closed.x, &closed.u)?;
    let (j_feedback, _) = mean_and_se(&j_fb);

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut min_gap = f64::INFINITY;
    let mut min_gap_tol = 0.0;
    for v in perturbations {
        let mut gaps = BTreeMap::new();
        let mut first_order = Vec::new();
        let mut fo_ok = true;
        for &eps in &SWEEP_EPSILONS {
            let mut signed = Vec::new();
            for sign in [1.0, -1.0] {
                let u = perturbed_control(&closed.u, v, sign * eps, s, batch);
                let x = simulate_open_loop(model, &u, init, batch)?;
                let j = adjusted(&x, &u)?;
                let diff: Vec<f64> = j.iter().zip(&j_fb).map(|(a, b)| a - b).collect();
                let (jm, _) = mean_and_se(&j);
                let (gap, se) = mean_and_se(&diff);
                rows.push(SweepRow {
                    perturbation_id: v.id(),
                    epsilon: sign * eps,
                    j: jm,
                    gap,
                    std_err: se,
                });
                let tol = tolerance(cfg.n_se, se, cfg.c, grid);
                if gap + tol < min_gap + min_gap_tol || min_gap.is_infinite() {
                    min_gap = gap;
                    min_gap_tol = tol;
                }
                signed.push((gap, j));
            }
            gaps.insert((eps * 1e6) as i64, signed[0].0);
            // (J(+ε) − J(−ε)) / 2ε with its own per-path standard error
            let d: Vec<f64> = signed[0].1.iter().zip(&signed[1].1).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            let (fd, se) = mean_and_se(&d);
            fo_ok &= fd.abs() <= tolerance(cfg.n_se, se, cfg.c, grid);
            first_order.push((eps, fd, se));
        }
        let g1 = gaps[&((0.1f64 * 1e6) as i64)] / 0.01;
        let g2 = gaps[&((0.01f64 * 1e6) as i64)] / 1e-4;
        let ratio = g1 / g2;
        let quad_ok = (ratio - 1.0).abs() <= cfg.quadratic_slack;
        summaries.push(PerturbationSummary {
            perturbation_id: v.id(),
            first_order,
            quadratic_ratio: ratio,
            quadratic_ok: quad_ok,
            first_order_ok: fo_ok,
        });
    }
    let one_sided_ok = perturbations.is_empty() || min_gap >= -min_gap_tol;
    let quadratic_ok = summaries.iter().all(|s| s.quadratic_ok);
    let first_order_ok = summaries.iter().all(|s| s.first_order_ok);
    Ok(SweepReport {
        j_feedback,
        rows,
        perturbations: summaries,
        min_gap: if min_gap.is_finite() { min_gap } else { 0.0 },
        min_gap_tolerance: min_gap_tol,
        one_sided_ok,
        quadratic_ok,
        first_order_ok,
        control_variate: cfg.control_variate,
        pass: one_sided_ok && quadratic_ok,
    })
}

// ---------------------------------------------------------------------------
// counterexample probe

#[derive(Clone, Debug, Serialize)]
pub struct ProbeRow {
    pub steps: usize,
    pub n_paths: usize,
    pub delta_grid: f64,
    /// `max_p Σ ζ_i² h`.
    pub max_zeta_sq: f64,
    /// `mean_p exp(Σ ζ_i² h)`.
    pub mean_exp_zeta_sq: f64,
    pub exp_saturated: bool,
    /// `max_p Σ |Y_i⁻¹ζ_i|² h`.
    pub max_theta_sq: f64,
    pub median_theta_sq: f64,
    pub max_abs_integral: f64,
    pub min_y: f64,
    pub max_y: f64,
    /// Paths violating `|∫ζdW| ≤ π/(2√2) + δ`.
    pub integral_violations: usize,
    /// Paths violating `1 ≤ Y ≤ 1 + π/√2 + δ`.
    pub y_violations: usize,
    /// Paths violating `1 − δ ≤ Y ≤ 1 + π/√2 + δ`.
    pub y_violations_two_sided: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub horizon: f64,
    pub seed: u64,
    pub rows: Vec<ProbeRow>,
    /// No violations of the integral bound or the two-sided `Y` bound.
    pub bounds_ok: bool,
    /// Ratio of the last row's `max_theta_sq` to the first row's.
    pub growth_ratio: f64,
    pub monotone: bool,
    /// `bounds_ok` and `growth_ratio ≥ GROWTH_TARGET`.
    pub pass: bool,
}

/// Required growth of `max ∫|Θ|²` between the first and last probe level.
pub const GROWTH_TARGET: f64 = 10.0;

struct PathStats {
    zeta_sq: f64,
    theta_sq: f64,
    integral: f64,
    y_min: f64,
    y_max: f64,
}

fn probe_path(grid: &TimeGrid, seed: u64, p: usize) -> PathStats {
    let path = BrownianPath::generate(grid, seed, p, false);
    let cp = CounterexamplePath::compute(grid, &path.w);
    let h = grid.step();
    let mut zeta_sq = 0.0;
    let mut theta_sq = 0.0;
    for i in 0..grid.steps() {
        let z = cp.zeta[i];
        zeta_sq += z * z * h;
        let th = z / cp.y[i];
        theta_sq += th * th * h;
    }
    let (y_min, y_max) = cp.y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(*y), b.max(*y)));
    PathStats {
        zeta_sq,
        theta_sq,
        integral: cp.stochastic_integral(),
        y_min,
        y_max,
    }
}

/// Streams the counterexample over each `(N, n_paths)` level: pathwise
/// `∫ζ²`, `E exp(∫ζ²)` (saturating at `f64::MAX`), `∫|Θ|²` with
/// `Θ = Y⁻¹ζ`, and the pathwise bounds on `∫ζdW` and `Y`.
pub fn counterexample_divergence_probe(horizon: f64, levels: &[(usize, usize)], seed: u64) -> Result<ProbeReport> {
    if levels.is_empty() {
        return Err(SlqError::invalid("probe needs at least one level"));
    }
    for w in levels.windows(2) {
        if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
            return Err(SlqError::invalid("probe levels must be nondecreasing"));
        }
    }
    let bound_int = problem::ZETA_SCALE;
    let mut rows = Vec::new();
    for &(steps, n_paths) in levels {
        let grid = TimeGrid::new(horizon, steps)?;
        let delta = problem::delta_grid(&grid);
        let stats: Vec<PathStats> = (0..n_paths).into_par_iter().map(|p| probe_path(&grid, seed, p)).collect();
        let exps: Vec<f64> = stats.iter().map(|s| s.zeta_sq.exp().min(f64::MAX)).collect();
        let saturated = exps.contains(&f64::MAX);
        let exp_mean = crate::grid::pairwise_sum(&exps.iter().map(|e| e / n_paths as f64).collect::<Vec<_>>());
        let y_hi = 1.0 + 2.0 * bound_int + delta;
        rows.push(ProbeRow {
            steps,
            n_paths,
            delta_grid: delta,
            max_zeta_sq: stats.iter().map(|s| s.zeta_sq).fold(0.0, f64::max),
            mean_exp_zeta_sq: exp_mean.min(f64::MAX),
            exp_saturated: saturated,
            max_theta_sq: stats.iter().map(|s| s.theta_sq).fold(0.0, f64::max),
            median_theta_sq: {
                let mut th: Vec<f64> = stats.iter().map(|s| s.theta_sq).collect();
                th.sort_by(f64::total_cmp);
                crate::feedback::quantile(&th, 0.5)
            },
            max_abs_integral: stats.iter().map(|s| s.integral.abs()).fold(0.0, f64::max),
            min_y: stats.iter().map(|s| s.y_min).fold(f64::INFINITY, f64::min),
            max_y: stats.iter().map(|s| s.y_max).fold(f64::NEG_INFINITY, f64::max),
            integral_violations: stats.iter().filter(|s| s.integral.abs() > bound_int + delta).count(),
            y_violations: stats.iter().filter(|s| s.y_min < 1.0 || s.y_max > y_hi).count(),
            y_violations_two_sided: stats.iter().filter(|s| s.y_min < 1.0 - delta || s.y_max > y_hi).count(),
        });
    }
    let bounds_ok = rows.iter().all(|r| r.integral_violations == 0 && r.y_violations_two_sided == 0);
    let growth_ratio = rows.last().unwrap().max_theta_sq / rows[0].max_theta_sq;
    let monotone = rows.windows(2).all(|w| w[1].max_theta_sq >= w[0].max_theta_sq);
    Ok(ProbeReport {
        horizon,
        seed,
        rows,
        bounds_ok,
        growth_ratio,
        monotone,
        pass: bounds_ok && growth_ratio >= GROWTH_TARGET,
    })
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct StationarityCheck {
    #[serde(flatten)]
    pub report: StationarityReport,
    pub tolerance: f64,
    pub pass: bool,
}

/// Results of all enabled checks.
#[derive(Clone, Debug, Default, Serialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub value_identity: Option<IdentityCheck>,
    pub completion_of_squares: Option<Vec<(String, IdentityCheck)>>,
    pub stationarity: Option<StationarityCheck>,
    pub optimality_sweep: Option<SweepReport>,
    pub divergence_probe: Option<ProbeReport>,
    pub tolerances: BTreeMap<String, f64>,
}

impl VerificationReport {
    /// Names of the enabled checks that failed.
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.value_identity.as_ref().is_some_and(|c| !c.pass) {
            out.push("value_identity");
        }
        if self
            .completion_of_squares
            .as_ref()
            .is_some_and(|v| v.iter().any(|(_, c)| !c.pass))
        {
            out.push("completion_of_squares");
        }
        if self.stationarity.as_ref().is_some_and(|c| !c.pass) {
            out.push("stationarity");
        }
        if self.optimality_sweep.as_ref().is_some_and(|c| !c.pass) {
            out.push("optimality_sweep");
        }
        if self.divergence_probe.as_ref().is_some_and(|c| !c.pass) {
            out.push("divergence_probe");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::synthesize;
    use crate::grid::{make_grid, sample_brownian};
    use crate::problem::{scenario_deterministic, scenario_example1};
    use crate::riccati::{closed_form_example1, discrete_recursion, solve_deterministic};

    fn zero_law(grid: &TimeGrid, n: usize, m: usize) -> FeedbackLaw {
        FeedbackLaw {
            theta: PathArray::zeros(grid.n_points(), 1, m, n),
            theta_free: None,
            source: crate::riccati::SolverTag::DeterministicOde,
            stats: Default::default(),
        }
    }

    #[test]
    fn zero_problem_keeps_state() {
        let model = scenario_deterministic(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        let grid = make_grid(1.0, 16).unwrap();
        let batch = sample_brownian(&grid, 10, 1, false).unwrap();
        let init = InitialCondition::fixed(0, &[1.0]);
        let traj = simulate_closed_loop(&model, &zero_law(&grid, 1, 1), &init, &batch).unwrap();
        assert!(traj.x.values().iter().all(|v| *v == 1.0));
        assert!(traj.u.values().iter().all(|v| *v == 0.0));
        let est = cost(&model, &traj.x, &traj.u, &init, &batch).unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn zero_control_on_example1_keeps_state() {
        let model = scenario_example1(1.0).unwrap();
        let grid = make_grid(1.0, 32).unwrap();
        let batch = sample_brownian(&grid, 20, 1, false).unwrap();
        let init = InitialCondition::fixed(0, &[1.0]);
        let u = PathArray::zeros(33, 20, 1, 1);
        let x = simulate_open_loop(&model, &u, &init, &batch).unwrap();
        assert!(x.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn replay_is_bit_identical() {
        let model = scenario_example1(1.0).unwrap();
        let grid = make_grid(1.0, 64).unwrap();
        let batch = sample_brownian(&grid, 200, 3, false).unwrap();
        let sol = closed_form_example1(&grid, &batch).unwrap();
        let law = synthesize(&sol, &model, None, 1e-10).unwrap();
        let init = InitialCondition::fixed(0, &[1.0]);
        let traj = simulate_closed_loop(&model, &law, &init, &batch).unwrap();
        let x = simulate_open_loop(&model, &traj.u, &init, &batch).unwrap();
        assert_eq!(x, traj.x);
        let check = completion_of_squares_check(&sol, &law, &model, &traj.u, &init, &batch, 3.0, 0.5).unwrap();
        assert_eq!(check.residual, 0.0);
    }

    #[test]
    fn terminal_only_cost_is_exact() {
        let model = scenario_deterministic(0.0, 0.0, 0.0, 1.0, 0.0, 0.7, 0.6, 1.0).unwrap();
        let grid = make_grid(1.0, 10).unwrap();
        let batch = sample_brownian(&grid, 5, 1, false).unwrap();
        let init = InitialCondition::fixed(0, &[2.0]);
        let u = PathArray::zeros(11, 5, 1, 1);
        let x = simulate_open_loop(&model, &u, &init, &batch).unwrap();
        let est = cost(&model, &x, &u, &init, &batch).unwrap();
        assert_eq!(est.mean, 0.5 * 0.6 * 4.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn cost_components_add_up() {
        let model = scenario_deterministic(0.2, 1.0, 0.3, 0.4, 1.0, 1.0, 1.0, 1.0).unwrap();
        let grid = make_grid(1.0, 32).unwrap();
        let batch = sample_brownian(&grid, 100, 1, false).unwrap();
        let init = InitialCondition::fixed(0, &[1.0]);
        let mut u = PathArray::zeros(33, 100, 1, 1);
        for i in 0..33 {
            for p in 0..100 {
                u.set_scalar(i, p, batch.w(i, p).sin());
            }
        }
        let x = simulate_open_loop(&model, &u, &init, &batch).unwrap();
        let est = cost(&model, &x, &u, &init, &batch).unwrap();
        let c = est.components;
        assert!((est.mean - (c.running_state + c.running_control + c.terminal)).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = scenario_deterministic(0.0, 0.0, 0.0, 1.0, 0.0, 0.7, 0.6, 1.0).unwrap();
        let grid = make_grid(1.0, 10).unwrap();
        let batch = sample_brownian(&grid, 5, 1, false).unwrap();
        let init = InitialCondition::fixed(0, &[2.0]);
        let bad = PathArray::zeros(11, 5, 2, 1);
        assert!(matches!(
            cost(&model, &bad, &bad, &init, &batch),
            Err(SlqError::InvalidArgument(_))
        ));
        assert!(matches!(
            simulate_open_loop(&model, &PathArray::zeros(11, 5, 1, 1), &InitialCondition::fixed(10, &[1.0]), &batch),
            Err(SlqError::InvalidArgument(_))
        ));
    }

    #[test]
    fn finite_escape_reports_first_point() {
        let model = scenario_deterministic(1e6, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let grid = make_grid(1.0, 200).unwrap();
        let batch = sample_brownian(&grid, 3, 1, false).unwrap();
        let u = PathArray::zeros(201, 3, 1, 1);
        match simulate_open_loop(&model, &u, &InitialCondition::fixed(0, &[1.0]), &batch) {
            Err(SlqError::FiniteEscape { path, index }) => {
                assert_eq!(path, 0);
                assert!(index > 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_offset_penalty() {
        // P ≡ 0.5, K = 1.5, Θ = 0: offset 1 costs ½·1.5·T on top
        let model = scenario_deterministic(0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.5, 1.0).unwrap();
        let grid = make_grid(1.0, 64).unwrap();
        let sol = solve_deterministic(&model, &grid).unwrap();
        let law = synthesize(&sol, &model, None, 1e-10).unwrap();
        let batch = sample_brownian(&grid, 20_000, 4, false).unwrap();
        let init = InitialCondition::fixed(0, &[1.0]);
        let closed = simulate_closed_loop(&model, &law, &init, &batch).unwrap();
        let u = perturbed_control(&closed.u, &Perturbation::Constant { level: 1.0 }, 1.0, 0, &batch);
        let check = completion_of_squares_check(&sol, &law, &model, &u, &init, &batch, 3.0, 0.5).unwrap();
        assert!(check.pass, "{check:?}");
    }

    #[test]
    fn discrete_identity_is_exact() {
        let model = scenario_deterministic(0.3, 1.0, 0.4, 0.2, 1.0, 1.0, 1.0, 1.0).unwrap();
        let grid = make_grid(1.0, 40).unwrap();
        let rec = discrete_recursion(&model, &grid).unwrap();
        let batch = sample_brownian(&grid, 50, 8, false).unwrap();
        let init = InitialCondition::fixed(0, &[1.3]);
        let mut u = PathArray::zeros(41, 50, 1, 1);
        for i in 0..41 {
            for p in 0..50 {
                u.set_scalar(i, p, (batch.w(i, p) * 3.0).cos() - 0.2);
            }
        }
        let worst = discrete_completion_of_squares(&rec, &model, &u, &init, &batch).unwrap();
        assert!(worst < 1e-13, "{worst}");
    }

    #[test]
    fn deterministic_value_identity() {
        let model = scenario_deterministic(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let grid = make_grid(1.0, 128).unwrap();
        let sol = solve_deterministic(&model, &grid).unwrap();
        let law = synthesize(&sol, &model, None, 1e-10).unwrap();
        let batch = sample_brownian(&grid, 10, 1, false).unwrap();
        let init = InitialCondition::fixed(0, &[1.0]);
        let check = value_identity_check(&sol, &law, &model, &init, &batch, 3.0, 0.5).unwrap();
        assert!((check.rhs - 0.25).abs() < 1e-9);
        assert!(check.residual < 0.01, "{check:?}");
        assert!(check.pass);
    }

    #[test]
    fn example1_closed_loop_is_a_martingale() {
        let model = scenario_example1(1.0).unwrap();
        let grid = make_grid(1.0, 64).unwrap();
        let batch = sample_brownian(&grid, 4000, 6, false).unwrap();
        let sol = closed_form_example1(&grid, &batch).unwrap();
        let law = synthesize(&sol, &model, None, 1e-10).unwrap();
        let init = InitialCondition::fixed(0, &[1.0]);
        let traj = simulate_closed_loop(&model, &law, &init, &batch).unwrap();
        for i in 0..=64 {
            let xs: Vec<f64> = (0..4000).map(|p| traj.x.scalar(i, p)).collect();
            let (m, se) = mean_and_se(&xs);
            assert!((m - 1.0).abs() <= 5.0 * se + 1e-15, "i={i}: {m} ± {se}");
        }
    }

    #[test]
    fn martingale_control_has_mean_zero() {
        let model = scenario_example1(1.0).unwrap();
        let grid = make_grid(1.0, 64).unwrap();
        let batch = sample_brownian(&grid, 4000, 16, false).unwrap();
        let sol = closed_form_example1(&grid, &batch).unwrap();
        let law = synthesize(&sol, &model, None, 1e-10).unwrap();
        let init = InitialCondition::fixed(0, &[1.0]);
        let closed = simulate_closed_loop(&model, &law, &init, &batch).unwrap();
        let u = perturbed_control(&closed.u, &Perturbation::SignW { level: 1.0 }, 0.5, 0, &batch);
        let x = simulate_open_loop(&model, &u, &init, &batch).unwrap();
        let mc = martingale_control(&model, &sol, &x, &u, &init, &batch).unwrap();
        let (m, se) = mean_and_se(&mc);
        assert!(m.abs() <= 4.0 * se, "{m} ± {se}");
        // it tracks the cost fluctuation, so the adjusted cost is less noisy
        let j = pathwise_costs(&model, &x, &u, &init, &batch).unwrap().totals();
        let adj: Vec<f64> = j.iter().zip(&mc).map(|(a, b)| a - b).collect();
        assert!(mean_and_se(&adj).1 < 0.5 * mean_and_se(&j).1);
    }

    #[test]
    fn zero_perturbation_gives_zero_gaps() {
        let model = scenario_example1(1.0).unwrap();
        let grid = make_grid(1.0, 16).unwrap();
        let batch = sample_brownian(&grid, 100, 16, false).unwrap();
        let sol = closed_form_example1(&grid, &batch).unwrap();
        let law = synthesize(&sol, &model, None, 1e-10).unwrap();
        let init = InitialCondition::fixed(0, &[1.0]);
        let rep = optimality_sweep(
            &sol,
            &law,
            &model,
            &init,
            &batch,
            &[Perturbation::Constant { level: 0.0 }],
            SweepConfig::default(),
        )
        .unwrap();
        assert!(rep.rows.iter().all(|r| r.gap == 0.0));
    }

    #[test]
    fn probe_on_small_levels() {
        let rep = counterexample_divergence_probe(1.0, &[(64, 50), (128, 100)], 3).unwrap();
        assert_eq!(rep.rows.len(), 2);
        for r in &rep.rows {
            assert!(r.max_theta_sq <= r.max_zeta_sq + 1e-12);
            assert!(r.min_y <= r.max_y);
            assert!(!r.exp_saturated);
        }
        assert!(counterexample_divergence_probe(1.0, &[(128, 10), (64, 10)], 3).is_err());
    }
}
