//! Solvers for the backward stochastic Riccati equation
//!
//! ```text
//! dP = −F(P, Λ) dt + Λ dW,  P(T) = G
//! F  = PA + AᵀP + ΛC + CᵀΛ + CᵀPC + Q − LᵀK†L
//! K  = R + DᵀPD,  L = BᵀP + Dᵀ(PC + Λ)
//! ```
//!
//! Four routes produce a [`RiccatiSolution`]: a fourth-order ODE integrator
//! for deterministic data (`Λ ≡ 0`), the exact discrete-time recursion of the
//! Euler-discretized problem used as its oracle, a least-squares Monte Carlo
//! backward induction for scalar equations with random terminal data, and
//! the closed forms of the two scalar examples.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Result, SlqError};
use crate::grid::{BrownianBatch, PathArray, TimeGrid};
use crate::pinv;
use crate::problem::{self, CoefficientModel, CoefficientsAt, CounterexamplePath};

/// Tolerance of the range-inclusion and positivity checks during integration.
pub const RANGE_TOL: f64 = 1e-8;
/// Lower bound on `K = R + D²P` accepted by the regression driver.
pub const DRIVER_CLAMP: f64 = 1e-6;
/// Internal ODE substeps per grid interval.
const ODE_SUBSTEPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverTag {
    DeterministicOde,
    DiscreteRecursion,
    RegressionMc,
    ClosedFormExample1,
    ClosedFormCounterexample,
}

impl SolverTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverTag::DeterministicOde => "deterministic_ode",
            SolverTag::DiscreteRecursion => "discrete_recursion",
            SolverTag::RegressionMc => "regression_mc",
            SolverTag::ClosedFormExample1 => "closed_form_example1",
            SolverTag::ClosedFormCounterexample => "closed_form_counterexample",
        }
    }
}

/// `(P, Λ)` on the grid with the derived `K` and `L`. Deterministic
/// solutions hold a single path that broadcasts over any batch.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub p: PathArray,
    pub lambda: PathArray,
    pub k: PathArray,
    pub l: PathArray,
    pub solver: SolverTag,
}

impl RiccatiSolution {
    pub fn n_paths(&self) -> usize {
        self.p.n_paths()
    }

    /// Sample mean of `P` at index `i` (the value itself when deterministic).
    pub fn mean_p(&self, i: usize) -> DMatrix<f64> {
        let (r, c) = self.p.shape();
        let mut acc = DMatrix::zeros(r, c);
        for p in 0..self.n_paths() {
            acc += self.p.get(i, p);
        }
        acc / self.n_paths() as f64
    }

    /// Largest `‖P_N − G‖_F` over paths.
    pub fn terminal_error(&self, model: &CoefficientModel, batch: Option<&BrownianBatch>) -> f64 {
        let n = self.grid.steps();
        let mut worst: f64 = 0.0;
        for p in 0..self.n_paths() {
            let g = match batch {
                Some(b) => model.terminal(&self.grid, b.path(p)).into_owned(),
                None => model
                    .g
                    .constant()
                    .cloned()
                    .unwrap_or_else(|| DMatrix::from_element(model.n, model.n, f64::NAN)),
            };
            worst = worst.max((self.p.get(n, p) - g).norm());
        }
        worst
    }
}

/// `K = R + DᵀPD` and `L = BᵀP + Dᵀ(PC + Λ)`.
pub fn k_and_l(at: &CoefficientsAt<'_>, p: &DMatrix<f64>, lambda: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let d_t = at.d.transpose();
    let k = &*at.r + &d_t * p * &*at.d;
    let l = at.b.transpose() * p + d_t * (p * &*at.c + lambda);
    (k, l)
}

/// Driver `F(P, Λ)` together with the `K`, `L`, `K†` it was built from.
pub struct DriverEval {
    pub f: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub k_pinv: DMatrix<f64>,
}

pub fn riccati_driver(at: &CoefficientsAt<'_>, p: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<DriverEval> {
    let (k, l) = k_and_l(at, p, lambda);
    let k = (&k + k.transpose()) * 0.5;
    let k_pinv = pinv::pinv(&k, None)?.pinv;
    let a = &*at.a;
    let c = &*at.c;
    let f = p * a + a.transpose() * p + lambda * c + c.transpose() * lambda + c.transpose() * p * c + &*at.q
        - l.transpose() * &k_pinv * &l;
    Ok(DriverEval { f, k, l, k_pinv })
}

/// Range inclusion and positivity of `K` at one point.
fn check_kl(ev: &DriverEval, time: f64) -> Result<()> {
    let min_eig = pinv::min_eigenvalue(&ev.k);
    if min_eig < -RANGE_TOL {
        return Err(SlqError::RiccatiSingular {
            time,
            detail: format!("K has eigenvalue {min_eig:e} < 0"),
        });
    }
    let res = pinv::range_residual(&ev.k, &ev.k_pinv, &ev.l);
    if res > RANGE_TOL * (1.0 + ev.l.norm()) {
        return Err(SlqError::RiccatiSingular {
            time,
            detail: format!("range of L not contained in range of K (residual {res:e})"),
        });
    }
    Ok(())
}

fn deterministic_at(model: &CoefficientModel, t: f64) -> CoefficientsAt<'_> {
    // callers have checked `model.is_deterministic()`
    CoefficientsAt {
        a: model.a.at_time(t).unwrap(),
        b: model.b.at_time(t).unwrap(),
        c: model.c.at_time(t).unwrap(),
        d: model.d.at_time(t).unwrap(),
        q: model.q.at_time(t).unwrap(),
        r: model.r.at_time(t).unwrap(),
    }
}

fn require_deterministic(model: &CoefficientModel) -> Result<DMatrix<f64>> {
    if !model.is_deterministic() {
        return Err(SlqError::invalid(format!(
            "model `{}` has random data; this solver needs deterministic coefficients",
            model.name
        )));
    }
    Ok(model.g.constant().cloned().unwrap())
}

fn symmetric(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn derived_kl(
    model: &CoefficientModel,
    grid: &TimeGrid,
    p_arr: &PathArray,
    lambda: &PathArray,
    batch: Option<&BrownianBatch>,
) -> (PathArray, PathArray) {
    let n_paths = p_arr.n_paths();
    let mut k_arr = PathArray::zeros(grid.n_points(), n_paths, model.m, model.m);
    let mut l_arr = PathArray::zeros(grid.n_points(), n_paths, model.m, model.n);
    let zeros = vec![0.0; grid.n_points()];
    for p in 0..n_paths {
        for i in 0..grid.n_points() {
            let prefix = match batch {
                Some(b) => b.prefix(p, i),
                None => &zeros[..=i],
            };
            let at = model.at(grid, i, prefix);
            let (k, l) = k_and_l(&at, &p_arr.matrix(i, p), &lambda.matrix(i, p));
            k_arr.set(i, p, &symmetric(k));
            l_arr.set(i, p, &l);
        }
    }
    (k_arr, l_arr)
}

/// Classical RK4 integration, backward from `P(T) = G`, of
/// `dP/dt = −(PA + AᵀP + CᵀPC + Q − LᵀK†L)` with `L = BᵀP + DᵀPC`, using
/// four substeps per grid interval. Range inclusion and positivity of `K`
/// are checked at every stage.
pub fn solve_deterministic(model: &CoefficientModel, grid: &TimeGrid) -> Result<RiccatiSolution> {
    model.check_grid(grid)?;
    let g = require_deterministic(model)?;
    let n = model.n;
    let zero = DMatrix::zeros(n, n);
    let mut p_arr = PathArray::zeros(grid.n_points(), 1, n, n);
    let mut p = symmetric(g);
    p_arr.set(grid.steps(), 0, &p);

    let stage = |t: f64, p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let at = deterministic_at(model, t);
        let ev = riccati_driver(&at, p, &zero)?;
        check_kl(&ev, t)?;
        Ok(ev.f)
    };

    let delta = grid.step() / ODE_SUBSTEPS as f64;
    for i in (0..grid.steps()).rev() {
        let t_hi = grid.time(i + 1);
        for s in 0..ODE_SUBSTEPS {
            let t = t_hi - s as f64 * delta;
            // dP/dt = −F, stepping backward by δ adds δ·F
            let k1 = stage(t, &p)?;
            let k2 = stage(t - 0.5 * delta, &(&p + &k1 * (0.5 * delta)))?;
            let k3 = stage(t - 0.5 * delta, &(&p + &k2 * (0.5 * delta)))?;
            let k4 = stage(t - delta, &(&p + &k3 * delta))?;
            p = symmetric(&p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (delta / 6.0));
            if p.iter().any(|v| !v.is_finite() || v.abs() > 1e150) {
                return Err(SlqError::FiniteEscape { index: i, path: 0 });
            }
        }
        p_arr.set(i, 0, &p);
    }
    stage(0.0, &p)?;

    let lambda = PathArray::zeros(grid.n_points(), 1, n, n);
    let (k_arr, l_arr) = derived_kl(model, grid, &p_arr, &lambda, None);
    Ok(RiccatiSolution {
        grid: grid.clone(),
        p: p_arr,
        lambda,
        k: k_arr,
        l: l_arr,
        solver: SolverTag::DeterministicOde,
    })
}

/// Output of the discrete-time recursion, including the one-step gains.
#[derive(Clone, Debug)]
pub struct DiscreteRecursion {
    pub solution: RiccatiSolution,
    /// `Θ_i = −H_i† M_i`, the exact minimizer of the one-step problem.
    pub gains: Vec<DMatrix<f64>>,
    /// `H_i = R_i + DᵢᵀP_{i+1}Dᵢ + h·BᵢᵀP_{i+1}Bᵢ` (the one-step Hessian over `h`).
    pub hessians: Vec<DMatrix<f64>>,
}

/// Exact stochastic LQ recursion of the Euler scheme
/// `x_{i+1} = (I + hA)x + hBu + (Cx + Du)ΔW` with running cost
/// `h(⟨Qx,x⟩ + ⟨Ru,u⟩)`:
///
/// ```text
/// P_i = ΦᵀP'Φ + h·CᵀP'C + h·Q − h·MᵀH†M
/// H   = R + DᵀP'D + h·BᵀP'B,  M = BᵀP'Φ + DᵀP'C,  Φ = I + hA
/// ```
pub fn discrete_recursion(model: &CoefficientModel, grid: &TimeGrid) -> Result<DiscreteRecursion> {
    model.check_grid(grid)?;
    let g = require_deterministic(model)?;
    let (n, h) = (model.n, grid.step());
    let mut p_arr = PathArray::zeros(grid.n_points(), 1, n, n);
    let mut p_next = symmetric(g);
    p_arr.set(grid.steps(), 0, &p_next);
    let mut gains = vec![DMatrix::zeros(model.m, n); grid.steps()];
    let mut hessians = vec![DMatrix::zeros(model.m, model.m); grid.steps()];

    for i in (0..grid.steps()).rev() {
        let t = grid.time(i);
        let at = deterministic_at(model, t);
        let phi = DMatrix::identity(n, n) + &*at.a * h;
        let (b, c, d) = (&*at.b, &*at.c, &*at.d);
        let hess = symmetric(&*at.r + d.transpose() * &p_next * d + b.transpose() * &p_next * b * h);
        let mm = b.transpose() * &p_next * &phi + d.transpose() * &p_next * c;
        let hp = pinv::pinv(&hess, None)?.pinv;
        let min_eig = pinv::min_eigenvalue(&hess);
        if min_eig < -RANGE_TOL {
            return Err(SlqError::RiccatiSingular {
                time: t,
                detail: format!("one-step Hessian has eigenvalue {min_eig:e} < 0"),
            });
        }
        let res = pinv::range_residual(&hess, &hp, &mm);
        if res > RANGE_TOL * (1.0 + mm.norm()) {
            return Err(SlqError::RiccatiSingular {
                time: t,
                detail: format!("one-step range condition fails (residual {res:e})"),
            });
        }
        let p_i = phi.transpose() * &p_next * &phi + (c.transpose() * &p_next * c + &*at.q) * h
            - mm.transpose() * &hp * &mm * h;
        let p_i = symmetric(p_i);
        if p_i.iter().any(|v| !v.is_finite() || v.abs() > 1e150) {
            return Err(SlqError::FiniteEscape { index: i, path: 0 });
        }
        gains[i] = -(&hp * &mm);
        hessians[i] = hess;
        p_arr.set(i, 0, &p_i);
        p_next = p_i;
    }

    let lambda = PathArray::zeros(grid.n_points(), 1, n, n);
    let (k_arr, l_arr) = derived_kl(model, grid, &p_arr, &lambda, None);
    Ok(DiscreteRecursion {
        solution: RiccatiSolution {
            grid: grid.clone(),
            p: p_arr,
            lambda,
            k: k_arr,
            l: l_arr,
            solver: SolverTag::DiscreteRecursion,
        },
        gains,
        hessians,
    })
}

/// The recursion's `(P, Λ = 0)` as a plain solution.
pub fn discrete_recursion_oracle(model: &CoefficientModel, grid: &TimeGrid) -> Result<RiccatiSolution> {
    Ok(discrete_recursion(model, grid)?.solution)
}

// ---------------------------------------------------------------------------
// regression Monte Carlo

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BasisConfig {
    /// Total polynomial degree in the regression state. With the default
    /// state the basis spans `{1, W, …, W^degree}`.
    pub degree: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { degree: 3 }
    }
}

/// Exponent tuples of all monomials in `caps.len()` variables with total
/// degree at most `degree` and per-variable exponent at most `caps[k]`, in
/// graded order.
fn monomials(caps: &[usize], degree: usize) -> Vec<Vec<u8>> {
    let dim = caps.len();
    let mut out = vec![vec![0u8; dim]];
    if dim == 0 {
        return out;
    }
    for total in 1..=degree {
        let mut level = Vec::new();
        let mut cur = vec![0u8; dim];
        fill_level(0, total, &mut cur, &mut level);
        out.extend(level);
    }
    out.retain(|e| e.iter().zip(caps).all(|(x, c)| (*x as usize) <= *c));
    out
}

fn fill_level(pos: usize, left: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if pos + 1 == cur.len() {
        cur[pos] = left as u8;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e as u8;
        fill_level(pos + 1, left - e, cur, out);
    }
    cur[pos] = 0;
}

/// Regression state at one time index, stored variable-major.
struct SliceState<'a> {
    vars: Vec<&'a [f64]>,
    caps: &'a [usize],
}

impl SliceState<'_> {
    fn point(&self, p: usize, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(&self.vars) {
            *o = v[p];
        }
    }
}

/// Least-squares fit of a polynomial in the standardized state.
#[derive(Clone, Debug)]
struct SliceFit {
    kept: Vec<usize>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    exps: Vec<Vec<u8>>,
    coeffs: Vec<f64>,
}

impl SliceFit {
    fn features(&self, x: &[f64], pows: &mut [Vec<f64>], out: &mut [f64]) {
        for (k, &v) in self.kept.iter().enumerate() {
            let s = (x[v] - self.mean[k]) * self.inv_std[k];
            let row = &mut pows[k];
            row[0] = 1.0;
            for e in 1..row.len() {
                row[e] = row[e - 1] * s;
            }
        }
        for (o, ex) in out.iter_mut().zip(&self.exps) {
            let mut v = 1.0;
            for (k, &e) in ex.iter().enumerate() {
                v *= pows[k][e as usize];
            }
            *o = v;
        }
    }

    fn eval(&self, x: &[f64], scratch: &mut Scratch) -> f64 {
        let dim = self.exps.len();
        self.features(x, &mut scratch.pows, &mut scratch.phi[..dim]);
        self.coeffs.iter().zip(&scratch.phi).map(|(c, f)| c * f).sum()
    }
}

struct Scratch {
    pows: Vec<Vec<f64>>,
    phi: Vec<f64>,
    x: Vec<f64>,
}

impl Scratch {
    fn new(n_vars: usize, degree: usize) -> Self {
        let n_terms = monomials(&vec![degree; n_vars], degree).len();
        Self {
            pows: vec![vec![0.0; degree + 1]; n_vars],
            phi: vec![0.0; n_terms],
            x: vec![0.0; n_vars],
        }
    }
}

/// Regresses `target` on the polynomial basis of the state with a
/// fixed-order accumulation of the normal equations. Variables that are
/// constant across paths (all of them at `t = 0`) are dropped. Fewer paths
/// than basis terms is a rank-deficient design.
fn fit_slice(
    index: usize,
    state: &SliceState<'_>,
    target: &[f64],
    basis: BasisConfig,
    scratch: &mut Scratch,
) -> Result<SliceFit> {
    let n_paths = target.len();
    let mut kept = Vec::new();
    let mut mean = Vec::new();
    let mut inv_std = Vec::new();
    for (v, col) in state.vars.iter().enumerate() {
        let mu = col.iter().sum::<f64>() / n_paths as f64;
        let var = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n_paths as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + mu.abs()) {
            kept.push(v);
            mean.push(mu);
            inv_std.push(1.0 / sd);
        }
    }
    let caps: Vec<usize> = kept.iter().map(|&v| state.caps[v].min(basis.degree)).collect();
    let exps = monomials(&caps, basis.degree);
    let dim = exps.len();
    if n_paths < dim {
        return Err(SlqError::RegressionSingular { index });
    }
    let mut fit = SliceFit {
        kept,
        mean,
        inv_std,
        exps,
        coeffs: Vec::new(),
    };
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DMatrix::<f64>::zeros(dim, 1);
    let mut phi = vec![0.0; dim];
    for (p, yi) in target.iter().enumerate() {
        state.point(p, &mut scratch.x);
        fit.features(&scratch.x, &mut scratch.pows, &mut phi);
        for a in 0..dim {
            rhs[a] += phi[a] * yi;
            for b in 0..=a {
                gram[(a, b)] += phi[a] * phi[b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    // graded pivoting: a term already spanned by lower-order terms (e.g.
    // factors that coincide near t = 0) gets a zero coefficient
    let mut chol = DMatrix::<f64>::zeros(dim, dim);
    let mut active = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut row = vec![0.0; active.len()];
        for (a, &k) in active.iter().enumerate() {
            let dot: f64 = (0..a).map(|b| row[b] * chol[(a, b)]).sum();
            row[a] = (gram[(j, k)] - dot) / chol[(a, a)];
        }
        let pivot = gram[(j, j)] - row.iter().map(|x| x * x).sum::<f64>();
        if pivot > 1e-10 * gram[(j, j)] && pivot > 0.0 {
            let a = active.len();
            for (b, v) in row.iter().enumerate() {
                chol[(a, b)] = *v;
            }
            chol[(a, a)] = pivot.sqrt();
            active.push(j);
        }
    }
    if active.is_empty() || active[0] != 0 {
        return Err(SlqError::RegressionSingular { index });
    }
    let r = active.len();
    let lower = chol.view((0, 0), (r, r)).into_owned();
    let sub_rhs = DMatrix::from_iterator(r, 1, active.iter().map(|&k| rhs[k]));
    let tmp = lower
        .solve_lower_triangular(&sub_rhs)
        .ok_or(SlqError::RegressionSingular { index })?;
    let sub = lower
        .transpose()
        .solve_upper_triangular(&tmp)
        .ok_or(SlqError::RegressionSingular { index })?;
    let mut coeffs = vec![0.0; dim];
    for (a, &k) in active.iter().enumerate() {
        coeffs[k] = sub[a];
    }
    fit.coeffs = coeffs;
    Ok(fit)
}

/// Scalar driver `F(P, Λ)` with explicit clamp on `K = r + d²P`.
fn scalar_driver(at: &CoefficientsAt<'_>, p: f64, lam: f64, index: usize, path: usize) -> Result<f64> {
    let (a, b, c, d, q, r) = (at.a[0], at.b[0], at.c[0], at.d[0], at.q[0], at.r[0]);
    let k = r + d * d * p;
    let l = b * p + d * (p * c + lam);
    let quad = if k >= DRIVER_CLAMP {
        l * l / k
    } else if l == 0.0 {
        0.0
    } else {
        return Err(SlqError::DriverSingular { index, path, value: k });
    };
    Ok(2.0 * a * p + 2.0 * c * lam + c * c * p + q - quad)
}

/// Least-squares Monte Carlo backward induction for the scalar BSRE.
///
/// The regression state is the model's Markov factors, or `W_t` alone
/// when none are declared. At each
/// step, `Λ_i` is the regression of `(P_{i+1} − P̃_{i+1}(X_i))ΔW_i/h` on the
/// basis (the subtracted term is the step-`i+1` fit evaluated at the current
/// state; it is `F_i`-measurable and only reduces variance), then `P_i` is
/// the regression of `P_{i+1} + h·F(P_{i+1}, Λ_i)`. Pathwise values are the
/// fitted functions evaluated on each path; `P_N = G` exactly and `Λ_N`
/// repeats the last fitted `Λ` function at the terminal state.
pub fn solve_bsre_regression(
    model: &CoefficientModel,
    grid: &TimeGrid,
    batch: &BrownianBatch,
    basis: BasisConfig,
) -> Result<RiccatiSolution> {
    model.check_grid(grid)?;
    if batch.grid() != grid {
        return Err(SlqError::invalid("batch grid differs from solver grid"));
    }
    if model.kind == problem::ModelKind::PathDependent {
        return Err(SlqError::invalid(format!(
            "model `{}` has path-dependent running coefficients; regression needs Markov data",
            model.name
        )));
    }
    if model.n != 1 || model.m != 1 {
        return Err(SlqError::invalid("regression solver handles scalar equations only"));
    }
    let n_paths = batch.n_paths();
    let n_pts = grid.n_points();
    let big_n = grid.steps();
    let h = grid.step();

    // time-major state storage; the default state is W alone
    let n_vars = model.factors.len().max(1);
    let mut vars = vec![vec![0.0; n_pts * n_paths]; n_vars];
    for p in 0..n_paths {
        if model.factors.is_empty() {
            for i in 0..n_pts {
                vars[0][i * n_paths + p] = batch.w(i, p);
            }
        }
        for (f, factor) in model.factors.iter().enumerate() {
            let values = (factor.values)(grid, batch.path(p));
            for (i, v) in values.iter().enumerate() {
                vars[f][i * n_paths + p] = *v;
            }
        }
    }
    let caps: Vec<usize> = if model.factors.is_empty() {
        vec![basis.degree]
    } else {
        model.factors.iter().map(|f| f.max_power.unwrap_or(basis.degree)).collect()
    };
    let slice = |i: usize| SliceState {
        vars: vars.iter().map(|v| &v[i * n_paths..(i + 1) * n_paths]).collect(),
        caps: &caps,
    };
    let mut scratch = Scratch::new(n_vars, basis.degree);

    let mut p_arr = PathArray::zeros(n_pts, n_paths, 1, 1);
    let mut lam_arr = PathArray::zeros(n_pts, n_paths, 1, 1);

    let mut p_next: Vec<f64> = (0..n_paths)
        .map(|p| model.terminal(grid, batch.path(p))[(0, 0)])
        .collect();
    p_arr.slice_mut(big_n).copy_from_slice(&p_next);
    // projection of G on the terminal state, used only as a control
    let mut fit_next = fit_slice(big_n, &slice(big_n), &p_next, basis, &mut scratch)?;

    let mut target = vec![0.0; n_paths];
    for i in (0..big_n).rev() {
        let state = slice(i);
        for p in 0..n_paths {
            state.point(p, &mut scratch.x);
            let x = scratch.x.clone();
            let control = fit_next.eval(&x, &mut scratch);
            target[p] = (p_next[p] - control) * batch.dw(i, p) / h;
        }
        let lam_fit = fit_slice(i, &state, &target, basis, &mut scratch)?;
        let lam_i = eval_slice(&lam_fit, &state, n_paths, &mut scratch);

        for p in 0..n_paths {
            let at = model.at(grid, i, batch.prefix(p, i));
            let f = scalar_driver(&at, p_next[p], lam_i[p], i, p)?;
            target[p] = p_next[p] + h * f;
        }
        let p_fit = fit_slice(i, &state, &target, basis, &mut scratch)?;
        let p_i = eval_slice(&p_fit, &state, n_paths, &mut scratch);

        if i + 1 == big_n {
            let lam_n = eval_slice(&lam_fit, &slice(big_n), n_paths, &mut scratch);
            lam_arr.slice_mut(big_n).copy_from_slice(&lam_n);
        }
        if let Some(bad) = p_i.iter().position(|v| !v.is_finite()) {
            return Err(SlqError::FiniteEscape { index: i, path: bad });
        }
        p_arr.slice_mut(i).copy_from_slice(&p_i);
        lam_arr.slice_mut(i).copy_from_slice(&lam_i);
        p_next = p_i;
        fit_next = p_fit;
    }

    let (k_arr, l_arr) = derived_kl(model, grid, &p_arr, &lam_arr, Some(batch));
    Ok(RiccatiSolution {
        grid: grid.clone(),
        p: p_arr,
        lambda: lam_arr,
        k: k_arr,
        l: l_arr,
        solver: SolverTag::RegressionMc,
    })
}

fn eval_slice(fit: &SliceFit, state: &SliceState<'_>, n_paths: usize, scratch: &mut Scratch) -> Vec<f64> {
    let mut x = vec![0.0; state.vars.len()];
    (0..n_paths)
        .map(|p| {
            state.point(p, &mut x);
            fit.eval(&x, scratch)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// closed forms

fn check_batch(grid: &TimeGrid, batch: &BrownianBatch) -> Result<()> {
    if batch.grid() != grid {
        return Err(SlqError::invalid("batch grid differs from solution grid"));
    }
    Ok(())
}

/// `P = y⁻¹ − R`, `Λ = −y⁻²cos W` for the solvable example, evaluated on
/// each path; `K = R + P`, `L = Λ`.
pub fn closed_form_example1(grid: &TimeGrid, batch: &BrownianBatch) -> Result<RiccatiSolution> {
    check_batch(grid, batch)?;
    let r = problem::example1_weight(grid.horizon());
    let n_paths = batch.n_paths();
    let mut p_arr = PathArray::zeros(grid.n_points(), n_paths, 1, 1);
    let mut lam = PathArray::zeros(grid.n_points(), n_paths, 1, 1);
    let mut k_arr = PathArray::zeros(grid.n_points(), n_paths, 1, 1);
    for p in 0..n_paths {
        let w = batch.path(p);
        let y = problem::example1_y(grid, w);
        for i in 0..grid.n_points() {
            let pv = 1.0 / y[i] - r;
            p_arr.set_scalar(i, p, pv);
            lam.set_scalar(i, p, -w[i].cos() / (y[i] * y[i]));
            k_arr.set_scalar(i, p, r + pv);
        }
    }
    let l_arr = lam.clone();
    Ok(RiccatiSolution {
        grid: grid.clone(),
        p: p_arr,
        lambda: lam,
        k: k_arr,
        l: l_arr,
        solver: SolverTag::ClosedFormExample1,
    })
}

/// `P = Y⁻¹ − 1/4`, `Λ = −Y⁻²ζ` for the counterexample; `Λ_N = 0`.
pub fn closed_form_counterexample(grid: &TimeGrid, batch: &BrownianBatch) -> Result<RiccatiSolution> {
    check_batch(grid, batch)?;
    let r = problem::COUNTEREXAMPLE_R;
    let n_paths = batch.n_paths();
    let mut p_arr = PathArray::zeros(grid.n_points(), n_paths, 1, 1);
    let mut lam = PathArray::zeros(grid.n_points(), n_paths, 1, 1);
    let mut k_arr = PathArray::zeros(grid.n_points(), n_paths, 1, 1);
    for p in 0..n_paths {
        let cp = CounterexamplePath::compute(grid, batch.path(p));
        for i in 0..grid.n_points() {
            let y = cp.y[i];
            let pv = 1.0 / y - r;
            p_arr.set_scalar(i, p, pv);
            let z = if i < grid.steps() { cp.zeta[i] } else { 0.0 };
            lam.set_scalar(i, p, -z / (y * y));
            k_arr.set_scalar(i, p, r + pv);
        }
    }
    let l_arr = lam.clone();
    Ok(RiccatiSolution {
        grid: grid.clone(),
        p: p_arr,
        lambda: lam,
        k: k_arr,
        l: l_arr,
        solver: SolverTag::ClosedFormCounterexample,
    })
}

/// Per path, `Σ_i (P_{i+1} − P_i + h·F(P_i, Λ_i) − Λ_i ΔW_i)`: the
/// accumulated one-step defect of the solution in the Euler form of the
/// equation.
pub fn discrete_bsre_residuals(
    sol: &RiccatiSolution,
    model: &CoefficientModel,
    batch: &BrownianBatch,
) -> Result<Vec<f64>> {
    let grid = &sol.grid;
    check_batch(grid, batch)?;
    let h = grid.step();
    let mut out = Vec::with_capacity(batch.n_paths());
    for p in 0..batch.n_paths() {
        let mut acc = DMatrix::zeros(model.n, model.n);
        for i in 0..grid.steps() {
            let at = model.at(grid, i, batch.prefix(p, i));
            let pi = sol.p.matrix(i, p);
            let li = sol.lambda.matrix(i, p);
            let ev = riccati_driver(&at, &pi, &li)?;
            acc += sol.p.get(i + 1, p) - &pi + ev.f * h - li * batch.dw(i, p);
        }
        out.push(acc.norm());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, sample_brownian};
    use crate::problem::{scenario_counterexample, scenario_deterministic, scenario_example1};

    #[test]
    fn analytic_scalar_riccati() {
        let model = scenario_deterministic(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let grid = make_grid(1.0, 100).unwrap();
        let sol = solve_deterministic(&model, &grid).unwrap();
        for i in 0..=100 {
            let t = grid.time(i);
            assert!((sol.p.scalar(i, 0) - 1.0 / (2.0 - t)).abs() < 1e-9);
        }
        assert!((sol.p.scalar(0, 0) - 0.5).abs() < 1e-6);
        assert_eq!(sol.lambda.values().iter().filter(|v| **v != 0.0).count(), 0);
    }

    #[test]
    fn zero_problem_gives_zero_solution() {
        let model = scenario_deterministic(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        let grid = make_grid(1.0, 10).unwrap();
        let sol = solve_deterministic(&model, &grid).unwrap();
        assert!(sol.p.values().iter().all(|v| *v == 0.0));
        assert!(sol.k.values().iter().all(|v| *v == 0.0));
        assert!(sol.l.values().iter().all(|v| *v == 0.0));
        let disc = discrete_recursion_oracle(&model, &grid).unwrap();
        assert!(disc.p.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn multiplicative_control_keeps_p_constant() {
        let model = scenario_deterministic(0.0, 0.0, 0.0, 1.0, 0.0, 0.25, 0.5, 1.0).unwrap();
        let grid = make_grid(1.0, 20).unwrap();
        let sol = solve_deterministic(&model, &grid).unwrap();
        assert!(sol.p.values().iter().all(|v| (*v - 0.5).abs() < 1e-15));
        assert!(sol.l.values().iter().all(|v| *v == 0.0));
        assert!(sol.k.values().iter().all(|v| (*v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn singular_k_with_nonzero_l_is_reported() {
        // R = 0, D = 0, B = 1: K = 0 while L = P ≠ 0
        let model = scenario_deterministic(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        let grid = make_grid(1.0, 10).unwrap();
        match solve_deterministic(&model, &grid) {
            Err(SlqError::RiccatiSingular { time, .. }) => assert_eq!(time, 1.0),
            other => panic!("expected riccati-singular, got {other:?}"),
        }
        // the one-step Hessian h·BᵀP'B stays invertible
        assert!(discrete_recursion_oracle(&model, &grid).is_ok());
    }

    #[test]
    fn finite_escape_is_reported() {
        // R = -1 makes dP/dt = −P²·(-1)... P blows up backward
        let model = scenario_deterministic(0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 3.0).unwrap();
        let grid = make_grid(3.0, 30).unwrap();
        let err = solve_deterministic(&model, &grid).unwrap_err();
        assert!(matches!(err, SlqError::RiccatiSingular { .. } | SlqError::FiniteEscape { .. }));
    }

    #[test]
    fn random_data_is_rejected_by_deterministic_solvers() {
        let model = scenario_example1(1.0).unwrap();
        let grid = make_grid(1.0, 8).unwrap();
        assert!(matches!(solve_deterministic(&model, &grid), Err(SlqError::InvalidArgument(_))));
        assert!(matches!(discrete_recursion_oracle(&model, &grid), Err(SlqError::InvalidArgument(_))));
    }

    #[test]
    fn discrete_recursion_is_first_order() {
        // for dP/dt = P² the recursion is exact (1/P_i = 1/P_{i+1} + h), so
        // use an instance with drift, diffusion and running cost
        let model = scenario_deterministic(0.3, 1.0, 0.4, 0.2, 1.0, 1.0, 1.0, 1.0).unwrap();
        let fine = solve_deterministic(&model, &make_grid(1.0, 1600).unwrap()).unwrap();
        let exact = fine.p.scalar(0, 0);
        let mut errs = Vec::new();
        for n in [50usize, 100, 200, 400] {
            let grid = make_grid(1.0, n).unwrap();
            let p0 = discrete_recursion_oracle(&model, &grid).unwrap().p.scalar(0, 0);
            assert!((p0 - exact).abs() < 5.0 * grid.step(), "N={n}: {p0} vs {exact}");
            errs.push((p0 - exact).abs());
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.7..2.3).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn discrete_recursion_exact_for_pure_control_cost() {
        let model = scenario_deterministic(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let grid = make_grid(1.0, 37).unwrap();
        let p0 = discrete_recursion_oracle(&model, &grid).unwrap().p.scalar(0, 0);
        assert!((p0 - 0.5).abs() < 1e-14);
    }

    #[test]
    fn discrete_recursion_zero_cost() {
        let model = scenario_deterministic(0.4, 1.0, 0.3, 0.5, 0.0, 1.0, 0.0, 1.0).unwrap();
        let grid = make_grid(1.0, 10).unwrap();
        let sol = discrete_recursion_oracle(&model, &grid).unwrap();
        assert!(sol.p.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matrix_solver_keeps_symmetry_and_terminal() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, -0.5, 0.7, 0.2]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.3]);
        let c = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, -0.4, 0.1]);
        let d = DMatrix::from_row_slice(2, 1, &[0.5, -0.2]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::from_element(1, 1, 0.5);
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let model = CoefficientModel::constant("m", a, b, c, d, q, r, g).unwrap();
        let grid = make_grid(1.0, 50).unwrap();
        let sol = solve_deterministic(&model, &grid).unwrap();
        assert!(sol.terminal_error(&model, None) < 1e-15);
        for i in 0..=50 {
            assert!(pinv::asymmetry(&sol.p.matrix(i, 0)) < 1e-14);
        }
    }

    #[test]
    fn closed_form_example1_on_zero_path() {
        let grid = make_grid(1.0, 32).unwrap();
        let batch = BrownianBatch::from_increments(&grid, vec![vec![0.0; 32]]).unwrap();
        let sol = closed_form_example1(&grid, &batch).unwrap();
        for i in 0..=32 {
            assert!((sol.p.scalar(i, 0) - 0.275).abs() < 1e-15);
            assert!((sol.lambda.scalar(i, 0) + 0.16).abs() < 1e-15);
            assert!((sol.k.scalar(i, 0) - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_example1_bounds_and_terminal() {
        let grid = make_grid(1.0, 128).unwrap();
        let batch = sample_brownian(&grid, 2000, 4, false).unwrap();
        let sol = closed_form_example1(&grid, &batch).unwrap();
        assert!(sol.p.values().iter().all(|v| (0.125 - 1e-9..=0.875 + 1e-9).contains(v)));
        let model = scenario_example1(1.0).unwrap();
        assert!(sol.terminal_error(&model, Some(&batch)) < 1e-15);
    }

    fn rms(xs: &[f64]) -> f64 {
        (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
    }

    #[test]
    fn closed_form_example1_bsre_defect_shrinks() {
        let model = scenario_example1(1.0).unwrap();
        let mut prev = f64::INFINITY;
        for n in [32usize, 128, 512] {
            let grid = make_grid(1.0, n).unwrap();
            let batch = sample_brownian(&grid, 1000, 8, false).unwrap();
            let sol = closed_form_example1(&grid, &batch).unwrap();
            let r = rms(&discrete_bsre_residuals(&sol, &model, &batch).unwrap());
            assert!(r < 0.75 * prev, "N={n}: {r} vs {prev}");
            prev = r;
        }
    }

    #[test]
    fn closed_form_counterexample_properties() {
        let grid = make_grid(1.0, 256).unwrap();
        let batch = sample_brownian(&grid, 1000, 2, false).unwrap();
        let sol = closed_form_counterexample(&grid, &batch).unwrap();
        let model = scenario_counterexample(1.0).unwrap();
        assert!(sol.terminal_error(&model, Some(&batch)) < 1e-15);
        for p in 0..batch.n_paths() {
            let cp = CounterexamplePath::compute(&grid, batch.path(p));
            for i in cp.tau_index..=256 {
                assert_eq!(sol.lambda.scalar(i, p), 0.0);
            }
        }
    }

    #[test]
    fn closed_form_counterexample_bsre_defect_shrinks() {
        let model = scenario_counterexample(1.0).unwrap();
        let mut prev = f64::INFINITY;
        for n in [64usize, 256, 1024] {
            let grid = make_grid(1.0, n).unwrap();
            let batch = sample_brownian(&grid, 2000, 8, false).unwrap();
            let sol = closed_form_counterexample(&grid, &batch).unwrap();
            let res = discrete_bsre_residuals(&sol, &model, &batch).unwrap();
            // median: a few late-stopping paths dominate the mean
            let mut sorted = res.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = sorted[sorted.len() / 2];
            assert!(med < prev, "N={n}: {med} vs {prev}");
            prev = med;
        }
    }

    #[test]
    fn regression_reproduces_constant_terminal() {
        // B = C = Q = D = 0: zero driver, P ≡ G
        let model = scenario_deterministic(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.7, 1.0).unwrap();
        let grid = make_grid(1.0, 16).unwrap();
        let batch = sample_brownian(&grid, 500, 1, false).unwrap();
        let sol = solve_bsre_regression(&model, &grid, &batch, BasisConfig::default()).unwrap();
        assert!(sol.p.values().iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(sol.lambda.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn regression_needs_enough_paths() {
        let model = scenario_example1(1.0).unwrap();
        let grid = make_grid(1.0, 8).unwrap();
        let batch = sample_brownian(&grid, 3, 1, false).unwrap();
        assert!(matches!(
            solve_bsre_regression(&model, &grid, &batch, BasisConfig::default()),
            Err(SlqError::RegressionSingular { .. })
        ));
    }

    #[test]
    fn regression_driver_clamp() {
        // K = r + P = 0 − 1 + ... with g < 0 and r = 0: K < clamp while L ≠ 0
        let model = scenario_deterministic(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -0.5, 1.0).unwrap();
        let grid = make_grid(1.0, 8).unwrap();
        let mut batch_model = model.clone();
        batch_model.g = problem::Terminal::Path(std::sync::Arc::new(|_, w: &[f64]| {
            DMatrix::from_element(1, 1, -0.5 + 0.1 * w.last().unwrap())
        }));
        batch_model.kind = problem::ModelKind::MarkovInW;
        let batch = sample_brownian(&grid, 200, 1, false).unwrap();
        assert!(matches!(
            solve_bsre_regression(&batch_model, &grid, &batch, BasisConfig::default()),
            Err(SlqError::DriverSingular { .. })
        ));
    }

    #[test]
    fn regression_example1_matches_closed_form_at_moderate_size() {
        let model = scenario_example1(1.0).unwrap();
        let grid = make_grid(1.0, 64).unwrap();
        let batch = sample_brownian(&grid, 10_000, 21, true).unwrap();
        let sol = solve_bsre_regression(&model, &grid, &batch, BasisConfig::default()).unwrap();
        let p0 = sol.p.scalar(0, 0);
        assert!((p0 - 0.275).abs() / 0.275 < 0.02, "P0 = {p0}");
        assert!(sol.p.values().iter().all(|v| (0.125 - 0.02..=0.875 + 0.02).contains(v)));
    }
}
