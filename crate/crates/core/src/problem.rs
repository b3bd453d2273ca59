//! Coefficient processes of the controlled SDE
//!
//! ```text
//! dx = (A x + B u) dt + (C x + D u) dW,   x(s) = η
//! J  = ½ E[ ∫ (⟨Qx,x⟩ + ⟨Ru,u⟩) dt + ⟨G x(T), x(T)⟩ ]
//! ```
//!
//! and the built-in scenarios. Adaptedness is enforced by the evaluator
//! signature: a running coefficient at index `i` only ever receives the
//! prefix `W_0..=W_i` of its path.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, SQRT_2};
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Result, SlqError};
use crate::grid::{BrownianBatch, TimeGrid};
use crate::pinv;

/// `(grid, i, W_0..=W_i) ↦ value at t_i`.
pub type AdaptedFn = Arc<dyn Fn(&TimeGrid, usize, &[f64]) -> DMatrix<f64> + Send + Sync>;
/// `t ↦ value`, for deterministic time-varying data.
pub type TimeFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
/// `(grid, W_0..=W_N) ↦ G`.
pub type TerminalFn = Arc<dyn Fn(&TimeGrid, &[f64]) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
pub enum Coefficient {
    Constant(DMatrix<f64>),
    Time(TimeFn),
    Adapted(AdaptedFn),
}

impl Coefficient {
    pub fn scalar(v: f64) -> Self {
        Coefficient::Constant(DMatrix::from_element(1, 1, v))
    }

    pub fn eval<'a>(&'a self, grid: &TimeGrid, i: usize, prefix: &[f64]) -> Cow<'a, DMatrix<f64>> {
        debug_assert_eq!(prefix.len(), i + 1);
        match self {
            Coefficient::Constant(m) => Cow::Borrowed(m),
            Coefficient::Time(f) => Cow::Owned(f(grid.time(i))),
            Coefficient::Adapted(f) => Cow::Owned(f(grid, i, prefix)),
        }
    }

    /// Value at an arbitrary time; `None` for random coefficients.
    pub fn at_time(&self, t: f64) -> Option<Cow<'_, DMatrix<f64>>> {
        match self {
            Coefficient::Constant(m) => Some(Cow::Borrowed(m)),
            Coefficient::Time(f) => Some(Cow::Owned(f(t))),
            Coefficient::Adapted(_) => None,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Coefficient::Adapted(_))
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(m) => write!(f, "Constant({:?})", m.as_slice()),
            Coefficient::Time(_) => write!(f, "Time(..)"),
            Coefficient::Adapted(_) => write!(f, "Adapted(..)"),
        }
    }
}

#[derive(Clone)]
pub enum Terminal {
    Constant(DMatrix<f64>),
    Path(TerminalFn),
}

impl Terminal {
    pub fn eval<'a>(&'a self, grid: &TimeGrid, path: &[f64]) -> Cow<'a, DMatrix<f64>> {
        match self {
            Terminal::Constant(m) => Cow::Borrowed(m),
            Terminal::Path(f) => Cow::Owned(f(grid, path)),
        }
    }

    pub fn constant(&self) -> Option<&DMatrix<f64>> {
        match self {
            Terminal::Constant(m) => Some(m),
            Terminal::Path(_) => None,
        }
    }
}

impl fmt::Debug for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Terminal::Constant(m) => write!(f, "Constant({:?})", m.as_slice()),
            Terminal::Path(_) => write!(f, "Path(..)"),
        }
    }
}

/// Adapted process evaluated along a whole path (one value per grid point).
pub type FactorFn = Arc<dyn Fn(&TimeGrid, &[f64]) -> Vec<f64> + Send + Sync>;

/// Component of a Markov state for the data. When a model declares
/// factors, regression bases are built on them instead of on `W_t`.
#[derive(Clone)]
pub struct MarkovFactor {
    pub name: String,
    pub values: FactorFn,
    /// Largest power of this factor in a regression basis, if limited.
    pub max_power: Option<usize>,
}

impl fmt::Debug for MarkovFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MarkovFactor({})", self.name)
    }
}

/// How the data depends on the Brownian path.
///
/// `Deterministic`: every coefficient and `G` are deterministic.
/// `MarkovInW`: running coefficients are functions of `(t, W_t)`; `G` may be
/// any functional of the path. `PathDependent`: anything adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Deterministic,
    MarkovInW,
    PathDependent,
}

#[derive(Clone, Debug)]
pub struct CoefficientModel {
    pub name: String,
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
    pub a: Coefficient,
    pub b: Coefficient,
    pub c: Coefficient,
    pub d: Coefficient,
    pub q: Coefficient,
    pub r: Coefficient,
    pub g: Terminal,
    pub kind: ModelKind,
    /// Horizon the data was built for, when it depends on `T`.
    pub horizon: Option<f64>,
    pub factors: Vec<MarkovFactor>,
}

/// Coefficients evaluated at one `(i, p)`.
pub struct CoefficientsAt<'a> {
    pub a: Cow<'a, DMatrix<f64>>,
    pub b: Cow<'a, DMatrix<f64>>,
    pub c: Cow<'a, DMatrix<f64>>,
    pub d: Cow<'a, DMatrix<f64>>,
    pub q: Cow<'a, DMatrix<f64>>,
    pub r: Cow<'a, DMatrix<f64>>,
}

impl CoefficientModel {
    /// Constant-coefficient model from explicit matrices.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        name: &str,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        g: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        let expect = [
            ("A", &a, (n, n)),
            ("B", &b, (n, m)),
            ("C", &c, (n, n)),
            ("D", &d, (n, m)),
            ("Q", &q, (n, n)),
            ("R", &r, (m, m)),
            ("G", &g, (n, n)),
        ];
        for (label, mat, shape) in expect {
            if mat.shape() != shape {
                return Err(SlqError::invalid(format!(
                    "{label} has shape {:?}, expected {:?}",
                    mat.shape(),
                    shape
                )));
            }
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(SlqError::invalid(format!("{label} has non-finite entries")));
            }
        }
        Ok(Self {
            name: name.to_string(),
            n,
            m,
            a: Coefficient::Constant(a),
            b: Coefficient::Constant(b),
            c: Coefficient::Constant(c),
            d: Coefficient::Constant(d),
            q: Coefficient::Constant(q),
            r: Coefficient::Constant(r),
            g: Terminal::Constant(g),
            kind: ModelKind::Deterministic,
            horizon: None,
            factors: Vec::new(),
        })
    }

    pub fn at<'a>(&'a self, grid: &TimeGrid, i: usize, prefix: &[f64]) -> CoefficientsAt<'a> {
        CoefficientsAt {
            a: self.a.eval(grid, i, prefix),
            b: self.b.eval(grid, i, prefix),
            c: self.c.eval(grid, i, prefix),
            d: self.d.eval(grid, i, prefix),
            q: self.q.eval(grid, i, prefix),
            r: self.r.eval(grid, i, prefix),
        }
    }

    pub fn terminal<'a>(&'a self, grid: &TimeGrid, path: &[f64]) -> Cow<'a, DMatrix<f64>> {
        self.g.eval(grid, path)
    }

    pub fn is_deterministic(&self) -> bool {
        self.kind == ModelKind::Deterministic
            && [&self.a, &self.b, &self.c, &self.d, &self.q, &self.r]
                .iter()
                .all(|c| c.is_deterministic())
            && self.g.constant().is_some()
    }

    /// Fails unless the grid matches the horizon the data was built for.
    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if let Some(h) = self.horizon {
            if (h - grid.horizon()).abs() > 1e-12 * h.max(1.0) {
                return Err(SlqError::invalid(format!(
                    "model `{}` was built for T = {h}, grid has T = {}",
                    self.name,
                    grid.horizon()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// validation

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub max_asymmetry_q: f64,
    pub max_asymmetry_r: f64,
    pub max_asymmetry_g: f64,
    /// Largest `|entry|` seen per coefficient name.
    pub max_abs: BTreeMap<String, f64>,
    /// Sample maximum over paths of `Σ_i h·‖C_i‖²_F`.
    pub max_int_c_sq: f64,
    /// Sample maximum over paths of `Σ_i h·‖B_i‖²_F`.
    pub max_int_b_sq: f64,
    /// Smallest and largest eigenvalue of the sampled `G`.
    pub g_min_eig: f64,
    pub g_max_eig: f64,
    pub all_finite: bool,
    pub tol: f64,
    pub pass: bool,
}

fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        1 => m[(0, 0)],
        _ => m
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Samples every coefficient on every path of `batch` and reports the grid
/// surrogates of the integrability conditions together with symmetry of
/// `Q`, `R`, `G`.
pub fn validate(model: &CoefficientModel, batch: &BrownianBatch, tol: f64) -> Result<ValidationReport> {
    let grid = batch.grid();
    model.check_grid(grid)?;
    let (n, m) = (model.n, model.m);
    let h = grid.step();
    let names = ["A", "B", "C", "D", "Q", "R", "G"];
    let shapes = [(n, n), (n, m), (n, n), (n, m), (n, n), (m, m), (n, n)];
    let mut max_abs: BTreeMap<String, f64> = names.iter().map(|k| (k.to_string(), 0.0)).collect();
    let mut asym = [0.0f64; 3];
    let mut all_finite = true;
    let (mut max_c, mut max_b) = (0.0f64, 0.0f64);
    let (mut g_min, mut g_max) = (f64::INFINITY, f64::NEG_INFINITY);

    let mut record = |k: usize, mat: &DMatrix<f64>, i: usize, p: usize| -> Result<()> {
        if mat.shape() != shapes[k] {
            return Err(SlqError::invalid(format!(
                "{} evaluates to shape {:?} at (i={i}, path={p}), expected {:?}",
                names[k],
                mat.shape(),
                shapes[k]
            )));
        }
        if mat.iter().any(|v| !v.is_finite()) {
            all_finite = false;
        }
        let e = max_abs.get_mut(names[k]).unwrap();
        *e = e.max(mat.amax());
        Ok(())
    };

    for p in 0..batch.n_paths() {
        let (mut int_c, mut int_b) = (0.0, 0.0);
        for i in 0..grid.steps() {
            let at = model.at(grid, i, batch.prefix(p, i));
            for (k, mat) in [&at.a, &at.b, &at.c, &at.d, &at.q, &at.r].into_iter().enumerate() {
                record(k, mat, i, p)?;
            }
            asym[0] = asym[0].max(pinv::asymmetry(&at.q));
            asym[1] = asym[1].max(pinv::asymmetry(&at.r));
            int_c += h * at.c.norm_squared();
            int_b += h * at.b.norm_squared();
        }
        max_c = max_c.max(int_c);
        max_b = max_b.max(int_b);
        let g = model.terminal(grid, batch.path(p));
        record(6, &g, grid.steps(), p)?;
        let ga = pinv::asymmetry(&g);
        asym[2] = asym[2].max(ga);
        if g.iter().all(|v| v.is_finite()) {
            let gs = (&*g + g.transpose()) * 0.5;
            g_min = g_min.min(pinv::min_eigenvalue(&gs));
            g_max = g_max.max(max_eigenvalue(&gs));
        }
    }

    let pass = all_finite && asym.iter().all(|a| *a <= tol);
    Ok(ValidationReport {
        max_asymmetry_q: asym[0],
        max_asymmetry_r: asym[1],
        max_asymmetry_g: asym[2],
        max_abs,
        max_int_c_sq: max_c,
        max_int_b_sq: max_b,
        g_min_eig: g_min,
        g_max_eig: g_max,
        all_finite,
        tol,
        pass,
    })
}

// ---------------------------------------------------------------------------
// scenarios

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Constant scalar model.
#[allow(clippy::too_many_arguments)]
pub fn scenario_deterministic(a: f64, b: f64, c: f64, d: f64, q: f64, r: f64, g: f64, horizon: f64) -> Result<CoefficientModel> {
    if !(horizon > 0.0) {
        return Err(SlqError::invalid(format!("horizon must be positive, got {horizon}")));
    }
    let mut model = CoefficientModel::constant(
        "deterministic",
        scalar(a),
        scalar(b),
        scalar(c),
        scalar(d),
        scalar(q),
        scalar(r),
        scalar(g),
    )?;
    model.horizon = Some(horizon);
    Ok(model)
}

/// Running trapezoid of `sin W` over the path: entry `i` is `∫_0^{t_i} sin W ds`.
fn trapezoid_sin(h: f64, w: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.len());
    out.push(0.0);
    let mut acc = 0.0;
    for k in 1..w.len() {
        acc += 0.5 * h * (w[k - 1].sin() + w[k].sin());
        out.push(acc);
    }
    out
}

/// Weight `R = 1/(2(3+T))` of the solvable example.
pub fn example1_weight(horizon: f64) -> f64 {
    1.0 / (2.0 * (3.0 + horizon))
}

/// `y_i = 2 + T/2 + sin W_i + ½∫_0^{t_i} sin W ds` along a path prefix
/// (trapezoid rule); `ξ` is the last entry of the full path.
pub fn example1_y(grid: &TimeGrid, w: &[f64]) -> Vec<f64> {
    let t = grid.horizon();
    let integral = trapezoid_sin(grid.step(), w);
    w.iter()
        .zip(integral)
        .map(|(wi, int)| 2.0 + 0.5 * t + wi.sin() + 0.5 * int)
        .collect()
}

/// Solvable example: `n = m = 1`, `A = B = C = Q = 0`, `D = 1`,
/// `R = 1/(2(3+T))`, `G = ξ⁻¹ − R`.
pub fn scenario_example1(horizon: f64) -> Result<CoefficientModel> {
    if !(horizon > 0.0) {
        return Err(SlqError::invalid(format!("horizon must be positive, got {horizon}")));
    }
    let r = example1_weight(horizon);
    let g: TerminalFn = Arc::new(move |grid: &TimeGrid, w: &[f64]| {
        let xi = *example1_y(grid, w).last().unwrap();
        scalar(1.0 / xi - r)
    });
    Ok(CoefficientModel {
        name: "example1".into(),
        n: 1,
        m: 1,
        a: Coefficient::scalar(0.0),
        b: Coefficient::scalar(0.0),
        c: Coefficient::scalar(0.0),
        d: Coefficient::scalar(1.0),
        q: Coefficient::scalar(0.0),
        r: Coefficient::scalar(r),
        g: Terminal::Path(g),
        kind: ModelKind::MarkovInW,
        horizon: Some(horizon),
        // (sin W, cos W, ∫sin W) carries (W mod 2π, ∫sin W), a Markov state
        factors: vec![
            MarkovFactor {
                name: "sin_w".into(),
                values: Arc::new(|_: &TimeGrid, w: &[f64]| w.iter().map(|x| x.sin()).collect()),
                max_power: None,
            },
            MarkovFactor {
                name: "cos_w".into(),
                values: Arc::new(|_: &TimeGrid, w: &[f64]| w.iter().map(|x| x.cos()).collect()),
                // cos² = 1 − sin² would make the basis dependent
                max_power: Some(1),
            },
            MarkovFactor {
                name: "int_sin_w".into(),
                values: Arc::new(|grid: &TimeGrid, w: &[f64]| trapezoid_sin(grid.step(), w)),
                max_power: None,
            },
        ],
    })
}

/// `π/(2√2)`, the bound on the stopped stochastic integral.
pub const ZETA_SCALE: f64 = FRAC_PI_2 / SQRT_2;

/// Control weight of the counterexample.
pub const COUNTEREXAMPLE_R: f64 = 0.25;

/// Auxiliary processes of the counterexample along one path.
#[derive(Clone, Debug)]
pub struct CounterexamplePath {
    /// `M_i = Σ_{j<i} ΔW_j / √(T − t_j)`, `i = 0..=N`.
    pub m: Vec<f64>,
    /// Index of the stopping time: first `i < N` with `|M_i| > 1`, else `N`.
    pub tau_index: usize,
    /// `ζ_i` for `i = 0..N` (no value at `t_N`).
    pub zeta: Vec<f64>,
    /// `Y_i = 1 + π/(2√2) + Σ_{j<i} ζ_j ΔW_j`, `i = 0..=N`.
    pub y: Vec<f64>,
}

impl CounterexamplePath {
    /// `ζ_i` is active while the path has not yet stopped (`i < tau_index`),
    /// so `Σ ζ ΔW = π/(2√2)·M_τ` holds exactly on the grid.
    pub fn compute(grid: &TimeGrid, w: &[f64]) -> Self {
        let n = grid.steps();
        let t = grid.horizon();
        let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / (t - grid.time(i)).sqrt()).collect();
        let mut m = Vec::with_capacity(n + 1);
        m.push(0.0);
        for i in 0..n {
            m.push(m[i] + (w[i + 1] - w[i]) * inv_sqrt[i]);
        }
        let tau_index = (0..n).find(|&i| m[i].abs() > 1.0).unwrap_or(n);
        let zeta: Vec<f64> = (0..n)
            .map(|i| if i < tau_index { ZETA_SCALE * inv_sqrt[i] } else { 0.0 })
            .collect();
        let mut y = Vec::with_capacity(n + 1);
        y.push(1.0 + ZETA_SCALE);
        for i in 0..n {
            y.push(y[i] + zeta[i] * (w[i + 1] - w[i]));
        }
        Self { m, tau_index, zeta, y }
    }

    pub fn tau(&self, grid: &TimeGrid) -> f64 {
        grid.time(self.tau_index)
    }

    /// `Σ_i ζ_i ΔW_i = Y_N − 1 − π/(2√2)`.
    pub fn stochastic_integral(&self) -> f64 {
        self.y.last().unwrap() - 1.0 - ZETA_SCALE
    }

    /// `Σ_i ζ_i² h`.
    pub fn zeta_sq_integral(&self, grid: &TimeGrid) -> f64 {
        self.zeta.iter().map(|z| z * z).sum::<f64>() * grid.step()
    }
}

/// Counterexample: `n = m = 1`, `A = B = C = Q = 0`, `D = 1`, `R = 1/4`,
/// `G = Y_N⁻¹ − 1/4`.
pub fn scenario_counterexample(horizon: f64) -> Result<CoefficientModel> {
    if !(horizon > 0.0) {
        return Err(SlqError::invalid(format!("horizon must be positive, got {horizon}")));
    }
    let g: TerminalFn = Arc::new(|grid: &TimeGrid, w: &[f64]| {
        let path = CounterexamplePath::compute(grid, w);
        scalar(1.0 / path.y.last().unwrap() - COUNTEREXAMPLE_R)
    });
    Ok(CoefficientModel {
        name: "counterexample".into(),
        n: 1,
        m: 1,
        a: Coefficient::scalar(0.0),
        b: Coefficient::scalar(0.0),
        c: Coefficient::scalar(0.0),
        d: Coefficient::scalar(1.0),
        q: Coefficient::scalar(0.0),
        r: Coefficient::scalar(COUNTEREXAMPLE_R),
        g: Terminal::Path(g),
        kind: ModelKind::MarkovInW,
        horizon: Some(horizon),
        factors: vec![MarkovFactor {
            name: "stopped_m".into(),
            values: Arc::new(|grid: &TimeGrid, w: &[f64]| {
                let path = CounterexamplePath::compute(grid, w);
                let stop = path.tau_index;
                (0..w.len()).map(|i| path.m[i.min(stop)]).collect()
            }),
            max_power: None,
        }],
    })
}

/// Slack on the counterexample's continuous-time bounds: `3·h^0.4`.
pub fn delta_grid(grid: &TimeGrid) -> f64 {
    3.0 * grid.step().powf(0.4)
}
