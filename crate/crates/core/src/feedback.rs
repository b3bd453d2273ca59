//! Feedback synthesis `Θ = −K†L + (I − K†K)θ` and regularity diagnostics.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Result, SlqError};
use crate::grid::{BrownianBatch, PathArray, TimeGrid};
use crate::pinv;
use crate::problem::CoefficientModel;
use crate::riccati::{RiccatiSolution, SolverTag};

/// Offending sample points listed in a synthesis error.
pub const MAX_LISTED: usize = 100;

/// Pointwise statistics gathered while synthesizing.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SynthesisStats {
    pub n_points: usize,
    /// Largest `‖(I − KK†)L‖_F`.
    pub max_range_residual: f64,
    pub min_k_eigenvalue: f64,
    /// Points where `K` is singular, so `θ` enters `Θ`.
    pub n_singular_k: usize,
}

#[derive(Clone, Debug)]
pub struct FeedbackLaw {
    /// `m×n` gains over `(i, p)`.
    pub theta: PathArray,
    /// The free parameter `θ`; `None` means zero.
    pub theta_free: Option<PathArray>,
    pub source: SolverTag,
    pub stats: SynthesisStats,
}

impl FeedbackLaw {
    pub fn n_paths(&self) -> usize {
        self.theta.n_paths()
    }
}

struct Violations {
    range: usize,
    psd: usize,
    points: usize,
    listed: Vec<(f64, usize)>,
}

impl Violations {
    fn push(&mut self, t: f64, p: usize) {
        self.points += 1;
        if self.listed.len() < MAX_LISTED {
            self.listed.push((t, p));
        }
    }
}

/// Synthesizes `Θ` at every `(i, p)`, checking positivity of `K` and
/// `R(L) ⊆ R(K)` with tolerance `tol`. Any failure is reported with the
/// offending `(t, path)` pairs.
pub fn synthesize(
    sol: &RiccatiSolution,
    model: &CoefficientModel,
    theta_free: Option<&PathArray>,
    tol: f64,
) -> Result<FeedbackLaw> {
    let (m, n) = (model.m, model.n);
    if sol.k.shape() != (m, m) || sol.l.shape() != (m, n) {
        return Err(SlqError::invalid(format!(
            "solution has K {:?}, L {:?}; model needs ({m}, {m}) and ({m}, {n})",
            sol.k.shape(),
            sol.l.shape()
        )));
    }
    let n_paths = sol.n_paths();
    let n_pts = sol.grid.n_points();
    if let Some(tf) = theta_free {
        if tf.shape() != (m, n) || tf.n_times() != n_pts || (tf.n_paths() != n_paths && tf.n_paths() != 1) {
            return Err(SlqError::invalid("theta_free does not match the solution layout"));
        }
    }
    let mut theta = PathArray::zeros(n_pts, n_paths, m, n);
    let mut stats = SynthesisStats {
        min_k_eigenvalue: f64::INFINITY,
        ..Default::default()
    };
    let mut bad = Violations {
        range: 0,
        psd: 0,
        points: 0,
        listed: Vec::new(),
    };
    let scalar = m == 1 && n == 1;

    for i in 0..n_pts {
        let t = sol.grid.time(i);
        for p in 0..n_paths {
            stats.n_points += 1;
            if scalar {
                let k = sol.k.scalar(i, p);
                let l = sol.l.scalar(i, p);
                let free = theta_free.map_or(0.0, |tf| tf.scalar(i, p));
                let k_pinv = pinv::pinv(&DMatrix::from_element(1, 1, k), None)?.pinv[0];
                let resid = ((1.0 - k * k_pinv) * l).abs();
                let (psd_bad, range_bad) = (k < -tol, resid > tol * (1.0 + l.abs()));
                stats.max_range_residual = stats.max_range_residual.max(resid);
                stats.min_k_eigenvalue = stats.min_k_eigenvalue.min(k);
                if k_pinv == 0.0 {
                    stats.n_singular_k += 1;
                }
                if psd_bad || range_bad {
                    bad.psd += psd_bad as usize;
                    bad.range += range_bad as usize;
                    bad.push(t, p);
                    continue;
                }
                // full rank: I − K†K is exactly zero
                let proj = if k_pinv == 0.0 { 1.0 } else { 0.0 };
                theta.set_scalar(i, p, -k_pinv * l + proj * free);
                continue;
            }
            let k = pinv::symmetrized(&sol.k.matrix(i, p), tol.max(1e-12))?;
            let l = sol.l.matrix(i, p);
            let res = pinv::pinv(&k, None)?;
            let min_eig = pinv::min_eigenvalue(&k);
            let resid = pinv::range_residual(&k, &res.pinv, &l);
            let (psd_bad, range_bad) = (min_eig < -tol, resid > tol * (1.0 + l.norm()));
            stats.max_range_residual = stats.max_range_residual.max(resid);
            stats.min_k_eigenvalue = stats.min_k_eigenvalue.min(min_eig);
            if res.rank < m {
                stats.n_singular_k += 1;
            }
            if psd_bad || range_bad {
                bad.psd += psd_bad as usize;
                bad.range += range_bad as usize;
                bad.push(t, p);
                continue;
            }
            let mut th = -(&res.pinv * &l);
            if let (Some(tf), true) = (theta_free, res.rank < m) {
                th += (DMatrix::identity(m, m) - &res.pinv * &k) * tf.get(i, p);
            }
            theta.set(i, p, &th);
        }
    }

    if bad.range + bad.psd > 0 {
        let tag = match (bad.range > 0, bad.psd > 0) {
            (true, true) => "range-inclusion+psd",
            (true, false) => "range-inclusion",
            _ => "psd",
        };
        return Err(SlqError::SynthesisInfeasible {
            tag: tag.to_string(),
            count: bad.points,
            listed: bad.listed,
        });
    }
    Ok(FeedbackLaw {
        theta,
        theta_free: theta_free.cloned(),
        source: sol.solver,
        stats,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RegularityReport {
    /// Per path, `Σ_{i<N} ‖Θ_i‖_F²·h`.
    #[serde(skip)]
    pub pathwise_sqnorm: Vec<f64>,
    pub n_paths: usize,
    pub max: f64,
    pub mean: f64,
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
    pub bound_threshold: f64,
    pub qualified: bool,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Left-point grid surrogate of `∫₀ᵀ|Θ|²dt` on every path, with
/// `qualified = (max ≤ bound_threshold)`.
pub fn regularity_diagnostics(law: &FeedbackLaw, grid: &TimeGrid, bound_threshold: f64) -> RegularityReport {
    let h = grid.step();
    let n_paths = law.n_paths();
    let mut sq = vec![0.0; n_paths];
    for i in 0..grid.steps() {
        let (rows, cols) = law.theta.shape();
        let block = rows * cols;
        let slice = law.theta.slice(i);
        for (p, acc) in sq.iter_mut().enumerate() {
            *acc += slice[p * block..(p + 1) * block].iter().map(|v| v * v).sum::<f64>() * h;
        }
    }
    let mut sorted = sq.clone();
    sorted.sort_by(f64::total_cmp);
    let max = sorted.last().copied().unwrap_or(0.0);
    RegularityReport {
        n_paths,
        max,
        mean: crate::grid::pairwise_sum(&sq) / n_paths as f64,
        q50: quantile(&sorted, 0.5),
        q90: quantile(&sorted, 0.9),
        q99: quantile(&sorted, 0.99),
        bound_threshold,
        qualified: max <= bound_threshold,
        pathwise_sqnorm: sq,
    }
}

/// Threshold calibrated on a coarse run: ten times its median.
pub fn calibrated_threshold(coarse: &RegularityReport) -> f64 {
    10.0 * coarse.q50
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StationarityReport {
    /// `max ‖L + KΘ‖_F`.
    pub max_residual: f64,
    /// `max ‖BᵀP + DᵀΠ + RΘ‖_F` with `Π = Λ + P(C + DΘ)`.
    pub max_adjoint_residual: f64,
}

/// Both forms of the stationarity condition. `batch` supplies the path
/// prefixes for random coefficients; `None` evaluates with `W ≡ 0`, which is
/// exact for deterministic data.
pub fn stationarity_residual(
    law: &FeedbackLaw,
    sol: &RiccatiSolution,
    model: &CoefficientModel,
    batch: Option<&BrownianBatch>,
) -> StationarityReport {
    let grid = &sol.grid;
    let n_paths = law.n_paths().max(sol.n_paths());
    let zeros = vec![0.0; grid.n_points()];
    let mut out = StationarityReport {
        max_residual: 0.0,
        max_adjoint_residual: 0.0,
    };
    let scalar = model.n == 1 && model.m == 1;
    for p in 0..n_paths {
        for i in 0..grid.n_points() {
            if scalar {
                let th = law.theta.scalar(i, p);
                let r1 = (sol.l.scalar(i, p) + sol.k.scalar(i, p) * th).abs();
                out.max_residual = out.max_residual.max(r1);
            } else {
                let th = law.theta.get(i, p);
                let r1 = (sol.l.get(i, p) + sol.k.get(i, p) * th).norm();
                out.max_residual = out.max_residual.max(r1);
            }
            let prefix = match batch {
                Some(b) => b.prefix(p, i),
                None => &zeros[..=i],
            };
            let at = model.at(grid, i, prefix);
            let pm = sol.p.get(i, p);
            let th = law.theta.get(i, p);
            let pi = sol.lambda.get(i, p) + pm * (&*at.c + &*at.d * th);
            let r2 = at.b.transpose() * pm + at.d.transpose() * pi + &*at.r * th;
            out.max_adjoint_residual = out.max_adjoint_residual.max(r2.norm());
        }
    }
    out
}
