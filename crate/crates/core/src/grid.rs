//! Time discretization, Brownian path generation and the path-indexed array
//! type shared by every other module.
//!
//! Paths are generated from per-path ChaCha8 streams keyed by `(seed, path)`,
//! so a path's increments never depend on how many other paths were drawn or
//! in which order. Refining a grid draws fresh increments: batches on nested
//! grids are *not* nested in the Brownian sense.

use nalgebra::{DMatrix, DMatrixView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Result, SlqError};

/// Uniform grid `t_i = i·h` on `[0, T]` with `t_N = T` set exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    step: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SlqError::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(SlqError::invalid(format!("grid needs at least 2 steps, got {steps}")));
        }
        Ok(Self {
            horizon,
            steps,
            step: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of intervals `N`; there are `N + 1` points.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn n_points(&self) -> usize {
        self.steps + 1
    }

    pub fn time(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.step
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

/// Shorthand for [`TimeGrid::new`].
pub fn make_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

/// Raw `N(0, h)` increments of one path. With `antithetic`, odd paths are
/// the exact negation of their even partner.
pub fn path_increments(grid: &TimeGrid, seed: u64, path: usize, antithetic: bool) -> Vec<f64> {
    let (stream, sign) = if antithetic {
        ((path / 2) as u64, if path % 2 == 1 { -1.0 } else { 1.0 })
    } else {
        (path as u64, 1.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let sd = grid.step().sqrt();
    (0..grid.steps())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sign * sd * z
        })
        .collect()
}

/// Cumulates increments into `W_0 = 0, ..., W_N` and rewrites the increments
/// as `W_{i+1} - W_i` so the two arrays agree to the last bit.
fn cumulate(increments: &mut [f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(increments.len() + 1);
    w.push(0.0);
    let mut acc = 0.0;
    for dw in increments.iter() {
        acc += *dw;
        w.push(acc);
    }
    for (i, dw) in increments.iter_mut().enumerate() {
        *dw = w[i + 1] - w[i];
    }
    w
}

/// One Brownian path on a grid: cumulative values and increments.
#[derive(Clone, Debug)]
pub struct BrownianPath {
    pub w: Vec<f64>,
    pub dw: Vec<f64>,
}

impl BrownianPath {
    pub fn generate(grid: &TimeGrid, seed: u64, path: usize, antithetic: bool) -> Self {
        let mut dw = path_increments(grid, seed, path, antithetic);
        let w = cumulate(&mut dw);
        Self { w, dw }
    }
}

/// A seeded batch of Brownian paths, stored path-major so that the prefix
/// `W_{0..=i}` of a path is a contiguous slice.
#[derive(Clone, Debug)]
pub struct BrownianBatch {
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
    w: Vec<f64>,
    dw: Vec<f64>,
}

impl BrownianBatch {
    pub fn sample(grid: &TimeGrid, n_paths: usize, seed: u64, antithetic: bool) -> Result<Self> {
        if n_paths == 0 {
            return Err(SlqError::invalid("n_paths must be at least 1"));
        }
        if antithetic && n_paths % 2 == 1 {
            return Err(SlqError::invalid(format!(
                "antithetic sampling needs an even number of paths, got {n_paths}"
            )));
        }
        let paths: Vec<BrownianPath> = (0..n_paths)
            .into_par_iter()
            .map(|p| BrownianPath::generate(grid, seed, p, antithetic))
            .collect();
        let mut w = Vec::with_capacity(n_paths * grid.n_points());
        let mut dw = Vec::with_capacity(n_paths * grid.steps());
        for path in paths {
            w.extend_from_slice(&path.w);
            dw.extend_from_slice(&path.dw);
        }
        Ok(Self {
            grid: grid.clone(),
            n_paths,
            seed,
            antithetic,
            w,
            dw,
        })
    }

    /// Builds a batch from explicit increments, one `Vec` of length `N` per
    /// path. Used to force specific paths such as `W ≡ 0`.
    pub fn from_increments(grid: &TimeGrid, increments: Vec<Vec<f64>>) -> Result<Self> {
        if increments.is_empty() {
            return Err(SlqError::invalid("at least one path is required"));
        }
        let n_paths = increments.len();
        let mut w = Vec::with_capacity(n_paths * grid.n_points());
        let mut dw = Vec::with_capacity(n_paths * grid.steps());
        for mut inc in increments {
            if inc.len() != grid.steps() {
                return Err(SlqError::invalid(format!(
                    "path has {} increments, grid has {} steps",
                    inc.len(),
                    grid.steps()
                )));
            }
            if inc.iter().any(|x| !x.is_finite()) {
                return Err(SlqError::invalid("non-finite Brownian increment"));
            }
            w.extend(cumulate(&mut inc));
            dw.extend(inc);
        }
        Ok(Self {
            grid: grid.clone(),
            n_paths,
            seed: 0,
            antithetic: false,
            w,
            dw,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn antithetic(&self) -> bool {
        self.antithetic
    }

    /// Full path `W_0..=W_N`.
    pub fn path(&self, p: usize) -> &[f64] {
        let np = self.grid.n_points();
        &self.w[p * np..(p + 1) * np]
    }

    /// Prefix `W_0..=W_i`, the only information an adapted evaluator at
    /// index `i` may see.
    pub fn prefix(&self, p: usize, i: usize) -> &[f64] {
        &self.path(p)[..=i]
    }

    pub fn increments(&self, p: usize) -> &[f64] {
        let n = self.grid.steps();
        &self.dw[p * n..(p + 1) * n]
    }

    pub fn w(&self, i: usize, p: usize) -> f64 {
        self.path(p)[i]
    }

    pub fn dw(&self, i: usize, p: usize) -> f64 {
        self.increments(p)[i]
    }

    /// Terminal values `W_N` of all paths.
    pub fn terminal_values(&self) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.w(self.grid.steps(), p)).collect()
    }
}

/// Convenience wrapper for [`BrownianBatch::sample`].
pub fn sample_brownian(
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<BrownianBatch> {
    BrownianBatch::sample(grid, n_paths, seed, antithetic)
}

/// Matrices of a fixed shape indexed by `(time index, path)`.
///
/// Storage is time-major with each entry in column-major order. An array
/// with a single path broadcasts over any path index, which is how
/// deterministic solutions are consumed by pathwise code.
#[derive(Clone, Debug, PartialEq)]
pub struct PathArray {
    n_times: usize,
    n_paths: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl PathArray {
    pub fn zeros(n_times: usize, n_paths: usize, rows: usize, cols: usize) -> Self {
        Self {
            n_times,
            n_paths,
            rows,
            cols,
            values: vec![0.0; n_times * n_paths * rows * cols],
        }
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn offset(&self, i: usize, p: usize) -> usize {
        let p = if self.n_paths == 1 { 0 } else { p };
        debug_assert!(i < self.n_times && p < self.n_paths);
        (i * self.n_paths + p) * self.rows * self.cols
    }

    pub fn get(&self, i: usize, p: usize) -> DMatrixView<'_, f64> {
        let o = self.offset(i, p);
        DMatrixView::from_slice(&self.values[o..o + self.rows * self.cols], self.rows, self.cols)
    }

    pub fn matrix(&self, i: usize, p: usize) -> DMatrix<f64> {
        self.get(i, p).into_owned()
    }

    pub fn set(&mut self, i: usize, p: usize, m: &DMatrix<f64>) {
        debug_assert_eq!(m.shape(), (self.rows, self.cols));
        let o = self.offset(i, p);
        let len = self.rows * self.cols;
        self.values[o..o + len].copy_from_slice(m.as_slice());
    }

    /// First entry; the whole value for `1×1` arrays.
    pub fn scalar(&self, i: usize, p: usize) -> f64 {
        self.values[self.offset(i, p)]
    }

    pub fn set_scalar(&mut self, i: usize, p: usize, v: f64) {
        let o = self.offset(i, p);
        self.values[o] = v;
    }

    /// Raw entries of time slice `i`, all paths.
    pub fn slice(&self, i: usize) -> &[f64] {
        let w = self.n_paths * self.rows * self.cols;
        &self.values[i * w..(i + 1) * w]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.n_paths * self.rows * self.cols;
        &mut self.values[i * w..(i + 1) * w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// First `(i, p)` holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        let len = self.rows * self.cols;
        self.values
            .iter()
            .position(|v| !v.is_finite())
            .map(|k| {
                let cell = k / len;
                (cell / self.n_paths, cell % self.n_paths)
            })
    }
}

/// Pairwise summation in a fixed order; results do not depend on how the
/// terms were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error (`sample std / sqrt(n)`).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
