//! Moore–Penrose pseudo-inverse plus the range-inclusion and positivity
//! tests applied to `K = R + DᵀPD` and `L`.

use nalgebra::DMatrix;

use crate::error::{Result, SlqError};

#[derive(Clone, Debug)]
pub struct PinvResult {
    pub pinv: DMatrix<f64>,
    pub rank: usize,
    /// Nonincreasing.
    pub singular_values: Vec<f64>,
    pub tol_used: f64,
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SlqError::invalid(format!("{what} has non-finite entries")))
    }
}

/// Default rank cutoff `max(rows, cols)·ε·σ_max`.
pub fn default_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// `Σ f(σ_j) v_j u_jᵀ` over singular values above the cutoff, with the
/// singular values in SVD order, the count kept and the cutoff used.
fn filtered_svd(
    m: &DMatrix<f64>,
    tol: Option<f64>,
    f: impl Fn(f64) -> f64,
) -> Result<(DMatrix<f64>, Vec<f64>, usize, f64)> {
    let (rows, cols) = m.shape();
    // nalgebra's SVD can lose accuracy on exactly rank-deficient input, so
    // the decomposition comes from faer
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let svd = fm
        .thin_svd()
        .map_err(|e| SlqError::Internal(format!("svd failed: {e:?}")))?;
    let (u, v) = (svd.U(), svd.V());
    let sigma = svd.S().column_vector();
    let sv: Vec<f64> = (0..rows.min(cols)).map(|j| sigma[j]).collect();
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let tol_used = tol.unwrap_or_else(|| default_tolerance(rows, cols, sigma_max));

    let mut out = DMatrix::zeros(cols, rows);
    let mut rank = 0;
    for (j, &s) in sv.iter().enumerate() {
        if s > tol_used {
            rank += 1;
            // out += f(s) · v_j u_jᵀ
            let w = f(s);
            for b in 0..rows {
                let ub = u[(b, j)] * w;
                for a in 0..cols {
                    out[(a, b)] += v[(a, j)] * ub;
                }
            }
        }
    }
    Ok((out, sv, rank, tol_used))
}

/// SVD-based pseudo-inverse. Singular values `≤ tol` are treated as zero;
/// `tol = None` selects [`default_tolerance`].
pub fn pinv(m: &DMatrix<f64>, tol: Option<f64>) -> Result<PinvResult> {
    check_finite(m, "matrix")?;
    if let Some(t) = tol {
        if !(t >= 0.0) {
            return Err(SlqError::invalid(format!("tolerance must be nonnegative, got {t}")));
        }
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(PinvResult {
            pinv: DMatrix::zeros(cols, rows),
            rank: 0,
            singular_values: vec![],
            tol_used: 0.0,
        });
    }
    if rows == 1 && cols == 1 {
        let v = m[(0, 0)];
        let sigma = v.abs();
        let tol_used = tol.unwrap_or_else(|| default_tolerance(1, 1, sigma));
        let (inv, rank) = if sigma > tol_used { (1.0 / v, 1) } else { (0.0, 0) };
        return Ok(PinvResult {
            pinv: DMatrix::from_element(1, 1, inv),
            rank,
            singular_values: vec![sigma],
            tol_used,
        });
    }

    let (out, sv, rank, tol_used) = filtered_svd(m, tol, |s| 1.0 / s)?;
    let mut singular_values = sv;
    singular_values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(PinvResult {
        pinv: out,
        rank,
        singular_values,
        tol_used,
    })
}

/// Regularized limit `(MᵀM + δI)⁻¹Mᵀ`, which tends to `M†` as `δ ↓ 0`.
pub fn pinv_limit(m: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    check_finite(m, "matrix")?;
    if !(delta > 0.0) {
        return Err(SlqError::invalid(format!("delta must be positive, got {delta}")));
    }
    if m.is_empty() {
        return Ok(DMatrix::zeros(m.ncols(), m.nrows()));
    }
    // (MᵀM + δI)⁻¹Mᵀ = Σ σ/(σ² + δ) v uᵀ. Forming it from the SVD keeps the
    // error δ/(σ(σ² + δ)) clear of rounding down to small δ; singular values
    // at rounding level belong to the null space and contribute nothing.
    Ok(filtered_svd(m, None, |s| s / (s * s + delta))?.0)
}

/// Largest entry of `|M - Mᵀ|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Returns `(K + Kᵀ)/2` when the asymmetry is within `tol·(1 + max|K|)`,
/// otherwise an invalid-argument error.
pub fn symmetrized(k: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    if !k.is_square() {
        return Err(SlqError::invalid(format!("expected a square matrix, got {:?}", k.shape())));
    }
    check_finite(k, "matrix")?;
    let asym = asymmetry(k);
    let scale = 1.0 + k.amax();
    if asym > tol * scale {
        return Err(SlqError::invalid(format!(
            "matrix is not symmetric: asymmetry {asym:e} exceeds {:e}",
            tol * scale
        )));
    }
    if asym == 0.0 {
        return Ok(k.clone());
    }
    Ok((k + k.transpose()) * 0.5)
}

/// `‖(I − KK†)L‖_F ≤ tol·(1 + ‖L‖_F)`: every column of `L` lies in the
/// range of `K` up to tolerance.
pub fn range_inclusion(k: &DMatrix<f64>, l: &DMatrix<f64>, tol: f64) -> Result<bool> {
    let k = symmetrized(k, tol)?;
    if l.nrows() != k.nrows() {
        return Err(SlqError::invalid(format!(
            "L has {} rows, K is {}×{}",
            l.nrows(),
            k.nrows(),
            k.ncols()
        )));
    }
    check_finite(l, "L")?;
    let kp = pinv(&k, None)?.pinv;
    Ok(range_residual(&k, &kp, l) <= tol * (1.0 + l.norm()))
}

/// `‖(I − KK†)L‖_F` for a precomputed `K†`.
pub fn range_residual(k: &DMatrix<f64>, k_pinv: &DMatrix<f64>, l: &DMatrix<f64>) -> f64 {
    (l - k * (k_pinv * l)).norm()
}

/// Smallest eigenvalue of a symmetric matrix is at least `-tol`.
pub fn psd_check(k: &DMatrix<f64>, tol: f64) -> Result<bool> {
    Ok(min_eigenvalue(&symmetrized(k, tol)?) >= -tol)
}

/// Smallest eigenvalue of a symmetric matrix (no symmetry check).
pub fn min_eigenvalue(k: &DMatrix<f64>) -> f64 {
    match k.nrows() {
        0 => 0.0,
        1 => k[(0, 0)],
        _ => k
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min),
    }
}
