//! Closed-form ridge readout on flattened `C*W*H` features with the
//! penalty chosen by k-fold cross-validation.
//!
//! With `X` (samples x e) and `Y` (samples x N) the fitted weights are
//! `W^T = (X^T X + lambda I)^-1 X^T Y` (primal, used when `e <= samples`) or
//! equivalently `W^T = X^T (X X^T + lambda I)^-1 Y` (dual).

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::eval::pearson_per_voxel;

fn cholesky_solve(mut a: DMatrix<f64>, lambda: f64, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let chol = a.cholesky().ok_or_else(|| {
        Error::Numerical(format!("ridge system is singular or ill-conditioned at lambda = {lambda}; use lambda > 0"))
    })?;
    Ok(chol.solve(b))
}

fn check(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape("ridge samples", &[x.nrows(), x.ncols()], &[y.nrows(), y.ncols()]));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative and finite, got {lambda}")));
    }
    Ok(())
}

/// Primal solution, returned as `W^T` (e x N).
pub fn ridge_solve_primal(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    check(x, y, lambda)?;
    cholesky_solve(x.tr_mul(x), lambda, &x.tr_mul(y))
}

/// Dual (Gram) solution, returned as `W^T` (e x N).
pub fn ridge_solve_dual(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    check(x, y, lambda)?;
    let alpha = cholesky_solve(x * x.transpose(), lambda, y)?;
    Ok(x.tr_mul(&alpha))
}

/// Picks the cheaper of the two equivalent forms.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if x.ncols() <= x.nrows() {
        ridge_solve_primal(x, y, lambda)
    } else {
        ridge_solve_dual(x, y, lambda)
    }
}

/// `||Y - X W^T||_F^2 + lambda ||W||_F^2`.
pub fn ridge_objective(x: &DMatrix<f64>, y: &DMatrix<f64>, wt: &DMatrix<f64>, lambda: f64) -> f64 {
    let resid = y - x * wt;
    resid.norm_squared() + lambda * wt.norm_squared()
}

/// Mean per-voxel Pearson between two `T x N` column-major matrices.
fn mean_pearson(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<f64> {
    let (t, n) = pred.shape();
    let p = pred.transpose();
    let y = target.transpose();
    let r = pearson_per_voxel(p.as_slice(), y.as_slice(), t, n)?;
    Ok(r.iter().sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    /// `W^T`, e x N.
    pub weights_t: DMatrix<f64>,
    pub best_lambda: f64,
    /// `(lambda, mean validation Pearson across folds)` for each grid value.
    pub cv_scores: Vec<(f64, f64)>,
}

fn fold_ranges(samples: usize, folds: usize) -> Vec<std::ops::Range<usize>> {
    (0..folds).map(|k| k * samples / folds..(k + 1) * samples / folds).collect()
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx)
}

/// Cross-validated ridge fit. Folds are contiguous blocks of samples; the
/// best lambda maximizes mean per-voxel validation Pearson, then the
/// weights are refit on all samples.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda_grid: &[f64], folds: usize) -> Result<RidgeFit> {
    let samples = x.nrows();
    if folds < 2 || samples < folds {
        return Err(Error::Config(format!("need samples ({samples}) >= folds ({folds}) >= 2")));
    }
    if lambda_grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    check(x, y, lambda_grid[0])?;
    let primal = x.ncols() <= samples;
    let ranges = fold_ranges(samples, folds);
    let mut scores = vec![0.0; lambda_grid.len()];

    // Shared Gram quantities; each fold subtracts its validation block.
    let (gram, xty) = if primal { (x.tr_mul(x), x.tr_mul(y)) } else { (x * x.transpose(), DMatrix::zeros(0, 0)) };

    for range in &ranges {
        let val: Vec<usize> = range.clone().collect();
        let train: Vec<usize> = (0..samples).filter(|i| !range.contains(i)).collect();
        let xv = rows(x, &val);
        let yv = rows(y, &val);
        if primal {
            let g = &gram - xv.tr_mul(&xv);
            let b = &xty - xv.tr_mul(&yv);
            for (s, &lambda) in scores.iter_mut().zip(lambda_grid) {
                let wt = cholesky_solve(g.clone(), lambda, &b)?;
                *s += mean_pearson(&(&xv * wt), &yv)?;
            }
        } else {
            let ktt = gram.select_rows(&train).select_columns(&train);
            let kvt = gram.select_rows(&val).select_columns(&train);
            let yt = rows(y, &train);
            for (s, &lambda) in scores.iter_mut().zip(lambda_grid) {
                let alpha = cholesky_solve(ktt.clone(), lambda, &yt)?;
                *s += mean_pearson(&(&kvt * alpha), &yv)?;
            }
        }
    }
    let cv_scores: Vec<(f64, f64)> =
        lambda_grid.iter().zip(&scores).map(|(&l, &s)| (l, s / folds as f64)).collect();
    let (best_lambda, _) = cv_scores
        .iter()
        .copied()
        .fold((lambda_grid[0], f64::NEG_INFINITY), |best, (l, s)| if s > best.1 { (l, s) } else { best });
    let weights_t = ridge_solve(x, y, best_lambda)?;
    Ok(RidgeFit { weights_t, best_lambda, cv_scores })
}

/// Log-spaced grid from a `lo:hi:count` spec such as `1e-3:1e5:9`.
pub fn parse_lambda_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("lambda grid `{spec}` is not lo:hi:count"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let count: usize = parts[2].parse().map_err(|_| bad())?;
    if !(lo > 0.0 && hi >= lo) || count == 0 {
        return Err(bad());
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..count).map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64)).collect())
}

/// A fitted linear readout `y = W e` over flattened features.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub voxels: usize,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub lambda: f64,
    /// Row-major `N x e`.
    pub weights: Vec<f64>,
}

impl RidgeModel {
    pub fn from_fit(fit: &RidgeFit, channels: usize, width: usize, height: usize) -> Self {
        let wt = &fit.weights_t;
        // column-major e x N storage is row-major N x e
        RidgeModel {
            voxels: wt.ncols(),
            channels,
            width,
            height,
            lambda: fit.best_lambda,
            weights: wt.as_slice().to_vec(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.width * self.height
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        let e = self.input_len();
        if features.len() != e {
            return Err(Error::shape("stimulus features", &[e], &[features.len()]));
        }
        Ok(self
            .weights
            .chunks_exact(e)
            .map(|w| w.iter().zip(features).map(|(a, b)| a * b).sum())
            .collect())
    }
}
