//! Linear forecasting baselines: exact DMD and ridge-regularized VAR.
//!
//! Trajectories are `T × n` row-major buffers (one snapshot per row), the
//! same layout the simulator and autoencoder use.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

fn frames_of(data: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(invalid(format!("buffer of {} values is not a whole number of {dim}-vectors", data.len())));
    }
    Ok(data.len() / dim)
}

/// Exact DMD: `x(t+1) ≈ U Ã Uᵀ x(t)` in a rank-`r` POD subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct DmdModel {
    /// `n × r` left singular vectors.
    pub basis: DMatrix<f64>,
    /// `r × r` reduced propagator.
    pub reduced: DMatrix<f64>,
    /// Rank kept after dropping negligible singular values.
    pub rank: usize,
    /// Rank that was asked for.
    pub requested_rank: usize,
}

impl DmdModel {
    /// Fits on `frames × dim` snapshots. Singular values at or below
    /// `1e-12·σ₁` are dropped, so the kept rank may be below `rank`.
    pub fn fit(data: &[f64], dim: usize, rank: usize) -> Result<Self> {
        let t = frames_of(data, dim)?;
        if t < 2 || rank == 0 {
            return Err(invalid("DMD needs at least 2 snapshots and rank ≥ 1"));
        }
        // columns are snapshots
        let x1 = DMatrix::from_fn(dim, t - 1, |i, j| data[j * dim + i]);
        let x2 = DMatrix::from_fn(dim, t - 1, |i, j| data[(j + 1) * dim + i]);
        let svd = x1.svd(true, true);
        let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let top = order.first().map_or(0.0, |&i| svd.singular_values[i]);
        let keep: Vec<usize> = order
            .into_iter()
            .take(rank)
            .filter(|&i| svd.singular_values[i] > 1e-12 * top)
            .collect();
        if keep.is_empty() {
            return Err(invalid("DMD snapshot matrix is numerically zero"));
        }
        let ur = u.select_columns(&keep);
        let vr = vt.select_rows(&keep).transpose();
        let inv_s = DMatrix::from_diagonal(&DVector::from_iterator(keep.len(), keep.iter().map(|&i| 1.0 / svd.singular_values[i])));
        let reduced = ur.transpose() * x2 * vr * inv_s;
        Ok(Self {
            rank: keep.len(),
            requested_rank: rank,
            basis: ur,
            reduced,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// One step `U Ã Uᵀ x`.
    pub fn step(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forecast(x, 1)?.into_iter().collect())
    }

    /// `horizon × n` predictions iterating the reduced propagator from `x0`.
    pub fn forecast(&self, x0: &[f64], horizon: usize) -> Result<Vec<f64>> {
        if x0.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "dmd_forecast",
                lhs: alloc::vec![x0.len()],
                rhs: alloc::vec![self.dim()],
            });
        }
        let mut a = self.basis.tr_mul(&DVector::from_column_slice(x0));
        let mut out = Vec::with_capacity(horizon * self.dim());
        for _ in 0..horizon {
            a = &self.reduced * a;
            out.extend((&self.basis * &a).iter());
        }
        Ok(out)
    }
}

/// `x(t) ≈ c + Σ_{i=1..p} A_i x(t−i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarModel {
    pub order: usize,
    /// `A_1..A_p`, each `n × n`.
    pub coefficients: Vec<DMatrix<f64>>,
    pub intercept: DVector<f64>,
}

impl VarModel {
    /// Ridge least squares on `frames × dim` data. The intercept is not
    /// penalized: the fit runs on centered lags and targets and recovers
    /// `c` from the means. With `ridge = 0` a near-singular Gram matrix is
    /// an error.
    pub fn fit(data: &[f64], dim: usize, order: usize, ridge: f64) -> Result<Self> {
        let t = frames_of(data, dim)?;
        if order == 0 {
            return Err(invalid("VAR order must be at least 1"));
        }
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(invalid("ridge penalty must be a non-negative number"));
        }
        if t <= order {
            return Err(invalid(format!("VAR({order}) needs more than {order} frames, got {t}")));
        }
        let rows = t - order;
        let features = order * dim;
        let mut f = DMatrix::from_fn(rows, features, |r, k| data[(r + order - 1 - k / dim) * dim + k % dim]);
        let mut y = DMatrix::from_fn(rows, dim, |r, k| data[(r + order) * dim + k]);
        let f_mean: Vec<f64> = f.column_iter().map(|c| c.mean()).collect();
        let y_mean: Vec<f64> = y.column_iter().map(|c| c.mean()).collect();
        for (mut c, m) in f.column_iter_mut().zip(&f_mean) {
            c.add_scalar_mut(-m);
        }
        for (mut c, m) in y.column_iter_mut().zip(&y_mean) {
            c.add_scalar_mut(-m);
        }
        let mut gram = f.tr_mul(&f);
        if ridge == 0.0 {
            let s = gram.singular_values();
            let (lo, hi) = (s.min(), s.max());
            if !(lo > 1e-12 * hi) {
                return Err(Error::IllConditioned);
            }
        }
        for i in 0..features {
            gram[(i, i)] += ridge;
        }
        let rhs = f.tr_mul(&y);
        let b = gram.cholesky().ok_or(Error::IllConditioned)?.solve(&rhs);
        // b is features × dim; A_i = (rows of lag i)ᵀ
        let coefficients: Vec<DMatrix<f64>> = (0..order).map(|i| b.rows(i * dim, dim).transpose()).collect();
        let mut intercept = DVector::from_column_slice(&y_mean);
        for (i, a) in coefficients.iter().enumerate() {
            intercept -= a * DVector::from_column_slice(&f_mean[i * dim..(i + 1) * dim]);
        }
        Ok(Self {
            order,
            coefficients,
            intercept,
        })
    }

    pub fn dim(&self) -> usize {
        self.intercept.len()
    }

    /// Recursive forecast from the last `p` rows of `history`.
    pub fn forecast(&self, history: &[f64], horizon: usize) -> Result<Vec<f64>> {
        let d = self.dim();
        let t = frames_of(history, d)?;
        if t < self.order {
            return Err(invalid(format!("VAR({}) forecast needs {} history frames, got {t}", self.order, self.order)));
        }
        let mut window: Vec<f64> = history[(t - self.order) * d..].to_vec();
        let mut out = Vec::with_capacity(horizon * d);
        for _ in 0..horizon {
            let mut next = self.intercept.clone();
            for (i, a) in self.coefficients.iter().enumerate() {
                let lag = self.order - 1 - i;
                next += a * DVector::from_column_slice(&window[lag * d..(lag + 1) * d]);
            }
            out.extend(next.iter());
            window.drain(..d);
            window.extend(next.iter());
        }
        Ok(out)
    }
}
