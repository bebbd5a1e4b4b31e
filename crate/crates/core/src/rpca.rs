//! Principal component pursuit baseline.
//!
//! Solves `min ||L||_* + lambda ||S||_1  s.t.  M = L + S` with the inexact
//! augmented Lagrangian method:
//!
//! ```text
//! L <- SVT(M - S + Y / mu, 1 / mu)
//! S <- shrink(M - L + Y / mu, lambda / mu)
//! Y <- Y + mu (M - L - S)
//! mu <- min(rho * mu, mu_max)
//! ```

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::video_io::FrameTensor;
use crate::{Error, Result};

/// Frames as columns: `[P x N]` with `P = C * H * W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationMatrix {
    pub matrix: DMatrix<f64>,
    /// `[C, H, W]` of each column.
    pub frame_shape: [usize; 3],
    pub frame_index_offset: usize,
}

impl ObservationMatrix {
    pub fn from_frames(frames: &FrameTensor) -> Self {
        let [c, h, w] = frames.frame_shape();
        let p = c * h * w;
        let matrix = DMatrix::from_fn(p, frames.len(), |row, col| frames.frame(col)[row] as f64);
        ObservationMatrix {
            matrix,
            frame_shape: [c, h, w],
            frame_index_offset: frames.frame_index_offset(),
        }
    }

    /// Reshapes the columns of `m` back into frames, clamped to `[0, 1]`.
    pub fn columns_to_frames(&self, m: &DMatrix<f64>) -> Result<FrameTensor> {
        let [c, h, w] = self.frame_shape;
        if m.nrows() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} rows cannot be reshaped into {c}x{h}x{w} frames",
                m.nrows()
            )));
        }
        // column-major storage is already frame-after-frame
        let data = m.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        FrameTensor::new(data, [m.ncols(), c, h, w], self.frame_index_offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpcaParams {
    /// Sparsity weight; `1 / sqrt(max(P, N))` when absent.
    pub lambda: Option<f64>,
    /// Relative feasibility tolerance on `||M - L - S||_F / ||M||_F`.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial penalty as a multiple of `1 / ||M||_2`.
    pub mu_scale: f64,
    pub rho: f64,
    /// Penalty cap as a multiple of the initial penalty.
    pub mu_max_factor: f64,
}

impl Default for RpcaParams {
    fn default() -> Self {
        RpcaParams {
            lambda: None,
            tol: 1e-7,
            max_iter: 500,
            mu_scale: 1.25,
            rho: 1.5,
            mu_max_factor: 1e7,
        }
    }
}

impl RpcaParams {
    pub fn default_lambda(rows: usize, cols: usize) -> f64 {
        1.0 / (rows.max(cols) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpcaResult {
    pub low_rank: DMatrix<f64>,
    pub sparse: DMatrix<f64>,
    pub lambda: f64,
    pub iterations: usize,
    /// `||M - L - S||_F / ||M||_F` at exit (0 for an all-zero `M`).
    pub residual: f64,
    pub converged: bool,
    pub rank: usize,
}

/// Elementwise `sign(x) * max(|x| - tau, 0)`.
pub fn soft_threshold(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    x.map(|v| shrink(v, tau))
}

fn shrink(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// `U shrink(Sigma, tau) V^T` and the number of surviving singular values.
pub fn singular_value_threshold(x: &DMatrix<f64>, tau: f64) -> Result<(DMatrix<f64>, usize)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Svd("input has non-finite entries".into()));
    }
    let (rows, cols) = x.shape();
    if rows == 0 || cols == 0 {
        return Ok((x.clone(), 0));
    }
    let svd = SVD::try_new(x.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Svd("did not converge".into()))?;
    let u = svd.u.as_ref().expect("U requested");
    let v_t = svd.v_t.as_ref().expect("V^T requested");
    let kept: Vec<(usize, f64)> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter_map(|(i, &s)| (s > tau).then(|| (i, s - tau)))
        .collect();
    let rank = kept.len();
    if rank == 0 {
        return Ok((DMatrix::zeros(rows, cols), 0));
    }
    let mut us = DMatrix::zeros(rows, rank);
    let mut vt = DMatrix::zeros(rank, cols);
    for (j, &(i, s)) in kept.iter().enumerate() {
        us.set_column(j, &(u.column(i) * s));
        vt.set_row(j, &v_t.row(i));
    }
    Ok((us * vt, rank))
}

fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    let svd = SVD::try_new(m.clone(), false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Svd("did not converge".into()))?;
    Ok(svd.singular_values.max())
}

/// Low-rank plus sparse decomposition of `m`. Running out of iterations is
/// reported through [`RpcaResult::converged`], not as an error.
pub fn rpca_decompose(m: &DMatrix<f64>, params: &RpcaParams) -> Result<RpcaResult> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidData("observation matrix is empty".into()));
    }
    if !(params.tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tol must be positive, got {}", params.tol)));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("observation matrix has non-finite entries".into()));
    }
    let lambda = params
        .lambda
        .unwrap_or_else(|| RpcaParams::default_lambda(rows, cols));
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
    }

    let norm_m = m.norm();
    if norm_m == 0.0 {
        return Ok(RpcaResult {
            low_rank: DMatrix::zeros(rows, cols),
            sparse: DMatrix::zeros(rows, cols),
            lambda,
            iterations: 0,
            residual: 0.0,
            converged: true,
            rank: 0,
        });
    }

    let two_norm = spectral_norm(m)?;
    let inf_norm = m.amax() / lambda;
    // dual-feasible start
    let mut y = m / two_norm.max(inf_norm);
    let mut mu = params.mu_scale / two_norm;
    let mu_max = mu * params.mu_max_factor;

    let mut low_rank = DMatrix::zeros(rows, cols);
    let mut sparse = DMatrix::zeros(rows, cols);
    let mut residual = f64::INFINITY;
    let mut rank = 0;
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let inv_mu = 1.0 / mu;
        let (l, r) = singular_value_threshold(&(m - &sparse + &y * inv_mu), inv_mu)?;
        low_rank = l;
        rank = r;
        sparse = soft_threshold(&(m - &low_rank + &y * inv_mu), lambda * inv_mu);
        let gap = m - &low_rank - &sparse;
        residual = gap.norm() / norm_m;
        y += gap * mu;
        mu = (mu * params.rho).min(mu_max);
        if residual <= params.tol {
            break;
        }
    }
    Ok(RpcaResult {
        low_rank,
        sparse,
        lambda,
        iterations,
        residual,
        converged: residual <= params.tol,
        rank,
    })
}

/// `||L||_* + lambda ||S||_1`.
pub fn pcp_objective(low_rank: &DMatrix<f64>, sparse: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let nuclear = if low_rank.is_empty() {
        0.0
    } else {
        SVD::try_new(low_rank.clone(), false, false, f64::EPSILON, 0)
            .ok_or_else(|| Error::Svd("did not converge".into()))?
            .singular_values
            .sum()
    };
    Ok(nuclear + lambda * sparse.iter().map(|v| v.abs()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_cases() {
        let x = DMatrix::from_row_slice(1, 4, &[3.0, -3.0, 0.5, -0.2]);
        let y = soft_threshold(&x, 1.0);
        assert_eq!(y.as_slice(), &[2.0, -2.0, 0.0, 0.0]);
        assert_eq!(soft_threshold(&x, 0.0), x);
    }

    #[test]
    fn svt_on_diagonal() {
        let x = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![5.0, 2.0, 0.5]));
        let (y, rank) = singular_value_threshold(&x, 1.0).unwrap();
        assert_eq!(rank, 2);
        let want = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0, 0.0]));
        assert!((y - want).norm() < 1e-12);
    }

    #[test]
    fn svt_extremes() {
        let x = DMatrix::from_fn(6, 4, |i, j| ((i * 3 + j * 5) % 7) as f64 - 2.5);
        let (y, _) = singular_value_threshold(&x, 0.0).unwrap();
        assert!((&y - &x).norm() < 1e-10);
        let big = spectral_norm(&x).unwrap();
        let (z, rank) = singular_value_threshold(&x, big).unwrap();
        assert_eq!(rank, 0);
        assert_eq!(z, DMatrix::zeros(6, 4));
        let mut bad = x.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(singular_value_threshold(&bad, 1.0).is_err());
    }

    #[test]
    fn zero_matrix_decomposes_to_zero() {
        let r = rpca_decompose(&DMatrix::zeros(5, 3), &RpcaParams::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.low_rank, DMatrix::zeros(5, 3));
        assert_eq!(r.sparse, DMatrix::zeros(5, 3));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = DMatrix::from_element(3, 3, 1.0);
        assert!(rpca_decompose(&m, &RpcaParams { tol: 0.0, ..Default::default() }).is_err());
        assert!(rpca_decompose(&DMatrix::zeros(0, 3), &RpcaParams::default()).is_err());
    }

    #[test]
    fn max_iter_exhaustion_is_flagged() {
        let m = DMatrix::from_fn(20, 10, |i, j| ((i * j) % 5) as f64 + if i == j { 9.0 } else { 0.0 });
        let r = rpca_decompose(&m, &RpcaParams { max_iter: 1, ..Default::default() }).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(!r.converged);
    }
}
