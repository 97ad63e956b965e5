//! Doubly whitened SVD: `B = C^{1/2} W R^{1/2}`, truncate `B` to rank `r`,
//! then map back with `Ŵ = C^{-1/2} U_r Σ_r (R^{-1/2} V_r)ᵀ`.
//!
//! Truncating `B` is optimal for `½‖C^{1/2}(W − Ŵ)R^{1/2}‖_F²` because the
//! whitening maps are invertible, so the Frobenius problem in the whitened
//! basis is plain Eckart–Young.

use crate::curvature::{LayerStats, WhiteningMaps};
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix, SvdResult};
use serde::{Deserialize, Serialize};

/// Which statistics enter the whitening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningMode {
    /// Plain SVD of `W`.
    None,
    /// `R^{1/2}` only (output side is the identity).
    InputOnly,
    /// `C^{1/2}` and `R^{1/2}`.
    #[default]
    DoubleSided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedFactorization {
    pub layer: usize,
    /// The original weight.
    pub weight: Matrix,
    pub b: Matrix,
    pub svd: SvdResult,
    pub maps: WhiteningMaps,
}

impl WhitenedFactorization {
    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    pub fn max_rank(&self) -> usize {
        self.svd.len()
    }
}

/// Low-rank factors with `Ŵ = A Dᵀ`; `A` is m×r and `D` is n×r.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankLayer {
    pub a: Matrix,
    pub d: Matrix,
}

impl LowRankLayer {
    pub fn new(a: Matrix, d: Matrix) -> Result<Self> {
        if a.cols() != d.cols() {
            return Err(Error::DimensionMismatch {
                context: "low-rank factor ranks".into(),
                expected: a.cols(),
                got: d.cols(),
            });
        }
        Ok(Self { a, d })
    }

    /// Rank-0 factors (the layer contributes only its bias).
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            a: Matrix::zeros(rows, 0),
            d: Matrix::zeros(cols, 0),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn stored_params(&self) -> usize {
        self.rank() * (self.a.rows() + self.d.rows())
    }

    pub fn weight(&self) -> Matrix {
        self.a
            .matmul(&self.d.transpose())
            .expect("ranks agree by construction")
    }
}

fn check_dims(w: &Matrix, stats: &LayerStats) -> Result<()> {
    if w.rows() != stats.output_dim() || w.cols() != stats.input_dim() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "weight {}x{} vs statistics {}x{} of layer {}",
                w.rows(),
                w.cols(),
                stats.output_dim(),
                stats.input_dim(),
                stats.layer()
            ),
            expected: stats.output_dim() * stats.input_dim(),
            got: w.rows() * w.cols(),
        });
    }
    Ok(())
}

fn factorize(layer: usize, w: &Matrix, maps: WhiteningMaps) -> Result<WhitenedFactorization> {
    let b = maps.c_half.matmul(w)?.matmul(&maps.r_half)?;
    let svd = svd(&b)?;
    Ok(WhitenedFactorization {
        layer,
        weight: w.clone(),
        b,
        svd,
        maps,
    })
}

/// `B = C^{1/2} W R^{1/2}` and its SVD.
pub fn whiten(w: &Matrix, stats: &LayerStats) -> Result<WhitenedFactorization> {
    check_dims(w, stats)?;
    factorize(stats.layer(), w, stats.maps()?.clone())
}

/// Input-only whitening `B = W R^{1/2}`.
pub fn input_only_whiten(w: &Matrix, stats: &LayerStats) -> Result<WhitenedFactorization> {
    check_dims(w, stats)?;
    let maps = stats.maps()?;
    let out = stats.output_dim();
    factorize(
        stats.layer(),
        w,
        WhiteningMaps {
            c_half: Matrix::identity(out),
            c_inv_half: Matrix::identity(out),
            r_half: maps.r_half.clone(),
            r_inv_half: maps.r_inv_half.clone(),
        },
    )
}

/// Dispatches on the whitening mode. `None` ignores the statistics' values
/// and only uses their layer index.
pub fn whiten_with(
    mode: WhiteningMode,
    w: &Matrix,
    stats: &LayerStats,
) -> Result<WhitenedFactorization> {
    match mode {
        WhiteningMode::DoubleSided => whiten(w, stats),
        WhiteningMode::InputOnly => input_only_whiten(w, stats),
        WhiteningMode::None => {
            check_dims(w, stats)?;
            factorize(
                stats.layer(),
                w,
                WhiteningMaps::identity(w.rows(), w.cols()),
            )
        }
    }
}

/// `C^{-1/2} B̂ R^{-1/2}`.
pub fn unwhiten(maps: &WhiteningMaps, b_hat: &Matrix) -> Result<Matrix> {
    maps.c_inv_half.matmul(b_hat)?.matmul(&maps.r_inv_half)
}

/// Rank-`r` factors `A = C^{-1/2} U_r Σ_r`, `D = R^{-1/2} V_r`.
pub fn truncate_and_unwhiten(f: &WhitenedFactorization, r: usize) -> Result<LowRankLayer> {
    if r == 0 || r > f.max_rank() {
        return Err(Error::InvalidRank {
            rank: r,
            max: f.max_rank(),
        });
    }
    let us = f
        .svd
        .u
        .leading_columns(r)
        .scale_columns(&f.svd.singular_values[..r]);
    let a = f.maps.c_inv_half.matmul(&us)?;
    let d = f.maps.r_inv_half.matmul(&f.svd.v.leading_columns(r))?;
    LowRankLayer::new(a, d)
}

/// `½‖C^{1/2}(W − Ŵ)R^{1/2}‖_F²` using the given whitening maps.
pub fn whitened_error_with(maps: &WhiteningMaps, w: &Matrix, w_hat: &Matrix) -> Result<f64> {
    let delta = w.sub(w_hat)?;
    let m = maps.c_half.matmul(&delta)?.matmul(&maps.r_half)?;
    let f = m.frobenius_norm();
    Ok(0.5 * f * f)
}

/// Whitened reconstruction error in the metric of finalized `stats`.
pub fn whitened_error(w: &Matrix, w_hat: &Matrix, stats: &LayerStats) -> Result<f64> {
    check_dims(w, stats)?;
    whitened_error_with(stats.maps()?, w, w_hat)
}

/// Trace form `½ tr(ΔW R̄ ΔWᵀ C̄)` with the damped statistics.
pub fn whitened_error_trace(w: &Matrix, w_hat: &Matrix, stats: &LayerStats) -> Result<f64> {
    check_dims(w, stats)?;
    let delta = w.sub(w_hat)?;
    let r_bar = stats.r().add_identity(stats.lambda_r())?;
    let c_bar = stats.c().add_identity(stats.lambda_c())?;
    let inner = delta
        .matmul(&r_bar)?
        .matmul(&delta.transpose())?
        .matmul(&c_bar)?;
    Ok(0.5 * inner.trace())
}
