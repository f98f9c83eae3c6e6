//! Covariance estimation (batch and EMA), the ridge least-squares operator
//! `E = (C_X + λI)⁻¹ C_XY`, and the closed-form optimal predictor.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::checkpoint::row_major;
use crate::encoder::Predictor;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, check_same_shape, check_square, spd_solve};

/// Default ridge parameter for operator estimation.
pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Default EMA rate for covariance buffers.
pub const DEFAULT_EMA_RATE: f64 = 0.01;

/// Uncentered covariance triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariances {
    #[serde(with = "row_major")]
    pub cx: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub cy: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub cxy: DMatrix<f64>,
}

impl Covariances {
    pub fn zeros(d: usize) -> Self {
        Self {
            cx: DMatrix::zeros(d, d),
            cy: DMatrix::zeros(d, d),
            cxy: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.cx.nrows()
    }

    /// `C_X = ZxᵀZx/N`, `C_Y = ZyᵀZy/N`, `C_XY = ZxᵀZy/N`.
    pub fn from_features(z_x: &DMatrix<f64>, z_y: &DMatrix<f64>) -> Result<Self> {
        let (cx, cy, cxy) = batch_covariances(z_x, z_y)?;
        Ok(Self { cx, cy, cxy })
    }
}

pub fn batch_covariances(
    z_x: &DMatrix<f64>,
    z_y: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    check_same_shape(z_x, z_y, "batch_covariances")?;
    let n = z_x.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("covariances need at least one sample".into()));
    }
    let inv = 1.0 / n as f64;
    let zxt = z_x.transpose();
    let cx = crate::linalg::symmetrize(&(&zxt * z_x)) * inv;
    let cy = crate::linalg::symmetrize(&(z_y.transpose() * z_y)) * inv;
    let cxy = zxt * z_y * inv;
    Ok((cx, cy, cxy))
}

/// Exponential moving averages of batch covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceBuffers {
    pub covariances: Covariances,
    pub update_count: u64,
    pub ema_rate: f64,
}

impl CovarianceBuffers {
    pub fn new(d: usize, ema_rate: f64) -> Result<Self> {
        if !(ema_rate > 0.0 && ema_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!("ema_rate must lie in (0, 1], got {ema_rate}")));
        }
        Ok(Self {
            covariances: Covariances::zeros(d),
            update_count: 0,
            ema_rate,
        })
    }

    /// `C ← (1−β) C + β C_batch`; the first update copies the batch verbatim.
    pub fn ema_update(&mut self, batch: &Covariances) -> Result<()> {
        let c = &mut self.covariances;
        for (buf, new) in [(&mut c.cx, &batch.cx), (&mut c.cy, &batch.cy), (&mut c.cxy, &batch.cxy)] {
            check_same_shape(buf, new, "ema_update")?;
        }
        if self.update_count == 0 {
            *c = batch.clone();
        } else {
            let beta = self.ema_rate;
            for (buf, new) in [(&mut c.cx, &batch.cx), (&mut c.cy, &batch.cy), (&mut c.cxy, &batch.cxy)] {
                buf.zip_apply(new, |b, n| *b = (1.0 - beta) * *b + beta * n);
            }
        }
        self.update_count += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorSource {
    EmaBuffers,
    FullPass,
}

/// The learned operator matrix with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionOperatorModel {
    #[serde(with = "row_major")]
    pub matrix: DMatrix<f64>,
    pub ridge: f64,
    /// Lag in physical time units.
    pub lag_time: f64,
    pub source: OperatorSource,
    pub covariances: Covariances,
}

impl EvolutionOperatorModel {
    pub fn fit(covariances: Covariances, ridge: f64, lag_time: f64, source: OperatorSource) -> Result<Self> {
        let matrix = least_squares_operator(&covariances.cx, &covariances.cxy, ridge)?;
        Ok(Self {
            matrix,
            ridge,
            lag_time,
            source,
            covariances,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Solves `(C_X + λI) E = C_XY` by Cholesky.
pub fn least_squares_operator(cx: &DMatrix<f64>, cxy: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    check_square(cx, "least_squares_operator")?;
    check_same_shape(cx, cxy, "least_squares_operator")?;
    let e = spd_solve(cx, ridge, cxy, "regularized C_X")?;
    if !all_finite(&e) {
        return Err(Error::Singular {
            what: "regularized C_X",
            condition: f64::INFINITY,
        });
    }
    Ok(e)
}

/// `P* = (C_X+reg·I)⁻¹ C_XY (C_Y+reg·I)⁻¹`, the minimiser of the analytic loss.
pub fn optimal_predictor(cx: &DMatrix<f64>, cxy: &DMatrix<f64>, cy: &DMatrix<f64>, reg: f64) -> Result<Predictor> {
    if !(reg >= 0.0) {
        return Err(Error::InvalidArgument(format!("reg must be >= 0, got {reg}")));
    }
    check_square(cx, "optimal_predictor")?;
    check_same_shape(cx, cxy, "optimal_predictor")?;
    check_same_shape(cx, cy, "optimal_predictor")?;
    let left = spd_solve(cx, reg, cxy, "regularized C_X")?;
    let p = spd_solve(cy, reg, &left.transpose(), "regularized C_Y")?.transpose();
    Predictor::new(p)
}
