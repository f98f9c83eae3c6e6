//! Spectral analysis of a learned operator matrix `E = Q Λ Q⁻¹`: modes,
//! eigenfunctions, timescales, frequencies and forecasting.

mod eigen;

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::PairDataset;
use crate::encoder::{FeatureMap, RawFeatures};
use crate::error::{Error, Result};
use crate::operator::{Covariances, EvolutionOperatorModel, OperatorSource};

/// Condition number of `Q` above which mode decompositions are flagged.
pub const ILL_CONDITIONED: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Sorted by descending modulus, then real part, then imaginary part.
    pub eigenvalues: Vec<Complex64>,
    /// Right eigenvectors as columns, unit norm, largest-magnitude entry real-positive.
    pub right_eigenvectors: DMatrix<Complex64>,
    /// Rows of `Q⁻¹` matching the columns of `right_eigenvectors`.
    pub inverse_basis: DMatrix<Complex64>,
    pub lag_time: f64,
    /// Position of each mode in the unfiltered decomposition.
    pub indices: Vec<usize>,
}

fn sort_key_cmp(a: &Complex64, b: &Complex64) -> Ordering {
    b.norm()
        .total_cmp(&a.norm())
        .then(b.re.total_cmp(&a.re))
        .then(b.im.total_cmp(&a.im))
}

/// Unit norm with the largest-magnitude component made real and positive.
fn normalize_phase(v: &mut [Complex64]) {
    let norm: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let mut best = 0;
    let mut best_mag = -1.0;
    for (i, c) in v.iter().enumerate() {
        // relative slack keeps the choice stable under rounding
        if c.norm() > best_mag * (1.0 + 1e-9) {
            best = i;
            best_mag = c.norm();
        }
    }
    let phase = v[best].conj() / v[best].norm();
    for c in v.iter_mut() {
        *c = *c * phase / norm;
    }
    v[best].im = 0.0;
}

/// Eigendecomposition of a real operator matrix.
pub fn eig(e: &DMatrix<f64>, lag_time: f64) -> Result<SpectralDecomposition> {
    let n = crate::linalg::check_square(e, "eig")?;
    if !crate::linalg::all_finite(e) {
        return Err(Error::InvalidArgument("operator matrix has non-finite entries".into()));
    }
    let raw = eigen::eigen(e)?;
    let mut values = raw.values;
    let mut vectors: Vec<Vec<Complex64>> = (0..n).map(|k| raw.vectors.column(k).iter().copied().collect()).collect();
    for v in &mut vectors {
        normalize_phase(v);
    }

    // Real input: make real eigenpairs exactly real and conjugate pairs exact.
    let scale = crate::linalg::frobenius(e).max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;
    let upper: Vec<usize> = (0..n).filter(|&i| values[i].im > tol).collect();
    let lower: Vec<usize> = (0..n).filter(|&i| values[i].im < -tol).collect();
    for i in 0..n {
        if values[i].im.abs() <= tol {
            values[i].im = 0.0;
            for c in &mut vectors[i] {
                c.im = 0.0;
            }
            normalize_phase(&mut vectors[i]);
        }
    }
    if upper.len() == lower.len() {
        let mut used = vec![false; lower.len()];
        for &u in &upper {
            let target = values[u].conj();
            let best = lower
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .min_by(|a, b| (values[*a.1] - target).norm().total_cmp(&(values[*b.1] - target).norm()));
            if let Some((j, &l)) = best {
                used[j] = true;
                values[l] = target;
                vectors[l] = vectors[u].iter().map(|c| c.conj()).collect();
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sort_key_cmp(&values[a], &values[b]).then(a.cmp(&b)));
    let eigenvalues: Vec<Complex64> = order.iter().map(|&i| values[i]).collect();
    let q = DMatrix::from_fn(n, n, |r, c| vectors[order[c]][r]);
    let qinv = q.clone().try_inverse().ok_or(Error::Singular {
        what: "eigenvector basis",
        condition: f64::INFINITY,
    })?;
    Ok(SpectralDecomposition {
        eigenvalues,
        right_eigenvectors: q,
        inverse_basis: qinv,
        lag_time,
        indices: (0..n).collect(),
    })
}

/// `τ = −Δt / ln|λ|`; infinite for `|λ| ≥ 1`, zero for `λ = 0`.
pub fn implied_timescale(lambda: Complex64, lag_time: f64) -> f64 {
    let m = lambda.norm();
    if m >= 1.0 {
        f64::INFINITY
    } else if m == 0.0 {
        0.0
    } else {
        -lag_time / m.ln()
    }
}

/// Oscillation frequency in cycles per unit time, `arg(λ) / (2π Δt)`.
pub fn mode_frequency(lambda: Complex64, lag_time: f64) -> f64 {
    lambda.im.atan2(lambda.re) / (2.0 * std::f64::consts::PI * lag_time)
}

/// One row of a spectrum table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub idx: usize,
    pub re: f64,
    pub im: f64,
    pub abs: f64,
    pub decorrelation: f64,
    pub frequency: f64,
}

/// Per-mode contribution to a forecast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeReport {
    pub eigenvalue: Complex64,
    pub decay_rate: f64,
    /// Radians per step.
    pub frequency: f64,
    pub implied_timescale: f64,
    /// `Ψ_i(x)`.
    pub state_coefficient: Complex64,
    /// `(Q⁻¹ w)_i`.
    pub observable_coefficient: Complex64,
    /// `λ_i^s Ψ_i(x) (Q⁻¹ w)_i`.
    pub contribution: Complex64,
}

#[derive(Debug, Clone)]
pub struct ModeDecomposition {
    pub modes: Vec<ModeReport>,
    pub ill_conditioned: bool,
}

impl ModeDecomposition {
    pub fn total(&self) -> Complex64 {
        self.modes.iter().map(|m| m.contribution).sum()
    }
}

impl SpectralDecomposition {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.right_eigenvectors.nrows()
    }

    /// Spectral condition estimate `‖Q‖_F ‖Q⁻¹‖_F`.
    pub fn condition(&self) -> f64 {
        let f = |m: &DMatrix<Complex64>| m.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        f(&self.right_eigenvectors) * f(&self.inverse_basis)
    }

    /// `Ψ_i(z) = ⟨q_i, z⟩` (bilinear, no conjugation).
    pub fn eigenfunction(&self, i: usize, z: &DVector<f64>) -> Result<Complex64> {
        if i >= self.len() {
            return Err(Error::InvalidArgument(format!("mode index {i} out of range (have {})", self.len())));
        }
        if z.len() != self.dim() {
            return Err(Error::shape("eigenfunction_eval", self.dim(), z.len()));
        }
        Ok(self
            .right_eigenvectors
            .column(i)
            .iter()
            .zip(z.iter())
            .map(|(q, v)| q * *v)
            .sum())
    }

    /// All eigenfunctions on every row of `z` (`N × modes`).
    pub fn eigenfunctions(&self, z: &DMatrix<f64>) -> Result<DMatrix<Complex64>> {
        if z.ncols() != self.dim() {
            return Err(Error::shape("eigenfunction_eval", self.dim(), z.ncols()));
        }
        Ok(z.map(|v| Complex64::new(v, 0.0)) * &self.right_eigenvectors)
    }

    pub fn mode_decomposition(&self, w: &DVector<f64>, z: &DVector<f64>, steps: u32) -> Result<ModeDecomposition> {
        if steps < 1 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if w.len() != self.dim() || z.len() != self.dim() {
            return Err(Error::shape("mode_decomposition", self.dim(), format!("w: {}, z: {}", w.len(), z.len())));
        }
        let wc = w.map(|v| Complex64::new(v, 0.0));
        let obs = &self.inverse_basis * wc;
        let modes = (0..self.len())
            .map(|i| {
                let lambda = self.eigenvalues[i];
                let psi = self.eigenfunction(i, z)?;
                Ok(ModeReport {
                    eigenvalue: lambda,
                    decay_rate: lambda.norm(),
                    frequency: lambda.im.atan2(lambda.re),
                    implied_timescale: implied_timescale(lambda, self.lag_time),
                    state_coefficient: psi,
                    observable_coefficient: obs[i],
                    contribution: lambda.powu(steps) * psi * obs[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModeDecomposition {
            modes,
            ill_conditioned: self.condition() > ILL_CONDITIONED,
        })
    }

    pub fn spectrum_rows(&self) -> Vec<SpectrumRow> {
        self.eigenvalues
            .iter()
            .zip(&self.indices)
            .map(|(l, &idx)| SpectrumRow {
                idx,
                re: l.re,
                im: l.im,
                abs: l.norm(),
                decorrelation: implied_timescale(*l, self.lag_time),
                frequency: mode_frequency(*l, self.lag_time),
            })
            .collect()
    }

    /// Keeps modes whose implied timescale is at least `min_decorrelation`.
    pub fn filter(&self, min_decorrelation: f64) -> Result<SpectralDecomposition> {
        if !(min_decorrelation >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "min_decorrelation must be >= 0, got {min_decorrelation}"
            )));
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| implied_timescale(self.eigenvalues[i], self.lag_time) >= min_decorrelation)
            .collect();
        Ok(self.select(&keep))
    }

    /// Restricts to the given mode positions, in order.
    pub fn select(&self, keep: &[usize]) -> SpectralDecomposition {
        SpectralDecomposition {
            eigenvalues: keep.iter().map(|&i| self.eigenvalues[i]).collect(),
            right_eigenvectors: self.right_eigenvectors.select_columns(keep),
            inverse_basis: self.inverse_basis.select_rows(keep),
            lag_time: self.lag_time,
            indices: keep.iter().map(|&i| self.indices[i]).collect(),
        }
    }
}

pub fn filter_spectrum(decomp: &SpectralDecomposition, min_decorrelation: f64) -> Result<SpectralDecomposition> {
    decomp.filter(min_decorrelation)
}

/// Writes `idx,Re,Im,Abs,decorrelation,frequency` rows.
pub fn write_spectrum_csv(rows: &[SpectrumRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "idx,Re,Im,Abs,decorrelation,frequency")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.idx, r.re, r.im, r.abs, r.decorrelation, r.frequency)?;
    }
    Ok(())
}

/// Writes an eigenfunction time series as `time_index,re,im`.
pub fn write_eigenfunction_csv(time_index: &[u64], values: &[Complex64], path: &Path) -> Result<()> {
    if time_index.len() != values.len() {
        return Err(Error::shape("write_eigenfunction_csv", time_index.len(), values.len()));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "time_index,re,im")?;
    for (t, v) in time_index.iter().zip(values) {
        writeln!(w, "{t},{},{}", v.re, v.im)?;
    }
    w.flush()?;
    Ok(())
}

/// `prediction_k = ⟨E w_k, z⟩` for every row of `z` and column of `w`.
pub fn forecast(model: &EvolutionOperatorModel, z: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = model.dim();
    if z.ncols() != d || w.nrows() != d {
        return Err(Error::shape("forecast", d, format!("z: {}, w: {}", z.ncols(), w.nrows())));
    }
    Ok(z * (&model.matrix * w))
}

/// Selector observables for the raw-state slots of a feature map.
pub fn state_observables<F: FeatureMap + ?Sized>(features: &F) -> Result<DMatrix<f64>> {
    let slots = features.state_slots().ok_or_else(|| {
        Error::Config("state forecasting needs a feature map with raw-state passthrough".into())
    })?;
    let mut w = DMatrix::zeros(features.output_dim(), slots.len());
    for (k, &s) in slots.iter().enumerate() {
        w[(s, k)] = 1.0;
    }
    Ok(w)
}

/// One-step forecast of the raw (windowed) state for every row of `x`.
pub fn forecast_state<F: FeatureMap + ?Sized>(
    model: &EvolutionOperatorModel,
    features: &F,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let w = state_observables(features)?;
    let z = features.embed_batch(x)?;
    Ok(features.decode_state(forecast(model, &z, &w)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub per_component: Vec<f64>,
    pub aggregate: f64,
}

/// Root-mean-square error of one-step state forecasts over a pair dataset.
pub fn forecast_rmse<F: FeatureMap + ?Sized>(
    model: &EvolutionOperatorModel,
    features: &F,
    pairs: &PairDataset,
) -> Result<ForecastMetrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let pred = forecast_state(model, features, &pairs.x_matrix())?;
    let truth = pairs.y_matrix();
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "forecast_rmse",
            format!("{:?}", truth.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let err = pred - truth;
    let n = err.nrows() as f64;
    let per_component: Vec<f64> = err.column_iter().map(|c| (c.norm_squared() / n).sqrt()).collect();
    let aggregate = (err.norm_squared() / err.len() as f64).sqrt();
    Ok(ForecastMetrics { per_component, aggregate })
}

/// Linear least squares on raw states with an intercept column.
pub fn linls_baseline(pairs: &PairDataset, ridge: f64) -> Result<(EvolutionOperatorModel, RawFeatures)> {
    let features = RawFeatures {
        dim: pairs.sample_dim(),
        intercept: true,
    };
    let zx = features.embed_batch(&pairs.x_matrix())?;
    let zy = features.embed_batch(&pairs.y_matrix())?;
    let covs = Covariances::from_features(&zx, &zy)?;
    let model = EvolutionOperatorModel::fit(covs, ridge, pairs.dt_effective(), OperatorSource::FullPass)?;
    Ok((model, features))
}

#[cfg(test)]
mod tests;
