//! Sparse interpretation of eigenfunctions: standardized descriptor libraries
//! and coordinate-descent LASSO regularization paths.
//!
//! The objective at each `λ` is `(1/2N)‖t − Dβ‖² + λ‖β‖₁` with `t` the
//! centred target. Coordinates are swept in a fixed order, so which of two
//! strongly correlated descriptors enters first depends on that order.

use std::collections::HashSet;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

/// Coordinate descent stops when no coefficient moves more than this.
pub const LASSO_TOLERANCE: f64 = 1e-8;
pub const MAX_SWEEPS: usize = 100_000;
pub const DEFAULT_PATH_LENGTH: usize = 50;
/// Smallest default `λ` relative to `λ_max`.
pub const DEFAULT_PATH_RATIO: f64 = 1e-4;

/// One family of descriptor columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DescriptorSpec {
    /// `x_i` for every state coordinate.
    Coordinates,
    /// `x_i x_j` for all `i < j`.
    PairwiseProducts,
    /// `‖x‖²`.
    SquaredNorm,
    /// A user-supplied column, one value per state.
    Tabulated { name: String, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorLibrary {
    pub names: Vec<String>,
    /// Standardized descriptors, rows are time points.
    pub matrix: DMatrix<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Names of constant columns that were removed.
    pub dropped: Vec<String>,
}

impl DescriptorLibrary {
    /// Standardizes raw columns to zero mean and unit (population) variance,
    /// dropping constant ones.
    pub fn from_columns(names: Vec<String>, raw: &DMatrix<f64>) -> Result<Self> {
        if names.len() != raw.ncols() {
            return Err(Error::shape("DescriptorLibrary", raw.ncols(), names.len()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate descriptor name `{dup}`")));
        }
        if raw.nrows() < 2 {
            return Err(Error::InsufficientLength {
                required: 2,
                available: raw.nrows(),
            });
        }
        if let Some((r, c)) = find_non_finite(raw) {
            return Err(Error::NonFiniteInput { row: r, column: c });
        }
        let n = raw.nrows() as f64;
        let mut kept = Vec::new();
        let mut out = Self {
            names: Vec::new(),
            matrix: DMatrix::zeros(0, 0),
            means: Vec::new(),
            scales: Vec::new(),
            dropped: Vec::new(),
        };
        for (j, name) in names.into_iter().enumerate() {
            let col = raw.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let scale = var.sqrt();
            if !(scale > 1e-12 * mean.abs().max(1.0)) {
                log::warn!("descriptor `{name}` is constant and was dropped");
                out.dropped.push(name);
                continue;
            }
            kept.push(j);
            out.names.push(name);
            out.means.push(mean);
            out.scales.push(scale);
        }
        out.matrix = DMatrix::from_fn(raw.nrows(), kept.len(), |r, k| (raw[(r, kept[k])] - out.means[k]) / out.scales[k]);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.matrix.nrows()
    }
}

fn find_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| (r, c))).find(|&(r, c)| !m[(r, c)].is_finite())
}

/// Evaluates descriptor specs on the rows of `states` (time points × state dim).
pub fn build_descriptors(states: &DMatrix<f64>, specs: &[DescriptorSpec]) -> Result<DescriptorLibrary> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no descriptors requested".into()));
    }
    let (n, dim) = states.shape();
    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for kind in specs {
        match kind {
            DescriptorSpec::Coordinates => {
                for i in 0..dim {
                    names.push(format!("x{i}"));
                    cols.push(states.column(i).iter().copied().collect());
                }
            }
            DescriptorSpec::PairwiseProducts => {
                for i in 0..dim {
                    for j in i + 1..dim {
                        names.push(format!("x{i}*x{j}"));
                        cols.push((0..n).map(|r| states[(r, i)] * states[(r, j)]).collect());
                    }
                }
            }
            DescriptorSpec::SquaredNorm => {
                names.push("|x|^2".into());
                cols.push(states.row_iter().map(|r| r.norm_squared()).collect());
            }
            DescriptorSpec::Tabulated { name, values } => {
                if values.len() != n {
                    return Err(Error::shape("tabulated descriptor", n, values.len()));
                }
                names.push(name.clone());
                cols.push(values.clone());
            }
        }
    }
    let raw = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
    DescriptorLibrary::from_columns(names, &raw)
}

/// Descriptors of every state of a trajectory.
pub fn trajectory_descriptors(traj: &Trajectory, specs: &[DescriptorSpec]) -> Result<DescriptorLibrary> {
    build_descriptors(&traj.to_matrix(), specs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub names: Vec<String>,
    /// Strictly descending.
    pub lambdas: Vec<f64>,
    /// Coefficients on the standardized descriptors, one vector per `λ`.
    pub coefficients: Vec<Vec<f64>>,
    pub mse: Vec<f64>,
    pub n_active: Vec<usize>,
    /// Target mean; the fitted value is `intercept + Dβ`.
    pub intercept: f64,
    /// Coordinate sweeps used per `λ`.
    pub sweeps: Vec<usize>,
}

/// `λ_max = ‖Dᵀ t‖_∞ / N` for the centred target: the smallest `λ` with an
/// all-zero solution.
pub fn lambda_max(lib: &DescriptorLibrary, target: &[f64]) -> Result<f64> {
    let t = centred_target(lib, target)?.0;
    let n = lib.n_samples() as f64;
    Ok((lib.matrix.transpose() * t).amax() / n)
}

/// `count` log-spaced values from `λ_max` down to `λ_max · ratio`.
pub fn default_lambda_grid(lib: &DescriptorLibrary, target: &[f64], count: usize, ratio: f64) -> Result<Vec<f64>> {
    if count == 0 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("bad lambda grid: count {count}, ratio {ratio}")));
    }
    let top = lambda_max(lib, target)?;
    if top == 0.0 {
        return Ok(vec![0.0]);
    }
    if count == 1 {
        return Ok(vec![top]);
    }
    let step = ratio.ln() / (count - 1) as f64;
    Ok((0..count).map(|k| top * (step * k as f64).exp()).collect())
}

fn centred_target(lib: &DescriptorLibrary, target: &[f64]) -> Result<(DVector<f64>, f64)> {
    if target.len() != lib.n_samples() {
        return Err(Error::shape("lasso target", lib.n_samples(), target.len()));
    }
    if let Some(i) = target.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { row: i, column: 0 });
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    Ok((DVector::from_iterator(target.len(), target.iter().map(|v| v - mean)), mean))
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Warm-started coordinate-descent LASSO over a descending `λ` list.
pub fn lasso_path(lib: &DescriptorLibrary, target: &[f64], lambdas: &[f64]) -> Result<LassoPath> {
    if lib.is_empty() {
        return Err(Error::InvalidArgument("descriptor library has no columns".into()));
    }
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("lambda list is empty".into()));
    }
    if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) || lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("lambdas must be finite, non-negative and strictly descending".into()));
    }
    let (t, intercept) = centred_target(lib, target)?;
    let d = &lib.matrix;
    let (n_rows, p) = d.shape();
    if n_rows <= p {
        log::warn!("LASSO with {n_rows} samples and {p} descriptors; the solution may not be unique");
    }
    let n = n_rows as f64;
    let col_sq: Vec<f64> = (0..p).map(|j| d.column(j).norm_squared() / n).collect();
    let lam_max = (d.transpose() * &t).amax() / n;

    let mut beta = vec![0.0; p];
    let mut resid = t.clone();
    let mut path = LassoPath {
        names: lib.names.clone(),
        lambdas: lambdas.to_vec(),
        coefficients: Vec::with_capacity(lambdas.len()),
        mse: Vec::with_capacity(lambdas.len()),
        n_active: Vec::with_capacity(lambdas.len()),
        intercept,
        sweeps: Vec::with_capacity(lambdas.len()),
    };
    for (k, &lambda) in lambdas.iter().enumerate() {
        let mut sweeps = 0;
        if lambda >= lam_max {
            beta.iter_mut().for_each(|b| *b = 0.0);
            resid.copy_from(&t);
        } else {
            loop {
                if sweeps == MAX_SWEEPS {
                    return Err(Error::LassoNotConverged { lambda_index: k, sweeps });
                }
                sweeps += 1;
                let mut max_change = 0.0f64;
                for j in 0..p {
                    let col = d.column(j);
                    let old = beta[j];
                    let rho = col.dot(&resid) / n + col_sq[j] * old;
                    let new = soft_threshold(rho, lambda) / col_sq[j];
                    if new != old {
                        resid.axpy(old - new, &col, 1.0);
                        beta[j] = new;
                        max_change = max_change.max((new - old).abs());
                    }
                }
                if max_change < LASSO_TOLERANCE {
                    break;
                }
            }
        }
        path.mse.push(resid.norm_squared() / n);
        path.n_active.push(beta.iter().filter(|b| **b != 0.0).count());
        path.coefficients.push(beta.clone());
        path.sweeps.push(sweeps);
    }
    Ok(path)
}

impl LassoPath {
    pub fn index_of(&self, lambda: f64) -> Option<usize> {
        self.lambdas.iter().position(|l| (l - lambda).abs() <= 1e-12 * lambda.abs().max(1e-300))
    }

    /// Largest `λ` whose MSE lies within `rel_tol` of the path's MSE range
    /// above the smallest MSE.
    pub fn select_lambda(&self, rel_tol: f64) -> f64 {
        let lo = self.mse.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.mse.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bound = lo + rel_tol * (hi - lo);
        let k = self.mse.iter().position(|m| *m <= bound).unwrap_or(self.mse.len() - 1);
        self.lambdas[k]
    }

    /// CSV with `lambda,mse,n_active` and one column per descriptor.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        write!(w, "lambda,mse,n_active")?;
        for name in &self.names {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for k in 0..self.lambdas.len() {
            write!(w, "{},{},{}", self.lambdas[k], self.mse[k], self.n_active[k])?;
            for c in &self.coefficients[k] {
                write!(w, ",{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Nonzero coefficients at `λ`, scaled so absolute values sum to one and
/// sorted by decreasing magnitude.
pub fn normalized_coefficients(path: &LassoPath, lambda: f64) -> Result<Vec<(String, f64)>> {
    let k = path
        .index_of(lambda)
        .ok_or_else(|| Error::InvalidArgument(format!("lambda {lambda} is not on the path")))?;
    Ok(normalize(&path.names, &path.coefficients[k]))
}

fn normalize(names: &[String], coefs: &[f64]) -> Vec<(String, f64)> {
    let total: f64 = coefs.iter().map(|c| c.abs()).sum();
    if total == 0.0 {
        return Vec::new();
    }
    let mut out: Vec<(String, f64)> = names
        .iter()
        .zip(coefs)
        .filter(|(_, c)| **c != 0.0)
        .map(|(n, c)| (n.clone(), c / total))
        .collect();
    out.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCoefficient {
    pub name: String,
    pub coefficient: f64,
}

/// JSON coefficient report for one point of the path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub lambda: f64,
    pub mse: f64,
    pub n_active: usize,
    pub intercept: f64,
    pub normalized: Vec<NamedCoefficient>,
    pub dropped_descriptors: Vec<String>,
}

pub fn coefficient_report(path: &LassoPath, lib: &DescriptorLibrary, lambda: f64) -> Result<CoefficientReport> {
    let k = path
        .index_of(lambda)
        .ok_or_else(|| Error::InvalidArgument(format!("lambda {lambda} is not on the path")))?;
    Ok(CoefficientReport {
        lambda: path.lambdas[k],
        mse: path.mse[k],
        n_active: path.n_active[k],
        intercept: path.intercept,
        normalized: normalize(&path.names, &path.coefficients[k])
            .into_iter()
            .map(|(name, coefficient)| NamedCoefficient { name, coefficient })
            .collect(),
        dropped_descriptors: lib.dropped.clone(),
    })
}
