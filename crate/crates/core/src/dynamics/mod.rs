//! Trajectory generators, gap-aware splits and lagged pair datasets.

mod io;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_trajectory, save_pairs_csv, save_trajectory, TrajectoryFormat};

/// Provenance of a generated or loaded trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub generator: String,
    pub params: BTreeMap<String, f64>,
    pub seed: Option<u64>,
}

/// A single state together with its absolute step index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePoint<'a> {
    pub values: &'a [f64],
    pub time_index: u64,
}

/// Time-ordered states stored row-major in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    data: Arc<Vec<f64>>,
    dim: usize,
    dt: f64,
    start_index: u64,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    /// Builds a trajectory from row-major `data` (`len × dim`).
    pub fn new(data: Vec<f64>, dim: usize, dt: f64) -> Result<Self> {
        Self::with_start(data, dim, dt, 0)
    }

    pub fn with_start(data: Vec<f64>, dim: usize, dt: f64, start_index: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("state dimension must be >= 1".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive and finite, got {dt}")));
        }
        if data.len() % dim != 0 {
            return Err(Error::shape("Trajectory::new", format!("multiple of {dim}"), data.len()));
        }
        let len = data.len() / dim;
        if len < 2 {
            return Err(Error::InsufficientLength { required: 2, available: len });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { row: pos / dim, column: pos % dim });
        }
        Ok(Self {
            data: Arc::new(data),
            dim,
            dt,
            start_index,
            meta: TrajectoryMeta::default(),
        })
    }

    pub fn with_meta(mut self, meta: TrajectoryMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Absolute step index of the first state.
    pub fn start_index(&self) -> u64 {
        self.start_index
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point(&self, i: usize) -> StatePoint<'_> {
        StatePoint {
            values: self.state(i),
            time_index: self.start_index + i as u64,
        }
    }

    pub fn points(&self) -> impl Iterator<Item = StatePoint<'_>> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// States as an `len × dim` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.data)
    }

    /// Contiguous sub-trajectory `[from, to)` keeping absolute time indices.
    pub fn segment(&self, from: usize, to: usize) -> Result<Trajectory> {
        if to > self.len() || to < from + 2 {
            return Err(Error::InvalidArgument(format!(
                "segment [{from}, {to}) invalid for trajectory of length {}",
                self.len()
            )));
        }
        let mut seg = Trajectory::with_start(
            self.data[from * self.dim..to * self.dim].to_vec(),
            self.dim,
            self.dt,
            self.start_index + from as u64,
        )?;
        seg.meta = self.meta.clone();
        Ok(seg)
    }
}

/// Lorenz '63 parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

impl LorenzParams {
    pub fn vector_field(&self, s: [f64; 3]) -> [f64; 3] {
        [
            self.sigma * (s[1] - s[0]),
            s[0] * (self.rho - s[2]) - s[1],
            s[0] * s[1] - self.beta * s[2],
        ]
    }

    /// One classical RK4 step.
    pub fn rk4_step(&self, s: [f64; 3], dt: f64) -> [f64; 3] {
        let add = |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
        let k1 = self.vector_field(s);
        let k2 = self.vector_field(add(s, k1, dt / 2.0));
        let k3 = self.vector_field(add(s, k2, dt / 2.0));
        let k4 = self.vector_field(add(s, k3, dt));
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out
    }
}

/// Default Lorenz initial condition: `(1, 1, 1)` plus seeded uniform jitter
/// in `[-0.5, 0.5]³`.
pub fn lorenz_initial_condition(seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x0 = [1.0; 3];
    for v in &mut x0 {
        *v += rng.random_range(-0.5..=0.5);
    }
    x0
}

/// Integrates Lorenz '63 with fixed-step RK4. The result holds `n_steps + 1`
/// states, the first being `x0`.
pub fn lorenz63_trajectory(n_steps: usize, dt: f64, x0: [f64; 3], params: LorenzParams, seed: u64) -> Result<Trajectory> {
    if n_steps < 1 {
        return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let mut data = Vec::with_capacity((n_steps + 1) * 3);
    let mut s = x0;
    data.extend_from_slice(&s);
    for step in 1..=n_steps {
        s = params.rk4_step(s, dt);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged { step });
        }
        data.extend_from_slice(&s);
    }
    let meta = TrajectoryMeta {
        generator: "lorenz63".into(),
        params: BTreeMap::from([
            ("sigma".into(), params.sigma),
            ("rho".into(), params.rho),
            ("beta".into(), params.beta),
            ("dt".into(), dt),
            ("x0_0".into(), x0[0]),
            ("x0_1".into(), x0[1]),
            ("x0_2".into(), x0[2]),
        ]),
        seed: Some(seed),
    };
    Ok(Trajectory::new(data, 3, dt)?.with_meta(meta))
}

/// Ornstein–Uhlenbeck parameters for `dx = -θ x dt + σ dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    pub theta: f64,
    pub sigma: f64,
}

impl OuParams {
    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.theta)
    }

    /// Exact transfer-operator eigenvalue `e^{-kθΔt}` of the `k`-th Hermite mode.
    pub fn eigenvalue(&self, k: u32, lag_time: f64) -> f64 {
        (-(k as f64) * self.theta * lag_time).exp()
    }
}

/// Samples an OU path with the exact Gaussian transition. `n_steps + 1` states.
pub fn ou_trajectory(n_steps: usize, dt: f64, params: OuParams, x0: f64, seed: u64) -> Result<Trajectory> {
    if !(params.theta > 0.0 && params.sigma > 0.0 && dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "OU requires theta > 0, sigma > 0, dt > 0 (got theta={}, sigma={}, dt={dt})",
            params.theta, params.sigma
        )));
    }
    if n_steps < 1 {
        return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
    }
    let decay = (-params.theta * dt).exp();
    let noise_sd = (params.sigma * params.sigma * (1.0 - (-2.0 * params.theta * dt).exp()) / (2.0 * params.theta)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_steps + 1);
    let mut x = x0;
    data.push(x);
    for _ in 0..n_steps {
        let xi: f64 = StandardNormal.sample(&mut rng);
        x = x * decay + noise_sd * xi;
        data.push(x);
    }
    let meta = TrajectoryMeta {
        generator: "ornstein_uhlenbeck".into(),
        params: BTreeMap::from([
            ("theta".into(), params.theta),
            ("sigma".into(), params.sigma),
            ("dt".into(), dt),
            ("x0".into(), x0),
        ]),
        seed: Some(seed),
    };
    Ok(Trajectory::new(data, 1, dt)?.with_meta(meta))
}

fn validate_stochastic(t: &DMatrix<f64>) -> Result<usize> {
    let n = crate::linalg::check_square(t, "transition matrix")?;
    if n == 0 {
        return Err(Error::InvalidArgument("transition matrix is empty".into()));
    }
    for i in 0..n {
        let row = t.row(i);
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("row {i} has negative or non-finite entries")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("row {i} sums to {sum}, not 1")));
        }
    }
    Ok(n)
}

/// Stationary distribution `π T = π` by power iteration from the uniform vector.
pub fn stationary_distribution(t: &DMatrix<f64>) -> Result<DVector<f64>> {
    const MAX_ITER: usize = 100_000;
    let n = validate_stochastic(t)?;
    let mut pi = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..MAX_ITER {
        let next = (pi.transpose() * t).transpose();
        let change: f64 = (&next - &pi).iter().map(|v| v.abs()).sum();
        pi = next;
        if change < 1e-14 {
            let total: f64 = pi.iter().sum();
            return Ok(pi / total);
        }
    }
    Err(Error::StationaryNotConverged { iterations: MAX_ITER })
}

fn one_hot(n: usize, k: usize, out: &mut Vec<f64>) {
    out.extend((0..n).map(|j| if j == k { 1.0 } else { 0.0 }));
}

fn row_samplers(t: &DMatrix<f64>) -> Result<Vec<WeightedIndex<f64>>> {
    (0..t.nrows())
        .map(|i| {
            WeightedIndex::new(t.row(i).iter().copied())
                .map_err(|e| Error::InvalidArgument(format!("row {i}: {e}")))
        })
        .collect()
}

/// Independent `(x, y)` pairs with `x ~ π` and `y ~ T(x, ·)`, as one-hot vectors.
pub fn markov_chain_pairs(t: &DMatrix<f64>, n_pairs: usize, seed: u64) -> Result<PairDataset> {
    let pi = stationary_distribution(t)?;
    let n = t.nrows();
    let initial = WeightedIndex::new(pi.iter().copied()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let rows = row_samplers(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(2 * n_pairs * n);
    for _ in 0..n_pairs {
        let x = initial.sample(&mut rng);
        let y = rows[x].sample(&mut rng);
        one_hot(n, x, &mut states);
        one_hot(n, y, &mut states);
    }
    let x_starts = (0..n_pairs).map(|i| 2 * i).collect();
    let y_starts = (0..n_pairs).map(|i| 2 * i + 1).collect();
    PairDataset::from_parts(Arc::new(states), n, 1, x_starts, y_starts, 1, 0, 1.0, 0)
}

/// A one-hot trajectory of the chain started from its stationary distribution.
pub fn markov_chain_trajectory(t: &DMatrix<f64>, n_steps: usize, seed: u64) -> Result<Trajectory> {
    let pi = stationary_distribution(t)?;
    let n = t.nrows();
    let initial = WeightedIndex::new(pi.iter().copied()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let rows = row_samplers(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = initial.sample(&mut rng);
    let mut data = Vec::with_capacity((n_steps + 1) * n);
    one_hot(n, state, &mut data);
    for _ in 0..n_steps {
        state = rows[state].sample(&mut rng);
        one_hot(n, state, &mut data);
    }
    let meta = TrajectoryMeta {
        generator: "markov_chain".into(),
        params: BTreeMap::from([("n_states".into(), n as f64)]),
        seed: Some(seed),
    };
    Ok(Trajectory::new(data, n, 1.0)?.with_meta(meta))
}

/// Drops `burn_in` states, then cuts consecutive segments of the given sizes
/// separated by `gap` discarded states.
pub fn split_with_gaps(traj: &Trajectory, burn_in: usize, sizes: &[usize], gap: usize) -> Result<Vec<Trajectory>> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("at least one split size is required".into()));
    }
    let required = burn_in + sizes.iter().sum::<usize>() + gap * (sizes.len() - 1);
    if required > traj.len() {
        return Err(Error::InsufficientLength {
            required,
            available: traj.len(),
        });
    }
    let mut start = burn_in;
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        out.push(traj.segment(start, start + size)?);
        start += size + gap;
    }
    Ok(out)
}

/// Lagged `(x, y)` samples over a shared state buffer. Each sample is a
/// window of `history + 1` consecutive snapshots, concatenated oldest first.
#[derive(Debug, Clone)]
pub struct PairDataset {
    states: Arc<Vec<f64>>,
    state_dim: usize,
    window: usize,
    x_starts: Vec<usize>,
    y_starts: Vec<usize>,
    lag: usize,
    history: usize,
    dt: f64,
    time_offset: u64,
}

impl PairDataset {
    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        states: Arc<Vec<f64>>,
        state_dim: usize,
        window: usize,
        x_starts: Vec<usize>,
        y_starts: Vec<usize>,
        lag: usize,
        history: usize,
        dt: f64,
        time_offset: u64,
    ) -> Result<Self> {
        if x_starts.len() != y_starts.len() {
            return Err(Error::shape("PairDataset", x_starts.len(), y_starts.len()));
        }
        Ok(Self {
            states,
            state_dim,
            window,
            x_starts,
            y_starts,
            lag,
            history,
            dt,
            time_offset,
        })
    }

    pub fn len(&self) -> usize {
        self.x_starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_starts.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Length of one sample vector: `state_dim × (history + 1)`.
    pub fn sample_dim(&self) -> usize {
        self.state_dim * self.window
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Physical lag time `lag × dt`.
    pub fn dt_effective(&self) -> f64 {
        self.lag as f64 * self.dt
    }

    fn window_slice(&self, start: usize) -> &[f64] {
        &self.states[start * self.state_dim..(start + self.window) * self.state_dim]
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.window_slice(self.x_starts[i])
    }

    pub fn y(&self, i: usize) -> &[f64] {
        self.window_slice(self.y_starts[i])
    }

    /// Absolute step indices of the first snapshot of `x` and of `y`.
    pub fn source_indices(&self, i: usize) -> (u64, u64) {
        (
            self.time_offset + self.x_starts[i] as u64,
            self.time_offset + self.y_starts[i] as u64,
        )
    }

    /// Absolute step index of the most recent snapshot in `x`.
    pub fn time_index(&self, i: usize) -> u64 {
        self.time_offset + (self.x_starts[i] + self.history) as u64
    }

    fn gather(&self, starts: &[usize], rows: impl Iterator<Item = usize>) -> DMatrix<f64> {
        let rows: Vec<usize> = rows.collect();
        let width = self.sample_dim();
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in &rows {
            data.extend_from_slice(self.window_slice(starts[*r]));
        }
        DMatrix::from_row_slice(rows.len(), width, &data)
    }

    /// `x` samples for the given rows as a `rows × sample_dim` matrix.
    pub fn x_batch(&self, rows: &[usize]) -> DMatrix<f64> {
        self.gather(&self.x_starts, rows.iter().copied())
    }

    pub fn y_batch(&self, rows: &[usize]) -> DMatrix<f64> {
        self.gather(&self.y_starts, rows.iter().copied())
    }

    pub fn x_matrix(&self) -> DMatrix<f64> {
        self.gather(&self.x_starts, 0..self.len())
    }

    pub fn y_matrix(&self) -> DMatrix<f64> {
        self.gather(&self.y_starts, 0..self.len())
    }
}

/// Builds `len − lag − history` lagged pairs from one contiguous trajectory.
pub fn make_pairs(traj: &Trajectory, lag: usize, history: usize) -> Result<PairDataset> {
    if lag < 1 {
        return Err(Error::InvalidArgument("lag must be >= 1".into()));
    }
    let len = traj.len();
    if len <= lag + history {
        return Err(Error::InsufficientLength {
            required: lag + history + 1,
            available: len,
        });
    }
    let n = len - lag - history;
    PairDataset::from_parts(
        Arc::clone(&traj.data),
        traj.dim,
        history + 1,
        (0..n).collect(),
        (lag..lag + n).collect(),
        lag,
        history,
        traj.dt,
        traj.start_index,
    )
}

/// Every history window of a trajectory (oldest snapshot first) with the
/// time index of its newest snapshot.
pub fn state_windows(traj: &Trajectory, history: usize) -> Result<(DMatrix<f64>, Vec<u64>)> {
    if traj.len() <= history {
        return Err(Error::InsufficientLength {
            required: history + 1,
            available: traj.len(),
        });
    }
    let n = traj.len() - history;
    let width = traj.dim * (history + 1);
    let m = DMatrix::from_row_slice(n, width, &{
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(&traj.data[i * traj.dim..(i + history + 1) * traj.dim]);
        }
        data
    });
    let times = (0..n).map(|i| traj.start_index + (i + history) as u64).collect();
    Ok((m, times))
}
