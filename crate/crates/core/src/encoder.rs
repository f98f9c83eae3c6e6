//! The learnable feature map `φ` (an MLP with optional simplicial
//! normalisation and raw-state passthrough) and the linear predictor `P`.
//!
//! Gradients are computed with layer-local reverse-mode rules for this fixed
//! architecture family.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::BatchLoss;

/// Rows per chunk when embedding large batches in parallel.
const EMBED_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    /// tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Size of the learned part of the embedding.
    pub latent_dim: usize,
    pub activation: Activation,
    /// Append the raw input as non-learnable trailing features.
    pub append_raw_state: bool,
    /// Softmax group size for simplicial normalisation; 0 disables it.
    pub simnorm_group: usize,
    pub seed: u64,
    /// Fixed affine map applied to inputs before everything else, raw
    /// passthrough included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scaling: Option<InputScaling>,
}

/// `x ↦ (x − mean) / scale`, per input coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    /// Column means and population standard deviations of `x`; constant
    /// columns keep scale 1.
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument("cannot fit input scaling on zero rows".into()));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput {
                row: i % x.nrows(),
                column: i / x.nrows(),
            });
        }
        let n = x.nrows() as f64;
        let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let scale = x
            .column_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - self.mean[c]) / self.scale[c])
    }

    /// Inverse map, for values living in the scaled coordinates.
    pub fn invert(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[(r, c)] * self.scale[c] + self.mean[c])
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("encoder dimensions must all be >= 1".into()));
        }
        if let Some(sc) = &self.input_scaling {
            if sc.mean.len() != self.input_dim || sc.scale.len() != self.input_dim {
                return Err(Error::Config(format!(
                    "input scaling has {} means and {} scales for input_dim {}",
                    sc.mean.len(),
                    sc.scale.len(),
                    self.input_dim
                )));
            }
            if sc.mean.iter().any(|m| !m.is_finite()) || sc.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config("input scaling needs finite means and positive finite scales".into()));
            }
        }
        if self.simnorm_group > 0 && self.latent_dim % self.simnorm_group != 0 {
            return Err(Error::Config(format!(
                "simnorm_group {} does not divide latent_dim {}",
                self.simnorm_group, self.latent_dim
            )));
        }
        Ok(())
    }

    /// Embedding dimension `d`.
    pub fn output_dim(&self) -> usize {
        self.latent_dim + if self.append_raw_state { self.input_dim } else { 0 }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.latent_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }
}

/// Affine layer `a ↦ W a + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(with = "crate::checkpoint::row_major")]
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Square linear predictor acting on embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    #[serde(with = "crate::checkpoint::row_major")]
    pub matrix: DMatrix<f64>,
}

impl Predictor {
    pub fn identity(d: usize) -> Self {
        Self {
            matrix: DMatrix::identity(d, d),
        }
    }

    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        crate::linalg::check_square(&matrix, "Predictor")?;
        if !crate::linalg::all_finite(&matrix) {
            return Err(Error::InvalidArgument("predictor has non-finite entries".into()));
        }
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `q = P z`.
    pub fn apply(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.dim() {
            return Err(Error::shape("predictor_apply", self.dim(), z.len()));
        }
        Ok(&self.matrix * z)
    }

    /// Applies `P` to every row: `Q = Z Pᵀ`.
    pub fn apply_rows(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.dim() {
            return Err(Error::shape("predictor_apply", self.dim(), z.ncols()));
        }
        Ok(z * self.matrix.transpose())
    }
}

/// Softmax over consecutive groups of `group_size` entries.
pub fn simplicial_normalize(v: &[f64], group_size: usize) -> Result<Vec<f64>> {
    if group_size == 0 || v.len() % group_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "group size {group_size} does not divide length {}",
            v.len()
        )));
    }
    let mut out = v.to_vec();
    for group in out.chunks_mut(group_size) {
        softmax_in_place(group);
    }
    Ok(out)
}

fn softmax_in_place(group: &mut [f64]) {
    let max = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for g in group.iter_mut() {
        *g = (*g - max).exp();
        sum += *g;
    }
    for g in group.iter_mut() {
        *g /= sum;
    }
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer (`inputs[0]` is the batch itself).
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation output of every layer.
    pre: Vec<DMatrix<f64>>,
    /// Simplex-normalised learned part, when enabled.
    normalized: Option<DMatrix<f64>>,
}

/// The encoder `φ`: configuration plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

/// Seeded Kaiming-uniform weights in `±√(6/fan_in)`, zero biases, and an
/// identity predictor.
pub fn init_params(config: &EncoderConfig) -> Result<(EncoderParams, Predictor)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = (6.0 / fan_in as f64).sqrt();
            // row-major draw order so the stream does not depend on storage layout
            let mut w = DMatrix::zeros(fan_out, fan_in);
            for r in 0..fan_out {
                for c in 0..fan_in {
                    w[(r, c)] = rng.random_range(-bound..=bound);
                }
            }
            Layer {
                weight: w,
                bias: DVector::zeros(fan_out),
            }
        })
        .collect();
    Ok((EncoderParams { layers }, Predictor::identity(config.output_dim())))
}

impl Encoder {
    pub fn new(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != params.layers.len() {
            return Err(Error::shape("Encoder::new", dims.len(), params.layers.len()));
        }
        for (l, ((fan_in, fan_out), layer)) in dims.iter().zip(&params.layers).enumerate() {
            if layer.weight.shape() != (*fan_out, *fan_in) || layer.bias.len() != *fan_out {
                return Err(Error::shape(
                    "Encoder::new",
                    format!("layer {l}: {fan_out}x{fan_in}"),
                    format!("{}x{}", layer.weight.nrows(), layer.weight.ncols()),
                ));
            }
        }
        if !params.is_finite() {
            return Err(Error::InvalidArgument("encoder parameters contain non-finite values".into()));
        }
        Ok(Self { config, params })
    }

    /// Freshly initialised encoder together with its identity predictor.
    pub fn initialized(config: EncoderConfig) -> Result<(Self, Predictor)> {
        let (params, predictor) = init_params(&config)?;
        Ok((Self { config, params }, predictor))
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::shape("encoder_forward", self.config.input_dim, x.ncols()));
        }
        Ok(())
    }

    /// Batched forward pass (rows are samples) keeping what backward needs.
    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        self.check_input(x)?;
        let n_layers = self.params.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let scaled = self.config.input_scaling.as_ref().map(|sc| sc.apply(x));
        let x = scaled.as_ref().unwrap_or(x);
        let mut a = x.clone();
        for (l, layer) in self.params.layers.iter().enumerate() {
            let mut h = &a * layer.weight.transpose();
            for mut row in h.row_iter_mut() {
                row += layer.bias.transpose();
            }
            inputs.push(a);
            a = if l + 1 < n_layers {
                h.map(|v| self.config.activation.apply(v))
            } else {
                h.clone()
            };
            pre.push(h);
        }
        let normalized = if self.config.simnorm_group > 0 {
            let g = self.config.simnorm_group;
            let mut s = a.clone();
            for r in 0..s.nrows() {
                let mut row: Vec<f64> = s.row(r).iter().copied().collect();
                for group in row.chunks_mut(g) {
                    softmax_in_place(group);
                }
                for (c, v) in row.into_iter().enumerate() {
                    s[(r, c)] = v;
                }
            }
            Some(s)
        } else {
            None
        };
        let learned = normalized.as_ref().unwrap_or(&a);
        let out = if self.config.append_raw_state {
            let mut z = DMatrix::zeros(x.nrows(), self.output_dim());
            z.columns_mut(0, self.config.latent_dim).copy_from(learned);
            z.columns_mut(self.config.latent_dim, self.config.input_dim).copy_from(x);
            z
        } else {
            learned.clone()
        };
        Ok((out, ForwardCache { inputs, pre, normalized }))
    }

    /// `z = φ(x)` for a single state.
    pub fn forward(&self, x: &[f64]) -> Result<DVector<f64>> {
        let m = DMatrix::from_row_slice(1, x.len(), x);
        let (z, _) = self.forward_cached(&m)?;
        Ok(z.row(0).transpose())
    }

    /// Gradient of a scalar loss with respect to all parameters, given the
    /// loss gradient `dz` with respect to this batch's embeddings.
    pub fn backward(&self, cache: &ForwardCache, dz: &DMatrix<f64>) -> EncoderParams {
        let latent = self.config.latent_dim;
        let mut g = dz.columns(0, latent).into_owned();
        if let Some(s) = &cache.normalized {
            let group = self.config.simnorm_group;
            for r in 0..g.nrows() {
                for start in (0..latent).step_by(group) {
                    let dot: f64 = (start..start + group).map(|c| s[(r, c)] * g[(r, c)]).sum();
                    for c in start..start + group {
                        g[(r, c)] = s[(r, c)] * (g[(r, c)] - dot);
                    }
                }
            }
        }
        let n_layers = self.params.layers.len();
        let mut grads: Vec<Layer> = Vec::with_capacity(n_layers);
        for l in (0..n_layers).rev() {
            let layer = &self.params.layers[l];
            let dw = g.transpose() * &cache.inputs[l];
            let db = g.row_sum().transpose();
            grads.push(Layer { weight: dw, bias: db });
            if l > 0 {
                let act = self.config.activation;
                g = (&g * &layer.weight).zip_map(&cache.pre[l - 1], |gv, p| gv * act.derivative(p));
            }
        }
        grads.reverse();
        EncoderParams { layers: grads }
    }

    /// Names of parameter tensors and whether weight decay applies.
    pub fn parameter_names(&self) -> Vec<(String, bool)> {
        self.params
            .layers
            .iter()
            .enumerate()
            .flat_map(|(l, _)| [(format!("layer{l}.weight"), true), (format!("layer{l}.bias"), false)])
            .collect()
    }
}

/// Any map from raw (windowed) states to feature vectors.
pub trait FeatureMap: Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// Embeds every row of `x`.
    fn embed_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// Feature slots holding the raw input coordinates, if any.
    fn state_slots(&self) -> Option<Vec<usize>>;

    /// Maps values read from the state slots back to input coordinates.
    fn decode_state(&self, values: DMatrix<f64>) -> DMatrix<f64> {
        values
    }
}

impl FeatureMap for Encoder {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn embed_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        if x.nrows() <= EMBED_CHUNK {
            return Ok(self.forward_cached(x)?.0);
        }
        let starts: Vec<usize> = (0..x.nrows()).step_by(EMBED_CHUNK).collect();
        let chunks = starts
            .par_iter()
            .map(|&s| {
                let n = EMBED_CHUNK.min(x.nrows() - s);
                self.forward_cached(&x.rows(s, n).into_owned()).map(|(z, _)| z)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = DMatrix::zeros(x.nrows(), self.output_dim());
        for (s, z) in starts.iter().zip(chunks) {
            out.rows_mut(*s, z.nrows()).copy_from(&z);
        }
        Ok(out)
    }

    fn state_slots(&self) -> Option<Vec<usize>> {
        self.config
            .append_raw_state
            .then(|| (self.config.latent_dim..self.output_dim()).collect())
    }

    fn decode_state(&self, values: DMatrix<f64>) -> DMatrix<f64> {
        match &self.config.input_scaling {
            Some(sc) => sc.invert(&values),
            None => values,
        }
    }
}

/// Identity features `[x, 1]` (intercept optional).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFeatures {
    pub dim: usize,
    pub intercept: bool,
}

impl FeatureMap for RawFeatures {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim + usize::from(self.intercept)
    }

    fn embed_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim {
            return Err(Error::shape("RawFeatures", self.dim, x.ncols()));
        }
        let mut z = DMatrix::from_element(x.nrows(), self.output_dim(), 1.0);
        z.columns_mut(0, self.dim).copy_from(x);
        Ok(z)
    }

    fn state_slots(&self) -> Option<Vec<usize>> {
        Some((0..self.dim).collect())
    }
}

/// Gradients of a batch loss with respect to the encoder and predictor.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub encoder: EncoderParams,
    pub predictor: DMatrix<f64>,
}

/// Loss value, gradients and the embeddings that produced them.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub loss: f64,
    pub grads: Gradients,
    pub z_x: DMatrix<f64>,
    pub z_y: DMatrix<f64>,
}

/// Evaluates `loss(φ(X), φ(Y) Pᵀ)` and its exact gradient.
pub fn gradient<L: BatchLoss + ?Sized>(
    encoder: &Encoder,
    predictor: &Predictor,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    loss_fn: &L,
) -> Result<LossEvaluation> {
    if x.nrows() == 0 || x.nrows() != y.nrows() {
        return Err(Error::shape("gradient", format!("{} rows (non-empty)", x.nrows()), y.nrows()));
    }
    if predictor.dim() != encoder.output_dim() {
        return Err(Error::shape("gradient", encoder.output_dim(), predictor.dim()));
    }
    let (z_x, cache_x) = encoder.forward_cached(x)?;
    let (z_y, cache_y) = encoder.forward_cached(y)?;
    let q = predictor.apply_rows(&z_y)?;
    let (loss, dz, dq) = loss_fn.value_and_grad(&z_x, &q)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let d_predictor = dq.transpose() * &z_y;
    let dz_y = &dq * &predictor.matrix;
    let mut d_encoder = encoder.backward(&cache_x, &dz);
    d_encoder.add_assign(&encoder.backward(&cache_y, &dz_y));
    Ok(LossEvaluation {
        loss,
        grads: Gradients {
            encoder: d_encoder,
            predictor: d_predictor,
        },
        z_x,
        z_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{contrastive_loss, ContrastiveLoss};
    use rand_distr::StandardNormal;

    fn config(activation: Activation, simnorm_group: usize, append_raw_state: bool) -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            hidden_dims: vec![5, 4],
            latent_dim: 4,
            activation,
            append_raw_state,
            simnorm_group,
            seed: 11,
            input_scaling: None,
        }
    }

    fn batch(n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, dim, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Independent forward pass, one sample at a time with plain loops.
    fn naive_forward(enc: &Encoder, x: &[f64]) -> Vec<f64> {
        let layers = &enc.params.layers;
        let mut a = x.to_vec();
        for (l, layer) in layers.iter().enumerate() {
            let mut h = vec![0.0; layer.weight.nrows()];
            for (r, hr) in h.iter_mut().enumerate() {
                *hr = layer.bias[r];
                for (c, ac) in a.iter().enumerate() {
                    *hr += layer.weight[(r, c)] * ac;
                }
            }
            a = if l + 1 < layers.len() {
                h.iter().map(|v| enc.config.activation.apply(*v)).collect()
            } else {
                h
            };
        }
        if enc.config.simnorm_group > 0 {
            for g in a.chunks_mut(enc.config.simnorm_group) {
                let s: f64 = g.iter().map(|v| v.exp()).sum();
                g.iter_mut().for_each(|v| *v = v.exp() / s);
            }
        }
        if enc.config.append_raw_state {
            a.extend_from_slice(x);
        }
        a
    }

    #[test]
    fn zero_weights_give_zero_latent_plus_raw() {
        let cfg = config(Activation::Relu, 0, true);
        let (mut enc, _) = Encoder::initialized(cfg).unwrap();
        enc.params = enc.params.zeros_like();
        let z = enc.forward(&[1.5, -2.0, 0.25]).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 0.0, 0.0, 0.0, 1.5, -2.0, 0.25]);
    }

    #[test]
    fn lorenz_architecture_dimension() {
        let cfg = EncoderConfig {
            input_dim: 3,
            hidden_dims: vec![16, 16],
            latent_dim: 8,
            activation: Activation::Relu,
            append_raw_state: true,
            simnorm_group: 0,
            seed: 0,
            input_scaling: None,
        };
        let (enc, pred) = Encoder::initialized(cfg).unwrap();
        assert_eq!(enc.output_dim(), 11);
        assert_eq!(pred.dim(), 11);
        assert_eq!(enc.params.layers.len(), 3);
        assert_eq!(enc.forward(&[0.1, 0.2, 0.3]).unwrap().len(), 11);
    }

    #[test]
    fn batched_forward_matches_naive_loop() {
        for act in [Activation::Relu, Activation::Tanh, Activation::Gelu] {
            for (g, raw) in [(0, false), (2, true), (4, false)] {
                let (enc, _) = Encoder::initialized(config(act, g, raw)).unwrap();
                let x = batch(7, 3, 2);
                let z = enc.embed_batch(&x).unwrap();
                for r in 0..7 {
                    let row: Vec<f64> = x.row(r).iter().copied().collect();
                    let oracle = naive_forward(&enc, &row);
                    for (c, o) in oracle.iter().enumerate() {
                        assert!((z[(r, c)] - o).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn parallel_embedding_matches_serial() {
        let (enc, _) = Encoder::initialized(config(Activation::Tanh, 0, true)).unwrap();
        let x = batch(2 * EMBED_CHUNK + 17, 3, 3);
        let par = enc.embed_batch(&x).unwrap();
        let (ser, _) = enc.forward_cached(&x).unwrap();
        assert_eq!(par, ser);
    }

    #[test]
    fn simplicial_normalization_examples() {
        let s = simplicial_normalize(&[0.0, 1.0], 2).unwrap();
        assert!((s[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((s[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let s = simplicial_normalize(&[3.0, 3.0, 3.0, 3.0, 1000.0, 0.0, 0.0, 0.0], 4).unwrap();
        assert!(s[..4].iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!((s[4] - 1.0).abs() < 1e-15 && s[5] < 1e-300);
        assert!(simplicial_normalize(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = config(Activation::Tanh, 3, false);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.simnorm_group = 0;
        cfg.hidden_dims = vec![0];
        assert!(cfg.validate().is_err());
        let (enc, _) = Encoder::initialized(config(Activation::Tanh, 0, false)).unwrap();
        assert!(matches!(enc.forward(&[1.0, 2.0]), Err(Error::ShapeMismatch { .. })));
        let mut params = enc.params.clone();
        params.layers.pop();
        assert!(Encoder::new(enc.config.clone(), params).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = config(Activation::Relu, 0, false);
        let (a, p) = init_params(&cfg).unwrap();
        let (b, _) = init_params(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, Predictor::identity(4));
        for (layer, fan_in) in a.layers.iter().zip([3.0f64, 5.0, 4.0]) {
            let bound = (6.0 / fan_in).sqrt();
            assert!(layer.weight.iter().all(|w| w.abs() <= bound));
            assert!(layer.bias.iter().all(|b| *b == 0.0));
        }
        let mut other = cfg.clone();
        other.seed = 12;
        assert_ne!(init_params(&other).unwrap().0, a);
    }

    #[test]
    fn predictor_application() {
        let p = Predictor::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let q = p.apply(&DVector::from_row_slice(&[1.0, -1.0])).unwrap();
        assert_eq!(q.as_slice(), &[-1.0, -1.0]);
        let rows = p.apply_rows(&DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 1.0])).unwrap();
        assert_eq!(rows, DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 2.0, 4.0]));
        assert!(Predictor::new(DMatrix::zeros(2, 3)).is_err());
        assert!(p.apply(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Relu, Activation::Tanh, Activation::Gelu] {
            for x in [-2.3, -0.4, 0.3, 1.7] {
                let fd = (act.apply(x + 1e-6) - act.apply(x - 1e-6)) / 2e-6;
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
        assert_eq!("GELU".parse::<Activation>().unwrap(), Activation::Gelu);
        assert!("swish".parse::<Activation>().is_err());
    }

    fn loss_at(enc: &Encoder, pred: &Predictor, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let zx = enc.embed_batch(x).unwrap();
        let q = pred.apply_rows(&enc.embed_batch(y).unwrap()).unwrap();
        contrastive_loss(&zx, &q).unwrap()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        for act in [Activation::Relu, Activation::Tanh, Activation::Gelu] {
            for (g, raw) in [(0, false), (0, true), (2, false), (4, true)] {
                let (mut enc, _) = Encoder::initialized(config(act, g, raw)).unwrap();
                let d = enc.output_dim();
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let mut pred = Predictor::new(DMatrix::from_fn(d, d, |i, j| {
                    f64::from(u8::from(i == j)) + 0.3 * rng.sample::<f64, _>(StandardNormal)
                }))
                .unwrap();
                for layer in &mut enc.params.layers {
                    layer.bias = DVector::from_fn(layer.bias.len(), |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
                }
                let x = batch(6, 3, 6);
                let y = batch(6, 3, 7);
                let eval = gradient(&enc, &pred, &x, &y, &ContrastiveLoss).unwrap();
                for l in 0..enc.params.layers.len() {
                    let n_w = enc.params.layers[l].weight.len();
                    for k in 0..n_w + enc.params.layers[l].bias.len() {
                        let probe = |delta: f64| {
                            let mut e = enc.clone();
                            if k < n_w {
                                e.params.layers[l].weight[k] += delta;
                            } else {
                                e.params.layers[l].bias[k - n_w] += delta;
                            }
                            loss_at(&e, &pred, &x, &y)
                        };
                        let fd = (probe(h) - probe(-h)) / (2.0 * h);
                        let an = if k < n_w {
                            eval.grads.encoder.layers[l].weight[k]
                        } else {
                            eval.grads.encoder.layers[l].bias[k - n_w]
                        };
                        assert!(rel_err(an, fd) < 1e-4, "{act:?} g={g} raw={raw} layer {l} param {k}: {an} vs {fd}");
                    }
                }
                for k in 0..d * d {
                    let orig = pred.matrix[k];
                    pred.matrix[k] = orig + h;
                    let up = loss_at(&enc, &pred, &x, &y);
                    pred.matrix[k] = orig - h;
                    let down = loss_at(&enc, &pred, &x, &y);
                    pred.matrix[k] = orig;
                    let fd = (up - down) / (2.0 * h);
                    assert!(rel_err(eval.grads.predictor[k], fd) < 1e-4, "predictor {k}");
                }
            }
        }
    }

    #[test]
    fn zero_predictor_gradient_is_diagonal_term_only() {
        // with P = 0 the scores vanish, so dL/dP = -2/B Σ_i φ(x_i)φ(y_i)ᵀ
        let (enc, _) = Encoder::initialized(config(Activation::Tanh, 0, true)).unwrap();
        let pred = Predictor::new(DMatrix::zeros(7, 7)).unwrap();
        let x = batch(5, 3, 8);
        let y = batch(5, 3, 9);
        let eval = gradient(&enc, &pred, &x, &y, &ContrastiveLoss).unwrap();
        assert_eq!(eval.loss, 0.0);
        let expected = -(eval.z_x.transpose() * &eval.z_y) * (2.0 / 5.0);
        assert!((&eval.grads.predictor - expected).amax() < 1e-14);
        assert!(eval.grads.encoder.layers.iter().all(|l| l.weight.amax() == 0.0));
    }

    #[test]
    fn single_linear_layer_closed_form() {
        // z = W x with identity P
        let cfg = EncoderConfig {
            input_dim: 2,
            hidden_dims: vec![],
            latent_dim: 2,
            activation: Activation::Tanh,
            append_raw_state: false,
            simnorm_group: 0,
            seed: 1,
            input_scaling: None,
        };
        let (enc, pred) = Encoder::initialized(cfg).unwrap();
        let x = batch(4, 2, 10);
        let y = batch(4, 2, 11);
        let eval = gradient(&enc, &pred, &x, &y, &ContrastiveLoss).unwrap();
        let w = &enc.params.layers[0].weight;
        let zx = &x * w.transpose();
        let zy = &y * w.transpose();
        let b = 4.0;
        let mut g = &zx * zy.transpose() * (2.0 / (b * (b - 1.0)));
        for i in 0..4 {
            g[(i, i)] = -2.0 / b;
        }
        // L depends on W through both Z_x = XWᵀ and Z_y = YWᵀ
        let dw = (&g * &zy).transpose() * &x + (g.transpose() * &zx).transpose() * &y;
        assert!((&eval.grads.encoder.layers[0].weight - dw).amax() < 1e-12);
    }

    #[test]
    fn input_scaling_standardizes_and_inverts() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 3.0, 5.0, 5.0, 5.0, 7.0, 5.0]);
        let sc = InputScaling::fit(&x).unwrap();
        // column 0: mean 4, population sd √5; column 1 is constant
        assert_eq!(sc.mean, vec![4.0, 5.0]);
        assert!((sc.scale[0] - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(sc.scale[1], 1.0);
        let t = sc.apply(&x);
        assert!(t.column(0).sum().abs() < 1e-12);
        assert!((t.column(0).norm_squared() / 4.0 - 1.0).abs() < 1e-12);
        assert!((sc.invert(&t) - &x).amax() < 1e-12);
        let mut bad = x.clone();
        bad[(2, 1)] = f64::NAN;
        assert!(matches!(InputScaling::fit(&bad), Err(Error::NonFiniteInput { row: 2, column: 1 })));
    }

    #[test]
    fn scaled_encoder_feeds_scaled_inputs_everywhere() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let sc = InputScaling {
            mean: vec![1.0, -1.0, 2.0],
            scale: vec![2.0, 0.5, 4.0],
        };
        let (plain, _) = Encoder::initialized(config(Activation::Tanh, 0, true)).unwrap();
        let mut cfg = config(Activation::Tanh, 0, true);
        cfg.input_scaling = Some(sc.clone());
        let scaled = Encoder::new(cfg, plain.params.clone()).unwrap();
        let a = scaled.embed_batch(&x).unwrap();
        let b = plain.embed_batch(&sc.apply(&x)).unwrap();
        assert!((a - &b).amax() < 1e-15);
        // raw slots hold scaled values; decoding restores the inputs
        let raw = b.columns(4, 3).into_owned();
        assert!((scaled.decode_state(raw) - &x).amax() < 1e-12);
    }

    #[test]
    fn input_scaling_shape_is_validated() {
        let mut cfg = config(Activation::Relu, 0, false);
        cfg.input_scaling = Some(InputScaling {
            mean: vec![0.0; 2],
            scale: vec![1.0; 2],
        });
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.input_scaling = Some(InputScaling {
            mean: vec![0.0; 3],
            scale: vec![1.0, 0.0, 1.0],
        });
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
