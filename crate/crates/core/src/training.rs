//! The training loop: shuffled mini-batches, contrastive loss, AdamW with a
//! cosine learning-rate schedule, optional gradient clipping, EMA covariance
//! buffers, periodic validation and checkpointing.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::PairDataset;
use crate::encoder::{gradient, Encoder, EncoderConfig, FeatureMap, Gradients, Predictor};
use crate::error::{Error, Result};
use crate::objective::{contrastive_loss_large, vamp2_score, ContrastiveLoss};
use crate::operator::{Covariances, CovarianceBuffers, EvolutionOperatorModel, OperatorSource, DEFAULT_EMA_RATE, DEFAULT_RIDGE};

/// Preset max-norm for gradient clipping.
pub const CLIP_PRESET: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub ema_rate: f64,
    pub seed: u64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub val_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 512,
            lr_max: 1e-3,
            lr_min: 1e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip_norm: None,
            ema_rate: DEFAULT_EMA_RATE,
            seed: 0,
            val_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 for the U-statistic loss, got {}",
                self.batch_size
            )));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < lr_min <= lr_max (got {} and {})",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(Error::Config(format!("ema_rate must lie in (0, 1], got {}", self.ema_rate)));
        }
        if matches!(self.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if self.epochs == 0 || self.val_interval == 0 {
            return Err(Error::Config("epochs and val_interval must be >= 1".into()));
        }
        Ok(())
    }

    /// Mini-batches per epoch; a trailing partial batch counts if it has at least two samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        let full = n / self.batch_size;
        full + usize::from(n % self.batch_size >= 2)
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSegment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            betas: c.betas,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    config: &AdamWConfig,
    segments: &[ParamSegment],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adamw_step", params.len(), format!("grads {}, state {}", grads.len(), state.m.len())));
    }
    for seg in segments {
        if grads[seg.offset..seg.offset + seg.len].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { name: seg.name.clone() });
        }
    }
    state.step += 1;
    let (b1, b2) = config.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for seg in segments {
        let wd = if seg.decay { config.weight_decay } else { 0.0 };
        for i in seg.offset..seg.offset + seg.len {
            let g = grads[i];
            state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
            state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
            let m_hat = state.m[i] / c1;
            let v_hat = state.v[i] / c2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + config.eps) + wd * params[i]);
        }
    }
    Ok(())
}

/// Scales `grads` so the global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Layout of encoder + predictor parameters in one flat vector.
pub fn parameter_segments(encoder: &Encoder, predictor: &Predictor) -> Vec<ParamSegment> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (l, layer) in encoder.params.layers.iter().enumerate() {
        for (name, len, decay) in [
            (format!("layer{l}.weight"), layer.weight.len(), true),
            (format!("layer{l}.bias"), layer.bias.len(), false),
        ] {
            out.push(ParamSegment { name, offset, len, decay });
            offset += len;
        }
    }
    out.push(ParamSegment {
        name: "predictor".into(),
        offset,
        len: predictor.matrix.len(),
        decay: false,
    });
    out
}

pub fn flatten(encoder_layers: &crate::encoder::EncoderParams, predictor: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &encoder_layers.layers {
        out.extend(layer.weight.iter());
        out.extend(layer.bias.iter());
    }
    out.extend(predictor.iter());
    out
}

fn flatten_grads(g: &Gradients) -> Vec<f64> {
    flatten(&g.encoder, &g.predictor)
}

fn unflatten(flat: &[f64], encoder: &mut Encoder, predictor: &mut Predictor) {
    let mut it = flat.iter().copied();
    for layer in &mut encoder.params.layers {
        for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *w = it.next().expect("flat vector too short");
        }
    }
    for p in predictor.matrix.iter_mut() {
        *p = it.next().expect("flat vector too short");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_vamp2: Option<f64>,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_vamp2: Option<f64>,
    pub checkpoint_path: Option<String>,
}

/// Frozen copy of the model at its best validation score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub epoch: usize,
    pub val_vamp2: f64,
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub buffers: CovarianceBuffers,
}

/// How the pairs were built, kept for downstream evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSettings {
    pub lag: usize,
    pub history: usize,
    pub dt: f64,
}

impl PairSettings {
    pub fn of(pairs: &PairDataset) -> Self {
        Self {
            lag: pairs.lag(),
            history: pairs.history(),
            dt: pairs.dt(),
        }
    }

    pub fn lag_time(&self) -> f64 {
        self.lag as f64 * self.dt
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub buffers: CovarianceBuffers,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub total_steps: u64,
    pub report: TrainReport,
    pub best: Option<ModelSnapshot>,
    pub pairs: Option<PairSettings>,
}

/// Validation loss and VAMP-2 of frozen features.
pub fn evaluate_features(encoder: &Encoder, predictor: &Predictor, pairs: &PairDataset) -> Result<(f64, f64)> {
    let zx = encoder.embed_batch(&pairs.x_matrix())?;
    let zy = encoder.embed_batch(&pairs.y_matrix())?;
    let q = predictor.apply_rows(&zy)?;
    let loss = contrastive_loss_large(&zx, &q)?;
    let covs = Covariances::from_features(&zx, &zy)?;
    let vamp = vamp2_score(&covs.cx, &covs.cxy, &covs.cy, DEFAULT_RIDGE)?;
    Ok((loss, vamp))
}

pub struct Trainer {
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub buffers: CovarianceBuffers,
    pub config: TrainConfig,
    optimizer: AdamState,
    segments: Vec<ParamSegment>,
    epoch: usize,
    total_steps: u64,
    report: TrainReport,
    best: Option<ModelSnapshot>,
    pub pairs: Option<PairSettings>,
}

impl Trainer {
    /// `n_train` fixes the learning-rate schedule length.
    pub fn new(encoder: Encoder, predictor: Predictor, config: TrainConfig, n_train: usize) -> Result<Self> {
        config.validate()?;
        if config.batch_size > n_train {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {n_train} training pairs",
                config.batch_size
            )));
        }
        if predictor.dim() != encoder.output_dim() {
            return Err(Error::shape("Trainer::new", encoder.output_dim(), predictor.dim()));
        }
        let segments = parameter_segments(&encoder, &predictor);
        let n_params = segments.iter().map(|s| s.len).sum();
        let buffers = CovarianceBuffers::new(encoder.output_dim(), config.ema_rate)?;
        let total_steps = (config.epochs * config.steps_per_epoch(n_train)) as u64;
        Ok(Self {
            encoder,
            predictor,
            buffers,
            config,
            optimizer: AdamState::new(n_params),
            segments,
            epoch: 0,
            total_steps,
            report: TrainReport::default(),
            best: None,
            pairs: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let encoder = Encoder::new(ckpt.encoder.config, ckpt.encoder.params)?;
        let segments = parameter_segments(&encoder, &ckpt.predictor);
        let n_params: usize = segments.iter().map(|s| s.len).sum();
        if ckpt.optimizer.m.len() != n_params || ckpt.optimizer.v.len() != n_params {
            return Err(Error::shape("checkpoint optimizer state", n_params, ckpt.optimizer.m.len()));
        }
        Ok(Self {
            encoder,
            predictor: ckpt.predictor,
            buffers: ckpt.buffers,
            config: ckpt.config,
            optimizer: ckpt.optimizer,
            segments,
            epoch: ckpt.epoch,
            total_steps: ckpt.total_steps,
            report: ckpt.report,
            best: ckpt.best,
            pairs: ckpt.pairs,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.clone(),
            predictor: self.predictor.clone(),
            buffers: self.buffers.clone(),
            optimizer: self.optimizer.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            total_steps: self.total_steps,
            report: self.report.clone(),
            best: self.best.clone(),
            pairs: self.pairs,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn best(&self) -> Option<&ModelSnapshot> {
        self.best.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn learning_rate(&self) -> f64 {
        cosine_lr(self.optimizer.step, self.total_steps, self.config.lr_max, self.config.lr_min)
    }

    /// One optimisation step on a batch; returns the batch loss. State is
    /// left untouched when the loss or gradient is non-finite.
    pub fn train_step(&mut self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
        let step = self.optimizer.step as usize;
        let eval = gradient(&self.encoder, &self.predictor, x, y, &ContrastiveLoss).map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;
        let mut grads = flatten_grads(&eval.grads);
        if let Some(c) = self.config.grad_clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let lr = self.learning_rate();
        let mut params = flatten(&self.encoder.params, &self.predictor.matrix);
        let mut optimizer = self.optimizer.clone();
        adamw_step(&mut params, &grads, &mut optimizer, lr, &(&self.config).into(), &self.segments)?;
        self.optimizer = optimizer;
        unflatten(&params, &mut self.encoder, &mut self.predictor);
        self.buffers.ema_update(&Covariances::from_features(&eval.z_x, &eval.z_y)?)?;
        Ok(eval.loss)
    }

    /// Deterministic per-epoch permutation of `0..n`.
    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ self.epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn run_epoch(&mut self, train: &PairDataset, val: Option<&PairDataset>) -> Result<&EpochRecord> {
        let start = Instant::now();
        let order = self.epoch_order(train.len());
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            total += self.train_step(&train.x_batch(chunk), &train.y_batch(chunk))?;
            batches += 1;
        }
        let lr = self.learning_rate();
        self.epoch += 1;
        let validate = self.epoch % self.config.val_interval == 0 || self.epoch == self.config.epochs;
        let (val_loss, val_vamp2) = match val {
            Some(v) if validate && !v.is_empty() => {
                let (l, s) = evaluate_features(&self.encoder, &self.predictor, v)?;
                (Some(l), Some(s))
            }
            _ => (None, None),
        };
        if let Some(score) = val_vamp2 {
            if self.report.best_val_vamp2.map_or(true, |b| score > b) {
                self.report.best_val_vamp2 = Some(score);
                self.report.best_epoch = Some(self.epoch);
                self.best = Some(ModelSnapshot {
                    epoch: self.epoch,
                    val_vamp2: score,
                    encoder: self.encoder.clone(),
                    predictor: self.predictor.clone(),
                    buffers: self.buffers.clone(),
                });
            }
        }
        self.report.epochs.push(EpochRecord {
            epoch: self.epoch,
            train_loss: total / batches.max(1) as f64,
            val_loss,
            val_vamp2,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
        Ok(self.report.epochs.last().expect("just pushed"))
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub buffers: CovarianceBuffers,
    pub report: TrainReport,
    pub best: Option<ModelSnapshot>,
}

/// Trains a freshly initialised encoder for `config.epochs` epochs.
pub fn train(encoder_config: EncoderConfig, pairs: &PairDataset, val_pairs: &PairDataset, config: TrainConfig) -> Result<TrainOutcome> {
    if pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    if encoder_config.input_dim != pairs.sample_dim() {
        return Err(Error::shape("train", encoder_config.input_dim, pairs.sample_dim()));
    }
    let (encoder, predictor) = Encoder::initialized(encoder_config)?;
    let mut trainer = Trainer::new(encoder, predictor, config, pairs.len())?;
    trainer.pairs = Some(PairSettings::of(pairs));
    while !trainer.is_finished() {
        trainer.run_epoch(pairs, Some(val_pairs))?;
    }
    Ok(TrainOutcome {
        encoder: trainer.encoder,
        predictor: trainer.predictor,
        buffers: trainer.buffers,
        report: trainer.report,
        best: trainer.best,
    })
}

/// Where the covariances for the final operator come from.
pub enum FinalizeMode<'a> {
    Buffers,
    FullPass { pairs: &'a PairDataset, encoder: &'a dyn FeatureMap },
}

/// `E = (C_X + λI)⁻¹ C_XY` from the EMA buffers or a fresh full pass.
pub fn finalize_operator(buffers: &CovarianceBuffers, ridge: f64, lag_time: f64, mode: FinalizeMode<'_>) -> Result<EvolutionOperatorModel> {
    match mode {
        FinalizeMode::Buffers => {
            if buffers.update_count == 0 {
                return Err(Error::InvalidArgument("covariance buffers are empty".into()));
            }
            EvolutionOperatorModel::fit(buffers.covariances.clone(), ridge, lag_time, OperatorSource::EmaBuffers)
        }
        FinalizeMode::FullPass { pairs, encoder } => {
            if pairs.is_empty() {
                return Err(Error::InvalidArgument("full pass needs a non-empty dataset".into()));
            }
            let zx = encoder.embed_batch(&pairs.x_matrix())?;
            let zy = encoder.embed_batch(&pairs.y_matrix())?;
            let covs = Covariances::from_features(&zx, &zy)?;
            EvolutionOperatorModel::fit(covs, ridge, lag_time, OperatorSource::FullPass)
        }
    }
}
