//! Run configuration: one TOML document with a section per stage.
//!
//! A preset supplies a base document; the user's file is merged over it key
//! by key, then the result is deserialized with unknown keys rejected.

use std::path::Path;

use evop_core::dynamics::{LorenzParams, OuParams};
use evop_core::operator::DEFAULT_RIDGE;
use evop_core::{Activation, EncoderConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::Table;

/// A problem with the configuration; reported with exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Lorenz,
    Ou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Lorenz,
    Ou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Binary,
}

impl FileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FileFormat::Csv => "csv",
            FileFormat::Binary => "evop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub system: System,
    pub n_steps: usize,
    pub dt: f64,
    /// Defaults to the global seed.
    pub seed: Option<u64>,
    /// Initial state; seeded random when absent.
    pub x0: Option<Vec<f64>>,
    pub lorenz: LorenzParams,
    pub ou: OuParams,
    pub burn_in: usize,
    pub splits: Vec<usize>,
    pub gap: usize,
    pub format: FileFormat,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            system: System::Lorenz,
            n_steps: 15_000,
            dt: 0.01,
            seed: None,
            x0: None,
            lorenz: LorenzParams::default(),
            ou: OuParams { theta: 1.0, sigma: 1.0 },
            burn_in: 1000,
            splits: vec![10_000, 1000, 1000],
            gap: 1000,
            format: FileFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsSection {
    pub lag: usize,
    pub history: usize,
}

impl Default for PairsSection {
    fn default() -> Self {
        Self { lag: 10, history: 0 }
    }
}

/// Encoder settings; the input dimension comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
    pub append_raw_state: bool,
    pub simnorm_group: usize,
    pub seed: Option<u64>,
    /// Shift and scale inputs by the training split's mean and standard
    /// deviation. Stored with the encoder, so other commands take raw data.
    pub standardize: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            hidden_dims: vec![16, 16],
            latent_dim: 8,
            activation: Activation::Relu,
            append_raw_state: true,
            simnorm_group: 0,
            seed: None,
            standardize: true,
        }
    }
}

impl EncoderSection {
    pub fn build(&self, input_dim: usize, default_seed: u64) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            latent_dim: self.latent_dim,
            activation: self.activation,
            append_raw_state: self.append_raw_state,
            simnorm_group: self.simnorm_group,
            seed: self.seed.unwrap_or(default_seed),
            input_scaling: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FinalizeSource {
    /// EMA covariance buffers kept during training.
    Buffers,
    /// A fresh covariance pass over the training pairs.
    FullPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Best,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorSection {
    pub ridge: f64,
    pub source: FinalizeSource,
    /// Which trained model the operator is built from.
    pub model: ModelChoice,
    /// Ridge for the LinLS baseline.
    pub baseline_ridge: f64,
}

impl Default for OperatorSection {
    fn default() -> Self {
        Self {
            ridge: DEFAULT_RIDGE,
            source: FinalizeSource::FullPass,
            model: ModelChoice::Best,
            baseline_ridge: DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralSection {
    /// Modes with a shorter decorrelation time are dropped.
    pub min_decorrelation: f64,
    /// Number of leading modes to export eigenfunctions for.
    pub n_modes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretSection {
    pub descriptors: Vec<evop_core::interpret::DescriptorSpec>,
    pub n_lambdas: usize,
    pub lambda_ratio: f64,
    /// Report point; chosen from the path when absent.
    pub lambda: Option<f64>,
    /// Regress the modulus instead of the real part.
    pub modulus: bool,
}

impl Default for InterpretSection {
    fn default() -> Self {
        Self {
            descriptors: vec![
                evop_core::interpret::DescriptorSpec::Coordinates,
                evop_core::interpret::DescriptorSpec::PairwiseProducts,
                evop_core::interpret::DescriptorSpec::SquaredNorm,
            ],
            n_lambdas: evop_core::interpret::DEFAULT_PATH_LENGTH,
            lambda_ratio: evop_core::interpret::DEFAULT_PATH_RATIO,
            lambda: None,
            modulus: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub seed: u64,
    pub dynamics: DynamicsSection,
    pub pairs: PairsSection,
    pub encoder: EncoderSection,
    pub training: TrainConfig,
    pub operator: OperatorSection,
    pub spectral: SpectralSection,
    pub interpret: InterpretSection,
}

fn preset_table(preset: Preset) -> Table {
    let text = match preset {
        Preset::Lorenz => include_str!("presets/lorenz.toml"),
        Preset::Ou => include_str!("presets/ou.toml"),
    };
    text.parse().expect("built-in preset is valid TOML")
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Reads an optional config file and an optional preset override; the
    /// command-line preset wins over one named in the file.
    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self, ConfigError> {
        let user: Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?;
                text.parse()
                    .map_err(|e: toml::de::Error| ConfigError(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let file_preset = match user.get("preset") {
            Some(v) => Some(
                Preset::deserialize(v.clone())
                    .map_err(|e| ConfigError(format!("key `preset`: {e}")))?,
            ),
            None => None,
        };
        let chosen = preset.or(file_preset);
        // the Lorenz preset doubles as the documented defaults
        let mut doc = preset_table(chosen.unwrap_or(Preset::Lorenz));
        merge(&mut doc, user);
        if let Some(p) = chosen {
            doc.insert("preset".into(), toml::Value::try_from(p).expect("preset serializes"));
        }
        let cfg = RunConfig::deserialize(doc).map_err(|e| ConfigError(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[cfg(test)]
    fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.dynamics.seed = Some(s);
            self.encoder.seed = Some(s);
            self.training.seed = s;
        }
        self
    }

    pub fn dynamics_seed(&self) -> u64 {
        self.dynamics.seed.unwrap_or(self.seed)
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dynamics;
        if !(d.dt > 0.0 && d.dt.is_finite()) {
            return Err(ConfigError(format!("key `dynamics.dt`: must be positive, got {}", d.dt)));
        }
        if d.n_steps < 1 {
            return Err(ConfigError("key `dynamics.n_steps`: must be >= 1".into()));
        }
        if d.splits.len() != 3 {
            return Err(ConfigError(format!(
                "key `dynamics.splits`: expected [train, val, test] sizes, got {} entries",
                d.splits.len()
            )));
        }
        let need = d.burn_in + d.splits.iter().sum::<usize>() + 2 * d.gap;
        if need > d.n_steps + 1 {
            return Err(ConfigError(format!(
                "key `dynamics.splits`: burn-in, splits and gaps need {need} states but n_steps = {} yields {}",
                d.n_steps,
                d.n_steps + 1
            )));
        }
        if let Some(x0) = &d.x0 {
            let dim = match d.system {
                System::Lorenz => 3,
                System::Ou => 1,
            };
            if x0.len() != dim {
                return Err(ConfigError(format!("key `dynamics.x0`: expected {dim} values, got {}", x0.len())));
            }
        }
        if self.pairs.lag < 1 {
            return Err(ConfigError("key `pairs.lag`: must be >= 1".into()));
        }
        let smallest = d.splits.iter().copied().min().unwrap_or(0);
        if smallest <= self.pairs.lag + self.pairs.history {
            return Err(ConfigError(format!(
                "key `pairs.lag`: lag + history = {} leaves no pairs in a split of {smallest} states",
                self.pairs.lag + self.pairs.history
            )));
        }
        self.encoder
            .build(1, 0)
            .validate()
            .map_err(|e| ConfigError(format!("section `encoder`: {e}")))?;
        self.training
            .validate()
            .map_err(|e| ConfigError(format!("section `training`: {e}")))?;
        let train_pairs = d.splits[0] - self.pairs.lag - self.pairs.history;
        if self.training.batch_size > train_pairs {
            return Err(ConfigError(format!(
                "key `training.batch_size`: {} exceeds the {train_pairs} training pairs",
                self.training.batch_size
            )));
        }
        if !(self.operator.ridge >= 0.0 && self.operator.baseline_ridge >= 0.0) {
            return Err(ConfigError("key `operator.ridge`: must be >= 0".into()));
        }
        if self.spectral.min_decorrelation < 0.0 {
            return Err(ConfigError("key `spectral.min_decorrelation`: must be >= 0".into()));
        }
        if self.interpret.n_lambdas == 0 || !(self.interpret.lambda_ratio > 0.0 && self.interpret.lambda_ratio < 1.0) {
            return Err(ConfigError("section `interpret`: need n_lambdas >= 1 and 0 < lambda_ratio < 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_equal_lorenz_preset() {
        let plain = RunConfig::load(None, None).unwrap();
        let mut preset = RunConfig::load(None, Some(Preset::Lorenz)).unwrap();
        preset.preset = None;
        assert_eq!(plain, preset);
        assert_eq!(plain.training.batch_size, 512);
        assert_eq!(plain.training.epochs, 100);
        assert_eq!(plain.pairs.lag, 10);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml_str("[training]\nepochz = 3\n").unwrap_err();
        assert!(err.0.contains("epochz"), "{}", err.0);
        let err = RunConfig::from_toml_str("[bogus]\n").unwrap_err();
        assert!(err.0.contains("bogus"), "{}", err.0);
    }

    #[test]
    fn user_values_override_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "preset = \"ou\"\n[training]\nepochs = 7\n").unwrap();
        let cfg = RunConfig::load(Some(&p), None).unwrap();
        assert_eq!(cfg.training.epochs, 7);
        assert_eq!(cfg.dynamics.system, System::Ou);
        assert_eq!(cfg.encoder.latent_dim, 6);
        let cfg = RunConfig::load(Some(&p), Some(Preset::Lorenz)).unwrap();
        assert_eq!(cfg.dynamics.system, System::Lorenz);
        assert_eq!(cfg.training.epochs, 7);
    }

    #[test]
    fn invalid_values_rejected_before_work() {
        for text in [
            "[training]\nbatch_size = 1\n",
            "[dynamics]\ndt = -1.0\n",
            "[dynamics]\nn_steps = 100\n",
            "[encoder]\nlatent_dim = 6\nsimnorm_group = 4\n",
            "[pairs]\nlag = 0\n",
        ] {
            assert!(RunConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let cfg = RunConfig::load(None, None).unwrap().with_seed(Some(9));
        assert_eq!(cfg.dynamics_seed(), 9);
        assert_eq!(cfg.encoder.build(3, 0).seed, 9);
        assert_eq!(cfg.training.seed, 9);
    }
}
