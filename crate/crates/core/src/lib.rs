//! Learning evolution operators (Koopman / transfer operators) of dynamical
//! systems from trajectory data with an encoder-only contrastive objective.
//!
//! The pipeline is:
//!
//! 1. [`dynamics`] generates or loads trajectories and turns them into lagged
//!    `(x, y)` pair datasets.
//! 2. [`encoder`] defines the learnable feature map `φ` and the linear
//!    predictor `P`.
//! 3. [`training`] fits `φ` and `P` by minimising the contrastive loss from
//!    [`objective`] while tracking covariance buffers.
//! 4. [`operator`] turns the covariances into the ridge least-squares operator
//!    matrix `E = (C_X + λI)⁻¹ C_XY`.
//! 5. [`spectral`] decomposes `E` into modes, timescales and frequencies, and
//!    forecasts observables.
//! 6. [`interpret`] explains eigenfunctions with sparse LASSO regressions on
//!    descriptor libraries.

pub mod checkpoint;
pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod interpret;
pub mod linalg;
pub mod objective;
pub mod operator;
pub mod spectral;
pub mod training;

pub use nalgebra::{DMatrix, DVector};
pub use num_complex::Complex64;

pub use checkpoint::Checkpoint;
pub use dynamics::{PairDataset, Trajectory};
pub use encoder::{Activation, Encoder, EncoderConfig, EncoderParams, FeatureMap, InputScaling, Predictor, RawFeatures};
pub use error::{Error, Result};
pub use operator::{CovarianceBuffers, Covariances, EvolutionOperatorModel, OperatorSource};
pub use spectral::SpectralDecomposition;
pub use training::{TrainConfig, TrainReport, Trainer};
