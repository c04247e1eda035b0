//! Training, calibration and evaluation of binary bioactivity classifiers on
//! sparse molecular fingerprints.

pub mod blp;
pub mod calibrators;
pub mod data;
pub mod error;
pub mod folds;
pub mod harness;
pub mod metrics;
pub mod mlp;
pub mod scalar;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod tuning;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Mlp = mlp::MlpModel<f64>;
pub type Mlp32 = mlp::MlpModel<f32>;
pub type Predictions = data::PredictionSet<f64>;
pub type Predictions32 = data::PredictionSet<f32>;
pub type Posterior = blp::PosteriorSamples<f64>;
pub type Posterior32 = blp::PosteriorSamples<f32>;
pub type DeepEnsemble = calibrators::Ensemble<f64>;
pub type DeepEnsemble32 = calibrators::Ensemble<f32>;
