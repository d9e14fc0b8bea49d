pub mod convnet;
pub mod cqt;
pub mod error;
pub mod io;
pub mod onsets;
pub mod phasefeat;
pub mod rhythmgen;
pub mod scalar;
pub mod tracker;

pub use error::{Error, Result};
pub use scalar::Real;
pub use rhythmgen::Beats;

pub type ActivationChannels64 = rhythmgen::ActivationChannels<f64>;
pub type ActivationChannels32 = rhythmgen::ActivationChannels<f32>;
pub type Rhythmogram64 = cqt::Rhythmogram<f64>;
pub type Rhythmogram32 = cqt::Rhythmogram<f32>;
pub type CqtKernel64 = cqt::CqtKernel<f64>;
pub type CqtKernel32 = cqt::CqtKernel<f32>;
pub type FeatureMap64 = phasefeat::FeatureMap<f64>;
pub type FeatureMap32 = phasefeat::FeatureMap<f32>;
pub type ModelParams64 = convnet::ModelParams<f64>;
pub type ModelParams32 = convnet::ModelParams<f32>;
pub type AudioClip64 = onsets::AudioClip<f64>;
pub type AudioClip32 = onsets::AudioClip<f32>;
