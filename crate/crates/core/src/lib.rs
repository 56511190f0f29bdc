pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod ledger;
pub mod model;
pub mod presets;
pub mod protocol;
pub mod quant;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type SplitInference32 = model::SplitInference<f32>;
pub type SplitInference64 = model::SplitInference<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type SplitData32 = data::SplitData<f32>;
pub type SplitData64 = data::SplitData<f64>;
