//! Comparison schemes: a centralized network on all raw features, and the
//! shallow FDML aggregator (one affine map, activation, softmax).

use serde::{Deserialize, Serialize};

use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::layers::{Activation, LayerSpec};
use crate::model::SplitTopology;
use crate::presets;
use crate::quant::QuantizerSpec;
use crate::scalar::Scalar;
use crate::trainer::{evaluate, evaluate_many, train, Evaluation, TrainConfig, TrainFailure, TrainMode, Trained};

/// Activation between the FDML weighted sum and the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdmlActivation {
    #[default]
    Identity,
    Sigmoid,
}

/// Zero-hidden-layer aggregator: `softmax(act(W c + b))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FdmlAggregatorSpec {
    pub input_dim: usize,
    pub classes: usize,
    pub activation: FdmlActivation,
}

impl FdmlAggregatorSpec {
    pub fn new(input_dim: usize, classes: usize, activation: FdmlActivation) -> Self {
        Self { input_dim, classes, activation }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let act = match self.activation {
            FdmlActivation::Identity => Activation::Identity,
            FdmlActivation::Sigmoid => Activation::Sigmoid,
        };
        vec![LayerSpec::fc(self.input_dim, self.classes, act)]
    }

    /// `C·K + K`.
    pub fn param_count(&self) -> usize {
        self.input_dim * self.classes + self.classes
    }
}

/// `base` with its aggregator replaced by the FDML one; node stacks unchanged.
pub fn fdml_topology(base: &SplitTopology, activation: FdmlActivation) -> Result<SplitTopology> {
    let spec = FdmlAggregatorSpec::new(base.total_code_dim(), base.classes, activation);
    SplitTopology::new(base.nodes.clone(), base.quantizer, spec.layers(), base.classes)
}

pub fn mnist_fdml(c: usize, bits: Option<u32>, activation: FdmlActivation) -> Result<SplitTopology> {
    fdml_topology(&presets::mnist_split(c, bits)?, activation)
}

/// Trains the single-node full-feature network and reports eval accuracy.
pub fn centralized_reference<T: Scalar>(
    topology: &SplitTopology,
    data: &SplitData<T>,
    cfg: &TrainConfig,
) -> std::result::Result<(Trained<T>, Evaluation), TrainFailure> {
    if topology.node_count() != 1 || topology.quantizer.is_some() {
        return Err(TrainFailure {
            error: Error::Topology("the centralized reference is one unquantized node".into()),
            history: Default::default(),
        });
    }
    let trained = train(topology, data, cfg, TrainMode::Centralized)?;
    let eval = evaluate(topology, &trained.params, &data.eval)
        .map_err(|error| TrainFailure { error, history: trained.history.clone() })?;
    Ok((trained, eval))
}

/// Trains an FDML model and evaluates it under each quantizer setting.
pub fn fdml_train_eval<T: Scalar>(
    topology: &SplitTopology,
    data: &SplitData<T>,
    cfg: &TrainConfig,
    quantizers: &[Option<QuantizerSpec>],
) -> std::result::Result<(Trained<T>, Vec<Evaluation>), TrainFailure> {
    if topology.aggregator.len() != 1 {
        return Err(TrainFailure {
            error: Error::Topology("FDML aggregator must be a single affine layer".into()),
            history: Default::default(),
        });
    }
    let trained = train(topology, data, cfg, TrainMode::Distributed)?;
    let evals = evaluate_many(topology, &trained.params, &data.eval, quantizers)
        .map_err(|error| TrainFailure { error, history: trained.history.clone() })?;
    Ok((trained, evals))
}
