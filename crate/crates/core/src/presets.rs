//! Ready-made topologies for the MNIST and time-series experiments.

use crate::error::{Error, Result};
use crate::layers::{Activation, LayerSpec};
use crate::model::{NodeSpec, SplitTopology};
use crate::quant::QuantizerSpec;

pub const MNIST_CLASSES: usize = 10;
pub const MNIST_NODES: usize = 4;
pub const MNIST_FILTERS: usize = 32;
pub const MNIST_KERNEL: usize = 5;
/// Width of the aggregator's expansion layer.
pub const MNIST_HIDDEN: usize = 1024;

pub const SERIES_CLASSES: usize = 20;
pub const SERIES_NODES: usize = 4;
pub const SERIES_WINDOW: usize = 50;
pub const SERIES_STATE: usize = 40;
pub const SERIES_CODE: usize = 9;
pub const SERIES_HIDDEN: usize = 20;

/// Code-value range of sigmoid outputs.
pub fn unit_quantizer(bits: Option<u32>) -> Result<Option<QuantizerSpec>> {
    bits.map(QuantizerSpec::unit).transpose()
}

/// Code-value range of LSTM outputs.
pub fn symmetric_quantizer(bits: Option<u32>) -> Result<Option<QuantizerSpec>> {
    bits.map(QuantizerSpec::symmetric).transpose()
}

/// Quadrant node: 32 5×5 filters with 2×2 pooling, then `code` sigmoid units.
pub fn mnist_node(code: usize) -> NodeSpec {
    let pooled = 7 * 7 * MNIST_FILTERS;
    NodeSpec {
        input_shape: vec![14, 14, 1],
        layers: vec![
            LayerSpec::conv(1, MNIST_FILTERS, MNIST_KERNEL, Activation::Relu, true),
            LayerSpec::fc(pooled, code, Activation::Sigmoid),
        ],
    }
}

/// Expansion aggregator: `C → 1024 → classes`.
pub fn expansion_aggregator(c: usize, classes: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::fc(c, MNIST_HIDDEN, Activation::Relu), LayerSpec::fc(MNIST_HIDDEN, classes, Activation::Identity)]
}

fn per_node_code(c: usize) -> Result<usize> {
    if c == 0 || !c.is_multiple_of(MNIST_NODES) {
        return Err(Error::Config(format!("C = {c} must be a positive multiple of {MNIST_NODES}")));
    }
    Ok(c / MNIST_NODES)
}

/// Four quadrant nodes emitting `C/4` values each, expansion aggregator.
pub fn mnist_split(c: usize, bits: Option<u32>) -> Result<SplitTopology> {
    let code = per_node_code(c)?;
    SplitTopology::new(
        vec![mnist_node(code); MNIST_NODES],
        unit_quantizer(bits)?,
        expansion_aggregator(c, MNIST_CLASSES),
        MNIST_CLASSES,
    )
}

/// Whole-image network of the same layer budget: conv/pool, FC-1024, FC-10.
pub fn mnist_centralized() -> SplitTopology {
    let node = NodeSpec {
        input_shape: vec![28, 28, 1],
        layers: vec![
            LayerSpec::conv(1, MNIST_FILTERS, MNIST_KERNEL, Activation::Relu, true),
            LayerSpec::fc(14 * 14 * MNIST_FILTERS, MNIST_HIDDEN, Activation::Relu),
        ],
    };
    SplitTopology::new(
        vec![node],
        None,
        vec![LayerSpec::fc(MNIST_HIDDEN, MNIST_CLASSES, Activation::Identity)],
        MNIST_CLASSES,
    )
    .expect("valid preset")
}

/// Series node: LSTM(1→40) over the window, LSTM(40→9) keeping the last state.
pub fn series_node() -> NodeSpec {
    NodeSpec {
        input_shape: vec![SERIES_WINDOW, 1],
        layers: vec![LayerSpec::lstm(1, SERIES_STATE, true), LayerSpec::lstm(SERIES_STATE, SERIES_CODE, false)],
    }
}

fn series_aggregator(input: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::fc(input, SERIES_HIDDEN, Activation::Relu),
        LayerSpec::fc(SERIES_HIDDEN, SERIES_CLASSES, Activation::Identity),
    ]
}

/// Four series nodes sending 9 values each to a `36 → 20 → 20` aggregator.
pub fn series_split(bits: Option<u32>) -> Result<SplitTopology> {
    SplitTopology::new(
        vec![series_node(); SERIES_NODES],
        symmetric_quantizer(bits)?,
        series_aggregator(SERIES_NODES * SERIES_CODE),
        SERIES_CLASSES,
    )
}

/// All four channels in one network: LSTM(4→40), LSTM(40→36), `36 → 20 → 20`.
pub fn series_centralized() -> SplitTopology {
    let code = SERIES_NODES * SERIES_CODE;
    let node = NodeSpec {
        input_shape: vec![SERIES_WINDOW, SERIES_NODES],
        layers: vec![LayerSpec::lstm(SERIES_NODES, SERIES_STATE, true), LayerSpec::lstm(SERIES_STATE, code, false)],
    };
    SplitTopology::new(vec![node], None, series_aggregator(code), SERIES_CLASSES).expect("valid preset")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{bits_per_inference, raw_baseline_bits};

    #[test]
    fn mnist_split_dimensions() {
        for c in [12, 16, 32, 64, 128, 256, 512, 1024] {
            let t = mnist_split(c, Some(4)).unwrap();
            assert_eq!(t.code_dims(), vec![c / 4; 4]);
            assert_eq!(t.total_feature_dim(), 784);
            assert_eq!(bits_per_inference(&t).total, 4 * c as u64);
        }
        assert!(mnist_split(10, None).is_err());
        assert!(mnist_split(0, None).is_err());
    }

    #[test]
    fn series_node_sends_27_bits_at_q3() {
        let t = series_split(Some(3)).unwrap();
        assert_eq!(t.code_dims(), vec![9; 4]);
        assert_eq!(bits_per_inference(&t).per_node, vec![27; 4]);
    }

    #[test]
    fn centralized_presets_see_all_features() {
        let m = mnist_centralized();
        assert_eq!(m.node_count(), 1);
        assert_eq!(raw_baseline_bits(&[m.feature_dim(0)], 8), 6272);
        let s = series_centralized();
        assert_eq!(s.feature_dim(0), 200);
        assert_eq!(s.total_code_dim(), 36);
    }
}
