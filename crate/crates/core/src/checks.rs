//! Fast self-checks of the core invariants, run by `splitnet check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::grad_check;
use crate::error::Result;
use crate::layers::{Activation, LayerSpec};
use crate::ledger::{bits_per_inference, raw_baseline_bits, savings, MNIST_PIXEL_BITS};
use crate::model::{composed_loss_graph, Batch, ModelParams, NodeSpec, QuantMode, SplitInference, SplitTopology};
use crate::presets;
use crate::protocol::Direction;
use crate::quant::QuantizerSpec;
use crate::tensor::Tensor;
use crate::trainer::{centralized_step, distributed_round, TrainConfig, TrainQuant};

const CASES: u64 = 16;
const GRAD_TOLERANCE: f64 = 1e-4;
const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn random_topology(rng: &mut ChaCha8Rng) -> SplitTopology {
    let n = rng.gen_range(1..=4);
    topology_with_nodes(n, rng)
}

fn topology_with_nodes(n: usize, rng: &mut ChaCha8Rng) -> SplitTopology {
    let dims: Vec<(usize, usize)> = (0..n).map(|_| (rng.gen_range(1..6), rng.gen_range(1..4))).collect();
    let nodes: Vec<NodeSpec> = dims
        .iter()
        .map(|&(d, c)| {
            NodeSpec {
                input_shape: vec![d],
                layers: vec![LayerSpec::fc(d, d + 1, Activation::Tanh), LayerSpec::fc(d + 1, c, Activation::Sigmoid)],
            }
        })
        .collect();
    let c: usize = dims.iter().map(|d| d.1).sum();
    let hidden = rng.gen_range(2..8);
    let classes = rng.gen_range(2..6);
    SplitTopology::new(
        nodes,
        Some(QuantizerSpec::unit(rng.gen_range(1..6)).expect("valid bits")),
        vec![LayerSpec::fc(c, hidden, Activation::Relu), LayerSpec::fc(hidden, classes, Activation::Identity)],
        classes,
    )
    .expect("valid topology")
}

fn random_batch(t: &SplitTopology, m: usize, rng: &mut ChaCha8Rng) -> Batch<f64> {
    Batch {
        inputs: t
            .nodes
            .iter()
            .map(|n| {
                let mut s = vec![m];
                s.extend_from_slice(&n.input_shape);
                random(&s, rng)
            })
            .collect(),
        labels: (0..m).map(|_| rng.gen_range(0..t.classes)).collect(),
    }
}

fn outcome(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    match run() {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome { name, passed: false, detail: e.to_string() },
    }
}

fn gradients() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_topology(&mut rng).with_quantizer(None);
        let params = ModelParams::<f64>::init(&t, seed);
        let batch = random_batch(&t, rng.gen_range(1..6), &mut rng);
        let feed = batch.feed();
        let mut g = composed_loss_graph::<f64>(&t, 1e-2, QuantMode::Off);
        worst = worst.max(grad_check(&mut g, &(&feed, &params), 1e-6, GRAD_TOLERANCE)?.worst());
    }
    Ok((worst < GRAD_TOLERANCE, format!("worst relative error {worst:.2e} over {CASES} models")))
}

fn split_equivalence() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let t = random_topology(&mut rng);
        let params = ModelParams::<f64>::init(&t, seed);
        let batch = random_batch(&t, rng.gen_range(1..9), &mut rng);
        for quant in [TrainQuant::Off, TrainQuant::StraightThrough] {
            let cfg = TrainConfig { quant, lambda: 1e-3, ..TrainConfig::sgd(0.1) };
            let (central, _) = centralized_step(&t, &params, &batch, &cfg)?;
            let (split, _, trace) = distributed_round(&t, &params, &batch, &cfg)?;
            trace.validate()?;
            worst = worst.max(split.max_abs_diff(&central).unwrap_or(f64::INFINITY));
        }
    }
    Ok((worst < EQUIVALENCE_TOLERANCE, format!("max parameter difference {worst:.2e}")))
}

fn locality() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = presets::mnist_split(16, Some(4))?;
    let params = ModelParams::<f64>::init(&t, 7);
    let mut inference = SplitInference::new(&t);
    let batch = random_batch(&t, 2, &mut rng);
    let before: Vec<_> =
        (0..4).map(|i| inference.compress(&params, i, &batch.inputs[i])).collect::<Result<_>>()?;
    let mut inputs = batch.inputs.clone();
    inputs[2] = random(inputs[2].shape(), &mut rng);
    let after: Vec<_> = (0..4).map(|i| inference.compress(&params, i, &inputs[i])).collect::<Result<_>>()?;
    let unchanged = (0..4).filter(|&i| i != 2).all(|i| before[i] == after[i]);
    Ok((unchanged, "changing node 2's input leaves the other codes unchanged".into()))
}

fn bit_accounting() -> Result<(bool, String)> {
    let t = presets::mnist_split(64, Some(4))?;
    let bits = bits_per_inference(&t).total;
    let raw = raw_baseline_bits(&[28 * 28], MNIST_PIXEL_BITS);
    let s = savings(&t, MNIST_PIXEL_BITS);
    let series = bits_per_inference(&presets::series_split(Some(3))?).per_node;
    let ok = bits == 256 && raw == 6272 && (s - (1.0 - 256.0 / 6272.0)).abs() < 1e-12 && series == vec![27; 4];
    Ok((ok, format!("C=64 q=4: {bits} bits vs {raw} raw ({:.2}% saved); series node q=3: {} bits", 100.0 * s, series[0])))
}

fn quantizer_bounds() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ok = true;
    for bits in 1..=8 {
        for spec in [QuantizerSpec::unit(bits)?, QuantizerSpec::symmetric(bits)?] {
            for _ in 0..500 {
                let x: f64 = rng.gen_range(-2.0..2.0);
                let level = spec.level(x);
                let err = (spec.round_trip::<f64>(x) - spec.clip(x)).abs();
                ok &= (level as u64) < spec.levels() && err <= spec.bin_width() / 2.0 + 1e-12;
            }
        }
    }
    Ok((ok, "levels below 2^q and reconstruction within half a bin".into()))
}

fn protocol_shape() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = topology_with_nodes(4, &mut rng);
    let params = ModelParams::<f64>::init(&t, 3);
    let batch = random_batch(&t, 4, &mut rng);
    let cfg = TrainConfig { quant: TrainQuant::StraightThrough, ..TrainConfig::sgd(0.1) };
    let (_, _, trace) = distributed_round(&t, &params, &batch, &cfg)?;
    trace.validate()?;
    let n = t.node_count();
    let up = trace.messages().iter().filter(|m| m.direction == Direction::Uplink).count();
    let down = trace.messages().len() - up;
    Ok((up == n && down == n, format!("{n} nodes: {up} uplink and {down} downlink messages per round")))
}

fn determinism() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_topology(&mut rng);
    let params = ModelParams::<f64>::init(&t, 5);
    let batch = random_batch(&t, 6, &mut rng);
    let cfg = TrainConfig::default();
    let (a, la, _) = distributed_round(&t, &params, &batch, &cfg)?;
    let (b, lb, _) = distributed_round(&t, &params, &batch, &cfg)?;
    let same = la == lb && a.max_abs_diff(&b) == Some(0.0) && ModelParams::<f64>::init(&t, 5).max_abs_diff(&params) == Some(0.0);
    Ok((same, "identical seeds give identical parameters".into()))
}

/// Runs every check; each takes well under a second.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        outcome("gradients", gradients),
        outcome("split-equivalence", split_equivalence),
        outcome("locality", locality),
        outcome("bit-accounting", bit_accounting),
        outcome("quantizer-bounds", quantizer_bounds),
        outcome("protocol-shape", protocol_shape),
        outcome("determinism", determinism),
    ]
}
