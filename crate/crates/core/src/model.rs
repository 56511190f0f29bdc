//! Split model: `N` node-side compressors feeding one aggregator network.
//!
//! Parameters are partitioned by owner. Owner `0` is the aggregator; owner
//! `k` for `k = 1..=N` is node `k - 1` (node indices are zero-based
//! throughout the API). Every parameter name starts with its owner prefix
//! (`agg.` or `node<k>.`), which is how ownership is recovered from a name.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::quant::{self, QuantizerSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LABELS: &str = "labels";
pub const DEFAULT_LAMBDA: f64 = 1e-4;

pub fn node_input_name(node: usize) -> String {
    format!("x{node}")
}

pub fn code_input_name(node: usize) -> String {
    format!("c{node}")
}

pub fn owner_prefix(owner: usize) -> String {
    if owner == 0 {
        "agg".to_string()
    } else {
        format!("node{owner}")
    }
}

/// Owner index encoded in a parameter name.
pub fn owner_of(name: &str) -> Option<usize> {
    let head = name.split('.').next()?;
    if head == "agg" {
        return Some(0);
    }
    head.strip_prefix("node")?.parse().ok().filter(|&k| k > 0)
}

/// One node's compressor: the per-sample feature shape it observes and its
/// layer stack, which must end in a flat code vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitTopology {
    pub nodes: Vec<NodeSpec>,
    /// Applied to every node's output before transmission.
    pub quantizer: Option<QuantizerSpec>,
    pub aggregator: Vec<LayerSpec>,
    pub classes: usize,
}

impl SplitTopology {
    pub fn new(
        nodes: Vec<NodeSpec>,
        quantizer: Option<QuantizerSpec>,
        aggregator: Vec<LayerSpec>,
        classes: usize,
    ) -> Result<Self> {
        let t = Self { nodes, quantizer, aggregator, classes };
        t.validate()?;
        Ok(t)
    }

    pub fn with_quantizer(mut self, quantizer: Option<QuantizerSpec>) -> Self {
        self.quantizer = quantizer;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Topology("at least one node is required".into()));
        }
        if self.classes < 2 {
            return Err(Error::Topology(format!("need at least two classes, got {}", self.classes)));
        }
        let mut total = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.input_shape.is_empty() || node.input_shape.contains(&0) {
                return Err(Error::Topology(format!("node {i} has empty input shape {:?}", node.input_shape)));
            }
            let out = chain_shapes(&node.input_shape, &node.layers)
                .map_err(|e| Error::Topology(format!("node {i}: {e}")))?;
            if out.len() != 1 {
                return Err(Error::Topology(format!("node {i} must emit a flat code, emits {out:?}")));
            }
            total += out[0];
        }
        if self.aggregator.is_empty() {
            return Err(Error::Topology("aggregator has no layers".into()));
        }
        let out = chain_shapes(&[total], &self.aggregator)
            .map_err(|e| Error::Topology(format!("aggregator (input {total}): {e}")))?;
        if out != [self.classes] {
            return Err(Error::Topology(format!(
                "aggregator emits {out:?}, expected {} class scores",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn owner_count(&self) -> usize {
        self.nodes.len() + 1
    }

    pub fn code_dim(&self, node: usize) -> usize {
        let out = chain_shapes(&self.nodes[node].input_shape, &self.nodes[node].layers).expect("validated topology");
        out[0]
    }

    pub fn code_dims(&self) -> Vec<usize> {
        (0..self.nodes.len()).map(|i| self.code_dim(i)).collect()
    }

    /// `C`: total values sent per inference.
    pub fn total_code_dim(&self) -> usize {
        self.code_dims().iter().sum()
    }

    /// `d_i`: feature count observed by node `i`.
    pub fn feature_dim(&self, node: usize) -> usize {
        self.nodes[node].input_shape.iter().product()
    }

    /// `d`: total feature count.
    pub fn total_feature_dim(&self) -> usize {
        (0..self.nodes.len()).map(|i| self.feature_dim(i)).sum()
    }

    fn owner_layers(&self, owner: usize) -> &[LayerSpec] {
        if owner == 0 {
            &self.aggregator
        } else {
            &self.nodes[owner - 1].layers
        }
    }

    /// Parameter names and shapes of one owner, in construction order.
    pub fn owner_param_shapes(&self, owner: usize) -> Vec<(String, Vec<usize>)> {
        let prefix = owner_prefix(owner);
        self.owner_layers(owner)
            .iter()
            .enumerate()
            .flat_map(|(j, layer)| {
                let lp = format!("{prefix}.l{j}");
                layer.param_shapes().into_iter().map(move |(n, s)| (format!("{lp}.{n}"), s))
            })
            .collect()
    }

    pub fn param_count(&self, owner: usize) -> usize {
        self.owner_layers(owner).iter().map(LayerSpec::param_count).sum()
    }
}

fn chain_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<usize>> {
    layers.iter().try_fold(input.to_vec(), |shape, layer| layer.output_shape(&shape))
}

/// `w = {w_0, ..., w_N}` with a disjoint, complete owner partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    owners: Vec<Vec<(String, Tensor<T>)>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization; each owner draws from its own stream, so node
    /// `i`'s weights do not depend on the other owners.
    pub fn init(topology: &SplitTopology, seed: u64) -> Self {
        let owners = (0..topology.owner_count())
            .map(|owner| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(owner as u64 + 1);
                let prefix = owner_prefix(owner);
                let mut params = Vec::new();
                for (j, layer) in topology.owner_layers(owner).iter().enumerate() {
                    for (n, t) in layer.init(&mut rng) {
                        params.push((format!("{prefix}.l{j}.{n}"), t));
                    }
                }
                params
            })
            .collect();
        Self { owners }
    }

    pub fn zeros(topology: &SplitTopology) -> Self {
        let owners = (0..topology.owner_count())
            .map(|owner| {
                topology
                    .owner_param_shapes(owner)
                    .into_iter()
                    .map(|(n, s)| (n, Tensor::zeros(s)))
                    .collect()
            })
            .collect();
        Self { owners }
    }

    /// Builds from explicit per-owner lists; every name must carry its
    /// owner's prefix.
    pub fn from_owners(owners: Vec<Vec<(String, Tensor<T>)>>) -> Result<Self> {
        for (k, params) in owners.iter().enumerate() {
            if let Some((name, _)) = params.iter().find(|(n, _)| owner_of(n) != Some(k)) {
                return Err(Error::Invalid(format!("parameter `{name}` does not belong to owner {k}")));
            }
        }
        Ok(Self { owners })
    }

    pub fn owner_count(&self) -> usize {
        self.owners.len()
    }

    pub fn owner(&self, owner: usize) -> &[(String, Tensor<T>)] {
        &self.owners[owner]
    }

    pub fn owner_mut(&mut self, owner: usize) -> &mut [(String, Tensor<T>)] {
        &mut self.owners[owner]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        let owner = owner_of(name)?;
        self.owners.get(owner)?.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let owner = owner_of(name)?;
        self.owners.get_mut(owner)?.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &Tensor<T>)> {
        self.owners
            .iter()
            .enumerate()
            .flat_map(|(o, ps)| ps.iter().map(move |(n, t)| (o, n.as_str(), t)))
    }

    pub fn len(&self, owner: usize) -> usize {
        self.owners[owner].iter().map(|(_, t)| t.len()).sum()
    }

    /// Owner parameters concatenated in construction order.
    pub fn flat(&self, owner: usize) -> Vec<T> {
        self.owners[owner].iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, owner: usize, values: &[T]) -> Result<()> {
        let expected = self.len(owner);
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "owner {owner} holds {expected} parameters, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        for (_, t) in &mut self.owners[owner] {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn sum_squares(&self, owner: usize) -> T {
        self.owners[owner].iter().map(|(_, t)| t.sum_squares()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.owners.iter().flatten().all(|(_, t)| t.is_finite())
    }

    /// Largest per-parameter absolute difference; `None` if the layouts differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.owners.len() != other.owners.len() {
            return None;
        }
        let mut worst = T::zero();
        for (a, b) in self.owners.iter().zip(&other.owners) {
            if a.len() != b.len() {
                return None;
            }
            for ((na, ta), (nb, tb)) in a.iter().zip(b) {
                if na != nb {
                    return None;
                }
                worst = worst.max(ta.max_abs_diff(tb)?);
            }
        }
        Some(worst)
    }

    /// Checks that names, shapes and owners match `topology`.
    pub fn check_layout(&self, topology: &SplitTopology) -> Result<()> {
        if self.owners.len() != topology.owner_count() {
            return Err(Error::Shape(format!(
                "{} owners for a {}-node topology",
                self.owners.len(),
                topology.node_count()
            )));
        }
        for (owner, params) in self.owners.iter().enumerate() {
            let expect = topology.owner_param_shapes(owner);
            let got: Vec<(String, Vec<usize>)> = params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
            if got != expect {
                return Err(Error::Shape(format!("owner {owner} layout {got:?} differs from {expect:?}")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            owners: self
                .owners
                .iter()
                .map(|ps| ps.iter().map(|(n, t)| (n.clone(), t.cast())).collect())
                .collect(),
        }
    }
}

impl<T> Bindings<T> for ModelParams<T> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        let owner = owner_of(name)?;
        self.owners.get(owner)?.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// One node's transmitted message for a batch of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Code<T> {
    pub node: usize,
    /// `[m, code_dim]`; dequantized bin centers when `levels` is present.
    pub values: Tensor<T>,
    pub levels: Option<Vec<u32>>,
    pub bits_per_value: u32,
}

impl<T: Scalar> Code<T> {
    pub fn value_count(&self) -> usize {
        self.values.len()
    }

    pub fn bit_size(&self) -> u64 {
        self.bits_per_value as u64 * self.values.len() as u64
    }
}

/// `L = Σ_i λ‖w_i‖² + mean cross-entropy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA }
    }
}

/// How the node-output quantizer appears in a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// Real-valued codes.
    Off,
    /// Hard quantization forward, clipped identity backward.
    StraightThrough,
    /// Hard quantization; not differentiable.
    Hard,
}

/// A mini-batch split by node.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// Node `i`'s features, `[m, input_shape...]`.
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.labels.len()], self.labels.iter().map(|&y| T::lit(y as f64)).collect())
            .expect("labels")
    }

    /// Checks per-node shapes and label range against `topology`.
    pub fn check(&self, topology: &SplitTopology) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if self.inputs.len() != topology.node_count() {
            return Err(Error::Shape(format!(
                "batch has {} node inputs, topology has {} nodes",
                self.inputs.len(),
                topology.node_count()
            )));
        }
        let m = self.len();
        for (i, x) in self.inputs.iter().enumerate() {
            let mut expect = vec![m];
            expect.extend_from_slice(&topology.nodes[i].input_shape);
            if x.shape() != expect.as_slice() {
                return Err(Error::Shape(format!("node {i} input {:?}, expected {expect:?}", x.shape())));
            }
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= topology.classes) {
            return Err(Error::Invalid(format!("label {y} out of range for {} classes", topology.classes)));
        }
        Ok(())
    }

    /// Graph feed holding node features and labels.
    pub fn feed(&self) -> Vec<(String, Tensor<T>)> {
        let mut feed: Vec<(String, Tensor<T>)> =
            self.inputs.iter().enumerate().map(|(i, x)| (node_input_name(i), x.clone())).collect();
        feed.push((LABELS.to_string(), self.labels_tensor()));
        feed
    }
}

fn build_stack<T: Scalar>(g: &mut Graph<T>, owner: usize, layers: &[LayerSpec], mut x: NodeId) -> NodeId {
    let prefix = owner_prefix(owner);
    for (j, layer) in layers.iter().enumerate() {
        x = layer.build(g, &format!("{prefix}.l{j}"), x);
    }
    x
}

fn apply_quant<T: Scalar>(g: &mut Graph<T>, topology: &SplitTopology, x: NodeId, mode: QuantMode) -> NodeId {
    match (topology.quantizer, mode) {
        (None, _) | (_, QuantMode::Off) => x,
        (Some(q), QuantMode::StraightThrough) => g.quantize(x, q, true),
        (Some(q), QuantMode::Hard) => g.quantize(x, q, false),
    }
}

fn regularized<T: Scalar>(g: &mut Graph<T>, data_loss: NodeId, lambda: f64) -> NodeId {
    if lambda == 0.0 {
        return data_loss;
    }
    let mut total: Option<NodeId> = None;
    for p in g.param_nodes() {
        let sq = g.sum_squares(p);
        total = Some(match total {
            Some(t) => g.add(t, sq),
            None => sq,
        });
    }
    match total {
        Some(t) => {
            let r = g.scale(t, T::lit(lambda));
            g.add(data_loss, r)
        }
        None => data_loss,
    }
}

/// `c_i = C_i(x_i; w_i)` for node `node`, output `[m, code_dim]`.
pub fn node_graph<T: Scalar>(topology: &SplitTopology, node: usize, mode: QuantMode) -> Graph<T> {
    let mut g = Graph::new();
    let x = g.data_input(&node_input_name(node), &topology.nodes[node].input_shape);
    let c = build_stack(&mut g, node + 1, &topology.nodes[node].layers, x);
    let c = apply_quant(&mut g, topology, c, mode);
    g.set_output(c);
    g
}

fn aggregator_logits<T: Scalar>(g: &mut Graph<T>, topology: &SplitTopology, codes: &[NodeId]) -> NodeId {
    let joined = if codes.len() == 1 { codes[0] } else { g.concat(codes) };
    build_stack(g, 0, &topology.aggregator, joined)
}

fn code_inputs<T: Scalar>(g: &mut Graph<T>, topology: &SplitTopology) -> Vec<NodeId> {
    (0..topology.node_count())
        .map(|i| g.batch_input(&code_input_name(i), &[topology.code_dim(i)]))
        .collect()
}

/// Aggregator-side loss from received codes: `CE + λ‖w_0‖²`. Codes are
/// differentiable inputs, so backward yields `∂L/∂c_i`.
pub fn aggregator_loss_graph<T: Scalar>(topology: &SplitTopology, lambda: f64) -> Graph<T> {
    let mut g = Graph::new();
    let codes = code_inputs(&mut g, topology);
    let logits = aggregator_logits(&mut g, topology, &codes);
    let labels = g.data_input(LABELS, &[]);
    let ce = g.softmax_cross_entropy(logits, labels);
    let loss = regularized(&mut g, ce, lambda);
    g.set_output(loss);
    g
}

/// Class distribution from received codes.
pub fn aggregator_probs_graph<T: Scalar>(topology: &SplitTopology) -> Graph<T> {
    let mut g = Graph::new();
    let codes = code_inputs(&mut g, topology);
    let logits = aggregator_logits(&mut g, topology, &codes);
    let p = g.softmax(logits);
    g.set_output(p);
    g
}

fn composed_logits<T: Scalar>(g: &mut Graph<T>, topology: &SplitTopology, mode: QuantMode) -> NodeId {
    let codes: Vec<NodeId> = (0..topology.node_count())
        .map(|i| {
            let x = g.data_input(&node_input_name(i), &topology.nodes[i].input_shape);
            let c = build_stack(g, i + 1, &topology.nodes[i].layers, x);
            apply_quant(g, topology, c, mode)
        })
        .collect();
    aggregator_logits(g, topology, &codes)
}

/// The whole network as one graph: `Σ λ‖w_i‖² + CE(T(C_1(x_1), ..., C_N(x_N)))`.
pub fn composed_loss_graph<T: Scalar>(topology: &SplitTopology, lambda: f64, mode: QuantMode) -> Graph<T> {
    let mut g = Graph::new();
    let logits = composed_logits(&mut g, topology, mode);
    let labels = g.data_input(LABELS, &[]);
    let ce = g.softmax_cross_entropy(logits, labels);
    let loss = regularized(&mut g, ce, lambda);
    g.set_output(loss);
    g
}

pub fn composed_probs_graph<T: Scalar>(topology: &SplitTopology, mode: QuantMode) -> Graph<T> {
    let mut g = Graph::new();
    let logits = composed_logits(&mut g, topology, mode);
    let p = g.softmax(logits);
    g.set_output(p);
    g
}

/// Cached inference graphs for one topology.
#[derive(Debug, Clone)]
pub struct SplitInference<T> {
    topology: SplitTopology,
    nodes: Vec<Graph<T>>,
    aggregator: Graph<T>,
}

impl<T: Scalar> SplitInference<T> {
    pub fn new(topology: &SplitTopology) -> Self {
        Self {
            topology: topology.clone(),
            nodes: (0..topology.node_count()).map(|i| node_graph(topology, i, QuantMode::Off)).collect(),
            aggregator: aggregator_probs_graph(topology),
        }
    }

    pub fn topology(&self) -> &SplitTopology {
        &self.topology
    }

    /// Real-valued node output before any quantization.
    pub fn raw_code(&mut self, params: &ModelParams<T>, node: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        if node >= self.topology.node_count() {
            return Err(Error::Invalid(format!(
                "unknown node {node} ({} nodes)",
                self.topology.node_count()
            )));
        }
        let batched = with_batch_axis(x, &self.topology.nodes[node].input_shape)?;
        let feed = vec![(node_input_name(node), batched)];
        Ok(self.nodes[node].forward(&(&feed, params))?.clone())
    }

    pub fn compress(&mut self, params: &ModelParams<T>, node: usize, x: &Tensor<T>) -> Result<Code<T>> {
        let raw = self.raw_code(params, node, x)?;
        Ok(encode(node, raw, self.topology.quantizer.as_ref()))
    }

    pub fn infer(&mut self, params: &ModelParams<T>, codes: &[Code<T>]) -> Result<Tensor<T>> {
        let n = self.topology.node_count();
        if codes.len() != n {
            return Err(Error::Invalid(format!("expected {n} codes, got {}", codes.len())));
        }
        let mut seen = vec![false; n];
        for c in codes {
            if c.node >= n {
                return Err(Error::Invalid(format!("code from unknown node {}", c.node)));
            }
            if std::mem::replace(&mut seen[c.node], true) {
                return Err(Error::Invalid(format!("duplicate code from node {}", c.node)));
            }
        }
        let mut feed = Vec::with_capacity(n);
        let mut rows = None;
        for c in codes {
            let values = match (&c.levels, &self.topology.quantizer) {
                (Some(levels), Some(q)) => quant::dequantize(q, c.values.shape(), levels),
                (Some(_), None) => {
                    return Err(Error::Invalid("quantized code for an unquantized topology".into()));
                }
                (None, _) => c.values.clone(),
            };
            let values = with_batch_axis(&values, &[self.topology.code_dim(c.node)])?;
            if *rows.get_or_insert(values.shape()[0]) != values.shape()[0] {
                return Err(Error::Shape("codes disagree on batch size".into()));
            }
            feed.push((code_input_name(c.node), values));
        }
        Ok(self.aggregator.forward(&(&feed, params))?.clone())
    }
}

/// Wraps `x` with a leading batch axis of one when it is a single sample.
fn with_batch_axis<T: Scalar>(x: &Tensor<T>, sample: &[usize]) -> Result<Tensor<T>> {
    if x.shape() == sample {
        let mut shape = vec![1];
        shape.extend_from_slice(sample);
        return x.clone().reshape(shape);
    }
    if x.rank() == sample.len() + 1 && &x.shape()[1..] == sample {
        return Ok(x.clone());
    }
    Err(Error::Shape(format!("expected per-sample shape {sample:?}, got {:?}", x.shape())))
}

/// Builds the transmitted code from a real-valued node output.
pub fn encode<T: Scalar>(node: usize, raw: Tensor<T>, quantizer: Option<&QuantizerSpec>) -> Code<T> {
    match quantizer {
        Some(q) => {
            let out = quant::quantize(q, &raw);
            Code { node, values: out.dequantized, levels: Some(out.levels), bits_per_value: q.bits }
        }
        None => Code { node, values: raw, levels: None, bits_per_value: crate::ledger::FLOAT_WIRE_BITS },
    }
}

/// Runs node `node`'s compressor (and quantizer, if configured) on `x`.
pub fn node_compress<T: Scalar>(
    topology: &SplitTopology,
    params: &ModelParams<T>,
    node: usize,
    x: &Tensor<T>,
) -> Result<Code<T>> {
    SplitInference::new(topology).compress(params, node, x)
}

/// Class probabilities `[m, classes]` from one code per node.
pub fn aggregate_infer<T: Scalar>(
    topology: &SplitTopology,
    params: &ModelParams<T>,
    codes: &[Code<T>],
) -> Result<Tensor<T>> {
    SplitInference::new(topology).infer(params, codes)
}

/// Training objective on the real-valued path (no quantizer).
pub fn total_loss<T: Scalar>(
    topology: &SplitTopology,
    params: &ModelParams<T>,
    batch: &Batch<T>,
    cfg: &LossConfig,
) -> Result<T> {
    batch.check(topology)?;
    let mut g = composed_loss_graph(topology, cfg.lambda, QuantMode::Off);
    let feed = batch.feed();
    Ok(g.forward(&(&feed, params))?.item())
}
