//! Training by centralized gradient descent or by the node/aggregator
//! message-passing protocol.
//!
//! In a distributed round each node sends its code uplink, the aggregator
//! returns `∂L/∂c_i` downlink, and each node finishes its own backward pass.
//! With the default simultaneous update every gradient is taken at the
//! pre-round parameters, so a round reproduces a centralized step exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::ledger::{CommLedger, FLOAT_WIRE_BITS};
use crate::model::{
    self, aggregator_loss_graph, composed_loss_graph, node_graph, Batch, LossConfig, ModelParams, QuantMode,
    SplitInference, SplitTopology,
};
use crate::protocol::{Direction, Message, Payload, ProtocolTrace};
use crate::quant::QuantizerSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Rows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// `w ← w − η ∇L`.
    Sgd,
    Adam,
}

/// Quantizer treatment while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainQuant {
    /// Train on real-valued codes; quantize only at inference.
    Off,
    /// Hard quantization forward, clipped identity backward.
    StraightThrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    /// All gradients at the current parameters, then every owner updates.
    Simultaneous,
    /// The aggregator updates first and node gradients are taken at the new
    /// aggregator parameters.
    AggregatorFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Centralized,
    Distributed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub quant: TrainQuant,
    pub optimizer: Optimizer,
    pub lambda: f64,
    pub update_order: UpdateOrder,
    /// Stop once eval loss has not improved for this many epochs.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 32,
            epochs: 5,
            seed: 0,
            quant: TrainQuant::Off,
            optimizer: Optimizer::Adam,
            lambda: model::DEFAULT_LAMBDA,
            update_order: UpdateOrder::Simultaneous,
            patience: None,
        }
    }
}

impl TrainConfig {
    /// Plain gradient descent with the given step size.
    pub fn sgd(lr: f64) -> Self {
        Self { lr, optimizer: Optimizer::Sgd, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda: self.lambda }
    }

    fn quant_mode(&self) -> QuantMode {
        match self.quant {
            TrainQuant::Off => QuantMode::Off,
            TrainQuant::StraightThrough => QuantMode::StraightThrough,
        }
    }
}

/// Per-owner optimizer state.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    kind: Optimizer,
    lr: T,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: Vec<i32>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: Optimizer, lr: f64, owners: usize) -> Self {
        Self {
            kind,
            lr: T::lit(lr),
            first: vec![Vec::new(); owners],
            second: vec![Vec::new(); owners],
            steps: vec![0; owners],
        }
    }

    /// Applies one update to `owner`'s parameters.
    pub fn update(&mut self, params: &mut ModelParams<T>, owner: usize, grads: &[Tensor<T>]) {
        match self.kind {
            Optimizer::Sgd => {
                for ((_, w), g) in params.owner_mut(owner).iter_mut().zip(grads) {
                    for (w, &g) in w.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * g;
                    }
                }
            }
            Optimizer::Adam => {
                let n: usize = grads.iter().map(Tensor::len).sum();
                if self.first[owner].len() != n {
                    self.first[owner] = vec![T::zero(); n];
                    self.second[owner] = vec![T::zero(); n];
                }
                self.steps[owner] += 1;
                let t = self.steps[owner];
                let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(ADAM_EPSILON));
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                let (m, v) = (&mut self.first[owner], &mut self.second[owner]);
                let mut k = 0;
                for ((_, w), g) in params.owner_mut(owner).iter_mut().zip(grads) {
                    for (w, &g) in w.data_mut().iter_mut().zip(g.data()) {
                        m[k] = b1 * m[k] + (T::one() - b1) * g;
                        v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                        *w -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                        k += 1;
                    }
                }
            }
        }
    }
}

/// Aggregator result for one round.
#[derive(Debug, Clone)]
pub struct AggregatorPass<T> {
    /// `CE + λ‖w_0‖²`.
    pub loss: T,
    pub grads: Vec<Tensor<T>>,
    /// `∂L/∂c_i` in node order.
    pub code_grads: Vec<Tensor<T>>,
}

/// Graphs and optimizer state for repeated steps on one topology.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    topology: SplitTopology,
    cfg: TrainConfig,
    composed: Graph<T>,
    nodes: Vec<Graph<T>>,
    aggregator: Graph<T>,
    optimizer: OptimizerState<T>,
    steps: usize,
}

fn owner_grads<T: Scalar>(params: &ModelParams<T>, grads: &Gradients<T>, owner: usize) -> Vec<Tensor<T>> {
    params
        .owner(owner)
        .iter()
        .map(|(name, w)| grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(w.shape().to_vec())))
        .collect()
}

fn all_finite<T: Scalar>(grads: &[Tensor<T>]) -> bool {
    grads.iter().all(Tensor::is_finite)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(topology: &SplitTopology, cfg: &TrainConfig) -> Result<Self> {
        topology.validate()?;
        cfg.validate()?;
        let mode = cfg.quant_mode();
        Ok(Self {
            topology: topology.clone(),
            cfg: cfg.clone(),
            composed: composed_loss_graph(topology, cfg.lambda, mode),
            nodes: (0..topology.node_count()).map(|i| node_graph(topology, i, mode)).collect(),
            aggregator: aggregator_loss_graph(topology, cfg.lambda),
            optimizer: OptimizerState::new(cfg.optimizer, cfg.lr, topology.owner_count()),
            steps: 0,
        })
    }

    pub fn topology(&self) -> &SplitTopology {
        &self.topology
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Steps or rounds taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Bits per transmitted code value during training.
    pub fn uplink_bits(&self) -> u32 {
        match (self.cfg.quant, self.topology.quantizer) {
            (TrainQuant::StraightThrough, Some(q)) => q.bits,
            _ => FLOAT_WIRE_BITS,
        }
    }

    fn diverged(&self, detail: impl Into<String>) -> Error {
        Error::Diverged { epoch: 0, step: self.steps, detail: detail.into() }
    }

    fn lift(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(d) => self.diverged(d),
            other => other,
        }
    }

    /// One full-graph gradient step; returns the loss before the update.
    pub fn centralized_step(&mut self, params: &mut ModelParams<T>, batch: &Batch<T>) -> Result<T> {
        batch.check(&self.topology)?;
        let feed = batch.feed();
        let loss = match self.composed.forward(&(&feed, &*params)) {
            Ok(v) => v.item(),
            Err(e) => return Err(self.lift(e)),
        };
        let grads = self.composed.backward()?;
        let per_owner: Vec<Vec<Tensor<T>>> =
            (0..self.topology.owner_count()).map(|k| owner_grads(params, &grads, k)).collect();
        if !per_owner.iter().all(|g| all_finite(g)) {
            return Err(self.diverged("non-finite gradient"));
        }
        for (k, g) in per_owner.iter().enumerate() {
            self.optimizer.update(params, k, g);
        }
        self.steps += 1;
        Ok(loss)
    }

    /// Node side, uplink: `c_i = C_i(x_i; w_i)`.
    pub fn node_forward(&mut self, params: &ModelParams<T>, node: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let feed = vec![(model::node_input_name(node), x.clone())];
        match self.nodes[node].forward(&(&feed, params)) {
            Ok(c) => Ok(c.clone()),
            Err(e) => Err(self.lift(e)),
        }
    }

    /// Aggregator side: loss, `∇_{w_0}L` and `∂L/∂c_i` from received codes.
    pub fn aggregator_pass(
        &mut self,
        params: &ModelParams<T>,
        codes: &[(usize, Tensor<T>)],
        labels: &Tensor<T>,
    ) -> Result<AggregatorPass<T>> {
        let n = self.topology.node_count();
        let mut seen = vec![false; n];
        for (node, _) in codes {
            match seen.get_mut(*node) {
                None => return Err(Error::Protocol(format!("code from unknown node {node}"))),
                Some(s) if *s => return Err(Error::Protocol(format!("node {node} sent twice"))),
                Some(s) => *s = true,
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Protocol(format!("no code received from node {missing}")));
        }
        let mut feed: Vec<(String, Tensor<T>)> =
            codes.iter().map(|(i, c)| (model::code_input_name(*i), c.clone())).collect();
        feed.push((model::LABELS.to_string(), labels.clone()));
        let loss = match self.aggregator.forward(&(&feed, params)) {
            Ok(v) => v.item(),
            Err(e) => return Err(self.lift(e)),
        };
        let grads = self.aggregator.backward()?;
        let code_grads = (0..n)
            .map(|i| grads.get(&model::code_input_name(i)).cloned().expect("code inputs are differentiable"))
            .collect();
        Ok(AggregatorPass { loss, grads: owner_grads(params, &grads, 0), code_grads })
    }

    /// Node side, downlink: `∇_{w_i}L = ∂L/∂c_i · ∂C_i/∂w_i + 2λ w_i`, using
    /// the activations of the last [`Self::node_forward`] for this node.
    pub fn node_backward(
        &mut self,
        params: &ModelParams<T>,
        node: usize,
        upstream: Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let grads = self.nodes[node].backward_with(upstream)?;
        let two_lambda = T::lit(2.0 * self.cfg.lambda);
        let mut out = owner_grads(params, &grads, node + 1);
        if self.cfg.lambda != 0.0 {
            for (g, (_, w)) in out.iter_mut().zip(params.owner(node + 1)) {
                for (g, &w) in g.data_mut().iter_mut().zip(w.data()) {
                    *g += two_lambda * w;
                }
            }
        }
        Ok(out)
    }

    /// One protocol round; returns the pre-update loss and the messages sent.
    pub fn distributed_round(&mut self, params: &mut ModelParams<T>, batch: &Batch<T>) -> Result<(T, ProtocolTrace)> {
        batch.check(&self.topology)?;
        let n = self.topology.node_count();
        let round = self.steps;
        let mut trace = ProtocolTrace::new(n);
        let uplink_bits = self.uplink_bits();

        let mut codes = Vec::with_capacity(n);
        for i in 0..n {
            let c = self.node_forward(params, i, &batch.inputs[i])?;
            trace.push(Message {
                round,
                direction: Direction::Uplink,
                node: i,
                role: Payload::Code,
                dims: c.shape().to_vec(),
                bits_per_value: uplink_bits,
            });
            codes.push((i, c));
        }

        let labels = batch.labels_tensor();
        let pass = self.aggregator_pass(params, &codes, &labels)?;
        let node_reg: T = (1..=n).map(|k| params.sum_squares(k)).sum::<T>() * T::lit(self.cfg.lambda);
        let loss = pass.loss + node_reg;
        if !loss.is_finite() || !all_finite(&pass.grads) || !all_finite(&pass.code_grads) {
            return Err(self.diverged("non-finite aggregator loss or gradient"));
        }

        let code_grads = match self.cfg.update_order {
            UpdateOrder::Simultaneous => pass.code_grads,
            UpdateOrder::AggregatorFirst => {
                self.optimizer.update(params, 0, &pass.grads);
                self.aggregator_pass(params, &codes, &labels)?.code_grads
            }
        };

        let mut node_grads = Vec::with_capacity(n);
        for (i, g) in code_grads.into_iter().enumerate() {
            trace.push(Message {
                round,
                direction: Direction::Downlink,
                node: i,
                role: Payload::DownstreamGradient,
                dims: g.shape().to_vec(),
                bits_per_value: FLOAT_WIRE_BITS,
            });
            let grads = self.node_backward(params, i, g)?;
            if !all_finite(&grads) {
                return Err(self.diverged(format!("non-finite gradient at node {i}")));
            }
            node_grads.push(grads);
        }
        trace.validate()?;

        if self.cfg.update_order == UpdateOrder::Simultaneous {
            self.optimizer.update(params, 0, &pass.grads);
        }
        for (i, g) in node_grads.iter().enumerate() {
            self.optimizer.update(params, i + 1, g);
        }
        self.steps += 1;
        Ok((loss, trace))
    }
}

/// One centralized gradient-descent step from fresh optimizer state.
pub fn centralized_step<T: Scalar>(
    topology: &SplitTopology,
    params: &ModelParams<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, T)> {
    let mut p = params.clone();
    let loss = Trainer::new(topology, cfg)?.centralized_step(&mut p, batch)?;
    Ok((p, loss))
}

/// One protocol round from fresh optimizer state.
pub fn distributed_round<T: Scalar>(
    topology: &SplitTopology,
    params: &ModelParams<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, T, ProtocolTrace)> {
    let mut p = params.clone();
    let (loss, trace) = Trainer::new(topology, cfg)?.distributed_round(&mut p, batch)?;
    Ok((p, loss, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    /// Mean cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Accuracy and loss through the inference path, quantizer included.
pub fn evaluate<T: Scalar>(
    topology: &SplitTopology,
    params: &ModelParams<T>,
    data: &SplitDataset<T>,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let mut inference = SplitInference::new(topology);
    let k = topology.classes;
    let (mut loss, mut correct) = (0.0, 0usize);
    let mut start = 0;
    while start < data.len() {
        let batch = data.slice(start, EVAL_CHUNK);
        batch.check(topology)?;
        let codes = (0..topology.node_count())
            .map(|i| inference.compress(params, i, &batch.inputs[i]))
            .collect::<Result<Vec<_>>>()?;
        let probs = inference.infer(params, &codes)?;
        for (row, &y) in probs.data().chunks(k).zip(&batch.labels) {
            let p = row[y].to_f64().unwrap_or(0.0).max(f64::MIN_POSITIVE);
            loss -= p.ln();
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            correct += usize::from(best == y);
        }
        start += batch.len();
    }
    let n = data.len() as f64;
    Ok(Evaluation { loss: loss / n, accuracy: correct as f64 / n, samples: data.len() })
}

/// Evaluates the same parameters under several quantizer settings.
pub fn evaluate_many<T: Scalar>(
    topology: &SplitTopology,
    params: &ModelParams<T>,
    data: &SplitDataset<T>,
    quantizers: &[Option<QuantizerSpec>],
) -> Result<Vec<Evaluation>> {
    quantizers
        .iter()
        .map(|q| evaluate(&topology.clone().with_quantizer(*q), params, data))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Cumulative training traffic at the end of the epoch.
    pub uplink_bits: u64,
    pub downlink_bits: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub params: ModelParams<T>,
    pub history: History,
    /// Every protocol message; empty for centralized runs.
    pub trace: ProtocolTrace,
    pub ledger: CommLedger,
}

/// A run that stopped on an error, with the epochs completed before it.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub history: History,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} completed epochs)", self.error, self.history.epochs.len())
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

/// Trains from seeded initialization.
pub fn train<T: Scalar>(
    topology: &SplitTopology,
    data: &crate::data::SplitData<T>,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> std::result::Result<Trained<T>, TrainFailure> {
    train_from(topology, ModelParams::init(topology, cfg.seed), data, cfg, mode)
}

/// Trains starting from `params`.
pub fn train_from<T: Scalar>(
    topology: &SplitTopology,
    mut params: ModelParams<T>,
    data: &crate::data::SplitData<T>,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> std::result::Result<Trained<T>, TrainFailure> {
    let mut history = History::default();
    let fail = |error: Error, history: History| TrainFailure { error, history };
    let mut trainer = match Trainer::new(topology, cfg).and_then(|t| params.check_layout(topology).map(|_| t)) {
        Ok(t) => t,
        Err(e) => return Err(fail(e, history)),
    };
    if data.train.is_empty() || data.eval.is_empty() {
        return Err(fail(Error::Invalid("train and eval sets must be nonempty".into()), history));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut trace = ProtocolTrace::new(topology.node_count());
    let mut ledger = CommLedger::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch).enumerate() {
            let batch = data.train.batch(idx);
            let result = match mode {
                TrainMode::Centralized => trainer.centralized_step(&mut params, &batch),
                TrainMode::Distributed => trainer.distributed_round(&mut params, &batch).and_then(|(loss, t)| {
                    ledger.record_trace(&t)?;
                    trace.extend(t);
                    Ok(loss)
                }),
            };
            match result {
                Ok(loss) => total += loss.to_f64().unwrap_or(f64::NAN) * idx.len() as f64,
                Err(Error::Diverged { detail, .. }) => {
                    return Err(fail(Error::Diverged { epoch, step, detail }, history));
                }
                Err(e) => return Err(fail(e, history)),
            }
        }
        let eval = match evaluate(topology, &params, &data.eval) {
            Ok(e) => e,
            Err(e) => return Err(fail(e, history)),
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / data.train.len() as f64,
            eval_loss: eval.loss,
            eval_accuracy: eval.accuracy,
            uplink_bits: ledger.bits(crate::ledger::Phase::Training, Direction::Uplink),
            downlink_bits: ledger.bits(crate::ledger::Phase::Training, Direction::Downlink),
        });
        if let Some(patience) = cfg.patience {
            if eval.loss < best {
                best = eval.loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(Trained { params, history, trace, ledger })
}
