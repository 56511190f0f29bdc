//! Layer building blocks: fully connected, convolution + pooling, LSTM.
//!
//! Each [`LayerSpec`] knows its parameter shapes, how to initialize them and
//! how to append itself to a [`Graph`]. Shapes here are per sample; graphs
//! carry an extra leading batch axis.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        match self {
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }

    /// Output interval of the activation, when bounded.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            Activation::Sigmoid => Some((0.0, 1.0)),
            Activation::Tanh => Some((-1.0, 1.0)),
            Activation::Relu | Activation::Identity => None,
        }
    }
}

/// `σ(W x + b)` with `W` stored as `[out_dim, in_dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullyConnectedSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl FullyConnectedSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self { in_dim, out_dim, activation }
    }

    /// A fat weight matrix: fewer outputs than inputs.
    pub fn is_compression(&self) -> bool {
        self.out_dim < self.in_dim
    }

    pub fn is_expansion(&self) -> bool {
        self.out_dim > self.in_dim
    }
}

/// Same-padded stride-1 convolution with an optional 2x2/2 max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2DSpec {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: (usize, usize),
    pub activation: Activation,
    pub pool: bool,
}

/// Single-cell LSTM without peepholes, zero initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmSpec {
    pub input_dim: usize,
    pub state_dim: usize,
    /// Emit every hidden state (`[T, state_dim]`) instead of the last one.
    #[serde(default)]
    pub return_sequence: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Fc(FullyConnectedSpec),
    Conv(Conv2DSpec),
    Lstm(LstmSpec),
}

pub const FORGET_BIAS: f64 = 1.0;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl LayerSpec {
    pub fn fc(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec::Fc(FullyConnectedSpec::new(in_dim, out_dim, activation))
    }

    pub fn conv(in_channels: usize, filters: usize, kernel: usize, activation: Activation, pool: bool) -> Self {
        LayerSpec::Conv(Conv2DSpec { in_channels, filters, kernel: (kernel, kernel), activation, pool })
    }

    pub fn lstm(input_dim: usize, state_dim: usize, return_sequence: bool) -> Self {
        LayerSpec::Lstm(LstmSpec { input_dim, state_dim, return_sequence })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Fc(s) => {
                let n: usize = input.iter().product();
                if n != s.in_dim || input.is_empty() {
                    return Err(Error::Shape(format!(
                        "fully connected layer expects {} inputs, got shape {input:?}",
                        s.in_dim
                    )));
                }
                Ok(vec![s.out_dim])
            }
            LayerSpec::Conv(s) => {
                let [h, w, c] = *input else {
                    return Err(Error::Shape(format!("convolution expects H x W x C, got {input:?}")));
                };
                if c != s.in_channels {
                    return Err(Error::Shape(format!(
                        "convolution expects {} channels, got {c}",
                        s.in_channels
                    )));
                }
                if s.pool {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Shape(format!("2x2 pooling needs even sizes, got {h}x{w}")));
                    }
                    Ok(vec![h / 2, w / 2, s.filters])
                } else {
                    Ok(vec![h, w, s.filters])
                }
            }
            LayerSpec::Lstm(s) => {
                let [t, d] = *input else {
                    return Err(Error::Shape(format!("LSTM expects window x features, got {input:?}")));
                };
                if t == 0 {
                    return Err(Error::Shape("LSTM input series is empty".into()));
                }
                if d != s.input_dim {
                    return Err(Error::Shape(format!("LSTM expects {} features, got {d}", s.input_dim)));
                }
                Ok(if s.return_sequence { vec![t, s.state_dim] } else { vec![s.state_dim] })
            }
        }
    }

    /// Parameter names (relative to the layer prefix) and shapes.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerSpec::Fc(s) => vec![("weight", vec![s.out_dim, s.in_dim]), ("bias", vec![s.out_dim])],
            LayerSpec::Conv(s) => vec![
                ("kernel", vec![s.kernel.0, s.kernel.1, s.in_channels, s.filters]),
                ("bias", vec![s.filters]),
            ],
            LayerSpec::Lstm(s) => {
                let g = 4 * s.state_dim;
                vec![
                    ("input_weight", vec![g, s.input_dim]),
                    ("hidden_weight", vec![g, s.state_dim]),
                    ("bias", vec![g]),
                ]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Uniform weights scaled by fan-in, zero biases (LSTM forget gate at
    /// [`FORGET_BIAS`]).
    pub fn init<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor<T>)> {
        let (fan_in, gain) = match self {
            LayerSpec::Fc(s) => (s.in_dim, gain(s.activation)),
            LayerSpec::Conv(s) => (s.kernel.0 * s.kernel.1 * s.in_channels, gain(s.activation)),
            LayerSpec::Lstm(s) => (s.input_dim + s.state_dim, 1.0),
        };
        let limit = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        self.param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name == "bias" {
                    let mut b = vec![T::zero(); n];
                    if let LayerSpec::Lstm(s) = self {
                        for v in &mut b[s.state_dim..2 * s.state_dim] {
                            *v = T::lit(FORGET_BIAS);
                        }
                    }
                    b
                } else {
                    (0..n).map(|_| T::lit(rng.gen_range(-limit..limit))).collect()
                };
                (name, Tensor::new(shape, data).expect("init shape"))
            })
            .collect()
    }

    /// Appends the layer to `g` reading parameters `prefix.<name>`.
    pub fn build<T: Scalar>(&self, g: &mut Graph<T>, prefix: &str, x: NodeId) -> NodeId {
        let shapes = self.param_shapes();
        let params: Vec<NodeId> = shapes.iter().map(|(n, s)| g.param(&join(prefix, n), s)).collect();
        match self {
            LayerSpec::Fc(s) => {
                let flat = g.flatten(x);
                let z = g.matmul_t(flat, params[0]);
                let z = g.add_bias(z, params[1]);
                s.activation.apply(g, z)
            }
            LayerSpec::Conv(s) => {
                let z = g.conv2d(x, params[0]);
                let z = g.add_bias(z, params[1]);
                let a = s.activation.apply(g, z);
                if s.pool {
                    g.max_pool2(a)
                } else {
                    a
                }
            }
            LayerSpec::Lstm(s) => build_lstm(g, s, x, params[0], params[1], params[2]),
        }
    }
}

fn gain(a: Activation) -> f64 {
    match a {
        Activation::Relu => 2f64.sqrt(),
        _ => 1.0,
    }
}

/// Unrolls the recursion over every step of `x: [m, T, D]`; `T` comes from
/// the declared shape of the sequence node.
fn build_lstm<T: Scalar>(
    g: &mut Graph<T>,
    spec: &LstmSpec,
    x: NodeId,
    w_in: NodeId,
    w_hidden: NodeId,
    bias: NodeId,
) -> NodeId {
    let steps = sequence_len(g, x).expect("LSTM input must have a known window length");
    let hd = spec.state_dim;
    let mut hidden: Option<NodeId> = None;
    let mut cell: Option<NodeId> = None;
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = g.step(x, t);
        let mut gates = g.matmul_t(xt, w_in);
        if let Some(h) = hidden {
            let rec = g.matmul_t(h, w_hidden);
            gates = g.add(gates, rec);
        }
        let gates = g.add_bias(gates, bias);
        let hc = g.lstm_cell(gates, cell);
        let h = g.slice_cols(hc, 0, hd);
        cell = Some(g.slice_cols(hc, hd, hd));
        hidden = Some(h);
        outputs.push(h);
    }
    if spec.return_sequence {
        g.stack(&outputs)
    } else {
        hidden.expect("at least one step")
    }
}

/// Window length of a sequence node, known from the graph's declared shapes.
fn sequence_len<T: Scalar>(g: &Graph<T>, x: NodeId) -> Option<usize> {
    use crate::autograd::{LeafShape, Op};
    match g.op(x) {
        Op::Input { shape: LeafShape::Batched(s), .. } => s.first().copied(),
        Op::Input { shape: LeafShape::Fixed(s), .. } => s.get(1).copied(),
        Op::Stack => Some(g.inputs_of(x).len()),
        _ => None,
    }
}

/// Runs one layer on a batch `[m, ...]` (or a single unbatched sample).
fn run_layer<T: Scalar, B: Bindings<T> + ?Sized>(spec: &LayerSpec, params: &B, x: &Tensor<T>) -> Result<Tensor<T>> {
    let sample_rank = match spec {
        LayerSpec::Fc(_) => 1,
        LayerSpec::Conv(_) => 3,
        LayerSpec::Lstm(_) => 2,
    };
    let unbatched = x.rank() == sample_rank;
    let batch = if unbatched {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        x.clone().reshape(shape)?
    } else {
        x.clone()
    };
    if batch.rank() < 2 {
        return Err(Error::Shape(format!("layer input has shape {:?}", x.shape())));
    }
    let out_shape = spec.output_shape(&batch.shape()[1..])?;
    let mut g = Graph::new();
    let input = g.data_input("x", &batch.shape()[1..]);
    let y = spec.build(&mut g, "", input);
    g.set_output(y);
    let feed = vec![("x".to_string(), batch)];
    let out = g.forward(&(&feed, params))?.clone();
    if unbatched {
        out.reshape(out_shape)
    } else {
        Ok(out)
    }
}

pub fn fc_forward<T: Scalar, B: Bindings<T> + ?Sized>(
    spec: &FullyConnectedSpec,
    params: &B,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    run_layer(&LayerSpec::Fc(*spec), params, x)
}

pub fn conv_pool_forward<T: Scalar, B: Bindings<T> + ?Sized>(
    spec: &Conv2DSpec,
    params: &B,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    run_layer(&LayerSpec::Conv(*spec), params, image)
}

pub fn lstm_forward<T: Scalar, B: Bindings<T> + ?Sized>(
    spec: &LstmSpec,
    params: &B,
    series: &Tensor<T>,
) -> Result<Tensor<T>> {
    if series.is_empty() || series.shape().contains(&0) {
        return Err(Error::Shape("LSTM input series is empty".into()));
    }
    run_layer(&LayerSpec::Lstm(*spec), params, series)
}
