//! Acceptance suite: one PASS/FAIL line per criterion on stdout.
//!
//! MNIST criteria read the IDX files from `SPLITNET_MNIST_DIR`, defaulting to
//! `data/mnist` at the workspace root.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitnet::autograd::{grad_check, Graph};
use splitnet::experiment::{run_rows, Dataset, ExperimentConfig, QSetting, ResultRow, Scheme};
use splitnet::layers::{Activation, LayerSpec};
use splitnet::ledger::{bits_per_inference, raw_baseline_bits, savings, MNIST_PIXEL_BITS};
use splitnet::model::{composed_loss_graph, Batch, ModelParams, NodeSpec, QuantMode, SplitInference, SplitTopology};
use splitnet::presets;
use splitnet::quant::{quantize, QuantizerSpec};
use splitnet::tensor::Tensor;
use splitnet::trainer::{centralized_step, distributed_round, train, TrainConfig, TrainMode, TrainQuant};
use splitnet::data::{SplitData, SplitDataset};

const GRAD_SEEDS: u64 = 20;
const GRAD_STEP: f64 = 1e-6;
const GRAD_TOLERANCE: f64 = 1e-4;
const ROUND_INSTANCES: u64 = 64;
const ROUND_TOLERANCE: f64 = 1e-9;
const RUN_TOLERANCE: f64 = 1e-7;
const QUANT_GRID: usize = 10_000;
const MNIST_EPOCHS: usize = 2;
const MNIST_SEEDS: [u64; 3] = [0, 1, 2];
const MNIST_SWEEP: [usize; 5] = [12, 16, 32, 64, 128];
const MNIST_GAP: f64 = 0.05;
const MNIST_BUDGET: Duration = Duration::from_secs(15 * 60);
const QUANT_GAP: f64 = 0.03;
const CURVE_SLACK: f64 = 0.01;
const SERIES_SEEDS: [u64; 3] = [0, 1, 2];
const SERIES_EPOCHS: usize = 10;
const SERIES_LR: f64 = 5e-3;
const SERIES_GAP: f64 = 0.03;
const SERIES_QUANT_GAP: f64 = 0.02;
const SERIES_BUDGET: Duration = Duration::from_secs(10 * 60);

fn verdict(n: u32, title: &str, passed: bool, detail: &str) {
    let line = format!("{} criterion {n} ({title}): {detail}", if passed { "PASS" } else { "FAIL" });
    // Straight to the handle so the line survives output capture.
    writeln!(std::io::stdout().lock(), "{line}").unwrap();
    assert!(passed, "{line}");
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
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

fn fc_topology(rng: &mut ChaCha8Rng, quantized: bool) -> SplitTopology {
    let n = rng.gen_range(1..=4);
    let dims: Vec<(usize, usize)> = (0..n).map(|_| (rng.gen_range(1..6), rng.gen_range(1..4))).collect();
    let nodes = dims
        .iter()
        .map(|&(d, c)| NodeSpec {
            input_shape: vec![d],
            layers: vec![LayerSpec::fc(d, d + 1, Activation::Tanh), LayerSpec::fc(d + 1, c, Activation::Sigmoid)],
        })
        .collect();
    let c = dims.iter().map(|d| d.1).sum();
    let hidden = rng.gen_range(2..8);
    let classes = rng.gen_range(2..6);
    let q = quantized.then(|| QuantizerSpec::unit(rng.gen_range(1..6)).unwrap());
    SplitTopology::new(
        nodes,
        q,
        vec![LayerSpec::fc(c, hidden, Activation::Relu), LayerSpec::fc(hidden, classes, Activation::Identity)],
        classes,
    )
    .unwrap()
}

/// One node of each layer family feeding an expansion aggregator.
fn mixed_topology() -> SplitTopology {
    let conv = NodeSpec {
        input_shape: vec![6, 6, 1],
        layers: vec![LayerSpec::conv(1, 2, 3, Activation::Relu, true), LayerSpec::fc(18, 2, Activation::Sigmoid)],
    };
    let lstm = NodeSpec {
        input_shape: vec![5, 1],
        layers: vec![LayerSpec::lstm(1, 3, true), LayerSpec::lstm(3, 2, false)],
    };
    let fc = NodeSpec { input_shape: vec![3], layers: vec![LayerSpec::fc(3, 2, Activation::Tanh)] };
    SplitTopology::new(
        vec![conv, lstm, fc],
        None,
        vec![LayerSpec::fc(6, 8, Activation::Relu), LayerSpec::fc(8, 3, Activation::Identity)],
        3,
    )
    .unwrap()
}

/// Worst normwise relative error of a single layer over the seed set.
fn layer_grad_error(spec: &LayerSpec, sample: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feed: Vec<(String, Tensor<f64>)> =
            spec.init(&mut rng).into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        let mut shape = vec![2];
        shape.extend_from_slice(sample);
        feed.push(("x".into(), random(&shape, &mut rng)));
        let mut g = Graph::new();
        let x = g.batch_input("x", sample);
        let y = spec.build(&mut g, "", x);
        let s = g.sum_squares(y);
        g.set_output(s);
        let report = grad_check(&mut g, &feed, GRAD_STEP, GRAD_TOLERANCE).unwrap();
        worst = worst.max(report.worst());
    }
    worst
}

fn model_grad_error(make: impl Fn(&mut ChaCha8Rng) -> SplitTopology) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let t = make(&mut rng);
        let params = ModelParams::<f64>::init(&t, seed);
        let batch = random_batch(&t, 3, &mut rng);
        let feed = batch.feed();
        let mut g = composed_loss_graph::<f64>(&t, 1e-2, QuantMode::Off);
        worst = worst.max(grad_check(&mut g, &(&feed, &params), GRAD_STEP, GRAD_TOLERANCE).unwrap().worst());
    }
    worst
}

#[test]
fn criterion_01_gradient_oracle() {
    let cases: Vec<(&str, f64)> = vec![
        ("fc identity", layer_grad_error(&LayerSpec::fc(4, 3, Activation::Identity), &[4])),
        ("fc sigmoid", layer_grad_error(&LayerSpec::fc(4, 3, Activation::Sigmoid), &[4])),
        ("fc tanh", layer_grad_error(&LayerSpec::fc(4, 3, Activation::Tanh), &[4])),
        ("fc relu", layer_grad_error(&LayerSpec::fc(4, 3, Activation::Relu), &[4])),
        ("conv", layer_grad_error(&LayerSpec::conv(2, 3, 3, Activation::Relu, false), &[5, 5, 2])),
        ("conv+pool", layer_grad_error(&LayerSpec::conv(2, 3, 3, Activation::Relu, true), &[6, 6, 2])),
        ("lstm last", layer_grad_error(&LayerSpec::lstm(2, 3, false), &[4, 2])),
        ("lstm sequence", layer_grad_error(&LayerSpec::lstm(2, 3, true), &[4, 2])),
        ("split model fc", model_grad_error(|rng| fc_topology(rng, false))),
        ("split model mixed", model_grad_error(|_| mixed_topology())),
    ];
    let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail: Vec<String> = cases.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        1,
        "gradient oracle",
        worst < GRAD_TOLERANCE,
        &format!("worst relative error {worst:.2e} < {GRAD_TOLERANCE:e} over {GRAD_SEEDS} seeds [{}]", detail.join(", ")),
    );
}

fn learnable(t: &SplitTopology, n: usize, rng: &mut ChaCha8Rng) -> SplitDataset<f64> {
    let b = random_batch(t, n, rng);
    let labels = (0..n)
        .map(|s| {
            let z: f64 = b.inputs.iter().map(|x| x.data()[s * x.shape()[1]]).sum();
            usize::from(z > 0.0)
        })
        .collect();
    SplitDataset::new(b.inputs, labels).unwrap()
}

#[test]
fn criterion_02_protocol_equivalence() {
    let start = Instant::now();
    let mut worst_round = 0.0f64;
    for seed in 0..ROUND_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = fc_topology(&mut rng, true);
        let params = ModelParams::<f64>::init(&t, seed);
        let batch = random_batch(&t, rng.gen_range(1..9), &mut rng);
        let quant = if seed % 2 == 0 { TrainQuant::Off } else { TrainQuant::StraightThrough };
        let lambda = if seed % 3 == 0 { 0.0 } else { rng.gen_range(0.0..0.05) };
        let cfg = TrainConfig { quant, lambda, ..TrainConfig::sgd(rng.gen_range(0.01..1.0)) };
        let (central, _) = centralized_step(&t, &params, &batch, &cfg).unwrap();
        let (split, _, trace) = distributed_round(&t, &params, &batch, &cfg).unwrap();
        trace.validate().unwrap();
        worst_round = worst_round.max(split.max_abs_diff(&central).unwrap());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = SplitTopology::new(
        vec![
            NodeSpec { input_shape: vec![3], layers: vec![LayerSpec::fc(3, 2, Activation::Sigmoid)] },
            NodeSpec { input_shape: vec![2], layers: vec![LayerSpec::fc(2, 2, Activation::Sigmoid)] },
        ],
        Some(QuantizerSpec::unit(3).unwrap()),
        vec![LayerSpec::fc(4, 6, Activation::Relu), LayerSpec::fc(6, 2, Activation::Identity)],
        2,
    )
    .unwrap();
    let data = SplitData { train: learnable(&t, 96, &mut rng), eval: learnable(&t, 32, &mut rng) };
    let cfg = TrainConfig { epochs: 5, batch: 8, seed: 3, lr: 1e-2, ..TrainConfig::default() };
    let central = train(&t, &data, &cfg, TrainMode::Centralized).unwrap();
    let split = train(&t, &data, &cfg, TrainMode::Distributed).unwrap();
    let worst_run = split.params.max_abs_diff(&central.params).unwrap();
    let elapsed = start.elapsed();

    verdict(
        2,
        "protocol equivalence",
        worst_round < ROUND_TOLERANCE && worst_run < RUN_TOLERANCE && elapsed < Duration::from_secs(60),
        &format!(
            "single round max |Δw| {worst_round:.1e} < {ROUND_TOLERANCE:e} over {ROUND_INSTANCES} instances; \
             5-epoch Adam run max |Δw| {worst_run:.1e} < {RUN_TOLERANCE:e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_bit_accounting() {
    let t = presets::mnist_split(64, Some(4)).unwrap();
    let formula = bits_per_inference(&t).total;
    let params = ModelParams::<f64>::init(&t, 0);
    let mut inference = SplitInference::new(&t);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = random_batch(&t, 1, &mut rng);
    let measured: u64 =
        (0..4).map(|i| inference.compress(&params, i, &image.inputs[i]).unwrap().bit_size()).sum();
    let raw = raw_baseline_bits(&[28 * 28], MNIST_PIXEL_BITS);
    let saved = savings(&t, MNIST_PIXEL_BITS);

    let s = presets::series_split(Some(3)).unwrap();
    let sp = ModelParams::<f64>::init(&s, 0);
    let mut series = SplitInference::new(&s);
    let window = random_batch(&s, 1, &mut rng);
    let per_node: Vec<u64> =
        (0..4).map(|i| series.compress(&sp, i, &window.inputs[i]).unwrap().bit_size()).collect();

    let passed = formula == 256
        && measured == 256
        && raw == 6272
        && format!("{:.4}", saved) == "0.9592"
        && per_node == vec![27; 4]
        && bits_per_inference(&s).per_node == vec![27; 4];
    verdict(
        3,
        "bit accounting",
        passed,
        &format!(
            "C=64 q=4: {measured} bits sent ({formula} by formula) vs {raw} raw, savings {:.2}%; series q=3: {per_node:?} bits per node",
            100.0 * saved
        ),
    );
}

#[test]
fn criterion_04_quantizer_properties() {
    let mut failures = Vec::new();
    let mut points = 0;
    for q in 1..=4 {
        for spec in [QuantizerSpec::unit(q).unwrap(), QuantizerSpec::symmetric(q).unwrap()] {
            let span = spec.hi - spec.lo;
            let bound = span / 2f64.powi(q as i32 + 1);
            // Pinned slack for rounding in the bin-center arithmetic.
            let slack = 4.0 * f64::EPSILON * span;
            let grid: Vec<f64> = (0..QUANT_GRID)
                .map(|k| spec.lo - 0.25 * span + 1.5 * span * k as f64 / (QUANT_GRID - 1) as f64)
                .collect();
            let out = quantize(&spec, &Tensor::new(vec![QUANT_GRID], grid.clone()).unwrap());
            let again = quantize(&spec, &out.dequantized);
            points += grid.len();
            for (k, &x) in grid.iter().enumerate() {
                let y = out.dequantized.data()[k];
                if (y - spec.clip(x)).abs() > bound + slack {
                    failures.push(format!("q={q} x={x}: error {} > {bound}", (y - spec.clip(x)).abs()));
                }
                if k > 0 && (out.levels[k] < out.levels[k - 1] || y < out.dequantized.data()[k - 1]) {
                    failures.push(format!("q={q} x={x}: not monotone"));
                }
                if again.levels[k] != out.levels[k] || again.dequantized.data()[k] != y {
                    failures.push(format!("q={q} x={x}: not idempotent"));
                }
                if out.levels[k] as u64 >= spec.levels() {
                    failures.push(format!("q={q} x={x}: level out of range"));
                }
            }
        }
    }
    verdict(
        4,
        "quantizer properties",
        failures.is_empty(),
        &format!(
            "error bound, monotonicity and idempotence on {points} grid points (q=1..4, unit and symmetric ranges); {} violations {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

/// Sizes a message must not take on: raw features and parameters.
fn forbidden(t: &SplitTopology, m: usize) -> (Vec<Vec<usize>>, Vec<u64>) {
    let mut shapes = Vec::new();
    let mut counts = Vec::new();
    for (i, n) in t.nodes.iter().enumerate() {
        let mut s = vec![m];
        s.extend_from_slice(&n.input_shape);
        shapes.push(s);
        shapes.push(vec![m, t.feature_dim(i)]);
        counts.push((m * t.feature_dim(i)) as u64);
    }
    shapes.push(vec![m, t.total_feature_dim()]);
    counts.push((m * t.total_feature_dim()) as u64);
    for owner in 0..t.owner_count() {
        for (_, s) in t.owner_param_shapes(owner) {
            shapes.push(s);
        }
        counts.push(t.param_count(owner) as u64);
    }
    (shapes, counts)
}

#[test]
fn criterion_05_trace_hygiene() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = Vec::new();
    let mut messages = 0;
    let topologies = [
        ("mnist", presets::mnist_split(64, Some(4)).unwrap()),
        ("mnist C=12", presets::mnist_split(12, Some(4)).unwrap()),
        ("series", presets::series_split(Some(3)).unwrap()),
    ];
    for (name, t) in &topologies {
        let params = ModelParams::<f64>::init(t, 1);
        for m in [1, 2, 5, 8] {
            let batch = random_batch(t, m, &mut rng);
            let cfg = TrainConfig { quant: TrainQuant::StraightThrough, ..TrainConfig::sgd(0.01) };
            let (_, _, trace) = distributed_round(t, &params, &batch, &cfg).unwrap();
            trace.validate().unwrap();
            let (shapes, counts) = forbidden(t, m);
            for msg in trace.messages() {
                messages += 1;
                if shapes.contains(&msg.dims) || counts.contains(&msg.value_count()) {
                    violations.push(format!("{name} m={m}: {:?} {:?}", msg.direction, msg.dims));
                }
            }
        }
    }
    verdict(
        5,
        "trace hygiene",
        violations.is_empty() && messages > 0,
        &format!(
            "{messages} messages compared with raw-feature shapes/counts and parameter shapes/owner sizes; {} matches {:?}",
            violations.len(),
            violations.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("SPLITNET_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn sweep_config(scheme: Scheme, c: &[usize], q: &[QSetting], seeds: &[u64]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(&format!(
        "dataset = \"mnist\"\nscheme = \"proposed\"\nc = [12]\nq = [\"none\"]\nseeds = [0]\noutput = \"unused\"\n\
         [mnist]\ndir = {:?}\ntrain_limit = 10000\n",
        mnist_dir().display().to_string()
    ))
    .unwrap();
    cfg.scheme = vec![scheme];
    cfg.c = c.to_vec();
    cfg.q = q.to_vec();
    cfg.seeds = seeds.to_vec();
    cfg.train.epochs = MNIST_EPOCHS;
    cfg
}

struct MnistSweep {
    rows: Vec<ResultRow>,
    /// Proposed C=64 over every seed plus the centralized reference.
    c64_and_reference: Duration,
}

impl MnistSweep {
    fn accuracy(&self, scheme: Scheme, c: usize, q: Option<u32>, seed: u64) -> f64 {
        self.rows
            .iter()
            .find(|r| r.scheme == scheme && r.c == c && r.q == QSetting(q) && r.seed == seed)
            .map(|r| r.accuracy)
            .unwrap_or_else(|| panic!("no row for {scheme} C={c} q={q:?} seed={seed}"))
    }

    fn mean(&self, scheme: Scheme, c: usize, q: Option<u32>) -> f64 {
        MNIST_SEEDS.iter().map(|&s| self.accuracy(scheme, c, q, s)).sum::<f64>() / MNIST_SEEDS.len() as f64
    }
}

fn mnist_sweep() -> Result<&'static MnistSweep, String> {
    static SWEEP: OnceLock<Result<MnistSweep, String>> = OnceLock::new();
    SWEEP
        .get_or_init(|| {
            let q = [QSetting(Some(4)), QSetting(None)];
            let run = |cfg: ExperimentConfig| -> Result<(Vec<ResultRow>, Duration), String> {
                let start = Instant::now();
                let rows = run_rows(&cfg, &mut |_| {}).map_err(|e| e.to_string())?;
                Ok((rows, start.elapsed()))
            };
            let (mut rows, t64) = run(sweep_config(Scheme::Proposed, &[64], &q, &MNIST_SEEDS))?;
            let (central, tref) = run(sweep_config(Scheme::Centralized, &[64], &[QSetting(None)], &[0]))?;
            let others: Vec<usize> = MNIST_SWEEP.iter().copied().filter(|&c| c != 64).collect();
            let (proposed, _) = run(sweep_config(Scheme::Proposed, &others, &q, &MNIST_SEEDS))?;
            let (fdml, _) = run(sweep_config(Scheme::Fdml, &[12, 16], &q, &MNIST_SEEDS))?;
            rows.extend(central);
            rows.extend(proposed);
            rows.extend(fdml);
            assert!(rows.iter().all(|r| r.dataset == Dataset::Mnist));
            Ok(MnistSweep { rows, c64_and_reference: t64 + tref })
        })
        .as_ref()
        .map_err(|e| format!("MNIST sweep unavailable ({}): {e}", mnist_dir().display()))
}

fn with_sweep(n: u32, title: &str, check: impl FnOnce(&MnistSweep) -> (bool, String)) {
    match mnist_sweep() {
        Ok(s) => {
            let (passed, detail) = check(s);
            verdict(n, title, passed, &detail);
        }
        Err(e) => verdict(n, title, false, &e),
    }
}

#[test]
fn criterion_06_mnist_split_near_centralized() {
    with_sweep(6, "MNIST split vs centralized", |s| {
        let split = s.mean(Scheme::Proposed, 64, Some(4));
        let central = s.accuracy(Scheme::Centralized, 64, None, 0);
        let gap = central - split;
        let time = s.c64_and_reference;
        (
            gap <= MNIST_GAP && time < MNIST_BUDGET,
            format!(
                "C=64 q=4 split {:.2}% (mean of {} seeds) vs centralized {:.2}%, gap {:.2} ≤ {:.0} points; \
                 {MNIST_EPOCHS} epochs on 10k/10k in {:.0}s < {:.0}s",
                100.0 * split,
                MNIST_SEEDS.len(),
                100.0 * central,
                100.0 * gap,
                100.0 * MNIST_GAP,
                time.as_secs_f64(),
                MNIST_BUDGET.as_secs_f64()
            ),
        )
    });
}

#[test]
fn criterion_07_quantization_gap() {
    with_sweep(7, "quantization gap", |s| {
        let gaps: Vec<f64> = MNIST_SEEDS
            .iter()
            .map(|&seed| s.accuracy(Scheme::Proposed, 64, Some(4), seed) - s.accuracy(Scheme::Proposed, 64, None, seed))
            .collect();
        let worst = gaps.iter().map(|g| g.abs()).fold(0.0, f64::max);
        (
            worst <= QUANT_GAP,
            format!(
                "C=64 |acc(q=4) − acc(none)| per seed {:?} points, worst {:.2} ≤ {:.0}",
                gaps.iter().map(|g| format!("{:+.2}", 100.0 * g)).collect::<Vec<_>>(),
                100.0 * worst,
                100.0 * QUANT_GAP
            ),
        )
    });
}

#[test]
fn criterion_08_fdml_ordering() {
    with_sweep(8, "FDML ordering", |s| {
        let mut ok = 0;
        let mut total = 0;
        let mut detail = Vec::new();
        for c in [12, 16] {
            for &seed in &MNIST_SEEDS {
                let p = s.accuracy(Scheme::Proposed, c, None, seed);
                let pq = s.accuracy(Scheme::Proposed, c, Some(4), seed);
                let f = s.accuracy(Scheme::Fdml, c, None, seed);
                let fq = s.accuracy(Scheme::Fdml, c, Some(4), seed);
                let better = p > f;
                let more_fragile = f - fq > p - pq;
                total += 1;
                ok += usize::from(better && more_fragile);
                detail.push(format!(
                    "C={c} s{seed}: {:.2}/{:.2} drop {:+.2}/{:+.2}",
                    100.0 * p,
                    100.0 * f,
                    100.0 * (p - pq),
                    100.0 * (f - fq)
                ));
            }
        }
        (ok == total, format!("{ok}/{total} (C, seed) cases with proposed > FDML and a larger FDML drop [{}]", detail.join("; ")))
    });
}

#[test]
fn criterion_09_monotone_rate_accuracy() {
    with_sweep(9, "monotone rate-accuracy curve", |s| {
        let mut ok = true;
        let mut detail = Vec::new();
        for q in [None, Some(4)] {
            let curve: Vec<f64> = MNIST_SWEEP.iter().map(|&c| s.mean(Scheme::Proposed, c, q)).collect();
            ok &= curve.windows(2).all(|w| w[1] >= w[0] - CURVE_SLACK);
            detail.push(format!(
                "q={}: {}",
                QSetting(q),
                MNIST_SWEEP.iter().zip(&curve).map(|(c, a)| format!("C={c} {:.2}", 100.0 * a)).collect::<Vec<_>>().join(", ")
            ));
        }
        (ok, format!("mean accuracy non-decreasing within {:.0} point [{}]", 100.0 * CURVE_SLACK, detail.join("; ")))
    });
}

#[test]
fn criterion_10_synthetic_series() {
    let mut cfg = ExperimentConfig::from_toml(
        "dataset = \"synthetic-series\"\nscheme = [\"proposed\", \"centralized\"]\nq = [3, \"none\"]\n\
         seeds = [0]\noutput = \"unused\"\n",
    )
    .unwrap();
    cfg.seeds = SERIES_SEEDS.to_vec();
    cfg.train.epochs = SERIES_EPOCHS;
    cfg.train.lr = SERIES_LR;
    let start = Instant::now();
    let rows = run_rows(&cfg, &mut |_| {}).unwrap();
    let elapsed = start.elapsed();
    let mean = |scheme: Scheme, q: Option<u32>| {
        let v: Vec<f64> =
            rows.iter().filter(|r| r.scheme == scheme && r.q == QSetting(q)).map(|r| r.accuracy).collect();
        assert_eq!(v.len(), SERIES_SEEDS.len());
        v.iter().sum::<f64>() / v.len() as f64
    };
    let split = mean(Scheme::Proposed, None);
    let split_q3 = mean(Scheme::Proposed, Some(3));
    let central = mean(Scheme::Centralized, None);
    verdict(
        10,
        "synthetic series",
        (split - central).abs() <= SERIES_GAP && (split - split_q3).abs() <= SERIES_QUANT_GAP && elapsed < SERIES_BUDGET,
        &format!(
            "distributed {:.2}% vs centralized {:.2}% (≤ {:.0}); q=3 {:.2}% vs unquantized (≤ {:.0}); \
             mean of {} seeds, {SERIES_EPOCHS} epochs, {:.0}s < {:.0}s",
            100.0 * split,
            100.0 * central,
            100.0 * SERIES_GAP,
            100.0 * split_q3,
            100.0 * SERIES_QUANT_GAP,
            SERIES_SEEDS.len(),
            elapsed.as_secs_f64(),
            SERIES_BUDGET.as_secs_f64()
        ),
    );
}
