use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::quant::QuantizerSpec;

type Feed = Vec<(String, Tensor<f64>)>;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random tensor whose entries stay at least `gap` away from zero.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn feed(items: Vec<(&str, Tensor<f64>)>) -> Feed {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Reduces an arbitrary node to a scalar with a fixed random projection so
/// every output element contributes a distinct weight.
fn project(g: &mut Graph<f64>, node: NodeId, shape: &[usize], rng: &mut ChaCha8Rng, f: &mut Feed) -> NodeId {
    let w = g.input("__proj", shape);
    f.push(("__proj".into(), rand_tensor(rng, shape)));
    let prod = g.mul(node, w);
    g.sum(prod)
}

fn check(mut g: Graph<f64>, f: &Feed) {
    let report = grad_check(&mut g, f, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "{report:#?}");
    assert!(!report.entries.is_empty());
}

const SEEDS: u64 = 20;

#[test]
fn scalar_product_forward_and_backward() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[1, 1]);
    let w = g.input("w", &[1, 1]);
    let y = g.matmul(x, w);
    g.set_output(y);
    let f = feed(vec![("x", t(&[1, 1], &[2.0])), ("w", t(&[1, 1], &[3.0]))]);
    assert_eq!(g.forward(&f).unwrap().item(), 6.0);
    let grads = g.backward().unwrap();
    assert_eq!(grads.get("w").unwrap().item(), 2.0);
    assert_eq!(grads.get("x").unwrap().item(), 3.0);
}

#[test]
fn sigmoid_of_zero_affine_is_half() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[1, 1]);
    let w = g.param("w", &[1, 1]);
    let b = g.param("b", &[1]);
    let z = g.matmul(x, w);
    let z = g.add_bias(z, b);
    let y = g.sigmoid(z);
    g.set_output(y);
    for xv in [-7.0, 0.0, 3.5, 1e3] {
        let f = feed(vec![("x", t(&[1, 1], &[xv])), ("w", t(&[1, 1], &[0.0])), ("b", t(&[1], &[0.0]))]);
        assert_eq!(g.forward(&f).unwrap().item(), 0.5);
    }
}

#[test]
fn uniform_softmax_cross_entropy_gradient() {
    let mut g = Graph::<f64>::new();
    let logits = g.input("z", &[1, 10]);
    let labels = g.data_input("y", &[]);
    let loss = g.softmax_cross_entropy(logits, labels);
    g.set_output(loss);
    for k in 0..10 {
        let f = feed(vec![("z", Tensor::full(vec![1, 10], 0.3)), ("y", t(&[1], &[k as f64]))]);
        let l = g.forward(&f).unwrap().item();
        assert!((l - 10f64.ln()).abs() < 1e-15);
        let grads = g.backward().unwrap();
        let dz = grads.get("z").unwrap();
        for j in 0..10 {
            let expected = 0.1 - if j == k { 1.0 } else { 0.0 };
            assert!((dz.data()[j] - expected).abs() < 1e-15);
        }
        assert!(grads.get("y").is_none(), "labels are not differentiable");
    }
}

/// y = W3 σ(W2 tanh(W1 x + b1) + b2) + b3 rebuilt with plain loops.
fn mlp_by_hand(x: &[f64], ws: &[(&Tensor<f64>, &Tensor<f64>)]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (layer, (w, b)) in ws.iter().enumerate() {
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        let mut next = vec![0.0; out];
        for o in 0..out {
            let mut acc = b.data()[o];
            for i in 0..inp {
                acc += w.data()[o * inp + i] * h[i];
            }
            next[o] = match layer {
                0 => acc.tanh(),
                1 => 1.0 / (1.0 + (-acc).exp()),
                _ => acc,
            };
        }
        h = next;
    }
    h
}

#[test]
fn mlp_matches_straight_line_evaluation() {
    let dims = [6, 5, 4, 3];
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let mut h = g.batch_input("x", &[dims[0]]);
        let mut f = feed(vec![("x", rand_tensor(&mut rng, &[4, dims[0]]))]);
        for l in 0..3 {
            let w = g.param(&format!("w{l}"), &[dims[l + 1], dims[l]]);
            let b = g.param(&format!("b{l}"), &[dims[l + 1]]);
            f.push((format!("w{l}"), rand_tensor(&mut rng, &[dims[l + 1], dims[l]])));
            f.push((format!("b{l}"), rand_tensor(&mut rng, &[dims[l + 1]])));
            let z = g.matmul_t(h, w);
            let z = g.add_bias(z, b);
            h = match l {
                0 => g.tanh(z),
                1 => g.sigmoid(z),
                _ => z,
            };
        }
        g.set_output(h);
        let out = g.forward(&f).unwrap().clone();
        let lookup = |n: &str| f.lookup(n).unwrap();
        let layers = [(lookup("w0"), lookup("b0")), (lookup("w1"), lookup("b1")), (lookup("w2"), lookup("b2"))];
        let x = lookup("x");
        for row in 0..4 {
            let expect = mlp_by_hand(&x.data()[row * 6..(row + 1) * 6], &layers);
            for (a, b) in out.data()[row * 3..(row + 1) * 3].iter().zip(expect) {
                assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn matmul_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for transpose in [false, true] {
            let mut g = Graph::new();
            let a = g.input("a", &[3, 4]);
            let bshape = if transpose { [5, 4] } else { [4, 5] };
            let b = g.param("b", &bshape);
            let y = if transpose { g.matmul_t(a, b) } else { g.matmul(a, b) };
            let mut f = feed(vec![("a", rand_tensor(&mut rng, &[3, 4])), ("b", rand_tensor(&mut rng, &bshape))]);
            let out = project(&mut g, y, &[3, 5], &mut rng, &mut f);
            g.set_output(out);
            check(g, &f);
        }
    }
}

#[test]
fn elementwise_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]);
        let b = g.input("b", &[2, 3]);
        let bias = g.param("bias", &[3]);
        let s = g.add(a, b);
        let d = g.sub(s, b);
        let p = g.mul(d, b);
        let p = g.add_bias(p, bias);
        let sc = g.scale(p, -1.7);
        let sg = g.sigmoid(sc);
        let th = g.tanh(sg);
        let mut f = feed(vec![
            ("a", rand_tensor(&mut rng, &[2, 3])),
            ("b", rand_tensor(&mut rng, &[2, 3])),
            ("bias", rand_tensor(&mut rng, &[3])),
        ]);
        let out = project(&mut g, th, &[2, 3], &mut rng, &mut f);
        g.set_output(out);
        check(g, &f);
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input("x", &[4, 5]);
        let r = g.relu(x);
        let mut f = feed(vec![("x", rand_away_from_zero(&mut rng, &[4, 5], 1e-3))]);
        let out = project(&mut g, r, &[4, 5], &mut rng, &mut f);
        g.set_output(out);
        check(g, &f);
    }
}

#[test]
fn conv_and_pool_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input("x", &[2, 6, 4, 2]);
        let k = g.param("k", &[3, 3, 2, 3]);
        let c = g.conv2d(x, k);
        let c = g.tanh(c);
        let p = g.max_pool2(c);
        let mut f = feed(vec![("x", rand_tensor(&mut rng, &[2, 6, 4, 2])), ("k", rand_tensor(&mut rng, &[3, 3, 2, 3]))]);
        let out = project(&mut g, p, &[2, 3, 2, 3], &mut rng, &mut f);
        g.set_output(out);
        check(g, &f);
    }
}

#[test]
fn even_kernel_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut g = Graph::new();
    let x = g.input("x", &[1, 5, 5, 1]);
    let k = g.param("k", &[2, 4, 1, 2]);
    let c = g.conv2d(x, k);
    let mut f = feed(vec![("x", rand_tensor(&mut rng, &[1, 5, 5, 1])), ("k", rand_tensor(&mut rng, &[2, 4, 1, 2]))]);
    let out = project(&mut g, c, &[1, 5, 5, 2], &mut rng, &mut f);
    g.set_output(out);
    check(g, &f);
}

#[test]
fn shape_plumbing_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input("x", &[2, 3, 4]);
        let s0 = g.step(x, 0);
        let s2 = g.step(x, 2);
        let st = g.stack(&[s2, s0, s2]);
        let fl = g.flatten(st);
        let sl = g.slice_cols(fl, 3, 5);
        let y = g.input("y", &[2, 2]);
        let cat = g.concat(&[sl, y, sl]);
        let rs = g.reshape(cat, &[4, 6]);
        let mut f = feed(vec![("x", rand_tensor(&mut rng, &[2, 3, 4])), ("y", rand_tensor(&mut rng, &[2, 2]))]);
        let out = project(&mut g, rs, &[4, 6], &mut rng, &mut f);
        g.set_output(out);
        check(g, &f);
    }
}

#[test]
fn lstm_cell_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let a = g.input("gates", &[3, 8]);
        let c = g.input("c", &[3, 2]);
        let first = g.lstm_cell(a, None);
        let second = g.lstm_cell(a, Some(c));
        let both = g.concat(&[first, second]);
        let mut f = feed(vec![("gates", rand_tensor(&mut rng, &[3, 8])), ("c", rand_tensor(&mut rng, &[3, 2]))]);
        let out = project(&mut g, both, &[3, 8], &mut rng, &mut f);
        g.set_output(out);
        check(g, &f);
    }
}

#[test]
fn reductions_and_softmax_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let z = g.input("z", &[4, 5]);
        let labels = g.data_input("y", &[]);
        let ce = g.softmax_cross_entropy(z, labels);
        let sm = g.softmax(z);
        let mut f = feed(vec![
            ("z", rand_tensor(&mut rng, &[4, 5]).map(|v| 3.0 * v)),
            ("y", t(&[4], &[0.0, 4.0, 2.0, 2.0])),
        ]);
        let psum = project(&mut g, sm, &[4, 5], &mut rng, &mut f);
        let sq = g.sum_squares(z);
        let sq = g.scale(sq, 0.1);
        let a = g.add(ce, psum);
        let total = g.add(a, sq);
        g.set_output(total);
        check(g, &f);
    }
}

#[test]
fn straight_through_quantizer() {
    let spec = QuantizerSpec::unit(2).unwrap();
    let mut g = Graph::new();
    let x = g.input("x", &[1, 4]);
    let q = g.quantize(x, spec, true);
    let s = g.sum(q);
    g.set_output(s);
    let f = feed(vec![("x", t(&[1, 4], &[0.3, -0.5, 0.99, 1.7]))]);
    assert_eq!(g.forward(&f).unwrap().item(), 0.375 + 0.125 + 0.875 + 0.875);
    let grads = g.backward().unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn hard_quantizer_blocks_backward_and_grad_check() {
    let spec = QuantizerSpec::unit(4).unwrap();
    let mut g = Graph::new();
    let x = g.input("x", &[1, 2]);
    let q = g.quantize(x, spec, false);
    let s = g.sum(q);
    g.set_output(s);
    let f = feed(vec![("x", t(&[1, 2], &[0.2, 0.4]))]);
    g.forward(&f).unwrap();
    assert!(matches!(g.backward(), Err(Error::NotDifferentiable(_))));
    assert!(matches!(grad_check(&mut g, &f, 1e-5, 1e-4), Err(Error::NotDifferentiable(_))));
}

#[test]
fn linear_graph_grad_check_is_exact() {
    let mut g = Graph::new();
    let w = g.param("w", &[1, 1]);
    let x = g.input("x", &[1, 1]);
    let y = g.matmul(w, x);
    let y = g.sum(y);
    g.set_output(y);
    let f = feed(vec![("w", t(&[1, 1], &[0.75])), ("x", t(&[1, 1], &[-2.0]))]);
    let report = grad_check(&mut g, &f, 1e-5, 1e-4).unwrap();
    assert!(report.worst() < 1e-10, "{report:?}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let (alpha, beta) = (0.7, -1.3);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let build = |which: u8| {
            let mut g = Graph::<f64>::new();
            let x = g.input("x", &[3, 4]);
            let w = g.param("w", &[2, 4]);
            let z = g.matmul_t(x, w);
            let l1 = {
                let s = g.sigmoid(z);
                g.sum_squares(s)
            };
            let l2 = {
                let t = g.tanh(z);
                g.sum(t)
            };
            let out = match which {
                1 => l1,
                2 => l2,
                _ => {
                    let a = g.scale(l1, alpha);
                    let b = g.scale(l2, beta);
                    g.add(a, b)
                }
            };
            g.set_output(out);
            g
        };
        let f = feed(vec![("x", rand_tensor(&mut rng, &[3, 4])), ("w", rand_tensor(&mut rng, &[2, 4]))]);
        let mut grads = Vec::new();
        for which in [1, 2, 0] {
            let mut g = build(which);
            g.forward(&f).unwrap();
            grads.push(g.backward().unwrap().get("w").unwrap().clone());
        }
        for i in 0..grads[0].len() {
            let combined = alpha * grads[0].data()[i] + beta * grads[1].data()[i];
            assert!((combined - grads[2].data()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.input("x", &[2, 6, 6, 1]);
    let k = g.param("k", &[5, 5, 1, 4]);
    let c = g.conv2d(x, k);
    let c = g.relu(c);
    let p = g.max_pool2(c);
    let fl = g.flatten(p);
    let s = g.sum_squares(fl);
    g.set_output(s);
    let f = feed(vec![("x", rand_tensor(&mut rng, &[2, 6, 6, 1])), ("k", rand_tensor(&mut rng, &[5, 5, 1, 4]))]);
    let mut g2 = g.clone();
    let a = g.forward(&f).unwrap().clone();
    let ga = g.backward().unwrap();
    let b = g2.forward(&f).unwrap().clone();
    let gb = g2.backward().unwrap();
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    for (x, y) in ga.get("k").unwrap().data().iter().zip(gb.get("k").unwrap().data()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn unbound_input_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[1]);
    let s = g.sum(x);
    g.set_output(s);
    let f: Feed = vec![];
    assert!(matches!(g.forward(&f), Err(Error::Unbound(n)) if n == "x"));
}

#[test]
fn shape_mismatch_names_the_node() {
    let mut g = Graph::<f64>::new();
    let a = g.input("a", &[2, 3]);
    let b = g.input("b", &[2, 3]);
    let y = g.matmul(a, b);
    g.set_output(y);
    let f = feed(vec![("a", Tensor::zeros(vec![2, 3])), ("b", Tensor::zeros(vec![2, 3]))]);
    match g.forward(&f) {
        Err(Error::NodeShape { node, op, .. }) => {
            assert_eq!(node, y.index());
            assert_eq!(op, "matmul");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let f = feed(vec![("a", Tensor::zeros(vec![3, 2])), ("b", Tensor::zeros(vec![2, 3]))]);
    assert!(matches!(g.forward(&f), Err(Error::NodeShape { node: 0, .. })));
}

#[test]
fn backward_before_forward_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &[1]);
    let s = g.sum(x);
    g.set_output(s);
    assert!(matches!(g.backward(), Err(Error::NotEvaluated)));
}

#[test]
fn unreachable_params_get_no_gradient_and_reachable_unused_get_zero() {
    let mut g = Graph::<f64>::new();
    let a = g.param("a", &[2]);
    let _dead = g.param("dead", &[2]);
    let s = g.sum(a);
    g.set_output(s);
    let f = feed(vec![("a", t(&[2], &[1.0, 2.0])), ("dead", t(&[2], &[0.0, 0.0]))]);
    g.forward(&f).unwrap();
    let grads = g.backward().unwrap();
    assert_eq!(grads.get("a").unwrap().data(), &[1.0, 1.0]);
    assert!(grads.get("dead").is_none());
}

#[test]
fn batch_input_accepts_any_leading_size() {
    let mut g = Graph::<f64>::new();
    let x = g.batch_input("x", &[3]);
    let s = g.sum(x);
    g.set_output(s);
    for m in [1, 4, 9] {
        let f = feed(vec![("x", Tensor::full(vec![m, 3], 1.0))]);
        assert_eq!(g.forward(&f).unwrap().item(), (3 * m) as f64);
    }
    let f = feed(vec![("x", Tensor::full(vec![2, 4], 1.0))]);
    assert!(g.forward(&f).is_err());
}

#[test]
fn odd_pooling_input_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[1, 5, 4, 1]);
    let p = g.max_pool2(x);
    g.set_output(p);
    let f = feed(vec![("x", Tensor::zeros(vec![1, 5, 4, 1]))]);
    assert!(matches!(g.forward(&f), Err(Error::NodeShape { op: "max_pool2", .. })));
}

#[test]
fn out_of_range_label_is_rejected() {
    let mut g = Graph::<f64>::new();
    let z = g.input("z", &[2, 3]);
    let y = g.data_input("y", &[]);
    let l = g.softmax_cross_entropy(z, y);
    g.set_output(l);
    let f = feed(vec![("z", Tensor::zeros(vec![2, 3])), ("y", t(&[2], &[0.0, 3.0]))]);
    assert!(g.forward(&f).is_err());
}

#[test]
fn single_precision_tracks_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[2, 4]);
    let mut g64 = Graph::<f64>::new();
    let mut g32 = Graph::<f32>::new();
    fn build<T: Scalar>(g: &mut Graph<T>) {
        let x = g.input("x", &[3, 4]);
        let w = g.param("w", &[2, 4]);
        let z = g.matmul_t(x, w);
        let s = g.sigmoid(z);
        let s = g.sum_squares(s);
        g.set_output(s);
    }
    build(&mut g64);
    build(&mut g32);
    let f64feed = feed(vec![("x", x.clone()), ("w", w.clone())]);
    let f32feed: Vec<(String, Tensor<f32>)> = vec![("x".into(), x.cast()), ("w".into(), w.cast())];
    let a = g64.forward(&f64feed).unwrap().item();
    let b = g32.forward(&f32feed).unwrap().item() as f64;
    assert!((a - b).abs() < 1e-5);
}
