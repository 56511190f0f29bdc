//! Forward and backward kernels for each primitive.

use super::{Op, Saved};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type Fwd<T> = Result<(Tensor<T>, Saved<T>), String>;

fn plain<T: Scalar>(t: Tensor<T>) -> Fwd<T> {
    Ok((t, Saved::None))
}

fn build<T: Scalar>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced consistent shape")
}

fn rank2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize), String> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(format!("{what} must be rank 2, got {s:?}")),
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), String> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(format!("operands differ in shape: {:?} vs {:?}", a.shape(), b.shape()))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    build(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

struct ConvDims {
    m: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    fn rows(&self) -> usize {
        self.m * self.h * self.w
    }

    fn pad_top(&self) -> usize {
        (self.kh - 1) / 2
    }

    fn pad_left(&self) -> usize {
        (self.kw - 1) / 2
    }

    /// Calls `f(col_row_offset, input_offset, len)` for every in-bounds run of
    /// `ci` contiguous channel values in the patch matrix.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (pt, pl) = (self.pad_top() as isize, self.pad_left() as isize);
        let patch = self.patch();
        for b in 0..self.m {
            for y in 0..self.h {
                for x in 0..self.w {
                    let row = ((b * self.h + y) * self.w + x) * patch;
                    for dy in 0..self.kh {
                        let sy = y as isize + dy as isize - pt;
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        for dx in 0..self.kw {
                            let sx = x as isize + dx as isize - pl;
                            if sx < 0 || sx >= self.w as isize {
                                continue;
                            }
                            let col = row + (dy * self.kw + dx) * self.ci;
                            let src = ((b * self.h + sy as usize) * self.w + sx as usize) * self.ci;
                            f(col, src);
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<ConvDims, String> {
    let [m, h, w, ci] = *x.shape() else {
        return Err(format!("conv input must be [m,H,W,C], got {:?}", x.shape()));
    };
    let [kh, kw, kci, co] = *k.shape() else {
        return Err(format!("conv kernel must be [kh,kw,Ci,Co], got {:?}", k.shape()));
    };
    if kci != ci {
        return Err(format!("kernel expects {kci} input channels, input has {ci}"));
    }
    if kh == 0 || kw == 0 || co == 0 {
        return Err("empty kernel".into());
    }
    Ok(ConvDims { m, h, w, ci, kh, kw, co })
}

pub(super) fn forward<T: Scalar>(op: &Op<T>, args: &[&Tensor<T>]) -> Fwd<T> {
    match op {
        Op::Input { .. } | Op::Param { .. } => unreachable!("leaves are resolved by the graph"),
        Op::MatMul { transpose_rhs } => {
            let (m, k) = rank2(args[0], "lhs")?;
            let (r, c) = rank2(args[1], "rhs")?;
            let (k2, n, rsb, csb) = if *transpose_rhs { (c, r, 1, c as isize) } else { (r, c, c as isize, 1) };
            if k != k2 {
                return Err(format!("inner dimensions differ: {:?} x {:?}", args[0].shape(), args[1].shape()));
            }
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, T::one(), args[0].data(), k as isize, 1, args[1].data(), rsb, csb, T::zero(), &mut out, n as isize, 1);
            plain(build(vec![m, n], out))
        }
        Op::AddBias => {
            let (x, b) = (args[0], args[1]);
            let n = b.len();
            if b.rank() != 1 || x.shape().last() != Some(&n) {
                return Err(format!("bias {:?} does not match trailing axis of {:?}", b.shape(), x.shape()));
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_exact_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            plain(build(x.shape().to_vec(), out))
        }
        Op::Add => {
            same_shape(args[0], args[1])?;
            plain(zip_map(args[0], args[1], |a, b| a + b))
        }
        Op::Sub => {
            same_shape(args[0], args[1])?;
            plain(zip_map(args[0], args[1], |a, b| a - b))
        }
        Op::Mul => {
            same_shape(args[0], args[1])?;
            plain(zip_map(args[0], args[1], |a, b| a * b))
        }
        Op::Scale(f) => plain(args[0].map(|v| v * *f)),
        Op::Sigmoid => plain(args[0].map(sigmoid)),
        Op::Tanh => plain(args[0].map(|v| v.tanh())),
        Op::Relu => plain(args[0].map(|v| v.max(T::zero()))),
        Op::Conv2d => {
            let d = conv_dims(args[0], args[1])?;
            let patch = d.patch();
            let mut cols = vec![T::zero(); d.rows() * patch];
            let x = args[0].data();
            d.for_each_tap(|col, src| cols[col..col + d.ci].copy_from_slice(&x[src..src + d.ci]));
            let mut out = vec![T::zero(); d.rows() * d.co];
            T::gemm(
                d.rows(),
                patch,
                d.co,
                T::one(),
                &cols,
                patch as isize,
                1,
                args[1].data(),
                d.co as isize,
                1,
                T::zero(),
                &mut out,
                d.co as isize,
                1,
            );
            Ok((build(vec![d.m, d.h, d.w, d.co], out), Saved::Im2col(cols)))
        }
        Op::MaxPool2 => {
            let [m, h, w, c] = *args[0].shape() else {
                return Err(format!("pool input must be [m,H,W,C], got {:?}", args[0].shape()));
            };
            if h % 2 != 0 || w % 2 != 0 {
                return Err(format!("2x2 pooling needs even height and width, got {h}x{w}"));
            }
            let (oh, ow) = (h / 2, w / 2);
            let x = args[0].data();
            let mut out = Vec::with_capacity(m * oh * ow * c);
            let mut arg = Vec::with_capacity(m * oh * ow * c);
            for b in 0..m {
                for y in 0..oh {
                    for xx in 0..ow {
                        for ch in 0..c {
                            let mut best = usize::MAX;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let idx = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                                if best == usize::MAX || x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                            out.push(x[best]);
                            arg.push(best);
                        }
                    }
                }
            }
            Ok((build(vec![m, oh, ow, c], out), Saved::Argmax(arg)))
        }
        Op::Flatten => {
            let s = args[0].shape();
            if s.is_empty() {
                return Err("cannot flatten a scalar".into());
            }
            let rest: usize = s[1..].iter().product();
            plain(args[0].clone().reshape(vec![s[0], rest]).map_err(|e| e.to_string())?)
        }
        Op::Reshape(shape) => plain(args[0].clone().reshape(shape.clone()).map_err(|e| e.to_string())?),
        Op::Concat => {
            let m = rank2(args[0], "concat part")?.0;
            let mut widths = Vec::with_capacity(args.len());
            for a in args {
                let (r, c) = rank2(a, "concat part")?;
                if r != m {
                    return Err(format!("concat parts disagree on rows: {m} vs {r}"));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(m * total);
            for row in 0..m {
                for (a, &wd) in args.iter().zip(&widths) {
                    out.extend_from_slice(&a.data()[row * wd..(row + 1) * wd]);
                }
            }
            plain(build(vec![m, total], out))
        }
        Op::SliceCols { start, len } => {
            let (m, c) = rank2(args[0], "slice input")?;
            if start + len > c {
                return Err(format!("columns {start}..{} out of range for width {c}", start + len));
            }
            let mut out = Vec::with_capacity(m * len);
            for row in args[0].data().chunks_exact(c) {
                out.extend_from_slice(&row[*start..start + len]);
            }
            plain(build(vec![m, *len], out))
        }
        Op::Step(t) => {
            let [m, steps, d] = *args[0].shape() else {
                return Err(format!("sequence must be [m,T,D], got {:?}", args[0].shape()));
            };
            if *t >= steps {
                return Err(format!("step {t} out of range for {steps} steps"));
            }
            let x = args[0].data();
            let mut out = Vec::with_capacity(m * d);
            for b in 0..m {
                let base = (b * steps + t) * d;
                out.extend_from_slice(&x[base..base + d]);
            }
            plain(build(vec![m, d], out))
        }
        Op::Stack => {
            let (m, d) = rank2(args[0], "stack part")?;
            for a in args {
                if a.shape() != [m, d] {
                    return Err(format!("stack parts disagree: {:?} vs {:?}", a.shape(), [m, d]));
                }
            }
            let steps = args.len();
            let mut out = vec![T::zero(); m * steps * d];
            for (t, a) in args.iter().enumerate() {
                for b in 0..m {
                    let dst = (b * steps + t) * d;
                    out[dst..dst + d].copy_from_slice(&a.data()[b * d..(b + 1) * d]);
                }
            }
            plain(build(vec![m, steps, d], out))
        }
        Op::LstmCell => {
            let (m, four_h) = rank2(args[0], "gate pre-activations")?;
            if four_h % 4 != 0 || four_h == 0 {
                return Err(format!("gate width {four_h} is not a positive multiple of 4"));
            }
            let hd = four_h / 4;
            if let Some(c) = args.get(1) {
                if c.shape() != [m, hd] {
                    return Err(format!("previous cell {:?} should be [{m}, {hd}]", c.shape()));
                }
            }
            let mut out = vec![T::zero(); m * 2 * hd];
            let mut gates = Vec::with_capacity(m * hd * 5);
            for b in 0..m {
                let a = &args[0].data()[b * four_h..(b + 1) * four_h];
                for j in 0..hd {
                    let i = sigmoid(a[j]);
                    let f = sigmoid(a[hd + j]);
                    let g = a[2 * hd + j].tanh();
                    let o = sigmoid(a[3 * hd + j]);
                    let prev = args.get(1).map_or(T::zero(), |c| c.data()[b * hd + j]);
                    let c = f * prev + i * g;
                    let tc = c.tanh();
                    out[b * 2 * hd + j] = o * tc;
                    out[b * 2 * hd + hd + j] = c;
                    gates.extend_from_slice(&[i, f, g, o, tc]);
                }
            }
            Ok((build(vec![m, 2 * hd], out), Saved::Gates(gates)))
        }
        Op::Sum => plain(Tensor::scalar(args[0].data().iter().copied().sum())),
        Op::SumSquares => plain(Tensor::scalar(args[0].sum_squares())),
        Op::Softmax => {
            let (_, k) = rank2(args[0], "logits")?;
            plain(build(args[0].shape().to_vec(), softmax_rows(args[0].data(), k)))
        }
        Op::SoftmaxCrossEntropy => {
            let (m, k) = rank2(args[0], "logits")?;
            let labels = args[1];
            if labels.shape() != [m] {
                return Err(format!("labels {:?} should be [{m}]", labels.shape()));
            }
            if m == 0 {
                return Err("empty batch".into());
            }
            let classes = class_indices(labels, k)?;
            let mut total = T::zero();
            for (row, &y) in args[0].data().chunks_exact(k).zip(&classes) {
                let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                total += lse - row[y];
            }
            plain(Tensor::scalar(total / T::lit(m as f64)))
        }
        Op::Quantize { spec, .. } => plain(args[0].map(|v| spec.round_trip(v))),
    }
}

fn class_indices<T: Scalar>(labels: &Tensor<T>, k: usize) -> Result<Vec<usize>, String> {
    labels
        .data()
        .iter()
        .map(|&v| {
            let idx = v.to_usize().filter(|&i| T::lit(i as f64) == v && i < k);
            idx.ok_or_else(|| format!("label {v} is not a class index in [0, {k})"))
        })
        .collect()
}

/// Gradients for each input; `None` where `wanted` is false.
pub(super) fn backward<T: Scalar>(
    op: &Op<T>,
    args: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: &Saved<T>,
    g: &Tensor<T>,
    wanted: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let want = |i: usize| wanted[i];
    match op {
        Op::Input { .. } | Op::Param { .. } => vec![],
        Op::MatMul { transpose_rhs } => {
            let (a, b) = (args[0], args[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = out.shape()[1];
            let gd = g.data();
            let da = want(0).then(|| {
                let mut da = vec![T::zero(); m * k];
                // dA = G · Bᵀ (plain) or G · B (transposed storage)
                let (rsb, csb) = if *transpose_rhs { (k as isize, 1) } else { (1, n as isize) };
                T::gemm(m, n, k, T::one(), gd, n as isize, 1, b.data(), rsb, csb, T::zero(), &mut da, k as isize, 1);
                build(vec![m, k], da)
            });
            let db = want(1).then(|| {
                let mut db = vec![T::zero(); k * n];
                if *transpose_rhs {
                    // [n,k] = Gᵀ · A
                    T::gemm(n, m, k, T::one(), gd, 1, n as isize, a.data(), k as isize, 1, T::zero(), &mut db, k as isize, 1);
                    build(vec![n, k], db)
                } else {
                    // [k,n] = Aᵀ · G
                    T::gemm(k, m, n, T::one(), a.data(), 1, k as isize, gd, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    build(vec![k, n], db)
                }
            });
            vec![da, db]
        }
        Op::AddBias => {
            let n = args[1].len();
            let db = want(1).then(|| {
                let mut db = vec![T::zero(); n];
                for row in g.data().chunks_exact(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                build(vec![n], db)
            });
            vec![want(0).then(|| g.clone()), db]
        }
        Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|v| -v))],
        Op::Mul => vec![
            want(0).then(|| zip_map(g, args[1], |gv, b| gv * b)),
            want(1).then(|| zip_map(g, args[0], |gv, a| gv * a)),
        ],
        Op::Scale(f) => vec![Some(g.map(|v| v * *f))],
        Op::Sigmoid => vec![Some(zip_map(g, out, |gv, s| gv * s * (T::one() - s)))],
        Op::Tanh => vec![Some(zip_map(g, out, |gv, t| gv * (T::one() - t * t)))],
        Op::Relu => vec![Some(zip_map(g, args[0], |gv, x| if x > T::zero() { gv } else { T::zero() }))],
        Op::Conv2d => {
            let d = conv_dims(args[0], args[1]).expect("validated in forward");
            let Saved::Im2col(cols) = saved else { unreachable!("conv saves its patch matrix") };
            let patch = d.patch();
            let dx = want(0).then(|| {
                let mut dcols = vec![T::zero(); d.rows() * patch];
                T::gemm(
                    d.rows(),
                    d.co,
                    patch,
                    T::one(),
                    g.data(),
                    d.co as isize,
                    1,
                    args[1].data(),
                    1,
                    d.co as isize,
                    T::zero(),
                    &mut dcols,
                    patch as isize,
                    1,
                );
                let mut dx = vec![T::zero(); args[0].len()];
                d.for_each_tap(|col, src| {
                    for (t, &v) in dx[src..src + d.ci].iter_mut().zip(&dcols[col..col + d.ci]) {
                        *t += v;
                    }
                });
                build(args[0].shape().to_vec(), dx)
            });
            let dk = want(1).then(|| {
                let mut dk = vec![T::zero(); patch * d.co];
                T::gemm(
                    patch,
                    d.rows(),
                    d.co,
                    T::one(),
                    cols,
                    1,
                    patch as isize,
                    g.data(),
                    d.co as isize,
                    1,
                    T::zero(),
                    &mut dk,
                    d.co as isize,
                    1,
                );
                build(args[1].shape().to_vec(), dk)
            });
            vec![dx, dk]
        }
        Op::MaxPool2 => {
            let Saved::Argmax(arg) = saved else { unreachable!("pool saves argmax") };
            let mut dx = vec![T::zero(); args[0].len()];
            for (&idx, &gv) in arg.iter().zip(g.data()) {
                dx[idx] += gv;
            }
            vec![Some(build(args[0].shape().to_vec(), dx))]
        }
        Op::Flatten | Op::Reshape(_) => {
            vec![Some(g.clone().reshape(args[0].shape().to_vec()).expect("same size"))]
        }
        Op::Concat => {
            let m = out.shape()[0];
            let total = out.shape()[1];
            let mut offset = 0;
            let mut res = Vec::with_capacity(args.len());
            for (i, a) in args.iter().enumerate() {
                let wd = a.shape()[1];
                res.push(want(i).then(|| {
                    let mut part = Vec::with_capacity(m * wd);
                    for row in g.data().chunks_exact(total) {
                        part.extend_from_slice(&row[offset..offset + wd]);
                    }
                    build(vec![m, wd], part)
                }));
                offset += wd;
            }
            res
        }
        Op::SliceCols { start, len } => {
            let c = args[0].shape()[1];
            let mut dx = vec![T::zero(); args[0].len()];
            for (dst, src) in dx.chunks_exact_mut(c).zip(g.data().chunks_exact(*len)) {
                dst[*start..start + len].copy_from_slice(src);
            }
            vec![Some(build(args[0].shape().to_vec(), dx))]
        }
        Op::Step(t) => {
            let (m, steps, d) = (args[0].shape()[0], args[0].shape()[1], args[0].shape()[2]);
            let mut dx = vec![T::zero(); args[0].len()];
            for b in 0..m {
                let base = (b * steps + t) * d;
                dx[base..base + d].copy_from_slice(&g.data()[b * d..(b + 1) * d]);
            }
            vec![Some(build(args[0].shape().to_vec(), dx))]
        }
        Op::Stack => {
            let (m, steps, d) = (out.shape()[0], out.shape()[1], out.shape()[2]);
            (0..steps)
                .map(|t| {
                    want(t).then(|| {
                        let mut part = Vec::with_capacity(m * d);
                        for b in 0..m {
                            let src = (b * steps + t) * d;
                            part.extend_from_slice(&g.data()[src..src + d]);
                        }
                        build(vec![m, d], part)
                    })
                })
                .collect()
        }
        Op::LstmCell => {
            let (m, four_h) = (args[0].shape()[0], args[0].shape()[1]);
            let hd = four_h / 4;
            let has_prev = args.len() > 1;
            let mut dgates = vec![T::zero(); m * four_h];
            let mut dprev = vec![T::zero(); if has_prev { m * hd } else { 0 }];
            let one = T::one();
            let Saved::Gates(gates) = saved else { unreachable!("lstm cell saves its gates") };
            for b in 0..m {
                let gr = &g.data()[b * 2 * hd..(b + 1) * 2 * hd];
                for j in 0..hd {
                    let k = 5 * (b * hd + j);
                    let [i, f, gg, o, tc] = [gates[k], gates[k + 1], gates[k + 2], gates[k + 3], gates[k + 4]];
                    let prev = if has_prev { args[1].data()[b * hd + j] } else { T::zero() };
                    let dh = gr[j];
                    let dc = gr[hd + j] + dh * o * (one - tc * tc);
                    let row = &mut dgates[b * four_h..(b + 1) * four_h];
                    row[j] = dc * gg * i * (one - i);
                    row[hd + j] = dc * prev * f * (one - f);
                    row[2 * hd + j] = dc * i * (one - gg * gg);
                    row[3 * hd + j] = dh * tc * o * (one - o);
                    if has_prev {
                        dprev[b * hd + j] = dc * f;
                    }
                }
            }
            let mut res = vec![want(0).then(|| build(vec![m, four_h], dgates))];
            if has_prev {
                res.push(want(1).then(|| build(vec![m, hd], dprev)));
            }
            res
        }
        Op::Sum => vec![Some(Tensor::full(args[0].shape().to_vec(), g.item()))],
        Op::SumSquares => {
            let two_g = T::lit(2.0) * g.item();
            vec![Some(args[0].map(|v| v * two_g))]
        }
        Op::Softmax => {
            let k = out.shape()[1];
            let mut dx = vec![T::zero(); out.len()];
            for ((p, gr), d) in out.data().chunks_exact(k).zip(g.data().chunks_exact(k)).zip(dx.chunks_exact_mut(k)) {
                let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((dv, &pv), &gv) in d.iter_mut().zip(p).zip(gr) {
                    *dv = pv * (gv - dot);
                }
            }
            vec![Some(build(out.shape().to_vec(), dx))]
        }
        Op::SoftmaxCrossEntropy => {
            let (m, k) = (args[0].shape()[0], args[0].shape()[1]);
            let classes = class_indices(args[1], k).expect("validated in forward");
            let mut p = softmax_rows(args[0].data(), k);
            let scale = g.item() / T::lit(m as f64);
            for (row, &y) in p.chunks_exact_mut(k).zip(&classes) {
                row[y] -= T::one();
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            vec![want(0).then(|| build(vec![m, k], p)), None]
        }
        Op::Quantize { spec, straight_through } => {
            assert!(*straight_through, "hard quantizers are rejected before reaching the kernel");
            vec![Some(zip_map(g, args[0], |gv, x| if spec.in_range(x) { gv } else { T::zero() }))]
        }
    }
}
