//! Forward and backward kernels for every tape primitive.
//!
//! All reductions run in a fixed order (innermost loop over the contiguous
//! axis) so results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::tape::{Primitive, LAYER_NORM_EPS};
use crate::tensor::{Real, Tensor};

/// Values kept from the forward pass for the backward rule.
#[derive(Debug)]
pub(crate) enum Saved<T> {
    Nothing,
    Argmax(Vec<usize>),
    Norm { xhat: Vec<T>, rstd: Vec<T> },
    Probs(Vec<T>),
}

impl<T: Real> Saved<T> {
    pub(crate) fn bytes(&self) -> u64 {
        let n = match self {
            Saved::Nothing => return 0,
            Saved::Argmax(ix) => return (ix.len() * std::mem::size_of::<usize>()) as u64,
            Saved::Norm { xhat, rstd } => xhat.len() + rstd.len(),
            Saved::Probs(p) => p.len(),
        };
        (n * T::BYTES) as u64
    }
}

fn arity<T>(kind: &'static str, xs: &[&Tensor<T>], lo: usize, hi: usize) -> Result<()> {
    if xs.len() < lo || xs.len() > hi {
        let want = if lo == hi {
            format!("{lo}")
        } else {
            format!("{lo}..={hi}")
        };
        return Err(Error::shape(kind, format!("expected {want} inputs, got {}", xs.len())));
    }
    Ok(())
}

fn rank<T: Real>(kind: &'static str, what: &str, t: &Tensor<T>, r: usize) -> Result<()> {
    if t.rank() != r {
        return Err(Error::shape(
            kind,
            format!("{what} must have rank {r}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `da[m,k] += g[m,n] * b[k,n]^T`
fn matmul_grad_lhs<T: Real>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            da[i * k + p] = da[i * k + p] + acc;
        }
    }
}

/// `db[k,n] += a[m,k]^T * g[m,n]`
fn matmul_grad_rhs<T: Real>(a: &[T], g: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d = *d + av * gv;
            }
        }
    }
}

fn sum_rows<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let s = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * s * (T::one() + T::lit(3.0) * c * x * x);
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn forward<T: Real>(prim: &Primitive, xs: &[&Tensor<T>], keep: bool) -> Result<(Tensor<T>, Saved<T>)> {
    let kind = prim.name();
    match prim {
        Primitive::MatMul => {
            arity(kind, xs, 2, 2)?;
            let (a, b) = (xs[0], xs[1]);
            rank(kind, "lhs", a, 2)?;
            rank(kind, "rhs", b, 2)?;
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if b.shape()[0] != k {
                return Err(Error::shape(
                    kind,
                    format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![T::zero(); m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Ok((Tensor::from_parts(vec![m, n], out), Saved::Nothing))
        }
        Primitive::Add => {
            arity(kind, xs, 2, 2)?;
            let (a, b) = (xs[0], xs[1]);
            let out: Vec<T> = if a.shape() == b.shape() {
                a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect()
            } else if b.rank() == 1 && a.rank() >= 1 && a.shape().last() == Some(&b.len()) {
                let cols = b.len();
                a.data()
                    .chunks_exact(cols)
                    .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| x + y))
                    .collect()
            } else {
                return Err(Error::shape(
                    kind,
                    format!("cannot add {:?} and {:?}", a.shape(), b.shape()),
                ));
            };
            Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::Nothing))
        }
        Primitive::Conv1dValid => {
            arity(kind, xs, 2, 3)?;
            let (x, w) = (xs[0], xs[1]);
            rank(kind, "input", x, 2)?;
            rank(kind, "kernel", w, 3)?;
            let (len, hidden) = (x.shape()[0], x.shape()[1]);
            let (k, wh, f) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            if wh != hidden {
                return Err(Error::shape(
                    kind,
                    format!("input channels {hidden} vs kernel channels {wh}"),
                ));
            }
            if let Some(b) = xs.get(2) {
                if b.shape() != [f] {
                    return Err(Error::shape(kind, format!("bias {:?} vs {f} filters", b.shape())));
                }
            }
            if k > len {
                return Err(Error::KernelTooLong { kernel: k, len });
            }
            let steps = len - k + 1;
            let mut out = vec![T::zero(); steps * f];
            let xd = x.data();
            let wd = w.data();
            for t in 0..steps {
                let orow = &mut out[t * f..(t + 1) * f];
                if let Some(b) = xs.get(2) {
                    orow.copy_from_slice(b.data());
                }
                // Window rows t..t+k are contiguous in x, kernel rows contiguous in w.
                let window = &xd[t * hidden..(t + k) * hidden];
                for (&xv, wrow) in window.iter().zip(wd.chunks_exact(f)) {
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o = *o + xv * wv;
                    }
                }
            }
            Ok((Tensor::from_parts(vec![steps, f], out), Saved::Nothing))
        }
        Primitive::MaxOverTime { limit } => {
            arity(kind, xs, 1, 1)?;
            let x = xs[0];
            rank(kind, "input", x, 2)?;
            let (len, c) = (x.shape()[0], x.shape()[1]);
            let limit = limit.unwrap_or(len);
            if limit == 0 || limit > len {
                return Err(Error::shape(kind, format!("limit {limit} outside 1..={len}")));
            }
            let xd = x.data();
            let mut out = xd[..c].to_vec();
            let mut arg = vec![0usize; c];
            for t in 1..limit {
                for j in 0..c {
                    let v = xd[t * c + j];
                    if v > out[j] {
                        out[j] = v;
                        arg[j] = t;
                    }
                }
            }
            let saved = if keep { Saved::Argmax(arg) } else { Saved::Nothing };
            Ok((Tensor::from_parts(vec![c], out), saved))
        }
        Primitive::Relu => {
            arity(kind, xs, 1, 1)?;
            let out = xs[0]
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect();
            Ok((Tensor::from_parts(xs[0].shape().to_vec(), out), Saved::Nothing))
        }
        Primitive::Gelu => {
            arity(kind, xs, 1, 1)?;
            let out = xs[0].data().iter().map(|&v| gelu_parts(v).0).collect();
            Ok((Tensor::from_parts(xs[0].shape().to_vec(), out), Saved::Nothing))
        }
        Primitive::Tanh => {
            arity(kind, xs, 1, 1)?;
            let out = xs[0].data().iter().map(|v| v.tanh()).collect();
            Ok((Tensor::from_parts(xs[0].shape().to_vec(), out), Saved::Nothing))
        }
        Primitive::LayerNorm => {
            arity(kind, xs, 3, 3)?;
            let (x, gamma, beta) = (xs[0], xs[1], xs[2]);
            if x.rank() == 0 {
                return Err(Error::shape(kind, "input must have rank >= 1"));
            }
            let (rows, h) = x.rows_cols();
            if gamma.shape() != [h] || beta.shape() != [h] {
                return Err(Error::shape(
                    kind,
                    format!("scale {:?} / offset {:?} vs hidden {h}", gamma.shape(), beta.shape()),
                ));
            }
            let hn = T::lit(h as f64);
            let eps = T::lit(LAYER_NORM_EPS);
            let mut out = vec![T::zero(); rows * h];
            let mut xhat = if keep { vec![T::zero(); rows * h] } else { Vec::new() };
            let mut rstds = if keep { vec![T::zero(); rows] } else { Vec::new() };
            for r in 0..rows {
                let row = &x.data()[r * h..(r + 1) * h];
                let mean = row.iter().fold(T::zero(), |a, &v| a + v) / hn;
                let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / hn;
                let rstd = T::one() / (var + eps).sqrt();
                for j in 0..h {
                    let n = (row[j] - mean) * rstd;
                    out[r * h + j] = n * gamma.data()[j] + beta.data()[j];
                    if keep {
                        xhat[r * h + j] = n;
                    }
                }
                if keep {
                    rstds[r] = rstd;
                }
            }
            let saved = if keep {
                Saved::Norm { xhat, rstd: rstds }
            } else {
                Saved::Nothing
            };
            Ok((Tensor::from_parts(x.shape().to_vec(), out), saved))
        }
        Primitive::EmbeddingLookup { ids } => {
            arity(kind, xs, 1, 1)?;
            let table = xs[0];
            rank(kind, "table", table, 2)?;
            if ids.is_empty() {
                return Err(Error::shape(kind, "no ids to look up"));
            }
            let (v, h) = (table.shape()[0], table.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * h);
            for &id in ids {
                if id >= v {
                    return Err(Error::IdOutOfRange { id, size: v });
                }
                out.extend_from_slice(&table.data()[id * h..(id + 1) * h]);
            }
            Ok((Tensor::from_parts(vec![ids.len(), h], out), Saved::Nothing))
        }
        Primitive::ScaledDotAttention { heads, valid } => {
            arity(kind, xs, 3, 3)?;
            let (q, k, v) = (xs[0], xs[1], xs[2]);
            rank(kind, "query", q, 2)?;
            if k.shape() != q.shape() || v.shape() != q.shape() {
                return Err(Error::shape(
                    kind,
                    format!(
                        "query {:?}, key {:?}, value {:?} must agree",
                        q.shape(),
                        k.shape(),
                        v.shape()
                    ),
                ));
            }
            let (len, h) = (q.shape()[0], q.shape()[1]);
            let (heads, valid) = (*heads, *valid);
            if heads == 0 || h % heads != 0 {
                return Err(Error::shape(kind, format!("hidden {h} not divisible by {heads} heads")));
            }
            if valid == 0 || valid > len {
                return Err(Error::shape(kind, format!("valid length {valid} outside 1..={len}")));
            }
            let d = h / heads;
            let scale = T::one() / T::lit(d as f64).sqrt();
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            let mut out = vec![T::zero(); len * h];
            let mut probs = if keep {
                vec![T::zero(); heads * len * valid]
            } else {
                Vec::new()
            };
            let mut p = vec![T::zero(); valid];
            for a in 0..heads {
                let off = a * d;
                for i in 0..len {
                    let qi = &qd[i * h + off..i * h + off + d];
                    let mut max = T::neg_infinity();
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kd[j * h + off..j * h + off + d];
                        let s = qi.iter().zip(kj).fold(T::zero(), |acc, (&x, &y)| acc + x * y) * scale;
                        *pj = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut z = T::zero();
                    for pj in p.iter_mut() {
                        *pj = (*pj - max).exp();
                        z = z + *pj;
                    }
                    let orow = &mut out[i * h + off..i * h + off + d];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj = *pj / z;
                        let vj = &vd[j * h + off..j * h + off + d];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o = *o + *pj * vv;
                        }
                    }
                    if keep {
                        probs[(a * len + i) * valid..(a * len + i + 1) * valid].copy_from_slice(&p);
                    }
                }
            }
            let saved = if keep { Saved::Probs(probs) } else { Saved::Nothing };
            Ok((Tensor::from_parts(vec![len, h], out), saved))
        }
        Primitive::Concat => {
            if xs.is_empty() {
                return Err(Error::shape(kind, "nothing to concatenate"));
            }
            let first = xs[0];
            if first.rank() == 0 {
                return Err(Error::shape(kind, "inputs must have rank >= 1"));
            }
            let lead = &first.shape()[..first.rank() - 1];
            for x in xs {
                if x.rank() != first.rank() || &x.shape()[..x.rank() - 1] != lead {
                    return Err(Error::shape(kind, format!("{:?} vs {:?}", first.shape(), x.shape())));
                }
            }
            let rows = first.rows_cols().0;
            let total: usize = xs.iter().map(|x| x.rows_cols().1).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for x in xs {
                    let c = x.rows_cols().1;
                    out.extend_from_slice(&x.data()[r * c..(r + 1) * c]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Ok((Tensor::from_parts(shape, out), Saved::Nothing))
        }
        Primitive::Linear => {
            arity(kind, xs, 2, 3)?;
            let (x, w) = (xs[0], xs[1]);
            rank(kind, "weight", w, 2)?;
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let rows = match x.shape() {
                [n] if *n == fan_in => 1,
                [m, n] if *n == fan_in => *m,
                s => return Err(Error::shape(kind, format!("input {s:?} vs weight {:?}", w.shape()))),
            };
            let mut out = vec![T::zero(); rows * fan_out];
            if let Some(b) = xs.get(2) {
                if b.shape() != [fan_out] {
                    return Err(Error::shape(kind, format!("bias {:?} vs output {fan_out}", b.shape())));
                }
                for row in out.chunks_exact_mut(fan_out) {
                    row.copy_from_slice(b.data());
                }
            }
            matmul_into(x.data(), w.data(), &mut out, rows, fan_in, fan_out);
            let shape = if x.rank() == 1 {
                vec![fan_out]
            } else {
                vec![rows, fan_out]
            };
            Ok((Tensor::from_parts(shape, out), Saved::Nothing))
        }
        Primitive::Mul => {
            arity(kind, xs, 2, 2)?;
            if xs[0].shape() != xs[1].shape() {
                return Err(Error::shape(
                    kind,
                    format!("{:?} vs {:?}", xs[0].shape(), xs[1].shape()),
                ));
            }
            let out = xs[0].data().iter().zip(xs[1].data()).map(|(&a, &b)| a * b).collect();
            Ok((Tensor::from_parts(xs[0].shape().to_vec(), out), Saved::Nothing))
        }
        Primitive::Sum | Primitive::Mean => {
            arity(kind, xs, 1, 1)?;
            let s = xs[0].data().iter().fold(T::zero(), |a, &v| a + v);
            let s = if matches!(prim, Primitive::Mean) {
                s / T::lit(xs[0].len() as f64)
            } else {
                s
            };
            Ok((Tensor::scalar(s), Saved::Nothing))
        }
        Primitive::Scale(c) => {
            arity(kind, xs, 1, 1)?;
            let c = T::lit(*c);
            let out = xs[0].data().iter().map(|&v| v * c).collect();
            Ok((Tensor::from_parts(xs[0].shape().to_vec(), out), Saved::Nothing))
        }
        Primitive::Stack => {
            if xs.is_empty() {
                return Err(Error::shape(kind, "nothing to stack"));
            }
            let shape = xs[0].shape();
            let mut out = Vec::with_capacity(xs.len() * xs[0].len());
            for x in xs {
                if x.shape() != shape {
                    return Err(Error::shape(kind, format!("{shape:?} vs {:?}", x.shape())));
                }
                out.extend_from_slice(x.data());
            }
            let mut s = vec![xs.len()];
            s.extend_from_slice(shape);
            Ok((Tensor::from_parts(s, out), Saved::Nothing))
        }
        Primitive::SoftmaxCrossEntropy { targets } => {
            arity(kind, xs, 1, 1)?;
            let x = xs[0];
            if x.rank() == 0 || x.rank() > 2 {
                return Err(Error::shape(kind, format!("logits {:?}", x.shape())));
            }
            let (b, c) = x.rows_cols();
            if targets.len() != b {
                return Err(Error::shape(kind, format!("{} targets for {b} rows", targets.len())));
            }
            let mut total = T::zero();
            let mut probs = if keep { vec![T::zero(); b * c] } else { Vec::new() };
            for (r, &t) in targets.iter().enumerate() {
                if t >= c {
                    return Err(Error::TargetOutOfRange { target: t, classes: c });
                }
                let row = &x.data()[r * c..(r + 1) * c];
                let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                let z = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
                let lse = max + z.ln();
                total = total + (lse - row[t]);
                if keep {
                    for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                        *p = (v - lse).exp();
                    }
                }
            }
            let loss = total / T::lit(b as f64);
            let saved = if keep { Saved::Probs(probs) } else { Saved::Nothing };
            Ok((Tensor::scalar(loss), saved))
        }
        Primitive::BceWithLogits { targets } => {
            arity(kind, xs, 1, 1)?;
            let x = xs[0];
            if targets.len() != x.len() {
                return Err(Error::shape(
                    kind,
                    format!("{} targets for logits {:?}", targets.len(), x.shape()),
                ));
            }
            let mut total = T::zero();
            for (&v, &y) in x.data().iter().zip(targets) {
                let y = T::lit(y);
                let term = v.max(T::zero()) - v * y + (-v.abs()).exp().ln_1p();
                total = total + term;
            }
            let loss = total / T::lit(x.len() as f64);
            let saved = if keep {
                Saved::Probs(x.data().iter().map(|&v| sigmoid(v)).collect())
            } else {
                Saved::Nothing
            };
            Ok((Tensor::scalar(loss), saved))
        }
    }
}

/// Gradients with respect to each input; `None` where `want[i]` is false.
pub(crate) fn backward<T: Real>(
    prim: &Primitive,
    xs: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: &Saved<T>,
    g: &[T],
    want: &[bool],
) -> Vec<Option<Vec<T>>> {
    let zeros = |n: usize| vec![T::zero(); n];
    let mut grads: Vec<Option<Vec<T>>> = vec![None; xs.len()];
    match prim {
        Primitive::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if want[0] {
                let mut da = zeros(m * k);
                matmul_grad_lhs(g, b.data(), &mut da, m, k, n);
                grads[0] = Some(da);
            }
            if want[1] {
                let mut db = zeros(k * n);
                matmul_grad_rhs(a.data(), g, &mut db, m, k, n);
                grads[1] = Some(db);
            }
        }
        Primitive::Add => {
            if want[0] {
                grads[0] = Some(g.to_vec());
            }
            if want[1] {
                grads[1] = Some(if xs[0].shape() == xs[1].shape() {
                    g.to_vec()
                } else {
                    sum_rows(g, xs[1].len())
                });
            }
        }
        Primitive::Conv1dValid => {
            let (x, w) = (xs[0], xs[1]);
            let hidden = x.shape()[1];
            let (k, f) = (w.shape()[0], w.shape()[2]);
            let steps = out.shape()[0];
            let span = k * hidden;
            if want[0] {
                let mut dx = zeros(x.len());
                for t in 0..steps {
                    let grow = &g[t * f..(t + 1) * f];
                    let dwin = &mut dx[t * hidden..t * hidden + span];
                    for (d, wrow) in dwin.iter_mut().zip(w.data().chunks_exact(f)) {
                        let acc = grow.iter().zip(wrow).fold(T::zero(), |a, (&gv, &wv)| a + gv * wv);
                        *d = *d + acc;
                    }
                }
                grads[0] = Some(dx);
            }
            if want[1] {
                let mut dw = zeros(w.len());
                for t in 0..steps {
                    let grow = &g[t * f..(t + 1) * f];
                    let window = &x.data()[t * hidden..t * hidden + span];
                    for (&xv, drow) in window.iter().zip(dw.chunks_exact_mut(f)) {
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + xv * gv;
                        }
                    }
                }
                grads[1] = Some(dw);
            }
            if xs.len() == 3 && want[2] {
                grads[2] = Some(sum_rows(g, f));
            }
        }
        Primitive::MaxOverTime { .. } => {
            if want[0] {
                let Saved::Argmax(arg) = saved else {
                    unreachable!("max_over_time saved no argmax")
                };
                let c = xs[0].shape()[1];
                let mut dx = zeros(xs[0].len());
                for (j, (&t, &gv)) in arg.iter().zip(g).enumerate() {
                    dx[t * c + j] = dx[t * c + j] + gv;
                }
                grads[0] = Some(dx);
            }
        }
        Primitive::Relu => {
            if want[0] {
                grads[0] = Some(
                    xs[0]
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                        .collect(),
                );
            }
        }
        Primitive::Gelu => {
            if want[0] {
                grads[0] = Some(
                    xs[0]
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| gv * gelu_parts(x).1)
                        .collect(),
                );
            }
        }
        Primitive::Tanh => {
            if want[0] {
                grads[0] = Some(
                    out.data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| gv * (T::one() - y * y))
                        .collect(),
                );
            }
        }
        Primitive::LayerNorm => {
            let Saved::Norm { xhat, rstd } = saved else {
                unreachable!("layer_norm saved no statistics")
            };
            let gamma = xs[1].data();
            let (rows, h) = xs[0].rows_cols();
            if want[0] {
                let hn = T::lit(h as f64);
                let mut dx = zeros(rows * h);
                let mut dxhat = zeros(h);
                for r in 0..rows {
                    let gr = &g[r * h..(r + 1) * h];
                    let xr = &xhat[r * h..(r + 1) * h];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..h {
                        dxhat[j] = gr[j] * gamma[j];
                        mean_d = mean_d + dxhat[j];
                        mean_dx = mean_dx + dxhat[j] * xr[j];
                    }
                    mean_d = mean_d / hn;
                    mean_dx = mean_dx / hn;
                    for j in 0..h {
                        dx[r * h + j] = rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                grads[0] = Some(dx);
            }
            if want[1] {
                let mut dg = zeros(h);
                for (grow, xrow) in g.chunks_exact(h).zip(xhat.chunks_exact(h)) {
                    for ((d, &gv), &xv) in dg.iter_mut().zip(grow).zip(xrow) {
                        *d = *d + gv * xv;
                    }
                }
                grads[1] = Some(dg);
            }
            if want[2] {
                grads[2] = Some(sum_rows(g, h));
            }
        }
        Primitive::EmbeddingLookup { ids } => {
            if want[0] {
                let h = xs[0].shape()[1];
                let mut dt = zeros(xs[0].len());
                for (i, &id) in ids.iter().enumerate() {
                    let src = &g[i * h..(i + 1) * h];
                    for (d, &gv) in dt[id * h..(id + 1) * h].iter_mut().zip(src) {
                        *d = *d + gv;
                    }
                }
                grads[0] = Some(dt);
            }
        }
        Primitive::ScaledDotAttention { heads, valid } => {
            let Saved::Probs(probs) = saved else {
                unreachable!("attention saved no probabilities")
            };
            let (q, k, v) = (xs[0], xs[1], xs[2]);
            let (len, h) = (q.shape()[0], q.shape()[1]);
            let (heads, valid) = (*heads, *valid);
            let d = h / heads;
            let scale = T::one() / T::lit(d as f64).sqrt();
            let mut dq = zeros(len * h);
            let mut dk = zeros(len * h);
            let mut dv = zeros(len * h);
            let mut dp = vec![T::zero(); valid];
            for a in 0..heads {
                let off = a * d;
                for i in 0..len {
                    let p = &probs[(a * len + i) * valid..(a * len + i + 1) * valid];
                    let gi = &g[i * h + off..i * h + off + d];
                    let mut dot = T::zero();
                    for j in 0..valid {
                        let vj = &v.data()[j * h + off..j * h + off + d];
                        dp[j] = gi.iter().zip(vj).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                        dot = dot + p[j] * dp[j];
                        let dvj = &mut dv[j * h + off..j * h + off + d];
                        for (dd, &gv) in dvj.iter_mut().zip(gi) {
                            *dd = *dd + p[j] * gv;
                        }
                    }
                    let qi = &q.data()[i * h + off..i * h + off + d];
                    for j in 0..valid {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = &k.data()[j * h + off..j * h + off + d];
                        let dqi = &mut dq[i * h + off..i * h + off + d];
                        for (dd, &kv) in dqi.iter_mut().zip(kj) {
                            *dd = *dd + ds * kv;
                        }
                        let dkj = &mut dk[j * h + off..j * h + off + d];
                        for (dd, &qv) in dkj.iter_mut().zip(qi) {
                            *dd = *dd + ds * qv;
                        }
                    }
                }
            }
            for (slot, (flag, gr)) in grads.iter_mut().zip(want.iter().zip([dq, dk, dv])) {
                if *flag {
                    *slot = Some(gr);
                }
            }
        }
        Primitive::Concat => {
            let rows = xs[0].rows_cols().0;
            let total = out.rows_cols().1;
            let mut offset = 0;
            for (i, x) in xs.iter().enumerate() {
                let c = x.rows_cols().1;
                if want[i] {
                    let mut dx = Vec::with_capacity(x.len());
                    for r in 0..rows {
                        dx.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    grads[i] = Some(dx);
                }
                offset += c;
            }
        }
        Primitive::Linear => {
            let (x, w) = (xs[0], xs[1]);
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / fan_in;
            if want[0] {
                let mut dx = zeros(x.len());
                matmul_grad_lhs(g, w.data(), &mut dx, rows, fan_in, fan_out);
                grads[0] = Some(dx);
            }
            if want[1] {
                let mut dw = zeros(w.len());
                matmul_grad_rhs(x.data(), g, &mut dw, rows, fan_in, fan_out);
                grads[1] = Some(dw);
            }
            if xs.len() == 3 && want[2] {
                grads[2] = Some(sum_rows(g, fan_out));
            }
        }
        Primitive::Mul => {
            if want[0] {
                grads[0] = Some(xs[1].data().iter().zip(g).map(|(&b, &gv)| b * gv).collect());
            }
            if want[1] {
                grads[1] = Some(xs[0].data().iter().zip(g).map(|(&a, &gv)| a * gv).collect());
            }
        }
        Primitive::Sum => {
            if want[0] {
                grads[0] = Some(vec![g[0]; xs[0].len()]);
            }
        }
        Primitive::Mean => {
            if want[0] {
                let n = T::lit(xs[0].len() as f64);
                grads[0] = Some(vec![g[0] / n; xs[0].len()]);
            }
        }
        Primitive::Scale(c) => {
            if want[0] {
                let c = T::lit(*c);
                grads[0] = Some(g.iter().map(|&v| v * c).collect());
            }
        }
        Primitive::Stack => {
            let n = xs[0].len();
            for (i, chunk) in g.chunks_exact(n).enumerate() {
                if want[i] {
                    grads[i] = Some(chunk.to_vec());
                }
            }
        }
        Primitive::SoftmaxCrossEntropy { targets } => {
            if want[0] {
                let Saved::Probs(probs) = saved else {
                    unreachable!("softmax cross-entropy saved no probabilities")
                };
                let (b, c) = xs[0].rows_cols();
                let scale = g[0] / T::lit(b as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * c + t] = dx[r * c + t] - scale;
                }
                grads[0] = Some(dx);
            }
        }
        Primitive::BceWithLogits { targets } => {
            if want[0] {
                let Saved::Probs(sig) = saved else {
                    unreachable!("bce saved no sigmoid values")
                };
                let scale = g[0] / T::lit(sig.len() as f64);
                grads[0] = Some(
                    sig.iter()
                        .zip(targets)
                        .map(|(&s, &y)| (s - T::lit(y)) * scale)
                        .collect(),
                );
            }
        }
    }
    grads
}
