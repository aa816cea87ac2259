//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar loss with respect to every parameter that was
//! read through [`Graph::param`]. Graphs are cheap, single-use and borrow
//! the parameter store immutably, so independent samples can be run on
//! separate graphs concurrently.

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Grads, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    BroadcastRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    MaxPool2(Var, Vec<usize>),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    PadSpatial(Var),
    CropSpatial(Var),
    Sum(Var),
    SumSq(Var),
    BceMean {
        logits: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; gradients are not propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Reads a parameter. Repeated reads return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        assert_eq!(bv.rows(), k, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let n = bv.cols();
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of `x: [m, n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        let n = xv.cols();
        assert_eq!(rv.len(), n, "add_row width {:?} vs {:?}", xv.shape(), rv.shape());
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![rows, total], out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        self.push(Tensor::new(vec![rows, cols], out), Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let out = Tensor::new(vec![len, c], xv.data()[start * c..(start + len) * c].to_vec());
        self.push(out, Op::SliceRows(x, start))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::new(vec![r, len], out), Op::SliceCols(x, start))
    }

    /// Repeats a `[1, n]` row `m` times.
    pub fn broadcast_rows(&mut self, x: Var, m: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1, "broadcast_rows expects a single row");
        let n = xv.cols();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(xv.data());
        }
        self.push(Tensor::new(vec![m, n], out), Op::BroadcastRows(x))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let xv = self.value(x);
        let (r, n) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; r * n];
        let mut xhat = vec![0.0; r * n];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xv.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = gv[j] * h + bv[j];
            }
        }
        self.push(
            Tensor::new(vec![r, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [m, d]`, `k, v: [n, d]`; each of the `heads` slices of width
    /// `d / heads` attends independently and the head outputs are
    /// concatenated back to `[m, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads);
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// 2D convolution, stride 1. `x: [ci, h, w]`, `w: [co, ci, k, k]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: ParamId, b: ParamId, pad: usize) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), pad);
        self.push(out, Op::Conv2d { x, w, b, pad })
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = chw(xv);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; c * ho * wo];
        let mut arg = vec![0; c * ho * wo];
        let d = xv.data();
        for ch in 0..c {
            for y in 0..ho {
                for x_ in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * y + dy) * w + 2 * x_ + dx;
                        if d[idx] > best {
                            best = d[idx];
                            bi = idx;
                        }
                    }
                    let o = ch * ho * wo + y * wo + x_;
                    out[o] = best;
                    arg[o] = bi;
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], out), Op::MaxPool2(x, arg))
    }

    /// Bilinear 2x up-sampling with half-pixel centers (edges clamped).
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = chw(xv);
        let ys = bilinear_taps(h);
        let xs = bilinear_taps(w);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * ho * wo];
        let d = xv.data();
        for ch in 0..c {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let v = (1.0 - ly) * ((1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1])
                        + ly * ((1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1]);
                    out[ch * ho * wo + oy * wo + ox] = v;
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], out), Op::Upsample2(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ca, h, w) = chw(av);
        let (cb, hb, wb) = chw(bv);
        assert_eq!((h, w), (hb, wb), "concat_channels spatial mismatch");
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(av.data());
        out.extend_from_slice(bv.data());
        self.push(Tensor::new(vec![ca + cb, h, w], out), Op::ConcatChannels(a, b))
    }

    /// Zero-pads bottom and right edges up to `[c, h, w]`.
    pub fn pad_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (c, hi, wi) = chw(xv);
        assert!(h >= hi && w >= wi, "pad_spatial cannot shrink");
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..hi {
                let src = &xv.data()[ch * hi * wi + y * wi..ch * hi * wi + (y + 1) * wi];
                out[ch * h * w + y * w..ch * h * w + y * w + wi].copy_from_slice(src);
            }
        }
        self.push(Tensor::new(vec![c, h, w], out), Op::PadSpatial(x))
    }

    /// Keeps the top-left `[c, h, w]` region.
    pub fn crop_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (c, hi, wi) = chw(xv);
        assert!(h <= hi && w <= wi, "crop_spatial cannot grow");
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                out.extend_from_slice(&xv.data()[ch * hi * wi + y * wi..ch * hi * wi + y * wi + w]);
            }
        }
        self.push(Tensor::new(vec![c, h, w], out), Op::CropSpatial(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSq(x))
    }

    /// Mean binary cross-entropy between logits and targets in `[0, 1]`,
    /// evaluated as `max(x, 0) - x y + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: &Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), target.len(), "bce shape mismatch");
        let loss = bce_with_logits_mean(lv.data(), target.data());
        self.push(
            Tensor::scalar(loss),
            Op::BceMean {
                logits,
                target: target.clone(),
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter read
    /// through this graph.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));
        let mut out = Grads::new(self.store.len());
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(g.data(), bv.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(av.data(), g.data(), &mut db, m, k, n);
                    acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), da));
                    acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, self.value(*b), |x, y| x * y);
                    let db = zip_map(&g, self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(x, row) => {
                    let rv = self.value(*row);
                    let n = rv.len();
                    let mut dr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *row, Tensor::new(rv.shape().to_vec(), dr));
                    acc(&mut grads, *x, g);
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.map(|v| v * s)),
                Op::Relu(x) => {
                    let dx = zip_map(&g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = zip_map(&g, &node.value, |gv, y| gv * (1.0 - y * y));
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = zip_map(&g, &node.value, |gv, y| gv * y * (1.0 - y));
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut start = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                        }
                        acc(&mut grads, p, Tensor::new(pv.shape().to_vec(), dp));
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        acc(
                            &mut grads,
                            p,
                            Tensor::new(pv.shape().to_vec(), g.data()[start..start + n].to_vec()),
                        );
                        start += n;
                    }
                }
                Op::SliceRows(x, start) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    let len = node.value.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for i in 0..r {
                        dx.data_mut()[i * c + start..i * c + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::BroadcastRows(x) => {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let mut dx = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (d, v) in dx.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let n = node.value.cols();
                    let r = node.value.rows();
                    let gv = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    let mut dx = vec![0.0; r * n];
                    for i in 0..r {
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            dgamma[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                            let dxh = gr[j] * gv[j];
                            sum_d += dxh;
                            sum_dx += dxh * xh[j];
                        }
                        for j in 0..n {
                            let dxh = gr[j] * gv[j];
                            dx[i * n + j] = inv_std[i] / n as f64 * (n as f64 * dxh - sum_d - xh[j] * sum_dx);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(node.value.shape().to_vec(), dx));
                    acc(&mut grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dgamma));
                    acc(&mut grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), dbeta));
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (dq, dk, dv) =
                        attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, &g);
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::Conv2d { x, w, b, pad } => {
                    let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), *pad, &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::MaxPool2(x, arg) => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (o, &src) in arg.iter().enumerate() {
                        dx.data_mut()[src] += g.data()[o];
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let xv = self.value(*x);
                    let (c, h, w) = chw(xv);
                    let ys = bilinear_taps(h);
                    let xs = bilinear_taps(w);
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                                let gv = g.data()[ch * ho * wo + oy * wo + ox];
                                plane[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                                plane[y0 * w + x1] += gv * (1.0 - ly) * lx;
                                plane[y1 * w + x0] += gv * ly * (1.0 - lx);
                                plane[y1 * w + x1] += gv * ly * lx;
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                }
                Op::ConcatChannels(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let na = av.len();
                    acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), g.data()[..na].to_vec()));
                    acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), g.data()[na..].to_vec()));
                }
                Op::PadSpatial(x) => {
                    let xv = self.value(*x);
                    let (c, hi, wi) = chw(xv);
                    let (_, h, w) = chw(&node.value);
                    let mut dx = Vec::with_capacity(xv.len());
                    for ch in 0..c {
                        for y in 0..hi {
                            dx.extend_from_slice(&g.data()[ch * h * w + y * w..ch * h * w + y * w + wi]);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                }
                Op::CropSpatial(x) => {
                    let xv = self.value(*x);
                    let (c, hi, wi) = chw(xv);
                    let (_, h, w) = chw(&node.value);
                    let mut dx = Tensor::zeros(xv.shape());
                    for ch in 0..c {
                        for y in 0..h {
                            dx.data_mut()[ch * hi * wi + y * wi..ch * hi * wi + y * wi + w]
                                .copy_from_slice(&g.data()[ch * h * w + y * w..ch * h * w + (y + 1) * w]);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    acc(&mut grads, *x, Tensor::filled(self.value(*x).shape(), gv));
                }
                Op::SumSq(x) => {
                    let gv = g.item();
                    acc(&mut grads, *x, self.value(*x).map(|v| 2.0 * gv * v));
                }
                Op::BceMean { logits, target } => {
                    let lv = self.value(*logits);
                    let scale = g.item() / lv.len() as f64;
                    let dx = zip_map(lv, target, |x, y| scale * (sigmoid(x) - y));
                    acc(&mut grads, *logits, dx);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.len(), b.len(), "elementwise shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected a [c, h, w] tensor, got {s:?}");
    (s[0], s[1], s[2])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `max(x, 0) - x y + ln(1 + exp(-|x|))` over all elements.
pub fn bce_with_logits_mean(logits: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum();
    total / logits.len() as f64
}

/// For each output index along an axis of input length `n`: the two source
/// taps and the weight of the second one.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Forward multi-head attention. Returns the output and the per-head
/// probability tensors laid out as `[heads, m, n]`.
pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, Vec<f64>) {
    let (m, d) = (q.rows(), q.cols());
    let n = k.rows();
    assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
    assert_eq!(k.cols(), d, "key width mismatch");
    assert_eq!(v.cols(), d, "value width mismatch");
    assert_eq!(v.rows(), n, "key/value length mismatch");
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut probs = vec![0.0; heads * m * n];
    let mut out = vec![0.0; m * d];
    for h in 0..heads {
        let off = h * dk;
        for i in 0..m {
            let qi = &q.data()[i * d + off..i * d + off + dk];
            let p = &mut probs[(h * m + i) * n..(h * m + i + 1) * n];
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = &k.data()[j * d + off..j * d + off + dk];
                *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(p);
            let o = &mut out[i * d + off..i * d + off + dk];
            for (j, &pj) in p.iter().enumerate() {
                let vj = &v.data()[j * d + off..j * d + off + dk];
                for (ov, vv) in o.iter_mut().zip(vj) {
                    *ov += pj * vv;
                }
            }
        }
    }
    (Tensor::new(vec![m, d], out), probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (m, d) = (q.rows(), q.cols());
    let n = k.rows();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = vec![0.0; m * d];
    let mut dkk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let off = h * dk;
        for i in 0..m {
            let p = &probs[(h * m + i) * n..(h * m + i + 1) * n];
            let gi = &g.data()[i * d + off..i * d + off + dk];
            for j in 0..n {
                let vj = &v.data()[j * d + off..j * d + off + dk];
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                let dvj = &mut dv[j * d + off..j * d + off + dk];
                for (dvv, gv) in dvj.iter_mut().zip(gi) {
                    *dvv += p[j] * gv;
                }
            }
            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..n {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dk {
                    dq[i * d + off + c] += ds * k.data()[j * d + off + c];
                    dkk[j * d + off + c] += ds * q.data()[i * d + off + c];
                }
            }
        }
    }
    (
        Tensor::new(q.shape().to_vec(), dq),
        Tensor::new(k.shape().to_vec(), dkk),
        Tensor::new(v.shape().to_vec(), dv),
    )
}

pub fn softmax_in_place(p: &mut [f64]) {
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in p.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in p.iter_mut() {
        *v /= total;
    }
}

/// Output index range `[lo, hi)` for which `o + off` stays inside `0..len`.
fn valid_range(off: isize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = ((len as isize - off).max(0) as usize).min(out_len);
    (lo.min(hi), hi)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (ci, h, wd) = chw(x);
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv kernel must be [co, ci, k, k]");
    let (co, kci, ks) = (ws[0], ws[1], ws[2]);
    assert_eq!(kci, ci, "conv input channels {ci} vs kernel {kci}");
    let ho = h + 2 * pad + 1 - ks;
    let wo = wd + 2 * pad + 1 - ks;
    let mut out = vec![0.0; co * ho * wo];
    let xd = x.data();
    let wdat = w.data();
    for o in 0..co {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = b.data()[o]);
        for c in 0..ci {
            let src = &xd[c * h * wd..(c + 1) * h * wd];
            for ky in 0..ks {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = valid_range(dy, h, ho);
                for kx in 0..ks {
                    let wv = wdat[((o * ci + c) * ks + ky) * ks + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = valid_range(dx, wd, wo);
                    for oy in y0..y1 {
                        let iy = (oy as isize + dy) as usize;
                        let ix0 = (x0 as isize + dx) as usize;
                        let orow = &mut plane[oy * wo + x0..oy * wo + x1];
                        let irow = &src[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, ho, wo], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, pad: usize, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (ci, h, wd) = chw(x);
    let ws = w.shape();
    let (co, ks) = (ws[0], ws[2]);
    let (_, ho, wo) = chw(g);
    let mut dx = vec![0.0; ci * h * wd];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    let xd = x.data();
    let wdat = w.data();
    for o in 0..co {
        let gplane = &g.data()[o * ho * wo..(o + 1) * ho * wo];
        db[o] = gplane.iter().sum();
        for c in 0..ci {
            let src = &xd[c * h * wd..(c + 1) * h * wd];
            let dsrc = &mut dx[c * h * wd..(c + 1) * h * wd];
            for ky in 0..ks {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = valid_range(dy, h, ho);
                for kx in 0..ks {
                    let widx = ((o * ci + c) * ks + ky) * ks + kx;
                    let wv = wdat[widx];
                    let dx_ = kx as isize - pad as isize;
                    let (x0, x1) = valid_range(dx_, wd, wo);
                    let mut dwv = 0.0;
                    for oy in y0..y1 {
                        let iy = (oy as isize + dy) as usize;
                        let ix0 = (x0 as isize + dx_) as usize;
                        let grow = &gplane[oy * wo + x0..oy * wo + x1];
                        let irow = &src[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)];
                        dwv += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        let drow = &mut dsrc[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += wv * gv;
                        }
                    }
                    dw[widx] += dwv;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx),
        Tensor::new(w.shape().to_vec(), dw),
        Tensor::new(vec![co], db),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_attention_returns_value() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::row(&[0.3, -1.0, 2.0, 0.5]));
        let k = g.constant(Tensor::row(&[1.0, 4.0, -2.0, 0.1]));
        let v = g.constant(Tensor::row(&[7.0, 8.0, 9.0, 10.0]));
        let o = g.attention(q, k, v, 2);
        assert_eq!(g.value(o).data(), &[7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn scalar_attention_toy() {
        // One head, width 1, tokens [0, 1], query token 1.
        let (out, probs) = attention_forward(
            &Tensor::new(vec![1, 1], vec![1.0]),
            &Tensor::new(vec![2, 1], vec![0.0, 1.0]),
            &Tensor::new(vec![2, 1], vec![0.0, 1.0]),
            1,
        );
        assert!((probs[0] - 0.268_941_421_369_995).abs() < 1e-12);
        assert!((probs[1] - 0.731_058_578_630_005).abs() < 1e-12);
        assert!((out.item() - 0.731_058_578_630_005).abs() < 1e-12);
    }

    #[test]
    fn identical_tokens_get_equal_weights() {
        let tok = vec![0.4, -0.2, 1.5, 0.9];
        let kv = Tensor::from_rows(&[tok.clone(), tok.clone()]);
        let q = Tensor::from_rows(&[vec![1.0, 2.0, -3.0, 0.5], vec![-0.7, 0.1, 0.2, 3.0]]);
        let (_, probs) = attention_forward(&q, &kv, &kv, 2);
        assert!(probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::filled(&[2, 3, 5], 1.25));
        let y = g.upsample2(x);
        assert_eq!(g.value(y).shape(), &[2, 6, 10]);
        assert!(g.value(y).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut store = ParamStore::new();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let w = store.add("w", k);
        let b = store.add("b", Tensor::zeros(&[1]));
        let mut g = Graph::new(&store);
        let data: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let x = g.constant(Tensor::new(vec![1, 4, 5], data.clone()));
        let y = g.conv2d(x, w, b, 1);
        assert_eq!(g.value(y).data(), &data[..]);
    }
}
