//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and
//! whatever it needs for the backward pass. Node indices are therefore a
//! topological order, and [`Graph::backward`] walks them in reverse,
//! summing the gradient contributions of every consumer into each input.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::instrument;
use crate::params::ParamStore;
use crate::tensor::{gemm, gemm_strided, log_softmax_in_place, softmax_in_place, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module (losses, CIF).
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;
    /// Returns one gradient buffer per input (`None` = no contribution).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    SelfAttn,
    Cross,
}

/// Geometry of one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttnSpec {
    pub heads: usize,
    pub causal: bool,
    /// Absolute position of the first query row (incremental decoding).
    pub query_offset: usize,
    pub kind: AttnKind,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
        width: usize,
        stride: usize,
        pad_left: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        log_tau: Option<Var>,
        spec: AttnSpec,
        probs: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    PadRows(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    params: HashMap<usize, Var>,
    train: bool,
    track_grad: bool,
    rng: Option<ChaCha8Rng>,
}

impl fmt::Debug for Graph<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("train", &self.train)
            .finish()
    }
}

impl<'p> Graph<'p> {
    /// Graph without parameters or gradient tracking.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            params: HashMap::new(),
            train: false,
            track_grad: true,
            rng: None,
        }
    }

    /// Inference graph over `store`: dropout off, parameters are constants.
    pub fn eval(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            track_grad: false,
            ..Graph::new()
        }
    }

    /// Gradient-tracking graph over `store` without dropout (gradient checks).
    pub fn grad(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Graph::new()
        }
    }

    /// Training graph: gradients tracked, dropout active with masks drawn from `rng`.
    pub fn train(store: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Graph {
            store: Some(store),
            train: true,
            rng: Some(rng),
            ..Graph::new()
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = self.track_grad;
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf by name; the same name always maps to the same node.
    pub fn param(&mut self, name: &str) -> Var {
        let store = self.store.expect("graph has no parameter store");
        let idx = store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&v) = self.params.get(&idx) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.by_index(idx).1),
            op: Op::Leaf,
            needs_grad: self.track_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(idx, v);
        v
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.is_some_and(|s| s.index_of(name).is_some())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Linear layer over parameters `{prefix}.w` and `{prefix}.b`.
    pub fn dense(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.linear(x, w, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::Contract("transpose expects a matrix".into()));
        }
        let t = self.value(a).transpose2();
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    /// `a + b`, with `b` broadcast along the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let t = self.binary(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let t = self.binary(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let t = self.binary(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    // ---- normalization / activations over the last dim ------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        if t.last_dim() > 0 {
            for r in t.data_mut().chunks_mut(self.value(a).last_dim()) {
                softmax_in_place(r);
            }
        }
        self.push(t, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        if t.last_dim() > 0 {
            for r in t.data_mut().chunks_mut(self.value(a).last_dim()) {
                log_softmax_in_place(r);
            }
        }
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Layer norm over parameters `{prefix}.g` / `{prefix}.b`.
    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"));
        let b = self.param(&format!("{prefix}.b"));
        self.layer_norm(x, g, b)
    }

    /// 1-d convolution of `x: T×c_in` with `w: (width·c_in)×c_out` (rows ordered
    /// tap-major) and bias `b: c_out`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        width: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::Contract("conv1d expects a T×c matrix".into()));
        }
        let (t_in, c_in) = (xv.shape()[0], xv.shape()[1]);
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != width * c_in || self.shape(b) != [ws[1]] {
            return Err(Error::dim("conv1d", &[width, c_in], ws));
        }
        if stride == 0 || width == 0 {
            return Err(Error::Contract(
                "conv1d width and stride must be positive".into(),
            ));
        }
        let c_out = ws[1];
        let (t_out, pad_left) = match padding {
            Padding::Same => {
                if width % 2 == 0 {
                    return Err(Error::Contract(format!(
                        "same padding needs an odd width, got {width}"
                    )));
                }
                (t_in.div_ceil(stride), (width - 1) / 2)
            }
            Padding::Valid => {
                if width > t_in {
                    return Err(Error::Contract(format!(
                        "valid convolution of width {width} over {t_in} frames has empty output"
                    )));
                }
                ((t_in - width) / stride + 1, 0)
            }
        };
        let kdim = width * c_in;
        let mut cols = vec![0.0; t_out * kdim];
        for t in 0..t_out {
            for tap in 0..width {
                let src = (t * stride + tap) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t_in {
                    let dst = &mut cols[t * kdim + tap * c_in..t * kdim + (tap + 1) * c_in];
                    dst.copy_from_slice(xv.row(src as usize));
                }
            }
        }
        let mut out = vec![0.0; t_out * c_out];
        gemm(
            t_out,
            kdim,
            c_out,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        let bias = self.value(b).data();
        for r in out.chunks_mut(c_out) {
            for (o, bb) in r.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        Ok(self.push(
            Tensor::matrix(t_out, c_out, out),
            Op::Conv1d {
                x,
                w,
                b,
                cols,
                width,
                stride,
                pad_left,
            },
            &[x, w, b],
        ))
    }

    /// Multi-head scaled dot-product attention over pre-projected `q: s×d`,
    /// `k, v: u×d`. With `log_tau` (one entry per head) a proximity penalty
    /// `−|i−j|·exp(−log_tau[h])` is added to the logits of head `h`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        log_tau: Option<Var>,
        spec: AttnSpec,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv != sk || sq[1] != sk[1] {
            return Err(Error::dim("attention", sq, sk));
        }
        let (s, u, d) = (sq[0], sk[0], sq[1]);
        let h = spec.heads;
        if h == 0 || d % h != 0 {
            return Err(Error::Contract(format!(
                "width {d} not divisible into {h} heads"
            )));
        }
        if spec.causal && spec.query_offset == 0 && s != u {
            return Err(Error::Contract(format!(
                "causal attention over {s} queries and {u} keys"
            )));
        }
        if let Some(t) = log_tau {
            if self.shape(t) != [h] {
                return Err(Error::dim("attention proximity", self.shape(t), &[h]));
            }
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let taus: Vec<f64> = log_tau
            .map(|t| self.value(t).data().iter().map(|l| (-l).exp()).collect())
            .unwrap_or_default();
        let mut probs = vec![0.0; h * s * u];
        let mut out = vec![0.0; s * d];
        for head in 0..h {
            let p = &mut probs[head * s * u..(head + 1) * s * u];
            // p = q_h · k_hᵀ
            gemm_strided(
                s,
                dh,
                u,
                &qd[head * dh..],
                d,
                1,
                &kd[head * dh..],
                1,
                d,
                p,
                u,
                false,
            );
            for i in 0..s {
                let row = &mut p[i * u..(i + 1) * u];
                let pos = (i + spec.query_offset) as f64;
                for (j, x) in row.iter_mut().enumerate() {
                    *x *= scale;
                    if let Some(&inv) = taus.get(head) {
                        *x -= (pos - j as f64).abs() * inv;
                    }
                    if spec.causal && j > i + spec.query_offset {
                        *x = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(row);
                if spec.causal {
                    for x in row.iter_mut().skip(i + spec.query_offset + 1) {
                        *x = 0.0;
                    }
                }
            }
            gemm_strided(
                s,
                u,
                dh,
                p,
                u,
                1,
                &vd[head * dh..],
                d,
                1,
                &mut out[head * dh..],
                d,
                false,
            );
        }
        let pairs = (s * u) as u64;
        instrument::bump(|c| match spec.kind {
            AttnKind::SelfAttn => c.self_attention += pairs,
            AttnKind::Cross => c.cross_attention += pairs,
        });
        let mut inputs = vec![q, k, v];
        inputs.extend(log_tau);
        Ok(self.push(
            Tensor::matrix(s, d, out),
            Op::Attention {
                q,
                k,
                v,
                log_tau,
                spec,
                probs,
            },
            &inputs,
        ))
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let rng = self.rng.as_mut().expect("training graph has an rng");
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("shape");
        self.push(t, Op::Dropout(x, mask), &[x])
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&ts)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != rows || self.value(p).rank() != 2 {
                return Err(Error::dim(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            widths.push(self.value(p).last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, total, data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(Error::dim("slice_rows", xv.shape(), &[start, len]));
        }
        let t = xv.slice_rows(start, len);
        Ok(self.push(t, Op::SliceRows(x, start), &[x]))
    }

    /// Rows of `table` selected by `idx` (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = (tv.rows(), tv.last_dim());
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::LabelOutOfVocab { label: i, vocab: n });
            }
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::matrix(idx.len(), d, data);
        Ok(self.push(t, Op::Gather(table, idx.to_vec()), &[table]))
    }

    /// Appends `extra` zero rows.
    pub fn pad_rows(&mut self, x: Var, extra: usize) -> Var {
        if extra == 0 {
            return x;
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        data.resize(data.len() + extra * d, 0.0);
        let t = Tensor::matrix(xv.rows() + extra, d, data);
        self.push(t, Op::PadRows(x), &[x])
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), op), inputs)
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if tracked(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b).data(), true, da, true);
                }
                if tracked(*b) {
                    let db = slot(grads, *b, k * n);
                    gemm(k, m, n, val(*a).data(), true, g, false, db, true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if tracked(*a) {
                    add_into(slot(grads, *a, g.len()), g, 1.0);
                }
                if tracked(*b) {
                    let nb = val(*b).len();
                    let db = slot(grads, *b, nb);
                    for (i, x) in g.iter().enumerate() {
                        db[i % nb] += sign * x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let nb = bv.len();
                if tracked(*a) {
                    let da = slot(grads, *a, g.len());
                    for (i, x) in g.iter().enumerate() {
                        da[i] += x * bv[i % nb];
                    }
                }
                if tracked(*b) {
                    let db = slot(grads, *b, nb);
                    for (i, x) in g.iter().enumerate() {
                        db[i % nb] += x * av[i];
                    }
                }
            }
            Op::Scale(a, c) => add_into(slot(grads, *a, g.len()), g, *c),
            Op::AddScalar(a) | Op::Reshape(a) => add_into(slot(grads, *a, g.len()), g, 1.0),
            Op::Relu(a) => {
                let av = val(*a).data();
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Abs(a) => {
                let av = val(*a).data();
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * sign0(av[i]);
                }
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                let da = slot(grads, *a, n);
                da.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let da = slot(grads, *a, n);
                da.iter_mut().for_each(|x| *x += g[0] / n as f64);
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let da = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let da = slot(grads, *a, g.len());
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(da.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let da = slot(grads, *a, g.len());
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(da.chunks_mut(d)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..d {
                        dr[j] += gr[j] - yr[j].exp() * gs;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*gain).len();
                let gv = val(*gain).data();
                if tracked(*gain) {
                    let dg = slot(grads, *gain, d);
                    for (r, gr) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            dg[j] += gr[j] * xhat[r * d + j];
                        }
                    }
                }
                if tracked(*bias) {
                    let db = slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        add_into(db, gr, 1.0);
                    }
                }
                if tracked(*x) {
                    let dx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, gr) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                cols,
                width,
                stride,
                pad_left,
            } => {
                let c_out = node.value.last_dim();
                let t_out = node.value.rows();
                let (t_in, c_in) = (val(*x).shape()[0], val(*x).shape()[1]);
                let kdim = width * c_in;
                if tracked(*w) {
                    let dw = slot(grads, *w, kdim * c_out);
                    gemm(kdim, t_out, c_out, cols, true, g, false, dw, true);
                }
                if tracked(*b) {
                    let db = slot(grads, *b, c_out);
                    for gr in g.chunks(c_out) {
                        add_into(db, gr, 1.0);
                    }
                }
                if tracked(*x) {
                    let mut dcols = vec![0.0; t_out * kdim];
                    gemm(
                        t_out,
                        c_out,
                        kdim,
                        g,
                        false,
                        val(*w).data(),
                        true,
                        &mut dcols,
                        false,
                    );
                    let dx = slot(grads, *x, t_in * c_in);
                    for t in 0..t_out {
                        for tap in 0..*width {
                            let src = (t * stride + tap) as isize - *pad_left as isize;
                            if src >= 0 && (src as usize) < t_in {
                                let s = src as usize;
                                add_into(
                                    &mut dx[s * c_in..(s + 1) * c_in],
                                    &dcols[t * kdim + tap * c_in..t * kdim + (tap + 1) * c_in],
                                    1.0,
                                );
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                log_tau,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, *log_tau, spec, probs, g, grads),
            Op::Dropout(a, mask) => {
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * mask[i];
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if tracked(p) {
                        add_into(slot(grads, p, n), &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut col = 0;
                for &p in parts {
                    let w = val(p).last_dim();
                    let rows = val(p).rows();
                    if tracked(p) {
                        let dp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + col..r * total + col + w],
                                1.0,
                            );
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let d = val(*a).last_dim();
                let n = val(*a).len();
                let da = slot(grads, *a, n);
                add_into(&mut da[start * d..start * d + g.len()], g, 1.0);
            }
            Op::Gather(table, idx) => {
                let d = val(*table).last_dim();
                let n = val(*table).len();
                let dt = slot(grads, *table, n);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                }
            }
            Op::PadRows(a) => {
                let n = val(*a).len();
                add_into(slot(grads, *a, n), &g[..n], 1.0);
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| &**val(i)).collect();
                let contrib = op.backward(&ins, &node.value, g);
                for (&i, c) in inputs.iter().zip(contrib) {
                    if let (Some(c), true) = (c, tracked(i)) {
                        add_into(slot(grads, i, c.len()), &c, 1.0);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        log_tau: Option<Var>,
        spec: &AttnSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let (s, d) = (self.value(q).rows(), self.value(q).last_dim());
        let u = self.value(k).rows();
        let h = spec.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; s * d];
        let mut dk = vec![0.0; u * d];
        let mut dv = vec![0.0; u * d];
        let mut dtau = vec![0.0; h];
        let mut dp = vec![0.0; s * u];
        for head in 0..h {
            let p = &probs[head * s * u..(head + 1) * s * u];
            // dV_h = Pᵀ · dO_h
            gemm_strided(
                u,
                s,
                dh,
                p,
                1,
                u,
                &g[head * dh..],
                d,
                1,
                &mut dv[head * dh..],
                d,
                true,
            );
            // dP = dO_h · V_hᵀ
            gemm_strided(
                s,
                dh,
                u,
                &g[head * dh..],
                d,
                1,
                &vd[head * dh..],
                1,
                d,
                &mut dp,
                u,
                false,
            );
            for i in 0..s {
                let pr = &p[i * u..(i + 1) * u];
                let dr = &mut dp[i * u..(i + 1) * u];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..u {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            if let Some(t) = log_tau {
                let inv = (-self.value(t).data()[head]).exp();
                let mut acc = 0.0;
                for i in 0..s {
                    let pos = (i + spec.query_offset) as f64;
                    for j in 0..u {
                        acc += dp[i * u + j] * (pos - j as f64).abs();
                    }
                }
                dtau[head] = acc * inv;
            }
            // dQ_h = scale · dL · K_h ; dK_h = scale · dLᵀ · Q_h
            for x in dp.iter_mut() {
                *x *= scale;
            }
            gemm_strided(
                s,
                u,
                dh,
                &dp,
                u,
                1,
                &kd[head * dh..],
                d,
                1,
                &mut dq[head * dh..],
                d,
                true,
            );
            gemm_strided(
                u,
                s,
                dh,
                &dp,
                1,
                u,
                &qd[head * dh..],
                d,
                1,
                &mut dk[head * dh..],
                d,
                true,
            );
        }
        let tracked = |v: Var| self.nodes[v.0].needs_grad;
        if tracked(q) {
            add_into(slot(grads, q, s * d), &dq, 1.0);
        }
        if tracked(k) {
            add_into(slot(grads, k, u * d), &dk, 1.0);
        }
        if tracked(v) {
            add_into(slot(grads, v, u * d), &dv, 1.0);
        }
        if let Some(t) = log_tau.filter(|&t| tracked(t)) {
            add_into(slot(grads, t, h), &dtau, 1.0);
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient buffers aligned with the store's parameter order.
    pub fn params(&self, graph: &Graph<'_>) -> ParamGrads {
        let n = graph.store.map_or(0, ParamStore::len);
        let mut out = vec![None; n];
        for (&idx, &v) in &graph.params {
            out[idx] = self.get(v).map(<[f64]>::to_vec);
        }
        ParamGrads(out)
    }
}

/// Per-parameter gradients indexed like the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads(
            store
                .iter()
                .map(|(_, t)| Some(vec![0.0; t.len()]))
                .collect(),
        )
    }

    /// `self += c · other`.
    pub fn accumulate(&mut self, other: &ParamGrads, c: f64) {
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            if let Some(src) = src {
                match dst {
                    Some(d) => add_into(d, src, c),
                    None => *dst = Some(src.iter().map(|x| x * c).collect()),
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.0
            .iter()
            .position(|g| g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())))
    }
}
