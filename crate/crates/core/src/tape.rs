//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles during
//! the forward pass (define-by-run); [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients into each node's tensor. Recursion
//! lengths vary per utterance, so nothing about the graph is static.
//!
//! Supported shapes are 1-d and 2-d (3-d for convolution kernels).
//! Broadcasting is restricted to a trailing axis of size 1; anything richer
//! is composed from `broadcast_rows`, `reshape` and matmul.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Tanh,
    Sigmoid,
    Exp,
    Softplus,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnKind,
        x: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: Var,
    },
    BroadcastRows {
        x: Var,
        n: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1dSame {
        signal: Var,
        kernel: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    /// Optional label used by numeric-abort diagnostics.
    label: Option<String>,
}

/// Recorded computation: an ordered list of nodes in topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Dimensions of a matmul between 1-d/2-d operands: (m, k, n, out_shape).
fn matmul_dims(lhs: &[usize], rhs: &[usize]) -> Result<(usize, usize, usize, Vec<usize>)> {
    let err = || Error::Dimension {
        op: "matmul",
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    };
    match (lhs.len(), rhs.len()) {
        (2, 2) => {
            let (m, k) = (lhs[0], lhs[1]);
            let (k2, n) = (rhs[0], rhs[1]);
            if k != k2 {
                return Err(err());
            }
            Ok((m, k, n, vec![m, n]))
        }
        (1, 2) => {
            let k = lhs[0];
            let (k2, n) = (rhs[0], rhs[1]);
            if k != k2 {
                return Err(err());
            }
            Ok((1, k, n, vec![n]))
        }
        (2, 1) => {
            let (m, k) = (lhs[0], lhs[1]);
            if k != rhs[0] {
                return Err(err());
            }
            Ok((m, k, 1, vec![m]))
        }
        _ => Err(err()),
    }
}

/// c += a(m×k) · b(k×n), flat row-major.
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// da += dc(m×n) · bᵀ(n×k)  (i.e. da[i,p] += dot(dc[i,:], b[p,:])).
fn mm_acc_abt(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (dv, bv) in dcrow.iter().zip(brow) {
                acc += dv * bv;
            }
            darow[p] += acc;
        }
    }
}

/// db += aᵀ(k×m) · dc(m×n)  (i.e. db[p,:] += a[i,p] * dc[i,:]).
fn mm_acc_atb(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let dbrow = &mut db[p * n..(p + 1) * n];
                for (dbv, &dv) in dbrow.iter_mut().zip(dcrow) {
                    *dbv += av * dv;
                }
            }
        }
    }
}

/// How a binary op's operands line up: equal shapes, or one side broadcast
/// along a trailing axis of size 1.
#[derive(Clone, Copy)]
enum BinLayout {
    /// rows lanes of `cols` elements; `a_bcast`/`b_bcast` mark the operand
    /// whose trailing axis is 1.
    Lanes {
        rows: usize,
        cols: usize,
        a_bcast: bool,
        b_bcast: bool,
    },
}

fn binary_layout(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<(BinLayout, Vec<usize>)> {
    let err = || Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    };
    if lhs == rhs {
        let cols = *lhs.last().ok_or_else(err)?;
        let rows: usize = lhs[..lhs.len() - 1].iter().product();
        return Ok((
            BinLayout::Lanes {
                rows,
                cols,
                a_bcast: false,
                b_bcast: false,
            },
            lhs.to_vec(),
        ));
    }
    if lhs.len() != rhs.len() || lhs.is_empty() || lhs[..lhs.len() - 1] != rhs[..rhs.len() - 1] {
        return Err(err());
    }
    let (la, lb) = (*lhs.last().unwrap(), *rhs.last().unwrap());
    let rows: usize = lhs[..lhs.len() - 1].iter().product();
    if la == 1 {
        let mut out = rhs.to_vec();
        out[lhs.len() - 1] = lb;
        Ok((
            BinLayout::Lanes {
                rows,
                cols: lb,
                a_bcast: true,
                b_bcast: false,
            },
            out,
        ))
    } else if lb == 1 {
        let mut out = lhs.to_vec();
        out[lhs.len() - 1] = la;
        Ok((
            BinLayout::Lanes {
                rows,
                cols: la,
                a_bcast: false,
                b_bcast: true,
            },
            out,
        ))
    } else {
        Err(err())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input that does not need gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Record a tracked leaf (parameter): gradients accumulate here.
    pub fn param(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Attach a diagnostic label (used when hunting non-finite tensors).
    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn vector_leaf(&mut self, values: &[f64]) -> Var {
        self.leaf(Tensor::vector(values))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    /// Gradient of a node after `backward`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn out_tensor(&self, shape: Vec<usize>, data: Vec<f64>, tracked: bool) -> Tensor {
        Tensor {
            shape,
            data,
            requires_grad: tracked,
            grad: None,
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, out_shape) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        mm_acc(self.data(a), self.data(b), m, k, n, &mut out);
        let tracked = self.requires(a) || self.requires(b);
        let t = self.out_tensor(out_shape, out, tracked);
        Ok(self.push(t, Op::MatMul { a, b }))
    }

    fn binary(&mut self, kind: BinKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (layout, out_shape) = binary_layout(name, self.shape(a), self.shape(b))?;
        let BinLayout::Lanes {
            rows,
            cols,
            a_bcast,
            b_bcast,
        } = layout;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let av = if a_bcast { da[r] } else { da[r * cols + c] };
                let bv = if b_bcast { db[r] } else { db[r * cols + c] };
                out[r * cols + c] = match kind {
                    BinKind::Add => av + bv,
                    BinKind::Sub => av - bv,
                    BinKind::Mul => av * bv,
                    BinKind::Div => av / bv,
                };
            }
        }
        let tracked = self.requires(a) || self.requires(b);
        let t = self.out_tensor(out_shape, out, tracked);
        Ok(self.push(t, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    /// Elementwise division. The divisor must be nonzero everywhere.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, "div", a, b)
    }

    fn unary(&mut self, kind: UnKind, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| match kind {
                UnKind::Tanh => v.tanh(),
                UnKind::Sigmoid => sigmoid(v),
                UnKind::Exp => v.exp(),
                UnKind::Softplus => stable_softplus(v),
                UnKind::Relu => v.max(0.0),
            })
            .collect();
        let tracked = self.requires(x);
        let t = self.out_tensor(self.shape(x).to_vec(), data, tracked);
        self.push(t, Op::Unary { kind, x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnKind::Exp, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnKind::Softplus, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnKind::Relu, x)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let tracked = self.requires(x);
        let t = self.out_tensor(self.shape(x).to_vec(), data, tracked);
        self.push(t, Op::Scale { x, c })
    }

    /// Softmax along `axis`, with max subtraction for overflow safety.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for t in 0..len {
                    max = max.max(src[idx(t)]);
                }
                let mut z = 0.0;
                for t in 0..len {
                    let e = (src[idx(t)] - max).exp();
                    out[idx(t)] = e;
                    z += e;
                }
                for t in 0..len {
                    out[idx(t)] /= z;
                }
            }
        }
        let tracked = self.requires(x);
        let t = self.out_tensor(shape, out, tracked);
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Dimension {
            op: "concat",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(err());
        }
        for (i, (&x, &y)) in sa.iter().zip(&sb).enumerate() {
            if i != axis && x != y {
                return Err(err());
            }
        }
        let (outer, la, inner) = axis_split(&sa, axis);
        let lb = sb[axis];
        let mut out_shape = sa.clone();
        out_shape[axis] = la + lb;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&db[o * lb * inner..(o + 1) * lb * inner]);
        }
        let tracked = self.requires(a) || self.requires(b);
        let t = self.out_tensor(out_shape, out, tracked);
        Ok(self.push(t, Op::Concat { a, b, axis }))
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, l, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * l + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let tracked = self.requires(x);
        let t = self.out_tensor(out_shape, out, tracked);
        Ok(self.push(t, Op::Narrow {
            x,
            axis,
            start,
            len,
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let tracked = self.requires(x);
        let t = self.out_tensor(shape.to_vec(), self.data(x).to_vec(), tracked);
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Tile a 1-d tensor `[d]` into `[n, d]`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 {
            return Err(Error::Dimension {
                op: "broadcast_rows",
                lhs: shape,
                rhs: vec![n],
            });
        }
        let d = shape[0];
        let src = self.data(x);
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let tracked = self.requires(x);
        let t = self.out_tensor(vec![n, d], out, tracked);
        Ok(self.push(t, Op::BroadcastRows { x, n }))
    }

    /// Row gather: `table[V×d]` indexed by `ids` into `[len(ids)×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: shape,
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (shape[0], shape[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { id, len: v });
            }
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let tracked = self.requires(table);
        let t = self.out_tensor(vec![ids.len(), d], out, tracked);
        Ok(self.push(t, Op::Embedding {
            table,
            ids: ids.to_vec(),
        }))
    }

    /// 1-d cross-correlation with zero padding and "same" output length.
    /// `signal` is `[n×c_in]`, `kernel` is `[k×c_in×c_out]`, `k` odd.
    pub fn conv1d_same(&mut self, signal: Var, kernel: Var) -> Result<Var> {
        let ss = self.shape(signal).to_vec();
        let ks = self.shape(kernel).to_vec();
        if ss.len() != 2 || ks.len() != 3 || ss[1] != ks[1] {
            return Err(Error::Dimension {
                op: "conv1d_same",
                lhs: ss,
                rhs: ks,
            });
        }
        let (n, c_in) = (ss[0], ss[1]);
        let (k, c_out) = (ks[0], ks[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel width must be odd, got {k}"
            )));
        }
        let half = k / 2;
        let (sig, ker) = (self.data(signal), self.data(kernel));
        let mut out = vec![0.0; n * c_out];
        for t in 0..n {
            for dk in 0..k {
                let s = t as isize + dk as isize - half as isize;
                if s < 0 || s >= n as isize {
                    continue;
                }
                let s = s as usize;
                for ci in 0..c_in {
                    let sv = sig[s * c_in + ci];
                    if sv == 0.0 {
                        continue;
                    }
                    let krow = &ker[(dk * c_in + ci) * c_out..(dk * c_in + ci + 1) * c_out];
                    let orow = &mut out[t * c_out..(t + 1) * c_out];
                    for (ov, &kv) in orow.iter_mut().zip(krow) {
                        *ov += sv * kv;
                    }
                }
            }
        }
        let tracked = self.requires(signal) || self.requires(kernel);
        let t = self.out_tensor(vec![n, c_out], out, tracked);
        Ok(self.push(t, Op::Conv1dSame { signal, kernel }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let tracked = self.requires(x);
        let t = self.out_tensor(vec![1], vec![s], tracked);
        self.push(t, Op::Sum { x })
    }

    // ── composite helpers ────────────────────────────────────────────

    /// `x·w (+ b)`. `x` may be `[in]` or `[rows×in]`; `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            None => Ok(y),
            Some(b) => {
                if self.shape(y).len() == 2 {
                    let n = self.shape(y)[0];
                    let bb = self.broadcast_rows(b, n)?;
                    self.add(y, bb)
                } else {
                    self.add(y, b)
                }
            }
        }
    }

    /// Standard LSTM cell. `w` is `[(d_in+d_h)×4·d_h]`, `b` is `[4·d_h]`,
    /// gate layout `[input | forget | cell | output]` along the last axis.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h_prev: Var,
        c_prev: Var,
        w: Var,
        b: Var,
    ) -> Result<(Var, Var)> {
        let d_h = self.shape(h_prev)[0];
        let z = self.concat(x, h_prev, 0)?;
        let gates = self.linear(z, w, Some(b))?;
        if self.shape(gates)[0] != 4 * d_h {
            return Err(Error::Dimension {
                op: "lstm_cell",
                lhs: self.shape(gates).to_vec(),
                rhs: vec![4 * d_h],
            });
        }
        let i_pre = self.narrow(gates, 0, 0, d_h)?;
        let f_pre = self.narrow(gates, 0, d_h, d_h)?;
        let g_pre = self.narrow(gates, 0, 2 * d_h, d_h)?;
        let o_pre = self.narrow(gates, 0, 3 * d_h, d_h)?;
        let i = self.sigmoid(i_pre);
        let f = self.sigmoid(f_pre);
        let g = self.tanh(g_pre);
        let o = self.sigmoid(o_pre);
        let fc = self.mul(f, c_prev)?;
        let ig = self.mul(i, g)?;
        let c = self.add(fc, ig)?;
        let ct = self.tanh(c);
        let h = self.mul(o, ct)?;
        Ok((h, c))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1-p)`. The mask is drawn from `rng` and recorded as a leaf.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut crate::rng::SplitMix64) -> Result<Var> {
        let keep = 1.0 - p;
        let mask: Vec<f64> = self
            .data(x)
            .iter()
            .map(|_| if rng.next_f64() >= p { 1.0 / keep } else { 0.0 })
            .collect();
        let shape = self.shape(x).to_vec();
        let m = self.leaf(Tensor {
            shape,
            data: mask,
            requires_grad: false,
            grad: None,
        });
        self.mul(x, m)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Gradients of every tracked node are
    /// written into its tensor's `grad`, accumulating across fan-out.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].tensor.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].tensor.requires_grad {
                continue;
            }
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_operands(idx, &dy, &mut grads);
            self.nodes[idx].tensor.grad = Some(dy);
        }
        // nodes past the root, and tracked nodes the root does not depend
        // on, get explicit zero gradients
        for idx in 0..n {
            let node = &mut self.nodes[idx];
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![0.0; node.tensor.numel()]);
            }
        }
        Ok(())
    }

    fn add_into(grads: &mut Vec<Option<Vec<f64>>>, target: Var, numel: usize) -> &mut Vec<f64> {
        grads[target.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn accumulate_operands(&self, idx: usize, dy: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let op = &self.nodes[idx].op;
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k, n, _) = matmul_dims(self.shape(*a), self.shape(*b)).unwrap();
                if self.requires(*a) {
                    let bdat = self.data(*b);
                    let da = Self::add_into(grads, *a, m * k);
                    mm_acc_abt(dy, bdat, m, k, n, da);
                }
                if self.requires(*b) {
                    let adat = self.data(*a);
                    let db = Self::add_into(grads, *b, k * n);
                    mm_acc_atb(adat, dy, m, k, n, db);
                }
            }
            Op::Binary { kind, a, b } => {
                let (layout, _) =
                    binary_layout("backward", self.shape(*a), self.shape(*b)).unwrap();
                let BinLayout::Lanes {
                    rows,
                    cols,
                    a_bcast,
                    b_bcast,
                } = layout;
                let (adat, bdat) = (self.data(*a), self.data(*b));
                if self.requires(*a) {
                    let da = Self::add_into(grads, *a, adat.len());
                    for r in 0..rows {
                        for c in 0..cols {
                            let g = dy[r * cols + c];
                            let contrib = match kind {
                                BinKind::Add | BinKind::Sub => g,
                                BinKind::Mul => {
                                    let bv = if b_bcast { bdat[r] } else { bdat[r * cols + c] };
                                    g * bv
                                }
                                BinKind::Div => {
                                    let bv = if b_bcast { bdat[r] } else { bdat[r * cols + c] };
                                    g / bv
                                }
                            };
                            let ai = if a_bcast { r } else { r * cols + c };
                            da[ai] += contrib;
                        }
                    }
                }
                if self.requires(*b) {
                    let db = Self::add_into(grads, *b, bdat.len());
                    for r in 0..rows {
                        for c in 0..cols {
                            let g = dy[r * cols + c];
                            let av = if a_bcast { adat[r] } else { adat[r * cols + c] };
                            let bv = if b_bcast { bdat[r] } else { bdat[r * cols + c] };
                            let contrib = match kind {
                                BinKind::Add => g,
                                BinKind::Sub => -g,
                                BinKind::Mul => g * av,
                                BinKind::Div => -g * av / (bv * bv),
                            };
                            let bi = if b_bcast { r } else { r * cols + c };
                            db[bi] += contrib;
                        }
                    }
                }
            }
            Op::Unary { kind, x } => {
                if self.requires(*x) {
                    let xdat = self.data(*x);
                    let ydat = &self.nodes[idx].tensor.data;
                    let dx = Self::add_into(grads, *x, xdat.len());
                    for i in 0..xdat.len() {
                        let d = match kind {
                            UnKind::Tanh => 1.0 - ydat[i] * ydat[i],
                            UnKind::Sigmoid => ydat[i] * (1.0 - ydat[i]),
                            UnKind::Exp => ydat[i],
                            UnKind::Softplus => sigmoid(xdat[i]),
                            UnKind::Relu => {
                                if xdat[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        dx[i] += dy[i] * d;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.requires(*x) {
                    let dx = Self::add_into(grads, *x, dy.len());
                    for (dxi, &g) in dx.iter_mut().zip(dy) {
                        *dxi += g * c;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.requires(*x) {
                    let y = &self.nodes[idx].tensor;
                    let (outer, len, inner) = axis_split(&y.shape, *axis);
                    let dx = Self::add_into(grads, *x, y.numel());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |t: usize| (o * len + t) * inner + i;
                            let mut dot = 0.0;
                            for t in 0..len {
                                dot += dy[at(t)] * y.data[at(t)];
                            }
                            for t in 0..len {
                                dx[at(t)] += y.data[at(t)] * (dy[at(t)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let sa = self.shape(*a);
                let (outer, la, inner) = axis_split(sa, *axis);
                let lb = self.shape(*b)[*axis];
                let stride = (la + lb) * inner;
                if self.requires(*a) {
                    let da = Self::add_into(grads, *a, outer * la * inner);
                    for o in 0..outer {
                        for j in 0..la * inner {
                            da[o * la * inner + j] += dy[o * stride + j];
                        }
                    }
                }
                if self.requires(*b) {
                    let db = Self::add_into(grads, *b, outer * lb * inner);
                    for o in 0..outer {
                        for j in 0..lb * inner {
                            db[o * lb * inner + j] += dy[o * stride + la * inner + j];
                        }
                    }
                }
            }
            Op::Narrow {
                x,
                axis,
                start,
                len,
            } => {
                if self.requires(*x) {
                    let shape = self.shape(*x);
                    let (outer, l, inner) = axis_split(shape, *axis);
                    let dx = Self::add_into(grads, *x, outer * l * inner);
                    for o in 0..outer {
                        for j in 0..len * inner {
                            dx[(o * l + start) * inner + j] += dy[o * len * inner + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if self.requires(*x) {
                    let dx = Self::add_into(grads, *x, dy.len());
                    for (dxi, &g) in dx.iter_mut().zip(dy) {
                        *dxi += g;
                    }
                }
            }
            Op::BroadcastRows { x, n } => {
                if self.requires(*x) {
                    let d = self.shape(*x)[0];
                    let dx = Self::add_into(grads, *x, d);
                    for r in 0..*n {
                        for j in 0..d {
                            dx[j] += dy[r * d + j];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires(*table) {
                    let d = self.shape(*table)[1];
                    let numel = self.nodes[table.0].tensor.numel();
                    let dt = Self::add_into(grads, *table, numel);
                    for (pos, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += dy[pos * d + j];
                        }
                    }
                }
            }
            Op::Conv1dSame { signal, kernel } => {
                let ss = self.shape(*signal);
                let ks = self.shape(*kernel);
                let (n, c_in) = (ss[0], ss[1]);
                let (k, c_out) = (ks[0], ks[2]);
                let half = k / 2;
                if self.requires(*signal) {
                    let ker = self.data(*kernel);
                    let ds = Self::add_into(grads, *signal, n * c_in);
                    for t in 0..n {
                        for dk in 0..k {
                            let s = t as isize + dk as isize - half as isize;
                            if s < 0 || s >= n as isize {
                                continue;
                            }
                            let s = s as usize;
                            for ci in 0..c_in {
                                let mut acc = 0.0;
                                for o in 0..c_out {
                                    acc += ker[(dk * c_in + ci) * c_out + o] * dy[t * c_out + o];
                                }
                                ds[s * c_in + ci] += acc;
                            }
                        }
                    }
                }
                if self.requires(*kernel) {
                    let sig = self.data(*signal);
                    let dker = Self::add_into(grads, *kernel, k * c_in * c_out);
                    for t in 0..n {
                        for dk in 0..k {
                            let s = t as isize + dk as isize - half as isize;
                            if s < 0 || s >= n as isize {
                                continue;
                            }
                            let s = s as usize;
                            for ci in 0..c_in {
                                let sv = sig[s * c_in + ci];
                                if sv == 0.0 {
                                    continue;
                                }
                                for o in 0..c_out {
                                    dker[(dk * c_in + ci) * c_out + o] += sv * dy[t * c_out + o];
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.requires(*x) {
                    let numel = self.nodes[x.0].tensor.numel();
                    let dx = Self::add_into(grads, *x, numel);
                    for dxi in dx.iter_mut() {
                        *dxi += dy[0];
                    }
                }
            }
        }
    }

    /// First node (lowest index) whose value contains a non-finite element,
    /// with its label or op description. Used by the numeric-abort path.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.tensor.is_finite() {
                let desc = node
                    .label
                    .clone()
                    .unwrap_or_else(|| format!("node {i} ({})", op_name(&node.op)));
                return Some(desc);
            }
        }
        None
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Binary { kind, .. } => match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        },
        Op::Unary { kind, .. } => match kind {
            UnKind::Tanh => "tanh",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Exp => "exp",
            UnKind::Softplus => "softplus",
            UnKind::Relu => "relu",
        },
        Op::Scale { .. } => "scale",
        Op::Softmax { .. } => "softmax",
        Op::Concat { .. } => "concat",
        Op::Narrow { .. } => "narrow",
        Op::Reshape { .. } => "reshape",
        Op::BroadcastRows { .. } => "broadcast_rows",
        Op::Embedding { .. } => "embedding",
        Op::Conv1dSame { .. } => "conv1d",
        Op::Sum { .. } => "sum",
    }
}
