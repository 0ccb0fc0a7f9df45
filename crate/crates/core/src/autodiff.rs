//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in an append-only tape, so
//! the graph is acyclic by construction and [`Graph::backward`] can walk it
//! in reverse insertion order. Trainable parameters live in a
//! [`ParamStore`] borrowed by the graph; they enter the tape through
//! [`Graph::param`] and their gradients come back keyed by [`ParamId`].

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_offsets, broadcast_shape, gemm, is_suffix_repeat, reduce_to_shape, Tensor,
};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

/// Named trainable tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect()
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather { x: Var, offsets: Vec<usize> },
    MaskedMean { x: Var, mask: Vec<f64>, denom: f64 },
    Scale(Var, f64),
    Sum(Var),
}

struct Node {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    strict: bool,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    params: Vec<Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of every parameter in store order; zero where the parameter
    /// did not participate.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    /// Gradient accumulated at an arbitrary node, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// In strict mode every op fails with [`Error::NonFinite`] when its
    /// output contains NaN or infinity.
    pub fn strict(mut self, on: bool) -> Self {
        self.strict = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.strict && !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf that records its gradient (see [`Gradients::wrt`]).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        if ta.shape() == tb.shape() {
            data.extend(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
        } else if ta.shape() == out_shape.as_slice()
            && tb.numel() > 0
            && is_suffix_repeat(tb.shape(), &out_shape)
        {
            for chunk in ta.data().chunks(tb.numel()) {
                data.extend(chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
            }
        } else {
            let oa = broadcast_offsets(ta.shape(), &out_shape);
            let ob = broadcast_offsets(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            data.extend(oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok((Tensor::new(out_shape, data)?, needs))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), needs)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), needs)
    }

    /// Explicitly broadcasts `x` to `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        match broadcast_shape(tx.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast", tx.shape(), shape)),
        }
        let offs = broadcast_offsets(tx.shape(), shape);
        let d = tx.data();
        let t = Tensor::new(shape.to_vec(), offs.iter().map(|&o| d[o]).collect())?;
        let needs = self.needs(x);
        self.push("broadcast", t, Op::BroadcastTo(x), needs)
    }

    /// Matrix product over the last two axes.
    ///
    /// Accepts `[m,k] x [k,n]`, `[..,m,k] x [k,n]` (shared right operand) and
    /// `[..,m,k] x [..,k,n]` with identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let out = if sb.len() == 2 {
            let m = ta.numel() / k.max(1);
            let m = if k == 0 { sa[..sa.len() - 1].iter().product() } else { m };
            let mut out = Tensor::zeros(&out_shape);
            gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, out.data_mut());
            out
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape("matmul", sa, sb));
            }
            let m = sa[sa.len() - 2];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut out = Tensor::zeros(&out_shape);
            let (da, db) = (ta.data(), tb.data());
            let dout = out.data_mut();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    false,
                    0.0,
                    &mut dout[i * m * n..(i + 1) * m * n],
                );
            }
            out
        };
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::MatMul(a, b), needs)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let r = tx.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", tx.shape(), perm));
        }
        let t = permute_tensor(tx, perm);
        let needs = self.needs(x);
        self.push("permute", t, Op::Permute(x, perm.to_vec()), needs)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        self.push("reshape", t, Op::Reshape(x), needs)
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::shape("embedding", tt.shape(), &[ids.len()]));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("embedding id {id} out of range for table of {v}")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let needs = self.needs(table);
        self.push("embedding", t, Op::Embedding { table, ids: ids.to_vec() }, needs)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both
    /// shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / d.max(1);
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push("layer_norm", t, Op::LayerNorm { x, gain, bias, xhat, rstd }, needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push("gelu", t, Op::Gelu(x), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = softmax_rows(self.value(x));
        let needs = self.needs(x);
        self.push("softmax", t, Op::Softmax(x), needs)
    }

    /// Log-softmax over the last axis, computed with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = log_softmax_rows(self.value(x));
        let needs = self.needs(x);
        self.push("log_softmax", t, Op::LogSoftmax(x), needs)
    }

    /// Picks `x[rows[i], cols[i]]` from a tensor viewed as `[numel/last, last]`,
    /// giving a vector of length `rows.len()`.
    pub fn gather(&mut self, x: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if rows.len() != cols.len() {
            return Err(Error::shape("gather", &[rows.len()], &[cols.len()]));
        }
        let d = tx.last_dim();
        let nrows = tx.numel() / d.max(1);
        let mut offsets = Vec::with_capacity(rows.len());
        for (&r, &c) in rows.iter().zip(cols) {
            if r >= nrows || c >= d {
                return Err(Error::Input(format!(
                    "gather index ({r}, {c}) out of range for {:?}",
                    tx.shape()
                )));
            }
            offsets.push(r * d + c);
        }
        let t = Tensor::vector(offsets.iter().map(|&o| tx.data()[o]).collect());
        let needs = self.needs(x);
        self.push("gather", t, Op::Gather { x, offsets }, needs)
    }

    /// `sum(x * mask) / sum(mask)`; `mask` has one weight per element of `x`.
    pub fn masked_mean(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::shape("masked_mean", tx.shape(), &[mask.len()]));
        }
        let denom: f64 = mask.iter().sum();
        if denom == 0.0 {
            return Err(Error::Contract("masked_mean over an empty mask".into()));
        }
        let s: f64 = tx.data().iter().zip(mask).map(|(a, m)| a * m).sum();
        let needs = self.needs(x);
        self.push(
            "masked_mean",
            Tensor::scalar(s / denom),
            Op::MaskedMean { x, mask: mask.to_vec(), denom },
            needs,
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect())?;
        let needs = self.needs(x);
        self.push("scale", t, Op::Scale(x, s), needs)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut param_grads = self.params.zeros_like();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, &mut param_grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            params: param_grads,
            nodes: grads,
        })
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        param_grads: &mut [Tensor],
    ) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => param_grads[id.0].add_assign(g),
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, reduce_to_shape(g, self.shape(*a)));
                }
                if self.needs(*b) {
                    acc(*b, reduce_to_shape(g, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let out_shape = g.shape();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.needs(this) {
                        continue;
                    }
                    let to = self.value(other);
                    let prod: Vec<f64> = if to.shape() == out_shape {
                        g.data().iter().zip(to.data()).map(|(x, y)| x * y).collect()
                    } else {
                        let offs = broadcast_offsets(to.shape(), out_shape);
                        g.data().iter().zip(&offs).map(|(x, &o)| x * to.data()[o]).collect()
                    };
                    let full = Tensor::new(out_shape.to_vec(), prod).expect("shape");
                    acc(this, reduce_to_shape(&full, self.shape(this)));
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, &mut acc),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*x, permute_tensor(g, &inv));
            }
            Op::Reshape(x) => acc(*x, g.reshaped(self.shape(*x)).expect("shape")),
            Op::BroadcastTo(x) => acc(*x, reduce_to_shape(g, self.shape(*x))),
            Op::Embedding { table, ids } => {
                let tshape = self.shape(*table).to_vec();
                let d = tshape[1];
                let mut gt = Tensor::zeros(&tshape);
                let gd = gt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gd[id * d + j] += g.data()[r * d + j];
                    }
                }
                acc(*table, gt);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = self.value(*gain);
                let d = tg.numel();
                let rows = rstd.len();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; g.numel()];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * tg.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * tg.data()[j];
                        dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
                acc(*gain, Tensor::vector(dgain));
                acc(*bias, Tensor::vector(dbias));
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = tx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    })
                    .collect();
                acc(*x, Tensor::new(tx.shape().to_vec(), d).expect("shape"));
            }
            Op::Softmax(x) => {
                let y = node.value.as_ref().expect("value");
                let d = y.last_dim();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.numel() / d.max(1) {
                    let yr = y.row(r);
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).expect("shape"));
            }
            Op::LogSoftmax(x) => {
                let y = node.value.as_ref().expect("value");
                let d = y.last_dim();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.numel() / d.max(1) {
                    let yr = y.row(r);
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let s: f64 = gr.iter().sum();
                    for j in 0..d {
                        dx[r * d + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).expect("shape"));
            }
            Op::Gather { x, offsets } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let gd = gx.data_mut();
                for (gv, &o) in g.data().iter().zip(offsets) {
                    gd[o] += gv;
                }
                acc(*x, gx);
            }
            Op::MaskedMean { x, mask, denom } => {
                let gv = g.item();
                let d = mask.iter().map(|m| gv * m / denom).collect();
                acc(*x, Tensor::new(self.shape(*x).to_vec(), d).expect("shape"));
            }
            Op::Scale(x, s) => {
                let d = g.data().iter().map(|v| v * s).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor, acc: &mut impl FnMut(Var, Tensor)) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        if sb.len() == 2 {
            let m = sa[..sa.len() - 1].iter().product();
            if self.needs(a) {
                let mut da = Tensor::zeros(sa);
                gemm(m, n, k, g.data(), false, tb.data(), true, 0.0, da.data_mut());
                acc(a, da);
            }
            if self.needs(b) {
                let mut db = Tensor::zeros(sb);
                gemm(k, m, n, ta.data(), true, g.data(), false, 0.0, db.data_mut());
                acc(b, db);
            }
        } else {
            let m = sa[sa.len() - 2];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let gd = g.data();
            if self.needs(a) {
                let mut da = Tensor::zeros(sa);
                let out = da.data_mut();
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        true,
                        0.0,
                        &mut out[i * m * k..(i + 1) * m * k],
                    );
                }
                acc(a, da);
            }
            if self.needs(b) {
                let mut db = Tensor::zeros(sb);
                let out = db.data_mut();
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        0.0,
                        &mut out[i * k * n..(i + 1) * k * n],
                    );
                }
                acc(b, db);
            }
        }
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let r = s.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    // stride in the input for each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    if r == 0 || n == 0 {
        return Tensor::new(out_shape, t.data().to_vec()).expect("shape");
    }
    let src = t.data();
    let inner = out_shape[r - 1];
    let inner_stride = strides[r - 1];
    let mut idx = vec![0usize; r - 1];
    let mut base = 0usize;
    for _ in 0..n / inner.max(1) {
        for j in 0..inner {
            data.push(src[base + j * inner_stride]);
        }
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("shape")
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let d = t.last_dim();
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..t.numel() / d.max(1) {
        let row = t.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &v in row {
            let e = (v - mx).exp();
            s += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= s;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("shape")
}

pub(crate) fn log_softmax_rows(t: &Tensor) -> Tensor {
    let d = t.last_dim();
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..t.numel() / d.max(1) {
        let row = t.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(t.shape().to_vec(), out).expect("shape")
}
