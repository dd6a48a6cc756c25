//! Reverse-mode differentiation over a flat record of tensor ops.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! record once in reverse and only materializes gradients for nodes that
//! transitively depend on a `requires_grad` leaf.

use std::sync::Arc;

use super::kernels::{axpy, dot, matmul, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row lane assignment (0 or 1) used by the routed ops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lanes(Arc<Vec<u8>>);

impl Lanes {
    pub fn new(lanes: Vec<u8>) -> Result<Self> {
        if lanes.iter().any(|&l| l > 1) {
            return Err(Error::Routing("lane ids must be 0 or 1".into()));
        }
        Ok(Self(Arc::new(lanes)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, row: usize) -> usize {
        self.0[row] as usize
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    Sum(Var),
    Reshape(Var),
    Gather {
        sources: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    RoutedMatMul {
        x: Var,
        w: [Var; 2],
        lanes: Lanes,
    },
    RoutedAddRow {
        x: Var,
        b: [Var; 2],
        lanes: Lanes,
    },
    RoutedLayerNorm {
        x: Var,
        gain: [Var; 2],
        bias: [Var; 2],
        lanes: Lanes,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<Vec<bool>>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather_rows",
            Op::RoutedMatMul { .. } => "routed_matmul",
            Op::RoutedAddRow { .. } => "routed_add_row",
            Op::RoutedLayerNorm { .. } => "routed_layer_norm",
            Op::Attention { .. } => "attention",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Gelu(a) | Op::SoftmaxRows(a) | Op::Sum(a) | Op::Reshape(a) => {
                vec![*a]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Gather { sources, .. } => sources.clone(),
            Op::RoutedMatMul { x, w, .. } => vec![*x, w[0], w[1]],
            Op::RoutedAddRow { x, b, .. } => vec![*x, b[0], b[1]],
            Op::RoutedLayerNorm { x, gain, bias, .. } => {
                vec![*x, gain[0], gain[1], bias[0], bias[1]]
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of ops for one computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if it does not depend on any
    /// `requires_grad` leaf.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.clone()))
    }

    /// Number of nodes whose gradient buffer was allocated.
    pub fn materialized(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn layer_norm_rows(
    x: &[f64],
    d: usize,
    eps: f64,
    affine: impl Fn(usize) -> (usize, usize),
    params: &[&[f64]],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = if d == 0 { 0 } else { x.len() / d };
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        let (gi, bi) = affine(r);
        let (g, b) = (params[gi], params[bi]);
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * g[c] + b[c];
        }
    }
    (out, xhat, rstd)
}

/// Backward of a row-wise layer norm given `dxhat = dy * gain`.
fn layer_norm_dx(dxhat: &[f64], xhat: &[f64], rstd: f64, dx: &mut [f64]) {
    let d = dxhat.len() as f64;
    let mean_dxhat = dxhat.iter().sum::<f64>() / d;
    let mean_dxhat_xhat = dot(dxhat, xhat) / d;
    for c in 0..dxhat.len() {
        dx[c] += rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a tensor. Frozen tensors (`requires_grad = false`) never get a
    /// gradient buffer.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(op.name().into()));
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(Error::Shape(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}×{k} by {k2}×{n}")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    /// `a (m×k) · bᵀ` for `b` of shape `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt {m}×{k} by ({n}×{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(vec![m, n], out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    /// Add a length-`n` row vector to every row of `a (m×n)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::Shape(format!(
                "add_row: row of {} onto width {n}",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + r[i % n])
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).is_finite() {
            return Err(Error::Numeric("softmax_rows input".into()));
        }
        let (_, n) = self.dims2(a, "softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a))
    }

    /// Layer norm over the last dimension with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 {
            return Err(Error::Shape("layer_norm needs d >= 1".into()));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape(format!("layer_norm gain/bias must have length {d}")));
        }
        let (out, xhat, rstd) = layer_norm_rows(
            self.value(x).data(),
            d,
            eps,
            |_| (0, 1),
            &[self.value(gain).data(), self.value(bias).data()],
        );
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`. A 1-D input
    /// is one row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = self.dims2(logits, "cross_entropy")?;
        if c < 2 {
            return Err(Error::Shape("cross_entropy needs at least two classes".into()));
        }
        if m != targets.len() {
            return Err(Error::Shape(format!("{m} logit rows for {} targets", targets.len())));
        }
        if m == 0 {
            return Err(Error::Contract("cross_entropy over zero rows".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target {t} for {c} classes")));
        }
        let data = self.value(logits).data();
        let mut probs = data.to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let raw = &data[r * c..(r + 1) * c];
            let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = raw.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - raw[targets[r]];
            softmax_in_place(row);
        }
        self.push(
            vec![1],
            vec![loss / m as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean squared error, mean over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len().max(1) as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(vec![1], vec![s / n], Op::Mse(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let data = t.data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a))
    }

    /// Build a matrix whose row `i` is row `picks[i].1` of `sources[picks[i].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let cols = match sources.first() {
            Some(&s) => self.value(s).cols(),
            None => return Err(Error::Shape("gather_rows needs a source".into())),
        };
        for &s in sources {
            if self.value(s).cols() != cols {
                return Err(Error::Shape("gather_rows sources differ in width".into()));
            }
        }
        let mut out = Vec::with_capacity(picks.len() * cols);
        for &(s, r) in picks {
            let src = sources
                .get(s)
                .ok_or_else(|| Error::Index(format!("gather source {s}")))?;
            let t = self.value(*src);
            if r >= t.rows() {
                return Err(Error::Index(format!("row {r} of a {}-row source", t.rows())));
            }
            out.extend_from_slice(t.row(r));
        }
        self.push(
            vec![picks.len(), cols],
            out,
            Op::Gather {
                sources: sources.to_vec(),
                picks: picks.to_vec(),
            },
        )
    }

    /// Rows `idx` of `a`.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let picks: Vec<_> = idx.iter().map(|&r| (0, r)).collect();
        self.gather_rows(&[a], &picks)
    }

    fn check_lanes(&self, x: Var, lanes: &Lanes, what: &str) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(x, what)?;
        if lanes.len() != m {
            return Err(Error::Routing(format!("{what}: {} lanes for {m} rows", lanes.len())));
        }
        Ok((m, n))
    }

    /// Row `i` of the output is `x[i] · w[lanes[i]]`.
    pub fn routed_matmul(&mut self, x: Var, w: [Var; 2], lanes: &Lanes) -> Result<Var> {
        let (m, k) = self.check_lanes(x, lanes, "routed_matmul")?;
        let (k0, n) = self.dims2(w[0], "routed_matmul")?;
        if self.shape(w[0]) != self.shape(w[1]) || k0 != k {
            return Err(Error::Shape(format!(
                "routed_matmul {m}×{k} by {:?}/{:?}",
                self.shape(w[0]),
                self.shape(w[1])
            )));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let wd = self.value(w[lanes.get(i)]).data();
            matmul_acc(&xd[i * k..(i + 1) * k], wd, 1, k, n, &mut out[i * n..(i + 1) * n]);
        }
        self.push(
            vec![m, n],
            out,
            Op::RoutedMatMul {
                x,
                w,
                lanes: lanes.clone(),
            },
        )
    }

    /// Row `i` of the output is `x[i] + b[lanes[i]]`.
    pub fn routed_add_row(&mut self, x: Var, b: [Var; 2], lanes: &Lanes) -> Result<Var> {
        let (m, n) = self.check_lanes(x, lanes, "routed_add_row")?;
        if self.value(b[0]).len() != n || self.value(b[1]).len() != n {
            return Err(Error::Shape("routed_add_row bias width".into()));
        }
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            let bd = self.value(b[lanes.get(i)]).data();
            for c in 0..n {
                out[i * n + c] += bd[c];
            }
        }
        self.push(
            vec![m, n],
            out,
            Op::RoutedAddRow {
                x,
                b,
                lanes: lanes.clone(),
            },
        )
    }

    /// Layer norm whose affine parameters come from lane `lanes[i]`.
    pub fn routed_layer_norm(
        &mut self,
        x: Var,
        gain: [Var; 2],
        bias: [Var; 2],
        lanes: &Lanes,
        eps: f64,
    ) -> Result<Var> {
        let (_, d) = self.check_lanes(x, lanes, "routed_layer_norm")?;
        for v in gain.iter().chain(bias.iter()) {
            if self.value(*v).len() != d {
                return Err(Error::Shape("routed_layer_norm parameter width".into()));
            }
        }
        let lane_vec = lanes.clone();
        let (out, xhat, rstd) = layer_norm_rows(
            self.value(x).data(),
            d,
            eps,
            |r| {
                let l = lane_vec.get(r);
                (l, 2 + l)
            },
            &[
                self.value(gain[0]).data(),
                self.value(gain[1]).data(),
                self.value(bias[0]).data(),
                self.value(bias[1]).data(),
            ],
        );
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::RoutedLayerNorm {
                x,
                gain,
                bias,
                lanes: lanes.clone(),
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention of `q` (Lq×d) over `k`/`v`
    /// (Lk×d).
    ///
    /// `mask[i * Lk + j]` allows query row `i` to attend to key row `j`. Every
    /// query row must allow at least one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<Vec<bool>>,
    ) -> Result<Var> {
        let (lq, d) = self.dims2(q, "attention")?;
        let (lk, dkv) = self.dims2(k, "attention")?;
        if self.shape(v) != self.shape(k) || dkv != d {
            return Err(Error::Shape("attention q/k/v widths differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
        }
        if mask.len() != lq * lk {
            return Err(Error::Shape(format!("mask of {} for {lq}×{lk}", mask.len())));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        let mut scores = vec![0.0; lk];
        for h in 0..heads {
            let off = h * dk;
            for i in 0..lq {
                let qi = &qd[i * d + off..i * d + off + dk];
                let mrow = &mask[i * lk..(i + 1) * lk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..lk {
                    if mrow[j] {
                        let s = dot(qi, &kd[j * d + off..j * d + off + dk]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::Contract(format!("attention row {i} is fully masked")));
                }
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let mut total = 0.0;
                for j in 0..lk {
                    if mrow[j] {
                        p[j] = (scores[j] - max).exp();
                        total += p[j];
                    }
                }
                let oi = &mut out[i * d + off..i * d + off + dk];
                for j in 0..lk {
                    if mrow[j] {
                        p[j] /= total;
                        axpy(p[j], &vd[j * d + off..j * d + off + dk], oi);
                    }
                }
            }
        }
        self.push(
            vec![lq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
        )
    }

    /// Attention probabilities (`heads × Lq × Lk`, row-major) of an attention
    /// node, if `v` is one.
    pub fn attention_probs(&self, v: Var) -> Option<(usize, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => Some((*heads, probs)),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..n]
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    matmul_nt_acc(g, val(*b), m, n, k, ga);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    matmul_tn_acc(val(*a), g, m, k, n, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                // out (m×n) = a (m×k) · bᵀ, b is n×k
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    matmul_acc(g, val(*b), m, n, k, ga);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    matmul_tn_acc(g, val(*a), m, n, k, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_buf(grads, v) {
                        axpy(1.0, g, gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(*c, g, ga);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(1.0, g, ga);
                }
                let n = self.value(*row).len();
                if let Some(gr) = self.grad_buf(grads, *row) {
                    for chunk in g.chunks(n) {
                        axpy(1.0, chunk, gr);
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *o += gi * gelu_grad(*x);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = dot(gr, yr);
                        for c in 0..n {
                            out[c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gain_v = val(*gain);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gain_v[c];
                        }
                        layer_norm_dx(&dxhat, &xhat[r * d..(r + 1) * d], rs, &mut gx[r * d..(r + 1) * d]);
                    }
                }
                if let Some(gg) = self.grad_buf(grads, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    for gr in g.chunks(d) {
                        axpy(1.0, gr, gb);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - ind);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len().max(1) as f64;
                let coef = 2.0 * g[0] / n;
                let (ad, bd) = (val(*a), val(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += coef * (ad[i] - bd[i]);
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] -= coef * (ad[i] - bd[i]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(1.0, g, ga);
                }
            }
            Op::Gather { sources, picks } => {
                let cols = node.value.cols();
                for (i, &(s, r)) in picks.iter().enumerate() {
                    if let Some(gs) = self.grad_buf(grads, sources[s]) {
                        axpy(1.0, &g[i * cols..(i + 1) * cols], &mut gs[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::RoutedMatMul { x, w, lanes } => {
                let (m, k) = (self.value(*x).rows(), self.value(*x).cols());
                let n = node.value.cols();
                let xd = val(*x);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..m {
                        let wd = val(w[lanes.get(i)]);
                        matmul_nt_acc(&g[i * n..(i + 1) * n], wd, 1, n, k, &mut gx[i * k..(i + 1) * k]);
                    }
                }
                for lane in 0..2 {
                    if let Some(gw) = self.grad_buf(grads, w[lane]) {
                        for i in (0..m).filter(|&i| lanes.get(i) == lane) {
                            matmul_tn_acc(&xd[i * k..(i + 1) * k], &g[i * n..(i + 1) * n], 1, k, n, gw);
                        }
                    }
                }
            }
            Op::RoutedAddRow { x, b, lanes } => {
                let n = node.value.cols();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    axpy(1.0, g, gx);
                }
                for lane in 0..2 {
                    if let Some(gb) = self.grad_buf(grads, b[lane]) {
                        for (i, gr) in g.chunks(n).enumerate() {
                            if lanes.get(i) == lane {
                                axpy(1.0, gr, gb);
                            }
                        }
                    }
                }
            }
            Op::RoutedLayerNorm {
                x,
                gain,
                bias,
                lanes,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gv = val(gain[lanes.get(r)]);
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gv[c];
                        }
                        layer_norm_dx(&dxhat, &xhat[r * d..(r + 1) * d], rs, &mut gx[r * d..(r + 1) * d]);
                    }
                }
                for lane in 0..2 {
                    if let Some(gg) = self.grad_buf(grads, gain[lane]) {
                        for r in (0..rstd.len()).filter(|&r| lanes.get(r) == lane) {
                            for c in 0..d {
                                gg[c] += g[r * d + c] * xhat[r * d + c];
                            }
                        }
                    }
                    if let Some(gb) = self.grad_buf(grads, bias[lane]) {
                        for r in (0..rstd.len()).filter(|&r| lanes.get(r) == lane) {
                            axpy(1.0, &g[r * d..(r + 1) * d], gb);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let (lq, d) = (node.value.rows(), node.value.cols());
                let lk = self.value(*k).rows();
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let want = [
                    self.nodes[q.0].needs_grad,
                    self.nodes[k.0].needs_grad,
                    self.nodes[v.0].needs_grad,
                ];
                let mut gq = vec![0.0; lq * d];
                let mut gk = vec![0.0; lk * d];
                let mut gv = vec![0.0; lk * d];
                let mut dp = vec![0.0; lk];
                for h in 0..*heads {
                    let off = h * dk;
                    for i in 0..lq {
                        let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                        let mrow = &mask[i * lk..(i + 1) * lk];
                        let gi = &g[i * d + off..i * d + off + dk];
                        let mut s = 0.0;
                        for j in 0..lk {
                            if mrow[j] {
                                dp[j] = dot(gi, &vd[j * d + off..j * d + off + dk]);
                                s += p[j] * dp[j];
                                if want[2] {
                                    axpy(p[j], gi, &mut gv[j * d + off..j * d + off + dk]);
                                }
                            }
                        }
                        for j in 0..lk {
                            if mrow[j] {
                                let ds = p[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                if want[0] {
                                    axpy(ds, &kd[j * d + off..j * d + off + dk], &mut gq[i * d + off..i * d + off + dk]);
                                }
                                if want[1] {
                                    axpy(ds, &qd[i * d + off..i * d + off + dk], &mut gk[j * d + off..j * d + off + dk]);
                                }
                            }
                        }
                    }
                }
                for (var, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(buf) = self.grad_buf(grads, var) {
                        axpy(1.0, &local, buf);
                    }
                }
            }
        }
    }
}
