//! Define-by-run tape. Every op appends a node holding its output value;
//! `backward` walks the tape in reverse once.

use std::collections::HashMap;

use super::tensor::gemm;
use super::{Group, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `x · wᵀ + b` with `w: [out, in]`, `b: [out]`.
    Linear(NodeId, NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    /// Row-wise log-sum-exp over the selected columns, output `[rows, 1]`.
    LogSumExpCols(NodeId, Vec<bool>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    /// Pixelwise choice: `inside` where the mask is set, else `outside`.
    Select(Vec<bool>, NodeId, NodeId),
    /// `w / σ(w)` with `σ = ‖wᵀu‖`, `u` held fixed.
    SpectralNorm {
        w: NodeId,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
        clamped: bool,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRowBias(a, b) => vec![*a, *b],
            Linear(x, w, b) => vec![*x, *w, *b],
            Scale(a, _) | AddScalar(a) | Tanh(a) | LeakyRelu(a, _) | Exp(a) | Log(a) | Square(a) => {
                vec![*a]
            }
            Clamp(a, _, _) | Sum(a) | Mean(a) | SoftmaxRows(a) | LogSoftmaxRows(a) => vec![*a],
            LogSumExpCols(a, _) | SliceRows(a, _) | SliceCols(a, _) => vec![*a],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            Select(_, a, b) => vec![*a, *b],
            SpectralNorm { w, .. } => vec![*w],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation record.
///
/// Parameters enter through [`Graph::param`]; whether they receive
/// gradients is decided by the graph's trainable groups. Parameters of the
/// `Feature` and `Buffer` groups are always constants.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable: Vec<Group>,
    param_nodes: HashMap<ParamId, NodeId>,
    spectral_nodes: HashMap<ParamId, NodeId>,
}

impl Graph {
    /// A graph in which parameters of `trainable` groups require gradients.
    pub fn new(trainable: &[Group]) -> Self {
        Graph {
            nodes: Vec::new(),
            trainable: trainable
                .iter()
                .copied()
                .filter(|g| !matches!(g, Group::Feature | Group::Buffer))
                .collect(),
            param_nodes: HashMap::new(),
            spectral_nodes: HashMap::new(),
        }
    }

    /// A graph where nothing is trainable (pure evaluation).
    pub fn inference() -> Self {
        Self::new(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_with(op, value, requires_grad)
    }

    fn push_with(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input (data, noise, masks).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_with(Op::Leaf, t, false)
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let p = store.get(id);
        let rg = self.trainable.contains(&p.group);
        let n = self.push_with(Op::Param(id), p.value.clone(), rg);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if !xv.is_matrix() || !wv.is_matrix() || xv.cols() != wv.cols() || bv.len() != wv.rows() {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let (r, o) = (xv.rows(), wv.rows());
        let mut out = Tensor::zeros(&[r, o]);
        for row in out.data_mut().chunks_exact_mut(o) {
            row.copy_from_slice(bv.data());
        }
        gemm(xv, false, wv, true, &mut out, 1.0);
        Ok(self.push(Op::Linear(x, w, b), out))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Matrix plus a per-row bias vector of length `cols`.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if !av.is_matrix() || bv.len() != av.cols() {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let c = av.cols();
        let mut v = av.clone();
        for row in v.data_mut().chunks_exact_mut(c) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddRowBias(a, bias), v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        self.push(Op::LeakyRelu(a, alpha), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(Op::Log(a), v))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = softmax_rows(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows(a), v))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if !x.is_matrix() {
            return Err(Error::shape("log_softmax_rows", format!("{:?}", x.shape())));
        }
        let c = x.cols();
        let mut v = x.clone();
        for row in v.data_mut().chunks_exact_mut(c) {
            let lse = logsumexp(row.iter().copied());
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.push(Op::LogSoftmaxRows(a), v))
    }

    /// Row-wise log-sum-exp restricted to columns where `cols` is true.
    pub fn logsumexp_cols(&mut self, a: NodeId, cols: &[bool]) -> Result<NodeId> {
        let x = self.value(a);
        if !x.is_matrix() || x.cols() != cols.len() || !cols.iter().any(|&c| c) {
            return Err(Error::shape(
                "logsumexp_cols",
                format!("{:?} with column mask of {}", x.shape(), cols.len()),
            ));
        }
        let data = (0..x.rows())
            .map(|r| {
                logsumexp(
                    x.row(r)
                        .iter()
                        .zip(cols)
                        .filter(|(_, &keep)| keep)
                        .map(|(&v, _)| v),
                )
            })
            .collect();
        let v = Tensor::new(&[x.rows(), 1], data)?;
        Ok(self.push(Op::LogSumExpCols(a, cols.to_vec()), v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let x = self.value(a);
        if !x.is_matrix() || start >= end || end > x.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {:?}", x.shape()),
            ));
        }
        let v = x.slice_rows(start, end);
        Ok(self.push(Op::SliceRows(a, start), v))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let x = self.value(a);
        if !x.is_matrix() || start >= end || end > x.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {:?}", x.shape()),
            ));
        }
        let data = (0..x.rows())
            .flat_map(|r| x.row(r)[start..end].iter().copied())
            .collect();
        let v = Tensor::new(&[x.rows(), end - start], data)?;
        Ok(self.push(Op::SliceCols(a, start), v))
    }

    /// Exact elementwise selection; no blending.
    pub fn select(&mut self, mask: &[bool], inside: NodeId, outside: NodeId) -> Result<NodeId> {
        self.same_shape("select", inside, outside)?;
        if mask.len() != self.value(inside).len() {
            return Err(Error::shape("select", "mask length differs from operands"));
        }
        let (a, b) = (self.value(inside).data(), self.value(outside).data());
        let data = mask
            .iter()
            .zip(a.iter().zip(b))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let v = Tensor::new(self.value(inside).shape(), data)?;
        Ok(self.push(Op::Select(mask.to_vec(), inside, outside), v))
    }

    /// Spectrally normalised view `w / ‖wᵀu‖` of a weight node, with `u`
    /// treated as a constant. Cached per parameter within one graph.
    pub fn spectral_norm(&mut self, w: NodeId, u: &Tensor) -> Result<NodeId> {
        let key = match self.nodes[w.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        };
        if let Some(n) = key.and_then(|id| self.spectral_nodes.get(&id)) {
            return Ok(*n);
        }
        let wv = self.value(w);
        if !wv.is_matrix() || u.len() != wv.rows() {
            return Err(Error::shape(
                "spectral_norm",
                format!("w {:?}, u {:?}", wv.shape(), u.shape()),
            ));
        }
        let (wn, v, sigma, clamped) = spectral_scale(wv, u.data());
        let id = self.push(
            Op::SpectralNorm {
                w,
                u: u.data().to_vec(),
                v,
                sigma,
                clamped,
            },
            wn,
        );
        if let Some(k) = key {
            self.spectral_nodes.insert(k, id);
        }
        Ok(id)
    }

    /// Reverse pass from a scalar `loss`; parameter gradients are added to
    /// the accumulators in `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) {
        let mut send = |id: NodeId, t: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => store.accumulate(*pid, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    gemm(g, false, bv, true, &mut ga, 0.0);
                    send(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    gemm(av, true, g, false, &mut gb, 0.0);
                    send(*b, gb);
                }
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(xv.shape());
                    gemm(g, false, wv, false, &mut gx, 0.0);
                    send(*x, gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = Tensor::zeros(wv.shape());
                    gemm(g, true, xv, false, &mut gw, 0.0);
                    send(*w, gw);
                }
                if self.requires_grad(*b) {
                    send(*b, col_sums(g, self.value(*b).shape()));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    send(*a, g.zip_map(bv, |g, y| g * y));
                }
                if self.requires_grad(*b) {
                    send(*b, g.zip_map(av, |g, x| g * x));
                }
            }
            Op::AddRowBias(a, bias) => {
                send(*a, g.clone());
                if self.requires_grad(*bias) {
                    send(*bias, col_sums(g, self.value(*bias).shape()));
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Tanh(a) => send(*a, g.zip_map(out, |g, y| g * (1.0 - y * y))),
            Op::LeakyRelu(a, alpha) => {
                let x = self.value(*a);
                send(*a, g.zip_map(x, |g, x| if x > 0.0 { g } else { alpha * g }));
            }
            Op::Exp(a) => send(*a, g.zip_map(out, |g, y| g * y)),
            Op::Log(a) => send(*a, g.zip_map(self.value(*a), |g, x| g / x)),
            Op::Square(a) => send(*a, g.zip_map(self.value(*a), |g, x| 2.0 * g * x)),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                send(
                    *a,
                    g.zip_map(x, |g, x| if x < *lo || x > *hi { 0.0 } else { g }),
                );
            }
            Op::Sum(a) => send(*a, Tensor::full(self.value(*a).shape(), g.item())),
            Op::Mean(a) => {
                let x = self.value(*a);
                send(*a, Tensor::full(x.shape(), g.item() / x.len() as f64));
            }
            Op::SoftmaxRows(a) => {
                // dx = y ⊙ (g − <g, y>) per row
                let c = out.cols();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_exact_mut(c).zip(out.data().chunks_exact(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                send(*a, gx);
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g − softmax · Σg per row
                let c = out.cols();
                let mut gx = g.clone();
                for (grow, lrow) in gx.data_mut().chunks_exact_mut(c).zip(out.data().chunks_exact(c)) {
                    let total: f64 = grow.iter().sum();
                    for (gv, l) in grow.iter_mut().zip(lrow) {
                        *gv -= l.exp() * total;
                    }
                }
                send(*a, gx);
            }
            Op::LogSumExpCols(a, cols) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    for j in 0..c {
                        if cols[j] {
                            gx.data_mut()[r * c + j] = gr * (x.data()[r * c + j] - lse).exp();
                        }
                    }
                }
                send(*a, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.requires_grad(p) {
                        let data = (0..g.rows())
                            .flat_map(|r| g.row(r)[offset..offset + pc].iter().copied())
                            .collect();
                        send(p, Tensor::new(self.value(p).shape(), data).expect("shape"));
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.requires_grad(p) {
                        send(p, g.slice_rows(offset, offset + pr));
                    }
                    offset += pr;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*a, gx);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let (c, gc) = (x.cols(), g.cols());
                let mut gx = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    gx.data_mut()[r * c + start..r * c + start + gc].copy_from_slice(g.row(r));
                }
                send(*a, gx);
            }
            Op::Select(mask, inside, outside) => {
                if self.requires_grad(*inside) {
                    let data = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&v, &m)| if m { v } else { 0.0 })
                        .collect();
                    send(*inside, Tensor::new(g.shape(), data).expect("shape"));
                }
                if self.requires_grad(*outside) {
                    let data = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&v, &m)| if m { 0.0 } else { v })
                        .collect();
                    send(*outside, Tensor::new(g.shape(), data).expect("shape"));
                }
            }
            Op::SpectralNorm {
                w,
                u,
                v,
                sigma,
                clamped,
            } => {
                // d(W/σ) with dσ/dW = u vᵀ:  (G − <G, W/σ> u vᵀ) / σ
                let c = out.cols();
                let dot: f64 = if *clamped {
                    0.0
                } else {
                    g.data().iter().zip(out.data()).map(|(a, b)| a * b).sum()
                };
                let mut gw = g.clone();
                for (i, row) in gw.data_mut().chunks_exact_mut(c).enumerate() {
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = (*x - dot * u[i] * v[j]) / sigma;
                    }
                }
                send(*w, gw);
            }
        }
    }
}

fn col_sums(g: &Tensor, shape: &[usize]) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for row in g.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(shape, out).expect("bias shape")
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if !x.is_matrix() {
        return Err(Error::shape("softmax_rows", format!("{:?}", x.shape())));
    }
    let c = x.cols();
    let mut v = x.clone();
    for row in v.data_mut().chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    Ok(v)
}

/// Returns `(w/σ, v, σ, clamped)` where `v = wᵀu/‖wᵀu‖` and `σ = ‖wᵀu‖`.
pub(crate) fn spectral_scale(w: &Tensor, u: &[f64]) -> (Tensor, Vec<f64>, f64, bool) {
    let (r, c) = (w.rows(), w.cols());
    let mut v = vec![0.0; c];
    for i in 0..r {
        let ui = u[i];
        for (vj, wij) in v.iter_mut().zip(w.row(i)) {
            *vj += wij * ui;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let clamped = norm < 1e-12;
    let sigma = norm.max(1e-12);
    v.iter_mut().for_each(|x| *x /= sigma);
    (w.scale(1.0 / sigma), v, sigma, clamped)
}
