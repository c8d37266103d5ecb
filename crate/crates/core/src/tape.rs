//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for its backward rule. Nodes are only ever appended, so inputs are
//! always recorded before the nodes that consume them, and a backward pass is
//! a single sweep over the nodes in reverse recording order.
//!
//! A tape is single-threaded and owns copies of every value it records.
//! Independent tapes share nothing and may live on different threads.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, mismatch, Error, Result};
use crate::kernels;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Floor applied to a probability before taking its logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Matmul,
    Transpose,
    Scale,
    Sum,
    Reshape,
    Relu,
    Tanh,
    SoftmaxRows,
    LayerNorm,
    Conv2dSame,
    GlobalAvgPool,
    ConcatChannels,
    Dropout,
    Dense,
    NegLogPick,
}

/// Multiplies the gradient an operation sends to one of its inputs by
/// `factor`. Used to prove that gradient checking catches a broken rule.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    /// Position of the input in the operation's argument list.
    pub input: usize,
    pub factor: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2dSame {
        x: Var,
        w: Var,
        b: Var,
        height: usize,
        width: usize,
        c_in: usize,
        c_out: usize,
        cols: Vec<f64>,
    },
    GlobalAvgPool {
        x: Var,
        positions: usize,
    },
    ConcatChannels {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
        c_in: usize,
        c_out: usize,
    },
    NegLogPick {
        x: Var,
        index: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2dSame { .. } => OpKind::Conv2dSame,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Dense { .. } => OpKind::Dense,
            Op::NegLogPick { .. } => OpKind::NegLogPick,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Tape::gradients`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if the loss depends on it
    /// through differentiable operations.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Recording of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
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

    /// Every recorded value, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    #[doc(hidden)]
    pub fn set_backward_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Copies a recorded value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(&node.shape, node.value.clone()).expect("recorded shapes are valid")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a tensor as a leaf. It takes part in differentiation iff it
    /// requires a gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            t.requires_grad(),
        )
    }

    /// Records a parameter; [`Tape::backward`] routes its gradient back into
    /// the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            t.requires_grad(),
        )
    }

    /// Records every parameter of the store; the result is indexed by
    /// [`ParamId::index`].
    pub fn bind(&mut self, store: &ParamStore) -> Vec<Var> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a), self.value(b), m, k, n, &mut value);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], value, Op::Matmul { a, b, m, k, n }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(invalid("transpose", "expects a matrix"));
        }
        let (rows, cols) = (s[0], s[1]);
        let value = kernels::transpose(self.value(x), rows, cols);
        let needs = self.needs(x);
        Ok(self.push(vec![cols, rows], value, Op::Transpose { x, rows, cols }, needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * s).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, s), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![total], Op::Sum(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), needs))
    }

    /// `max(x, 0)`; NaN passes through.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| if v <= 0.0 { 0.0 } else { v }).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), value, Op::Relu(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| libm::tanh(v)).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), value, Op::Tanh(x), needs)
    }

    /// Row-wise softmax of a matrix, computed with the row maximum subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(invalid("softmax_rows", "expects a matrix"));
        }
        let cols = s[1];
        let mut value = self.value(x).to_vec();
        for row in value.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let needs = self.needs(x);
        Ok(self.push(s.to_vec(), value, Op::SoftmaxRows { x, cols }, needs))
    }

    /// Softmax of a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let shape = self.shape(x).to_vec();
        let row = self.reshape(x, &[1, n])?;
        let probs = self.softmax_rows(row)?;
        self.reshape(probs, &shape)
    }

    /// Normalizes over the last axis at every leading position, then applies
    /// the per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let channels = *self.shape(x).last().expect("shapes are non-empty");
        if self.shape(gamma) != [channels] {
            return Err(mismatch("layer_norm gamma", self.shape(gamma), &[channels]));
        }
        if self.shape(beta) != [channels] {
            return Err(mismatch("layer_norm beta", self.shape(beta), &[channels]));
        }
        if !(eps > 0.0) {
            return Err(invalid("layer_norm", "eps must be positive"));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let positions = xs.len() / channels;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; positions];
        let mut value = vec![0.0; xs.len()];
        for p in 0..positions {
            let row = &xs[p * channels..(p + 1) * channels];
            let mean = row.iter().sum::<f64>() / channels as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / channels as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[p] = is;
            for c in 0..channels {
                let h = (row[c] - mean) * is;
                xhat[p * channels + c] = h;
                value[p * channels + c] = g[c] * h + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// 3×3 convolution, stride 1, one pixel of zero padding on every border.
    /// `x` is `H×W×C_in`, `w` is `3×3×C_in×C_out`, `b` is `C_out`.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 {
            return Err(invalid("conv2d_same", "input must be H×W×C"));
        }
        if sw.len() != 4 || sw[0] != 3 || sw[1] != 3 {
            return Err(invalid("conv2d_same", "kernel must be 3×3×C_in×C_out"));
        }
        if sw[2] != sx[2] {
            return Err(mismatch("conv2d_same channels", sx, sw));
        }
        if sb != [sw[3]] {
            return Err(mismatch("conv2d_same bias", sb, &[sw[3]]));
        }
        let (height, width, c_in, c_out) = (sx[0], sx[1], sx[2], sw[3]);
        let cols = kernels::im2col_3x3(self.value(x), height, width, c_in);
        let mut value = Vec::with_capacity(height * width * c_out);
        let bias = self.value(b);
        for _ in 0..height * width {
            value.extend_from_slice(bias);
        }
        kernels::gemm_nn(&cols, self.value(w), height * width, 9 * c_in, c_out, &mut value);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            vec![height, width, c_out],
            value,
            Op::Conv2dSame {
                x,
                w,
                b,
                height,
                width,
                c_in,
                c_out,
                cols,
            },
            needs,
        ))
    }

    /// Mean over the spatial axes of an `H×W×C` map.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(invalid("global_avg_pool", "input must be H×W×C"));
        }
        let (positions, channels) = (s[0] * s[1], s[2]);
        let mut value = vec![0.0; channels];
        for row in self.value(x).chunks_exact(channels) {
            kernels::add_assign(&mut value, row);
        }
        value.iter_mut().for_each(|v| *v /= positions as f64);
        let needs = self.needs(x);
        Ok(self.push(vec![channels], value, Op::GlobalAvgPool { x, positions }, needs))
    }

    /// Concatenates `H×W×Cᵢ` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 3 {
            return Err(invalid("concat_channels", "inputs must be H×W×C"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != s0[0] || s[1] != s0[1] {
                return Err(mismatch("concat_channels", &s0, s));
            }
            widths.push(s[2]);
        }
        let total: usize = widths.iter().sum();
        let positions = s0[0] * s0[1];
        let mut value = Vec::with_capacity(positions * total);
        for pos in 0..positions {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[pos * w..(pos + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![s0[0], s0[1], total],
            value,
            Op::ConcatChannels {
                parts: parts.to_vec(),
                widths,
            },
            needs,
        ))
    }

    /// Inverted dropout: kept activations are divided by `1 − rate`. Returns
    /// `x` itself when not training or when the rate is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", "rate must lie in [0, 1)"));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let needs = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout { x, mask }, needs))
    }

    /// Affine map of a vector: `x[C_in] · w[C_in×C_out] + b[C_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 1 || sw.len() != 2 || sw[0] != sx[0] {
            return Err(mismatch("dense", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(mismatch("dense bias", sb, &[sw[1]]));
        }
        let (c_in, c_out) = (sw[0], sw[1]);
        let mut value = self.value(b).to_vec();
        kernels::gemm_nn(self.value(x), self.value(w), 1, c_in, c_out, &mut value);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![c_out], value, Op::Dense { x, w, b, c_in, c_out }, needs))
    }

    /// `−ln(max(x[index], LOG_CLAMP))` for a vector `x`. A NaN entry gives
    /// a NaN loss.
    pub fn neg_log_pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(invalid("neg_log_pick", "expects a vector"));
        }
        if index >= s[0] {
            return Err(Error::LabelOutOfRange {
                label: index,
                n_classes: s[0],
            });
        }
        let p = self.value(x)[index];
        let value = if p.is_nan() { p } else { -libm::log(p.max(LOG_CLAMP)) };
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![value], Op::NegLogPick { x, index }, needs))
    }

    /// Gradients of a scalar `loss` with respect to every recorded node that
    /// it depends on.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::gradients`] and adds the result into the gradient buffers
    /// of the parameters recorded with [`Tape::param`]. Buffers accumulate
    /// across calls until [`ParamStore::zero_grads`].
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, grads.grads[i].as_deref()) {
                if let Some(buf) = store.get_mut(*id).grad_mut() {
                    kernels::add_assign(buf, g);
                }
            }
        }
        Ok(())
    }

    fn emit(&self, grads: &mut [Option<Vec<f64>>], kind: OpKind, slot: usize, target: Var, mut contrib: Vec<f64>) {
        if let Some(f) = self.fault {
            if f.op == kind && f.input == slot {
                contrib.iter_mut().for_each(|v| *v *= f.factor);
            }
        }
        match &mut grads[target.0] {
            Some(g) => kernels::add_assign(g, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let kind = node.op.kind();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.emit(grads, kind, 0, *a, g.to_vec());
                }
                if self.needs(*b) {
                    self.emit(grads, kind, 1, *b, g.to_vec());
                }
            }
            &Op::Matmul { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(g, self.value(b), m, n, k, &mut ga);
                    self.emit(grads, kind, 0, a, ga);
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(self.value(a), g, k, m, n, &mut gb);
                    self.emit(grads, kind, 1, b, gb);
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if self.needs(x) {
                    self.emit(grads, kind, 0, x, kernels::transpose(g, cols, rows));
                }
            }
            &Op::Scale(x, s) => {
                if self.needs(x) {
                    self.emit(grads, kind, 0, x, g.iter().map(|v| v * s).collect());
                }
            }
            &Op::Sum(x) => {
                if self.needs(x) {
                    self.emit(grads, kind, 0, x, vec![g[0]; self.value(x).len()]);
                }
            }
            &Op::Reshape(x) => {
                if self.needs(x) {
                    self.emit(grads, kind, 0, x, g.to_vec());
                }
            }
            &Op::Relu(x) => {
                if self.needs(x) {
                    let gx = self
                        .value(x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    self.emit(grads, kind, 0, x, gx);
                }
            }
            &Op::Tanh(x) => {
                if self.needs(x) {
                    let gx = node.value.iter().zip(g).map(|(y, gv)| gv * (1.0 - y * y)).collect();
                    self.emit(grads, kind, 0, x, gx);
                }
            }
            &Op::SoftmaxRows { x, cols } => {
                if self.needs(x) {
                    let mut gx = vec![0.0; g.len()];
                    for ((y, gr), out) in node
                        .value
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(gx.chunks_exact_mut(cols))
                    {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            out[c] = y[c] * (gr[c] - dot);
                        }
                    }
                    self.emit(grads, kind, 0, x, gx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let channels = self.value(*gamma).len();
                if self.needs(*x) {
                    let gam = self.value(*gamma);
                    let mut gx = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; channels];
                    for (p, &is) in inv_std.iter().enumerate() {
                        let range = p * channels..(p + 1) * channels;
                        let (gr, hr) = (&g[range.clone()], &xhat[range.clone()]);
                        for c in 0..channels {
                            dxhat[c] = gr[c] * gam[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / channels as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / channels as f64;
                        for (c, out) in gx[range].iter_mut().enumerate() {
                            *out = is * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                    self.emit(grads, kind, 0, *x, gx);
                }
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; channels];
                    for (gr, hr) in g.chunks_exact(channels).zip(xhat.chunks_exact(channels)) {
                        for c in 0..channels {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                    self.emit(grads, kind, 1, *gamma, gg);
                }
                if self.needs(*beta) {
                    let mut gb = vec![0.0; channels];
                    for gr in g.chunks_exact(channels) {
                        kernels::add_assign(&mut gb, gr);
                    }
                    self.emit(grads, kind, 2, *beta, gb);
                }
            }
            Op::Conv2dSame {
                x,
                w,
                b,
                height,
                width,
                c_in,
                c_out,
                cols,
            } => {
                let (positions, depth) = (height * width, 9 * c_in);
                if self.needs(*x) {
                    let mut gcols = vec![0.0; positions * depth];
                    kernels::gemm_nt(g, self.value(*w), positions, *c_out, depth, &mut gcols);
                    let mut gx = vec![0.0; positions * c_in];
                    kernels::col2im_3x3_add(&gcols, *height, *width, *c_in, &mut gx);
                    self.emit(grads, kind, 0, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; depth * c_out];
                    kernels::gemm_tn(cols, g, depth, positions, *c_out, &mut gw);
                    self.emit(grads, kind, 1, *w, gw);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; *c_out];
                    for gr in g.chunks_exact(*c_out) {
                        kernels::add_assign(&mut gb, gr);
                    }
                    self.emit(grads, kind, 2, *b, gb);
                }
            }
            &Op::GlobalAvgPool { x, positions } => {
                if self.needs(x) {
                    let scale = 1.0 / positions as f64;
                    let mut gx = Vec::with_capacity(positions * g.len());
                    for _ in 0..positions {
                        gx.extend(g.iter().map(|v| v * scale));
                    }
                    self.emit(grads, kind, 0, x, gx);
                }
            }
            Op::ConcatChannels { parts, widths } => {
                let total: usize = widths.iter().sum();
                let positions = g.len() / total;
                let mut offset = 0;
                for (slot, (&p, &w)) in parts.iter().zip(widths).enumerate() {
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(positions * w);
                        for row in g.chunks_exact(total) {
                            gp.extend_from_slice(&row[offset..offset + w]);
                        }
                        self.emit(grads, kind, slot, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    self.emit(grads, kind, 0, *x, g.iter().zip(mask).map(|(a, b)| a * b).collect());
                }
            }
            &Op::Dense { x, w, b, c_in, c_out } => {
                if self.needs(x) {
                    let mut gx = vec![0.0; c_in];
                    kernels::gemm_nt(g, self.value(w), 1, c_out, c_in, &mut gx);
                    self.emit(grads, kind, 0, x, gx);
                }
                if self.needs(w) {
                    let mut gw = vec![0.0; c_in * c_out];
                    kernels::gemm_tn(self.value(x), g, c_in, 1, c_out, &mut gw);
                    self.emit(grads, kind, 1, w, gw);
                }
                if self.needs(b) {
                    self.emit(grads, kind, 2, b, g.to_vec());
                }
            }
            &Op::NegLogPick { x, index } => {
                if self.needs(x) {
                    let p = self.value(x)[index];
                    let mut gx = vec![0.0; self.value(x).len()];
                    if !(p <= LOG_CLAMP) {
                        gx[index] = -g[0] / p;
                    }
                    self.emit(grads, kind, 0, x, gx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise_and_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[4.0, 6.0]);
        let z = tape.leaf(&Tensor::zeros(&[2]).unwrap());
        let d = tape.add(a, z).unwrap();
        assert_eq!(tape.value(d), tape.value(a));
    }

    #[test]
    fn add_rejects_mismatch_naming_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2]).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[3]).unwrap());
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn add_gradient_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let b = tape.leaf(&t(&[3], &[0.0, 1.0, 2.0]).with_grad());
        let c = tape.add(a, b).unwrap();
        let loss = tape.sum(c);
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let c = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let d = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(d), &[11.0]);
        assert!(tape.matmul(r, r).is_err());
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut k = [0.0; 9];
        k[4] = 1.0;
        let w = tape.leaf(&t(&[3, 3, 1, 1], &k));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.conv2d_same(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert_eq!(tape.shape(y), &[2, 3, 1]);
    }

    #[test]
    fn conv_ones_counts_overlap() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[5, 5, 1], 1.0).unwrap());
        let w = tape.leaf(&Tensor::full(&[3, 3, 1, 1], 1.0).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[1]).unwrap());
        let y = tape.conv2d_same(x, w, b).unwrap();
        let v = tape.value(y);
        assert_eq!(v[0], 4.0);
        assert_eq!(v[2 * 5 + 2], 9.0);
        assert_eq!(v[2], 6.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[3, 3, 2]).unwrap());
        let w = tape.leaf(&Tensor::zeros(&[3, 3, 3, 1]).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[1]).unwrap());
        assert!(matches!(tape.conv2d_same(x, w, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn layer_norm_small_cases() {
        let mut tape = Tape::new();
        let gamma = tape.leaf(&Tensor::full(&[2], 1.0).unwrap());
        let beta = tape.leaf(&Tensor::zeros(&[2]).unwrap());
        let x = tape.leaf(&t(&[2, 2], &[1.0, -1.0, 3.0, 3.0]));
        let y = tape.layer_norm(x, gamma, beta, 1e-300).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12 && v[3].abs() < 1e-12);
        let bad = tape.leaf(&Tensor::zeros(&[3]).unwrap());
        assert!(tape.layer_norm(x, bad, beta, 1e-5).is_err());
    }

    #[test]
    fn softmax_rows_reference_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3, 3], &[1.0, 2.0, 3.0, 5.0, 5.0, 5.0, 0.0, 800.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in v[..3].iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        for a in &v[3..6] {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(v[7] > 1.0 - 1e-12 && v[6] < 1e-300);
    }

    #[test]
    fn relu_pool_dropout_definitions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);

        let m = tape.leaf(&Tensor::full(&[2, 3, 4], 2.5).unwrap());
        let p = tape.global_avg_pool(m).unwrap();
        assert_eq!(tape.value(p), &[2.5; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(d), tape.value(x));
        let d = tape.dropout(x, 0.9, false, &mut rng).unwrap();
        assert_eq!(tape.value(d), tape.value(x));
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_scales_kept_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[1000], 1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let v = tape.value(d);
        assert!(v.iter().all(|&a| a == 0.0 || a == 2.0));
        let kept = v.iter().filter(|&&a| a > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn concat_interleaves_channels() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2, 1], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[1, 2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[1, 2, 3]);
        assert_eq!(tape.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut store = ParamStore::new();
        let wid = store.insert("w", t(&[3], &[0.5, -1.0, 2.0]));
        let mut tape = Tape::new();
        let w = tape.param(&store, wid);
        let x = tape.leaf(&t(&[3, 1], &[1.0, 2.0, 3.0]));
        let w_row = tape.reshape(w, &[1, 3]).unwrap();
        let y = tape.matmul(w_row, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(wid).grad().unwrap(), &[1.0, 2.0, 3.0]);
        // Accumulates until reset.
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(wid).grad().unwrap(), &[2.0, 4.0, 6.0]);
        store.zero_grads();
        assert_eq!(store.get(wid).grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn relu_dead_region_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[3], &[-1.0, -0.1, -5.0]).with_grad());
        let r = tape.relu(w);
        let loss = tape.sum(r);
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn relu_propagates_nan() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[f64::NAN, -1.0]));
        let r = tape.relu(x);
        assert!(tape.value(r)[0].is_nan());
        assert_eq!(tape.value(r)[1], 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(tape.gradients(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn neg_log_pick_clamps_and_checks_label() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[3], &[0.0, 0.5, 0.5]));
        let l = tape.neg_log_pick(p, 0).unwrap();
        assert!((tape.value(l)[0] + libm::log(LOG_CLAMP)).abs() < 1e-9);
        assert!(matches!(tape.neg_log_pick(p, 3), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn fault_scales_selected_input_only() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let b = tape.leaf(&t(&[2], &[3.0, 4.0]).with_grad());
        let c = tape.add(a, b).unwrap();
        let loss = tape.sum(c);
        tape.set_backward_fault(Some(BackwardFault {
            op: OpKind::Add,
            input: 1,
            factor: 2.0,
        }));
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap(), &[2.0, 2.0]);
    }
}
