//! Tape-based computation graph for reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape, rebuilt per training step. Nodes are
//! pushed in evaluation order, so every node's inputs have smaller ids and
//! `backward` is a single reverse sweep. A non-recording graph
//! ([`Graph::inference`]) runs the identical forward kernels without touching
//! the tape, so values are bit-identical in both modes.
//!
//! Gradients only flow into *tracked* nodes. Operands entering ops as plain
//! (untracked) tensors are stored as constant leaves; that is what makes
//! freezing a sub-network or detaching an activation produce exact zeros for
//! everything behind the cut.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, UfdnError};

use super::kernels::{self, Broadcast};
use super::tensor::{NodeRef, Tensor};

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

/// Target of a softmax cross-entropy loss.
#[derive(Clone, Debug)]
pub enum CeTarget {
    /// One class index per row.
    Classes(Vec<usize>),
    /// One distribution per row; rows must be non-negative and sum to 1.
    Distribution(Tensor),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    Clamp(usize, f64, f64),
    Matmul(usize, usize),
    BiasAdd(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        bias: usize,
        geom: kernels::ConvGeom,
    },
    ConvT2d {
        x: usize,
        w: usize,
        bias: usize,
        geom: kernels::ConvGeom,
    },
    Reduce {
        x: usize,
        axes: Option<Vec<usize>>,
        mean: bool,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    SoftmaxCe {
        logits: usize,
        targets: Arc<[f64]>,
        row_w: Arc<[f64]>,
        probs: Arc<[f64]>,
    },
}

struct Node {
    op: Op,
    tracked: bool,
    shape: Vec<usize>,
    value: Arc<[f64]>,
}

/// Append-only operation tape.
pub struct Graph {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// A recording graph: ops involving tracked tensors land on the tape.
    pub fn new() -> Graph {
        Graph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
        }
    }

    /// A non-recording graph: same forward arithmetic, no tape.
    pub fn inference() -> Graph {
        Graph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            recording: false,
            nodes: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a tracked leaf (gradient target). On a non-recording
    /// graph this is a no-op passthrough.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detached();
        }
        let id = self.push(Op::Leaf, true, t.shape().to_vec(), t.data_arc());
        Tensor::from_parts(t.shape().to_vec(), t.data_arc(), Some(NodeRef { graph: self.id, id }))
    }

    /// Strips tracking from a tensor: gradients will not flow past this point.
    pub fn detach(&self, t: &Tensor) -> Tensor {
        t.detached()
    }

    fn push(&mut self, op: Op, tracked: bool, shape: Vec<usize>, value: Arc<[f64]>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            tracked,
            shape,
            value,
        });
        id
    }

    /// Node id for an operand, adding a constant leaf for plain tensors.
    fn intern(&mut self, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(nr) => {
                if nr.graph != self.id {
                    return Err(UfdnError::Contract(
                        "operand belongs to a different graph".into(),
                    ));
                }
                Ok(nr.id)
            }
            None => Ok(self.push(Op::Leaf, false, t.shape().to_vec(), t.data_arc())),
        }
    }

    /// Wraps a freshly computed value, recording `op` when any operand is
    /// tracked on a recording graph.
    fn emit(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        tracked_inputs: bool,
        op: impl FnOnce(&mut Self) -> Result<Op>,
    ) -> Result<Tensor> {
        let data: Arc<[f64]> = data.into();
        if !(self.recording && tracked_inputs) {
            return Ok(Tensor::from_parts(shape, data, None));
        }
        let op = op(self)?;
        let id = self.push(op, true, shape.clone(), Arc::clone(&data));
        Ok(Tensor::from_parts(
            shape,
            data,
            Some(NodeRef {
                graph: self.id,
                id,
            }),
        ))
    }

    fn node_value(&self, id: usize) -> &[f64] {
        &self.nodes[id].value
    }

    // -- elementwise ---------------------------------------------------------

    fn binary(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Tensor> {
        let (shape, bc) = kernels::binary_broadcast(a.shape(), b.shape(), a.numel(), b.numel())?;
        let data = kernels::ew_binary(bc, a.data(), b.data(), f);
        self.emit(shape, data, a.is_tracked() || b.is_tracked(), |g| {
            Ok(op(g.intern(a)?, g.intern(b)?, bc))
        })
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        self.add(a, &Tensor::scalar(s))
    }

    pub fn mul_scalar(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        self.mul(a, &Tensor::scalar(s))
    }

    fn unary(
        &mut self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<Tensor> {
        let data = kernels::ew_unary(a.data(), f);
        self.emit(a.shape().to_vec(), data, a.is_tracked(), |g| {
            Ok(op(g.intern(a)?))
        })
    }

    pub fn neg(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| -x, Op::Neg)
    }

    /// `exp` with the argument clamped at 709 so results stay finite.
    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, kernels::exp_clamped, Op::Exp)
    }

    /// Natural log of the input clamped to `>= 1e-7`. The backward rule uses
    /// the clamped reciprocal, so saturated adversarial losses keep a usable
    /// gradient instead of going to -inf.
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, kernels::log_clamped, Op::Log)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, kernels::sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn leaky_relu(&mut self, a: &Tensor, alpha: f64) -> Result<Tensor> {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { alpha * x },
            |i| Op::LeakyRelu(i, alpha),
        )
    }

    pub fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(UfdnError::Contract(format!(
                "clamp bounds inverted: {lo} > {hi}"
            )));
        }
        self.unary(a, |x| x.clamp(lo, hi), |i| Op::Clamp(i, lo, hi))
    }

    // -- linear algebra -------------------------------------------------------

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k, n) = kernels::matmul_shape(a.shape(), b.shape())?;
        let data = kernels::matmul_forward(a.data(), b.data(), m, k, n);
        self.emit(vec![m, n], data, a.is_tracked() || b.is_tracked(), |g| {
            Ok(Op::Matmul(g.intern(a)?, g.intern(b)?))
        })
    }

    /// Row-broadcast bias: `[rows, n] + [n]`.
    pub fn bias_add(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::bias_add_shape(x.shape(), b.shape())?;
        let (rows, n) = (x.shape()[0], x.shape()[1]);
        let data = kernels::bias_add_forward(x.data(), b.data(), rows, n);
        self.emit(
            x.shape().to_vec(),
            data,
            x.is_tracked() || b.is_tracked(),
            |g| Ok(Op::BiasAdd(g.intern(x)?, g.intern(b)?)),
        )
    }

    /// Cross-correlation (no kernel flip) with per-channel bias.
    /// `x: [B,Ci,H,W]`, `w: [Co,Ci,kh,kw]`, `bias: [Co]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let geom = kernels::conv2d_geom(x.shape(), w.shape(), stride, pad)?;
        if bias.shape() != [geom.oc] {
            return Err(UfdnError::Dimension(format!(
                "conv2d bias shape {:?} does not match {} output channels",
                bias.shape(),
                geom.oc
            )));
        }
        let mut data = kernels::geom_forward(x.data(), w.data(), &geom);
        kernels::add_channel_bias(&mut data, bias.data(), geom.batch, geom.oc, geom.out_spatial());
        let shape = vec![geom.batch, geom.oc, geom.oh, geom.ow];
        let tracked = x.is_tracked() || w.is_tracked() || bias.is_tracked();
        self.emit(shape, data, tracked, |g| {
            Ok(Op::Conv2d {
                x: g.intern(x)?,
                w: g.intern(w)?,
                bias: g.intern(bias)?,
                geom,
            })
        })
    }

    /// Linear adjoint of [`Graph::conv2d`] with the same `(w, stride, pad)`,
    /// plus bias. `x: [B,Ci,H,W]`, `w: [Ci,Co,kh,kw]`, `bias: [Co]`; the
    /// output extent is `(H-1)*stride - 2*pad + kh`.
    pub fn conv2d_transpose(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let geom = kernels::convt2d_geom(x.shape(), w.shape(), stride, pad)?;
        // The transpose op's output lives on the underlying conv's input side.
        if bias.shape() != [geom.ic] {
            return Err(UfdnError::Dimension(format!(
                "conv2d_transpose bias shape {:?} does not match {} output channels",
                bias.shape(),
                geom.ic
            )));
        }
        let mut data = kernels::geom_input_grad(x.data(), w.data(), &geom);
        kernels::add_channel_bias(&mut data, bias.data(), geom.batch, geom.ic, geom.in_spatial());
        let shape = vec![geom.batch, geom.ic, geom.h, geom.w];
        let tracked = x.is_tracked() || w.is_tracked() || bias.is_tracked();
        self.emit(shape, data, tracked, |g| {
            Ok(Op::ConvT2d {
                x: g.intern(x)?,
                w: g.intern(w)?,
                bias: g.intern(bias)?,
                geom,
            })
        })
    }

    // -- reductions, shape ----------------------------------------------------

    fn reduce(&mut self, x: &Tensor, axes: Option<&[usize]>, mean: bool) -> Result<Tensor> {
        let axes = kernels::normalize_axes(axes, x.shape().len())?;
        let shape = kernels::reduced_shape(x.shape(), axes.as_deref());
        let data = kernels::reduce_forward(x.data(), x.shape(), axes.as_deref(), mean);
        self.emit(shape, data, x.is_tracked(), |g| {
            Ok(Op::Reduce {
                x: g.intern(x)?,
                axes,
                mean,
            })
        })
    }

    /// Sum over `axes` (all axes when `None`).
    pub fn sum(&mut self, x: &Tensor, axes: Option<&[usize]>) -> Result<Tensor> {
        self.reduce(x, axes, false)
    }

    /// Mean over `axes` (all axes when `None`).
    pub fn mean(&mut self, x: &Tensor, axes: Option<&[usize]>) -> Result<Tensor> {
        self.reduce(x, axes, true)
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let shapes: Vec<&[usize]> = parts.iter().map(|t| t.shape()).collect();
        let out_shape = kernels::concat_shape(&shapes, axis)?;
        let views: Vec<(&[f64], &[usize])> =
            parts.iter().map(|t| (t.data(), t.shape())).collect();
        let data = kernels::concat_forward(&views, axis, &out_shape);
        let tracked = parts.iter().any(|t| t.is_tracked());
        self.emit(out_shape, data, tracked, |g| {
            let ids = parts
                .iter()
                .map(|t| g.intern(t))
                .collect::<Result<Vec<_>>>()?;
            Ok(Op::Concat { parts: ids, axis })
        })
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() || shape.iter().any(|&d| d == 0) {
            return Err(UfdnError::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                x.shape()
            )));
        }
        self.emit(shape.to_vec(), x.data().to_vec(), x.is_tracked(), |g| {
            Ok(Op::Reshape(g.intern(x)?))
        })
    }

    // -- fused loss -----------------------------------------------------------

    /// Batch-mean softmax cross-entropy with the shifted-max stable form.
    /// The backward gradient is `(softmax - target) / B` per row.
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, target: &CeTarget) -> Result<Tensor> {
        let rows = self.ce_rows(logits)?;
        let w = vec![1.0 / rows as f64; rows];
        self.softmax_cross_entropy_weighted(logits, target, &w)
    }

    /// Softmax cross-entropy with explicit non-negative per-row weights
    /// (`loss = sum_b w_b * ce_b`). Used for masked/subset averaging.
    pub fn softmax_cross_entropy_weighted(
        &mut self,
        logits: &Tensor,
        target: &CeTarget,
        row_w: &[f64],
    ) -> Result<Tensor> {
        let rows = self.ce_rows(logits)?;
        let cols = logits.shape()[1];
        if row_w.len() != rows {
            return Err(UfdnError::Dimension(format!(
                "row weight count {} does not match batch {rows}",
                row_w.len()
            )));
        }
        if row_w.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(UfdnError::Validation(
                "row weights must be finite and non-negative".into(),
            ));
        }
        let targets = self.ce_targets(target, rows, cols)?;
        let (loss, probs) =
            kernels::softmax_ce_forward(logits.data(), &targets, row_w, rows, cols);
        let targets: Arc<[f64]> = targets.into();
        let row_w: Arc<[f64]> = row_w.to_vec().into();
        let probs: Arc<[f64]> = probs.into();
        self.emit(Vec::new(), vec![loss], logits.is_tracked(), |g| {
            Ok(Op::SoftmaxCe {
                logits: g.intern(logits)?,
                targets,
                row_w,
                probs,
            })
        })
    }

    fn ce_rows(&self, logits: &Tensor) -> Result<usize> {
        if logits.shape().len() != 2 || logits.shape()[1] < 2 {
            return Err(UfdnError::Dimension(format!(
                "softmax_cross_entropy expects logits [B, N>=2], got {:?}",
                logits.shape()
            )));
        }
        Ok(logits.shape()[0])
    }

    fn ce_targets(&self, target: &CeTarget, rows: usize, cols: usize) -> Result<Vec<f64>> {
        match target {
            CeTarget::Classes(classes) => {
                if classes.len() != rows {
                    return Err(UfdnError::Validation(format!(
                        "{} class targets for batch of {rows}",
                        classes.len()
                    )));
                }
                let mut t = vec![0.0; rows * cols];
                for (r, &c) in classes.iter().enumerate() {
                    if c >= cols {
                        return Err(UfdnError::Validation(format!(
                            "class index {c} out of range for {cols} classes"
                        )));
                    }
                    t[r * cols + c] = 1.0;
                }
                Ok(t)
            }
            CeTarget::Distribution(d) => {
                if d.shape() != [rows, cols] {
                    return Err(UfdnError::Validation(format!(
                        "target distribution shape {:?} does not match logits [{rows}, {cols}]",
                        d.shape()
                    )));
                }
                for r in 0..rows {
                    let row = &d.data()[r * cols..(r + 1) * cols];
                    if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                        return Err(UfdnError::Validation(format!(
                            "target distribution row {r} has negative or non-finite entries"
                        )));
                    }
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-6 {
                        return Err(UfdnError::Validation(format!(
                            "target distribution row {r} sums to {s}, expected 1"
                        )));
                    }
                }
                Ok(d.data().to_vec())
            }
        }
    }

    // -- backward ---------------------------------------------------------------

    /// Gradient of a scalar `root` with respect to every tracked node.
    /// Tracked leaves with no path to the root get exact zeros.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let nr = root.node().ok_or_else(|| {
            UfdnError::Contract("backward root is not tracked on any graph".into())
        })?;
        if nr.graph != self.id {
            return Err(UfdnError::Contract(
                "backward root belongs to a different graph".into(),
            ));
        }
        if root.numel() != 1 {
            return Err(UfdnError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        let mut acc: Vec<Option<Vec<f64>>> = Vec::with_capacity(nr.id + 1);
        acc.resize_with(nr.id + 1, || None);
        acc[nr.id] = Some(vec![1.0]);

        for i in (0..=nr.id).rev() {
            let Some(gy) = acc[i].take() else { continue };
            self.propagate(i, &gy, &mut acc)?;
            // Keep gradients addressable for later queries.
            acc[i] = Some(gy);
        }
        Ok(Gradients {
            graph: self.id,
            acc,
        })
    }

    /// Adds `delta`-producing contribution into `acc[target]` when the target
    /// node is tracked.
    fn accumulate(
        &self,
        acc: &mut [Option<Vec<f64>>],
        target: usize,
        delta: impl FnOnce() -> Vec<f64>,
    ) {
        if !self.nodes[target].tracked {
            return;
        }
        let d = delta();
        match &mut acc[target] {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(&d) {
                    *a += b;
                }
            }
            None => acc[target] = Some(d),
        }
    }

    /// Scalar-aware accumulation for broadcast binary operands.
    fn accumulate_bc(
        &self,
        acc: &mut [Option<Vec<f64>>],
        target: usize,
        full: &[f64],
        scalar_side: bool,
        map: impl Fn(f64) -> f64,
    ) {
        if scalar_side {
            self.accumulate(acc, target, || vec![full.iter().map(|&v| map(v)).sum()]);
        } else {
            self.accumulate(acc, target, || full.iter().map(|&v| map(v)).collect());
        }
    }

    fn propagate(&self, id: usize, gy: &[f64], acc: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                self.accumulate_bc(acc, *a, gy, *bc == Broadcast::ScalarLeft, |v| v);
                self.accumulate_bc(acc, *b, gy, *bc == Broadcast::ScalarRight, |v| v);
            }
            Op::Sub(a, b, bc) => {
                self.accumulate_bc(acc, *a, gy, *bc == Broadcast::ScalarLeft, |v| v);
                self.accumulate_bc(acc, *b, gy, *bc == Broadcast::ScalarRight, |v| -v);
            }
            Op::Mul(a, b, bc) => {
                let av = self.node_value(*a);
                let bv = self.node_value(*b);
                if self.nodes[*a].tracked {
                    let d: Vec<f64> = match bc {
                        Broadcast::Same => gy.iter().zip(bv).map(|(&g, &y)| g * y).collect(),
                        Broadcast::ScalarRight => gy.iter().map(|&g| g * bv[0]).collect(),
                        Broadcast::ScalarLeft => {
                            vec![gy.iter().zip(bv).map(|(&g, &y)| g * y).sum()]
                        }
                    };
                    self.accumulate(acc, *a, || d);
                }
                if self.nodes[*b].tracked {
                    let d: Vec<f64> = match bc {
                        Broadcast::Same => gy.iter().zip(av).map(|(&g, &x)| g * x).collect(),
                        Broadcast::ScalarLeft => gy.iter().map(|&g| g * av[0]).collect(),
                        Broadcast::ScalarRight => {
                            vec![gy.iter().zip(av).map(|(&g, &x)| g * x).sum()]
                        }
                    };
                    self.accumulate(acc, *b, || d);
                }
            }
            Op::Neg(a) => self.accumulate(acc, *a, || gy.iter().map(|&g| -g).collect()),
            Op::Exp(a) => {
                let x = self.node_value(*a);
                let y = &node.value;
                self.accumulate(acc, *a, || {
                    gy.iter()
                        .zip(x.iter().zip(y.iter()))
                        .map(|(&g, (&xi, &yi))| if xi < kernels::EXP_MAX { g * yi } else { 0.0 })
                        .collect()
                });
            }
            Op::Log(a) => {
                let x = self.node_value(*a);
                self.accumulate(acc, *a, || {
                    gy.iter()
                        .zip(x.iter())
                        .map(|(&g, &xi)| g / xi.max(kernels::LOG_EPS))
                        .collect()
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accumulate(acc, *a, || {
                    gy.iter()
                        .zip(y.iter())
                        .map(|(&g, &yi)| g * yi * (1.0 - yi))
                        .collect()
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accumulate(acc, *a, || {
                    gy.iter()
                        .zip(y.iter())
                        .map(|(&g, &yi)| g * (1.0 - yi * yi))
                        .collect()
                });
            }
            Op::LeakyRelu(a, alpha) => {
                let x = self.node_value(*a);
                let alpha = *alpha;
                self.accumulate(acc, *a, || {
                    gy.iter()
                        .zip(x.iter())
                        .map(|(&g, &xi)| if xi > 0.0 { g } else { g * alpha })
                        .collect()
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.node_value(*a);
                let (lo, hi) = (*lo, *hi);
                self.accumulate(acc, *a, || {
                    gy.iter()
                        .zip(x.iter())
                        .map(|(&g, &xi)| if xi > lo && xi < hi { g } else { 0.0 })
                        .collect()
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].tracked {
                    let bv = self.node_value(*b);
                    self.accumulate(acc, *a, || kernels::matmul_grad_a(gy, bv, m, k, n));
                }
                if self.nodes[*b].tracked {
                    let av = self.node_value(*a);
                    self.accumulate(acc, *b, || kernels::matmul_grad_b(av, gy, m, k, n));
                }
            }
            Op::BiasAdd(x, b) => {
                let (rows, n) = (node.shape[0], node.shape[1]);
                self.accumulate(acc, *x, || gy.to_vec());
                self.accumulate(acc, *b, || kernels::bias_add_grad_bias(gy, rows, n));
            }
            Op::Conv2d { x, w, bias, geom } => {
                if self.nodes[*x].tracked {
                    let wv = self.node_value(*w);
                    self.accumulate(acc, *x, || kernels::geom_input_grad(gy, wv, geom));
                }
                if self.nodes[*w].tracked {
                    let xv = self.node_value(*x);
                    self.accumulate(acc, *w, || kernels::geom_weight_grad(xv, gy, geom));
                }
                if self.nodes[*bias].tracked {
                    self.accumulate(acc, *bias, || {
                        kernels::channel_sums(gy, geom.batch, geom.oc, geom.out_spatial())
                    });
                }
            }
            Op::ConvT2d { x, w, bias, geom } => {
                if self.nodes[*x].tracked {
                    let wv = self.node_value(*w);
                    self.accumulate(acc, *x, || kernels::geom_forward(gy, wv, geom));
                }
                if self.nodes[*w].tracked {
                    let xv = self.node_value(*x);
                    // Roles swap under the adjoint: the upstream gradient sits
                    // on the underlying conv's input side.
                    self.accumulate(acc, *w, || kernels::geom_weight_grad(gy, xv, geom));
                }
                if self.nodes[*bias].tracked {
                    self.accumulate(acc, *bias, || {
                        kernels::channel_sums(gy, geom.batch, geom.ic, geom.in_spatial())
                    });
                }
            }
            Op::Reduce { x, axes, mean } => {
                let shape = &self.nodes[*x].shape;
                self.accumulate(acc, *x, || {
                    kernels::reduce_backward(gy, shape, axes.as_deref(), *mean)
                });
            }
            Op::Concat { parts, axis } => {
                let shapes: Vec<&[usize]> = parts
                    .iter()
                    .map(|&p| self.nodes[p].shape.as_slice())
                    .collect();
                let grads = kernels::concat_backward(gy, &shapes, *axis, &node.shape);
                for (&p, d) in parts.iter().zip(grads) {
                    self.accumulate(acc, p, || d);
                }
            }
            Op::Reshape(x) => self.accumulate(acc, *x, || gy.to_vec()),
            Op::SoftmaxCe {
                logits,
                targets,
                row_w,
                probs,
            } => {
                let shape = &self.nodes[*logits].shape;
                let (rows, cols) = (shape[0], shape[1]);
                self.accumulate(acc, *logits, || {
                    kernels::softmax_ce_backward(gy[0], probs, targets, row_w, rows, cols)
                });
            }
        }
        Ok(())
    }
}

/// Result of a backward sweep: per-node gradient accumulators.
pub struct Gradients {
    graph: u64,
    acc: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root w.r.t. `t`. Tracked tensors that were
    /// not on any path to the root get exact zeros.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let nr = t
            .node()
            .ok_or_else(|| UfdnError::Contract("gradient requested for untracked tensor".into()))?;
        if nr.graph != self.graph {
            return Err(UfdnError::Contract(
                "gradient requested for tensor from a different graph".into(),
            ));
        }
        match self.acc.get(nr.id).and_then(|o| o.as_ref()) {
            Some(buf) => Tensor::from_vec(t.shape(), buf.clone()),
            None => Ok(Tensor::zeros(t.shape())),
        }
    }
}
