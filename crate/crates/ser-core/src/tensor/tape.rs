//! Reverse-mode differentiation on a flat operation tape.
//!
//! The tape is an arena of nodes in topological order: every primitive pushes
//! its result (plus any state its backward rule needs) and hands back a
//! [`VarId`]. [`Tape::backward`] then makes a single reverse sweep,
//! accumulating vector-Jacobian products only into nodes that require
//! gradients — frozen parameters, and entire subgraphs that feed nothing
//! trainable, cost no backward work at all.
//!
//! Every primitive checks its output for non-finite values and fails fast,
//! so a NaN surfaces with the name of the operation that produced it instead
//! of reappearing later as a corrupted update.

use std::collections::BTreeMap;

use rand::Rng;

use super::ctc;
use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::{axis_split, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

/// How the right operand of a binary op was broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    /// Identical shapes.
    Same,
    /// Right operand holds one value.
    Scalar,
    /// Right operand is one row, repeated down the rows of the left.
    Row,
    /// Right operand is one column, repeated across the columns of the left.
    Col,
}

enum Op {
    Leaf,
    Reshape(usize),
    /// `a[m,k] @ b[k,n]`
    Matmul(usize, usize),
    /// `a[m,k] @ b[n,k]^T`
    MatmulABt(usize, usize),
    Add(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    SumAxis {
        x: usize,
        axis: usize,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    /// Row-wise over the last axis.
    Softmax(usize),
    /// Row-wise over the last axis.
    LogSoftmax(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    /// `x[t_in, c_in]` filtered by `w[c_out, k*c_in]` (kernel-position-major
    /// rows), left-padded with `pad_left` zero frames, output length
    /// `ceil(t_in / stride)`.
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad_left: usize,
    },
    /// Negative log-likelihood of `targets` under per-frame log-probs.
    CtcLoss {
        lp: usize,
        targets: Vec<usize>,
        blank: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Reshape(_) => "reshape",
            Op::Matmul(..) => "matmul",
            Op::MatmulABt(..) => "matmul_abt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Conv1d { .. } => "conv1d",
            Op::CtcLoss { .. } => "ctc_loss",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the value at `id`, if any
    /// reached it.
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Records a forward pass and differentiates it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// name -> (node id, trainable)
    params: BTreeMap<String, (usize, bool)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value held at `id`.
    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Result<VarId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    fn rg(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record an input or constant; it never receives a gradient.
    pub fn watch(&mut self, value: &Tensor) -> Result<VarId> {
        self.push(value.clone(), false, Op::Leaf)
    }

    /// Record a named parameter. Frozen (`trainable = false`) parameters
    /// participate in the forward pass but are pruned from the backward
    /// sweep, together with anything that only feeds them.
    pub fn bind(&mut self, name: &str, value: &Tensor, trainable: bool) -> Result<VarId> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidOp {
                op: "bind",
                msg: format!("parameter '{name}' bound twice"),
            });
        }
        let id = self.push(value.clone(), trainable, Op::Leaf)?;
        self.params.insert(name.to_string(), (id.0, trainable));
        Ok(id)
    }

    // ---- forward primitives -------------------------------------------------

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let v = self.nodes[x.0].value.clone().reshaped(shape.to_vec())?;
        self.push(v, self.rg(x), Op::Reshape(x.0))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (asp, bsp) = (av.shape(), bv.shape());
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: asp.to_vec(),
                rhs: bsp.to_vec(),
            });
        }
        let (m, k, n) = (asp[0], asp[1], bsp[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::mm(av.data(), bv.data(), m, k, n, out.data_mut());
        self.push(out, self.rg(a) || self.rg(b), Op::Matmul(a.0, b.0))
    }

    /// `a @ b^T`; the rows of `b` become the output columns. This is the
    /// natural orientation for affine layers whose weights are stored
    /// `[out, in]`.
    pub fn matmul_abt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (asp, bsp) = (av.shape(), bv.shape());
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_abt",
                lhs: asp.to_vec(),
                rhs: bsp.to_vec(),
            });
        }
        let (m, k, n) = (asp[0], asp[1], bsp[0]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::mm_abt(av.data(), bv.data(), m, k, n, out.data_mut());
        self.push(out, self.rg(a) || self.rg(b), Op::MatmulABt(a.0, b.0))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let bc = infer_bcast(
            "add",
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
        )?;
        let out = apply_binary(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            bc,
            |x, y| x + y,
        );
        self.push(out, self.rg(a) || self.rg(b), Op::Add(a.0, b.0, bc))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let bc = infer_bcast(
            "mul",
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
        )?;
        let out = apply_binary(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            bc,
            |x, y| x * y,
        );
        self.push(out, self.rg(a) || self.rg(b), Op::Mul(a.0, b.0, bc))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> Result<VarId> {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data_mut() {
            *v *= c;
        }
        self.push(out, self.rg(x), Op::Scale(x.0, c))
    }

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::InvalidOp {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidOp {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut total = 0;
        for p in parts {
            let sp = self.nodes[p.0].value.shape();
            let compatible = sp.len() == first.len()
                && sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (l, r))| i == axis || l == r);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: sp.to_vec(),
                });
            }
            total += sp[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            let len = pv.shape()[axis];
            for o in 0..outer {
                let src = &pv.data()[o * len * inner..(o + 1) * len * inner];
                let dst_at = (o * total + offset) * inner;
                data[dst_at..dst_at + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let out = Tensor::new(out_shape, data)?;
        self.push(
            out,
            rg,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let xv = &self.nodes[x.0].value;
        let sp = xv.shape();
        if axis >= sp.len() || start + len > sp[axis] || len == 0 {
            return Err(Error::InvalidOp {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {sp:?}", start + len),
            });
        }
        let (outer, full, inner) = axis_split(sp, axis);
        let mut out_shape = sp.to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_at = (o * full + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&xv.data()[src_at..src_at + len * inner]);
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(out, self.rg(x), Op::Slice { x: x.0, axis, start })
    }

    pub fn sum_axis(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let out = reduce_axis(&self.nodes[x.0].value, axis, false)?;
        self.push(out, self.rg(x), Op::SumAxis { x: x.0, axis })
    }

    pub fn mean_axis(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let out = reduce_axis(&self.nodes[x.0].value, axis, true)?;
        self.push(out, self.rg(x), Op::MeanAxis { x: x.0, axis })
    }

    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        let xv = &self.nodes[x.0].value;
        let (rows, n) = last_axis_rows(xv.shape());
        let mut out = xv.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(out, self.rg(x), Op::Softmax(x.0))
    }

    pub fn log_softmax(&mut self, x: VarId) -> Result<VarId> {
        let xv = &self.nodes[x.0].value;
        let (rows, n) = last_axis_rows(xv.shape());
        let mut out = xv.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, self.rg(x), Op::LogSoftmax(x.0))
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        self.push(out, self.rg(x), Op::Relu(x.0))
    }

    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data_mut() {
            *v = gelu_value(*v);
        }
        self.push(out, self.rg(x), Op::Gelu(x.0))
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data_mut() {
            *v = sigmoid_value(*v);
        }
        self.push(out, self.rg(x), Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: VarId) -> Result<VarId> {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        self.push(out, self.rg(x), Op::Tanh(x.0))
    }

    /// Normalize each row over the last axis, then scale and shift it.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let xv = &self.nodes[x.0].value;
        let (rows, n) = last_axis_rows(xv.shape());
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        if gv.numel() != n || bv.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..rows {
            let row = &mut xhat.data_mut()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            let out_row = &mut out.data_mut()[r * n..(r + 1) * n];
            for j in 0..n {
                row[j] = (row[j] - mean) * is;
                out_row[j] = row[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )
    }

    /// Zero each element with probability `p` and rescale the survivors by
    /// `1 / (1 - p)`. `p == 0` is the identity and records nothing.
    pub fn dropout<R: Rng>(&mut self, x: VarId, p: f64, rng: &mut R) -> Result<VarId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidOp {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = &self.nodes[x.0].value;
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut out = xv.clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(out, self.rg(x), Op::Dropout { x: x.0, mask })
    }

    /// Strided 1-D convolution over time-major input.
    ///
    /// `x` is `[t_in, c_in]`, `w` is `[c_out, k * c_in]` with rows laid out
    /// kernel-position-major (`w[o, j*c_in + c]`), `b` holds `c_out` values.
    /// The input is padded with `pad_left` zero frames on the left and as
    /// many zero frames on the right as the last window needs; the output
    /// has `ceil(t_in / stride)` frames.
    pub fn conv1d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad_left: usize,
    ) -> Result<VarId> {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (xsp, wsp) = (xv.shape(), wv.shape());
        if xsp.len() != 2 || wsp.len() != 2 || wsp[1] % xsp[1] != 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: xsp.to_vec(),
                rhs: wsp.to_vec(),
            });
        }
        let (t_in, c_in) = (xsp[0], xsp[1]);
        let (c_out, k) = (wsp[0], wsp[1] / c_in);
        if bv.numel() != c_out {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: wsp.to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        if stride == 0 || pad_left >= k {
            return Err(Error::InvalidOp {
                op: "conv1d",
                msg: format!("stride {stride}, pad_left {pad_left}, kernel {k}"),
            });
        }
        if t_in + pad_left < k {
            return Err(Error::AudioTooShort {
                len: t_in,
                min: k - pad_left,
            });
        }
        let t_out = t_in.div_ceil(stride);
        let mut out = Tensor::zeros(&[t_out, c_out]);
        {
            let y = out.data_mut();
            for t in 0..t_out {
                let (j0, j1, x_lo) = conv_window(t, stride, pad_left, k, t_in);
                let x_win = &xv.data()[x_lo * c_in..(x_lo + (j1 - j0)) * c_in];
                let y_row = &mut y[t * c_out..(t + 1) * c_out];
                for (o, yv) in y_row.iter_mut().enumerate() {
                    let w_row = &wv.data()[o * k * c_in + j0 * c_in..o * k * c_in + j1 * c_in];
                    *yv = bv.data()[o] + kernels::dot(w_row, x_win);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            out,
            rg,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad_left,
            },
        )
    }

    /// Negative log-likelihood of a label sequence under per-frame
    /// log-probabilities `lp` of shape `[t, classes]`.
    pub fn ctc_loss(&mut self, lp: VarId, targets: &[usize], blank: usize) -> Result<VarId> {
        let lv = &self.nodes[lp.0].value;
        let sp = lv.shape();
        if sp.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "ctc_loss",
                lhs: sp.to_vec(),
                rhs: vec![],
            });
        }
        let loss = ctc::loss(lv.data(), sp[0], sp[1], targets, blank)?;
        let out = Tensor::new(vec![1, 1], vec![loss])?;
        self.push(
            out,
            self.rg(lp),
            Op::CtcLoss {
                lp: lp.0,
                targets: targets.to_vec(),
                blank,
            },
        )
    }

    // ---- backward -----------------------------------------------------------

    /// Differentiate the scalar at `loss` with respect to every node that
    /// requires a gradient.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.accumulate(id, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Gradients for every trainable bound parameter, keyed by name.
    /// Trainable parameters the loss never touched come back as zeros.
    pub fn trainable_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .map(|(name, (id, _))| {
                let g = grads.grads[*id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[*id].value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate(&self, id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(self.grad_buf(grads, *x), dy.data());
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let g = self.grad_buf(grads, *a);
                    kernels::mm_abt(dy.data(), bv.data(), m, n, k, g.data_mut());
                }
                if self.wants(*b) {
                    let g = self.grad_buf(grads, *b);
                    kernels::mm_atb(av.data(), dy.data(), m, k, n, g.data_mut());
                }
            }
            Op::MatmulABt(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.wants(*a) {
                    let g = self.grad_buf(grads, *a);
                    kernels::mm(dy.data(), bv.data(), m, n, k, g.data_mut());
                }
                if self.wants(*b) {
                    let g = self.grad_buf(grads, *b);
                    kernels::mm_atb(dy.data(), av.data(), m, n, k, g.data_mut());
                }
            }
            Op::Add(a, b, bc) => {
                if self.wants(*a) {
                    add_into(self.grad_buf(grads, *a), dy.data());
                }
                if self.wants(*b) {
                    reduce_into(dy, *bc, self.grad_buf(grads, *b));
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.wants(*a) {
                    let g = self.grad_buf(grads, *a);
                    mul_bcast_into(dy, bv, *bc, g);
                }
                if self.wants(*b) {
                    let prod = apply_binary(dy, av, Bcast::Same, |x, y| x * y);
                    reduce_into(&prod, *bc, self.grad_buf(grads, *b));
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    let g = self.grad_buf(grads, *x);
                    for (gv, dv) in g.data_mut().iter_mut().zip(dy.data()) {
                        *gv += c * dv;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[id].value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[*p].value.shape()[*axis];
                    if self.wants(*p) {
                        let g = self.grad_buf(grads, *p);
                        for o in 0..outer {
                            let src_at = (o * total + offset) * inner;
                            let dst = &mut g.data_mut()[o * len * inner..(o + 1) * len * inner];
                            add_slice(dst, &dy.data()[src_at..src_at + len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let len = self.nodes[id].value.shape()[*axis];
                    let (outer, full, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                    let g = self.grad_buf(grads, *x);
                    for o in 0..outer {
                        let dst_at = (o * full + start) * inner;
                        let dst = &mut g.data_mut()[dst_at..dst_at + len * inner];
                        add_slice(dst, &dy.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                    let scale = if matches!(self.nodes[id].op, Op::MeanAxis { .. }) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let g = self.grad_buf(grads, *x);
                    for o in 0..outer {
                        let src = &dy.data()[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst =
                                &mut g.data_mut()[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += scale * s;
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let yv = &self.nodes[id].value;
                    let (rows, n) = last_axis_rows(yv.shape());
                    let g = self.grad_buf(grads, *x);
                    for r in 0..rows {
                        let y = &yv.data()[r * n..(r + 1) * n];
                        let d = &dy.data()[r * n..(r + 1) * n];
                        let s = kernels::dot(y, d);
                        let gr = &mut g.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            gr[j] += y[j] * (d[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if self.wants(*x) {
                    let yv = &self.nodes[id].value;
                    let (rows, n) = last_axis_rows(yv.shape());
                    let g = self.grad_buf(grads, *x);
                    for r in 0..rows {
                        let y = &yv.data()[r * n..(r + 1) * n];
                        let d = &dy.data()[r * n..(r + 1) * n];
                        let s: f64 = d.iter().sum();
                        let gr = &mut g.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            gr[j] += d[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let yv = &self.nodes[id].value;
                    let g = self.grad_buf(grads, *x);
                    for ((gv, yv), dv) in g.data_mut().iter_mut().zip(yv.data()).zip(dy.data()) {
                        if *yv > 0.0 {
                            *gv += dv;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = &self.nodes[*x].value;
                    let g = self.grad_buf(grads, *x);
                    for ((gv, xv), dv) in g.data_mut().iter_mut().zip(xv.data()).zip(dy.data()) {
                        *gv += gelu_derivative(*xv) * dv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let yv = &self.nodes[id].value;
                    let g = self.grad_buf(grads, *x);
                    for ((gv, yv), dv) in g.data_mut().iter_mut().zip(yv.data()).zip(dy.data()) {
                        *gv += yv * (1.0 - yv) * dv;
                    }
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let yv = &self.nodes[id].value;
                    let g = self.grad_buf(grads, *x);
                    for ((gv, yv), dv) in g.data_mut().iter_mut().zip(yv.data()).zip(dy.data()) {
                        *gv += (1.0 - yv * yv) * dv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, n) = last_axis_rows(xhat.shape());
                let gv = &self.nodes[*gamma].value;
                if self.wants(*x) {
                    let g = self.grad_buf(grads, *x);
                    for r in 0..rows {
                        let xh = &xhat.data()[r * n..(r + 1) * n];
                        let d = &dy.data()[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dxh = d[j] * gv.data()[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        let (s1, s2) = (s1 / n as f64, s2 / n as f64);
                        let gr = &mut g.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            let dxh = d[j] * gv.data()[j];
                            gr[j] += inv_std[r] * (dxh - s1 - xh[j] * s2);
                        }
                    }
                }
                if self.wants(*gamma) {
                    let g = self.grad_buf(grads, *gamma);
                    for r in 0..rows {
                        let xh = &xhat.data()[r * n..(r + 1) * n];
                        let d = &dy.data()[r * n..(r + 1) * n];
                        for (j, gg) in g.data_mut().iter_mut().enumerate() {
                            *gg += d[j] * xh[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let g = self.grad_buf(grads, *beta);
                    for r in 0..rows {
                        let d = &dy.data()[r * n..(r + 1) * n];
                        for (gg, dv) in g.data_mut().iter_mut().zip(d) {
                            *gg += dv;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let g = self.grad_buf(grads, *x);
                    for ((gv, dv), m) in g.data_mut().iter_mut().zip(dy.data()).zip(mask) {
                        *gv += dv * m;
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (t_in, c_in) = (xv.shape()[0], xv.shape()[1]);
                let (c_out, k) = (wv.shape()[0], wv.shape()[1] / c_in);
                let t_out = self.nodes[id].value.shape()[0];
                if self.wants(*b) {
                    let g = self.grad_buf(grads, *b);
                    for t in 0..t_out {
                        let d = &dy.data()[t * c_out..(t + 1) * c_out];
                        for (gg, dv) in g.data_mut().iter_mut().zip(d) {
                            *gg += dv;
                        }
                    }
                }
                for t in 0..t_out {
                    let (j0, j1, x_lo) = conv_window(t, *stride, *pad_left, k, t_in);
                    let width = (j1 - j0) * c_in;
                    for o in 0..c_out {
                        let g_out = dy.data()[t * c_out + o];
                        if self.wants(*w) {
                            let x_win = &xv.data()[x_lo * c_in..x_lo * c_in + width];
                            let g = self.grad_buf(grads, *w);
                            let gw =
                                &mut g.data_mut()[o * k * c_in + j0 * c_in..][..width];
                            for (gg, xx) in gw.iter_mut().zip(x_win) {
                                *gg += g_out * xx;
                            }
                        }
                        if self.wants(*x) {
                            let w_row = &wv.data()[o * k * c_in + j0 * c_in..][..width];
                            let g = self.grad_buf(grads, *x);
                            let gx = &mut g.data_mut()[x_lo * c_in..][..width];
                            for (gg, ww) in gx.iter_mut().zip(w_row) {
                                *gg += g_out * ww;
                            }
                        }
                    }
                }
            }
            Op::CtcLoss { lp, targets, blank } => {
                if self.wants(*lp) {
                    let lv = &self.nodes[*lp].value;
                    let (t, c) = (lv.shape()[0], lv.shape()[1]);
                    let upstream = dy.data()[0];
                    let lp_data = lv.data().to_vec();
                    let g = self.grad_buf(grads, *lp);
                    ctc::grad(&lp_data, t, c, targets, *blank, upstream, g.data_mut())?;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Gradient buffer for `id`, created zeroed on first touch.
    #[allow(clippy::mut_from_ref)]
    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], id: usize) -> &'g mut Tensor {
        let shape = self.nodes[id].value.shape();
        grads[id].get_or_insert_with(|| Tensor::zeros(shape))
    }
}

fn last_axis_rows(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().expect("tensors have at least one axis");
    (shape.iter().product::<usize>() / n, n)
}

fn infer_bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    if b.iter().product::<usize>() == 1 {
        return Ok(Bcast::Scalar);
    }
    if a.len() == 2 {
        if b == [1, a[1]] || (b.len() == 1 && b[0] == a[1]) {
            return Ok(Bcast::Row);
        }
        if b == [a[0], 1] {
            return Ok(Bcast::Col);
        }
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

fn apply_binary(a: &Tensor, b: &Tensor, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    match bc {
        Bcast::Same => {
            for (o, bv) in out.data_mut().iter_mut().zip(b.data()) {
                *o = f(*o, *bv);
            }
        }
        Bcast::Scalar => {
            let bv = b.data()[0];
            for o in out.data_mut() {
                *o = f(*o, bv);
            }
        }
        Bcast::Row => {
            let n = b.numel();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o = f(*o, b.data()[i % n]);
            }
        }
        Bcast::Col => {
            let n = a.shape()[1];
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o = f(*o, b.data()[i / n]);
            }
        }
    }
    out
}

/// Sum `dy` down to the broadcast operand's shape and add it to `g`.
fn reduce_into(dy: &Tensor, bc: Bcast, g: &mut Tensor) {
    match bc {
        Bcast::Same => add_into(g, dy.data()),
        Bcast::Scalar => g.data_mut()[0] += dy.data().iter().sum::<f64>(),
        Bcast::Row => {
            let n = g.numel();
            for (i, dv) in dy.data().iter().enumerate() {
                g.data_mut()[i % n] += dv;
            }
        }
        Bcast::Col => {
            let n = dy.shape()[1];
            for (i, dv) in dy.data().iter().enumerate() {
                g.data_mut()[i / n] += dv;
            }
        }
    }
}

/// `g += dy * broadcast(b)` for the left operand of a product.
fn mul_bcast_into(dy: &Tensor, b: &Tensor, bc: Bcast, g: &mut Tensor) {
    match bc {
        Bcast::Same => {
            for ((gv, dv), bv) in g.data_mut().iter_mut().zip(dy.data()).zip(b.data()) {
                *gv += dv * bv;
            }
        }
        Bcast::Scalar => {
            let bv = b.data()[0];
            for (gv, dv) in g.data_mut().iter_mut().zip(dy.data()) {
                *gv += dv * bv;
            }
        }
        Bcast::Row => {
            let n = b.numel();
            for (i, (gv, dv)) in g.data_mut().iter_mut().zip(dy.data()).enumerate() {
                *gv += dv * b.data()[i % n];
            }
        }
        Bcast::Col => {
            let n = dy.shape()[1];
            for (i, (gv, dv)) in g.data_mut().iter_mut().zip(dy.data()).enumerate() {
                *gv += dv * b.data()[i / n];
            }
        }
    }
}

fn add_into(g: &mut Tensor, src: &[f64]) {
    add_slice(g.data_mut(), src);
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn reduce_axis(x: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
    let sp = x.shape();
    if axis >= sp.len() {
        return Err(Error::InvalidOp {
            op: if mean { "mean_axis" } else { "sum_axis" },
            msg: format!("axis {axis} out of range for shape {sp:?}"),
        });
    }
    let (outer, len, inner) = axis_split(sp, axis);
    let mut out_shape = sp.to_vec();
    out_shape[axis] = 1;
    let mut out = Tensor::zeros(&out_shape);
    for o in 0..outer {
        for l in 0..len {
            let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
            let dst = &mut out.data_mut()[o * inner..(o + 1) * inner];
            add_slice(dst, src);
        }
    }
    if mean {
        for v in out.data_mut() {
            *v /= len as f64;
        }
    }
    Ok(out)
}

/// Valid kernel positions `[j0, j1)` for output frame `t`, plus the input
/// frame the window starts at. Positions outside read zero padding.
fn conv_window(
    t: usize,
    stride: usize,
    pad_left: usize,
    k: usize,
    t_in: usize,
) -> (usize, usize, usize) {
    let base = (t * stride) as isize - pad_left as isize;
    let j0 = (-base).max(0) as usize;
    let j1 = k.min(((t_in as isize - base).max(0)) as usize);
    let j1 = j1.max(j0);
    ((j0), (j1), (base + j0 as isize) as usize)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut tape = Tape::new();
        let eye = tape
            .watch(&tensor(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]))
            .unwrap();
        let a = tape
            .watch(&tensor(&[3, 2], &[1., 2., 3., 4., 5., 6.]))
            .unwrap();
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.watch(&tensor(&[1, 4], &[0.0; 4])).unwrap();
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn square_sum_gradient() {
        // d/dw sum(w * w) = 2w
        let mut tape = Tape::new();
        let w = tape.bind("w", &tensor(&[1, 2], &[1.0, 2.0]), true).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_axis(sq, 1).unwrap();
        let grads = tape.backward(loss).unwrap();
        let named = tape.trainable_grads(&grads);
        assert_eq!(named["w"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn mismatched_matmul_errors() {
        let mut tape = Tape::new();
        let a = tape.watch(&Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.watch(&Tensor::zeros(&[4, 5])).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut tape = Tape::new();
        let frozen = tape
            .bind("frozen", &tensor(&[1, 2], &[3.0, 4.0]), false)
            .unwrap();
        let live = tape.bind("live", &tensor(&[1, 2], &[1.0, 1.0]), true).unwrap();
        let prod = tape.mul(frozen, live).unwrap();
        let loss = tape.sum_axis(prod, 1).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        let named = tape.trainable_grads(&grads);
        assert_eq!(named.len(), 1);
        assert_eq!(named["live"].data(), &[3.0, 4.0]);
    }

    #[test]
    fn untouched_trainable_parameter_reports_zeros() {
        let mut tape = Tape::new();
        let used = tape.bind("used", &tensor(&[1, 1], &[2.0]), true).unwrap();
        tape.bind("unused", &tensor(&[1, 3], &[1.0, 2.0, 3.0]), true)
            .unwrap();
        let loss = tape.mul(used, used).unwrap();
        let grads = tape.backward(loss).unwrap();
        let named = tape.trainable_grads(&grads);
        assert_eq!(named["unused"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(named["used"].data(), &[4.0]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a = tape.watch(&tensor(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = tape.watch(&tensor(&[2, 3], &[5., 6., 7., 8., 9., 10.])).unwrap();
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 5]);
        let back = tape.slice(cat, 1, 2, 3).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
        let front = tape.slice(cat, 1, 0, 2).unwrap();
        assert_eq!(tape.value(front), tape.value(a));
    }

    #[test]
    fn dropout_zeroes_and_rescales() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::full(&[10, 10], 2.0)).unwrap();
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let mut zeros = 0;
        for v in tape.value(y).data() {
            assert!(*v == 0.0 || (*v - 4.0).abs() < 1e-15);
            if *v == 0.0 {
                zeros += 1;
            }
        }
        assert!(zeros > 20 && zeros < 80, "suspicious mask: {zeros} zeros");
        // p == 0 is a true identity: same node comes back.
        let same = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn conv1d_matches_direct_summation() {
        let mut tape = Tape::new();
        let t_in = 9;
        let c_in = 2;
        let (c_out, k, stride, pad) = (3, 4, 2, 1);
        let x = tensor(
            &[t_in, c_in],
            &(0..t_in * c_in).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(),
        );
        let w = tensor(
            &[c_out, k * c_in],
            &(0..c_out * k * c_in)
                .map(|i| (i as f64 * 0.73).cos())
                .collect::<Vec<_>>(),
        );
        let b = tensor(&[1, c_out], &[0.1, -0.2, 0.3]);
        let xi = tape.watch(&x).unwrap();
        let wi = tape.watch(&w).unwrap();
        let bi = tape.watch(&b).unwrap();
        let y = tape.conv1d(xi, wi, bi, stride, pad).unwrap();
        let t_out = t_in.div_ceil(stride);
        assert_eq!(tape.value(y).shape(), &[t_out, c_out]);
        for t in 0..t_out {
            for o in 0..c_out {
                let mut want = b.data()[o];
                for j in 0..k {
                    let src = t as isize * stride as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < t_in {
                        for c in 0..c_in {
                            want += w.at(o, j * c_in + c) * x.at(src as usize, c);
                        }
                    }
                }
                assert!((tape.value(y).at(t, o) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ctc_two_frame_single_label() {
        // Two frames, one label, uniform over {label, blank}: paths are
        // (l,l), (l,-), (-,l) so P = 3/4 and the loss is -ln(0.75).
        let mut tape = Tape::new();
        let lp = tape
            .watch(&tensor(&[2, 2], &[0.5f64.ln(); 4]))
            .unwrap();
        let loss = tape.ctc_loss(lp, &[0], 1).unwrap();
        assert!((tape.value(loss).item() - 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut tape = Tape::new();
        let x = tape
            .watch(&tensor(&[2, 4], &[1., 2., 3., 4., -1., 0., 1., 2.]))
            .unwrap();
        let gamma = tape.watch(&Tensor::full(&[1, 4], 1.0)).unwrap();
        let beta = tape.watch(&Tensor::zeros(&[1, 4])).unwrap();
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for r in 0..2 {
            let row: Vec<f64> = (0..4).map(|j| tape.value(y).at(r, j)).collect();
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn non_finite_results_fail_fast() {
        let mut tape = Tape::new();
        let x = tape.watch(&tensor(&[1, 2], &[1.0, 2.0])).unwrap();
        let err = tape.scale(x, f64::INFINITY).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.bind("w", &tensor(&[1, 2], &[1.0, 2.0]), true).unwrap();
        let y = tape.mul(w, w).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn duplicate_binding_rejected() {
        let mut tape = Tape::new();
        tape.bind("p", &Tensor::zeros(&[1, 1]), true).unwrap();
        assert!(tape.bind("p", &Tensor::zeros(&[1, 1]), true).is_err());
    }
}
