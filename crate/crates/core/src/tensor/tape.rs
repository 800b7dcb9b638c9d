use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, ConvDims};
use super::{Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Square,
    Tanh,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive ops. Nodes are appended in evaluation order,
/// so walking the record backwards is a valid reverse topological order.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss for every leaf that required them.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index()).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn node(&self, var: Var) -> Result<&Node> {
        if var.tape != self.id {
            return Err(TensorError::UnknownVar);
        }
        self.nodes.get(var.index()).ok_or(TensorError::UnknownVar)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.node(var).expect("var from another tape").value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let var = Var {
            tape: self.id,
            index: self.nodes.len() as u32,
        };
        let value = value.with_grad(needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(var)
    }

    fn needs(&self, vars: &[Var]) -> Result<bool> {
        let mut any = false;
        for &v in vars {
            any |= self.node(v)?.needs_grad;
        }
        Ok(any)
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        let needs = tensor.requires_grad();
        self.push("leaf", tensor, Op::Leaf, needs)
    }

    pub fn param(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_grad(false))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let needs = self.needs(&[a, b])?;
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let out_shape = kernels::broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let out = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = kernels::aligned_strides(ta.shape(), &out_shape);
            let sb = kernels::aligned_strides(tb.shape(), &out_shape);
            let n: usize = out_shape.iter().product();
            let mut out = vec![0.0; n];
            let (da, db) = (ta.data(), tb.data());
            kernels::for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
            out
        };
        Ok((Tensor::new(out_shape, out)?, needs))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", t, Op::Div(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let n = self.node(x)?;
        let (t, needs) = (n.value.map(|v| v * c), n.needs_grad);
        self.push("scale", t, Op::Scale(x, c), needs)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let n = self.node(x)?;
        let (t, needs) = (n.value.map(|v| v + c), n.needs_grad);
        self.push("offset", t, Op::Offset(x), needs)
    }

    fn unary(&mut self, name: &'static str, x: Var, kind: Unary) -> Result<Var> {
        let n = self.node(x)?;
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |v| -v,
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |v| v * v,
            Unary::Tanh => f64::tanh,
            Unary::Gelu => kernels::gelu,
        };
        let (t, needs) = (n.value.map(f), n.needs_grad);
        self.push(name, t, Op::Unary(x, kind), needs)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, Unary::Neg)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Unary::Exp)
    }
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, Unary::Ln)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, Unary::Sqrt)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, Unary::Square)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Unary::Tanh)
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, Unary::Gelu)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a: [.., M, K]` times either a shared `b: [K, N]` or a batched
    /// `b: [.., K, N]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let needs = self.needs(&[a, b])?;
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb || (sb.len() > 2 && sb[..sb.len() - 2] != sa[..sa.len() - 2]) {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        if sb.len() == 2 {
            kernels::gemm(batch * m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), 0.0, &mut out, (n, 1));
        } else {
            for bi in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &ta.data()[bi * m * k..],
                    (k, 1),
                    &tb.data()[bi * k * n..],
                    (n, 1),
                    0.0,
                    &mut out[bi * m * n..],
                    (n, 1),
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), needs)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        let shape = n.value.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{axes:?} is not a permutation of {rank} axes"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = n.value.strides();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let zero = vec![0; rank];
        let src = n.value.data();
        let mut out = vec![0.0; src.len()];
        kernels::for_each_broadcast(&out_shape, &strides, &zero, |o, i, _| out[o] = src[i]);
        let needs = n.needs_grad;
        self.push("permute", Tensor::new(out_shape, out)?, Op::Permute(x, axes.to_vec()), needs)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.node(x)?.value.rank();
        if rank < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: "rank < 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        let t = n.value.reshape(shape)?;
        let needs = n.needs_grad;
        self.push("reshape", t, Op::Reshape(x), needs)
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let n = self.node(x)?;
        let shape = n.value.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                reason: format!("range {start}..{} outside extent {}", start + len, shape[axis]),
            });
        }
        let (outer, full, inner) = kernels::axis_split(shape, axis);
        let src = n.value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let needs = n.needs_grad;
        self.push("narrow", Tensor::new(out_shape, out)?, Op::Narrow { x, axis, start }, needs)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.node(*inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?)?;
        let base = first.value.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.node(v)?.value.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = &self.node(v)?.value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = self.needs(inputs)?;
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let (t, needs) = (Tensor::scalar(n.value.sum()), n.needs_grad);
        self.push("sum", t, Op::SumAll(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let (t, needs) = (Tensor::scalar(n.value.sum() / n.value.numel() as f64), n.needs_grad);
        self.push("mean", t, Op::MeanAll(x), needs)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = self.node(x)?;
        let shape = n.value.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = kernels::axis_split(shape, axis);
        let src = n.value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let needs = n.needs_grad;
        self.push("sum_axis", Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }, needs)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.node(x)?.value.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    /// Softmax along `axis`, evaluated with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let n = self.node(x)?;
        let y = kernels::softmax_axis(n.value.data(), n.value.shape(), axis, false);
        let (t, needs) = (Tensor::new(n.value.shape().to_vec(), y)?, n.needs_grad);
        self.push("softmax", t, Op::Softmax { x, axis }, needs)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let n = self.node(x)?;
        let y = kernels::softmax_axis(n.value.data(), n.value.shape(), axis, true);
        let (t, needs) = (Tensor::new(n.value.shape().to_vec(), y)?, n.needs_grad);
        self.push("log_softmax", t, Op::LogSoftmax { x, axis }, needs)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both of
    /// that axis' length). `eps` is added to the variance (1e-5 in the model).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let needs = self.needs(&[x, gain, bias])?;
        let (tx, tg, tb) = (&self.node(x)?.value, &self.node(gain)?.value, &self.node(bias)?.value);
        let d = *tx.shape().last().ok_or(TensorError::InvalidArgument {
            op: "layer_norm",
            reason: "scalar input".into(),
        })?;
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// 1-D cross-correlation of `x: [T, D]` or `[B, T, D]` with
    /// `kernels: [k, D, H]`; output length is `(T + 2*padding - k) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let needs = self.needs(&[x, w])?;
        let (tx, tw) = (&self.node(x)?.value, &self.node(w)?.value);
        let (batch, t_in, d_in) = match *tx.shape() {
            [t, d] => (1, t, d),
            [b, t, d] => (b, t, d),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "conv1d",
                    reason: format!("input must be [T, D] or [B, T, D], got {:?}", tx.shape()),
                })
            }
        };
        let [kernel, dk, h_out] = *tw.shape() else {
            return Err(TensorError::InvalidArgument {
                op: "conv1d",
                reason: format!("kernels must be [k, D, H], got {:?}", tw.shape()),
            });
        };
        if dk != d_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        if stride == 0 || kernel > t_in + 2 * padding {
            return Err(TensorError::InvalidArgument {
                op: "conv1d",
                reason: format!("empty output (T={t_in}, k={kernel}, padding={padding}, stride={stride})"),
            });
        }
        let t_out = (t_in + 2 * padding - kernel) / stride + 1;
        let dims = ConvDims {
            batch,
            t_in,
            d_in,
            t_out,
            kernel,
            h_out,
            stride,
            padding,
        };
        let out = kernels::conv1d_forward(tx.data(), tw.data(), &dims);
        let shape = if tx.rank() == 2 {
            vec![t_out, h_out]
        } else {
            vec![batch, t_out, h_out]
        };
        self.push(
            "conv1d",
            Tensor::new(shape, out)?,
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            },
            needs,
        )
    }

    /// Adds a positional table `pos` whose shape equals the trailing axes of `x`.
    pub fn embedding_add(&mut self, x: Var, pos: Var) -> Result<Var> {
        let (sx, sp) = (self.node(x)?.value.shape(), self.node(pos)?.value.shape());
        if sp.len() > sx.len() || sx[sx.len() - sp.len()..] != *sp {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_add",
                lhs: sx.to_vec(),
                rhs: sp.to_vec(),
            });
        }
        self.add(x, pos)
    }

    /// Reverse pass from a scalar `loss`. The tape is dead afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let ln = self.node(loss)?;
        if !ln.value.is_scalar() {
            return Err(TensorError::NotScalar(ln.value.shape().to_vec()));
        }
        self.consumed = true;
        let count = loss.index() + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(vec![1.0]);
        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { tape: self.id, grads: out })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.index()].value;
        let wants = |v: Var| nodes[v.index()].needs_grad;
        let take = |grads: &mut [Option<Vec<f64>>], v: Var| -> Option<Vec<f64>> {
            wants(v).then(|| {
                grads[v.index()]
                    .take()
                    .unwrap_or_else(|| vec![0.0; nodes[v.index()].value.numel()])
            })
        };
        let out_shape = node.value.shape();
        // Parent buffers are moved out, filled, and handed back through
        // `give`, which adds when the same parent appears twice.
        let mut pending: Vec<(Var, Vec<f64>)> = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(mut ga) = take(grads, *a) {
                    reduce_into(g, out_shape, val(*a).shape(), &mut ga, 1.0);
                    pending.push((*a, ga));
                }
                if let Some(mut gb) = take(grads, *b) {
                    reduce_into(g, out_shape, val(*b).shape(), &mut gb, sign);
                    pending.push((*b, gb));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let sa = kernels::aligned_strides(ta.shape(), out_shape);
                let sb = kernels::aligned_strides(tb.shape(), out_shape);
                let (da, db) = (ta.data(), tb.data());
                let div = matches!(node.op, Op::Div(..));
                if let Some(mut ga) = take(grads, *a) {
                    kernels::for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                        ga[i] += if div { g[o] / db[j] } else { g[o] * db[j] };
                    });
                    pending.push((*a, ga));
                }
                if let Some(mut gb) = take(grads, *b) {
                    kernels::for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                        gb[j] += if div {
                            -g[o] * da[i] / (db[j] * db[j])
                        } else {
                            g[o] * da[i]
                        };
                    });
                    pending.push((*b, gb));
                }
            }
            Op::Scale(x, c) => {
                if let Some(mut gx) = take(grads, *x) {
                    for (acc, gv) in gx.iter_mut().zip(g) {
                        *acc += c * gv;
                    }
                    pending.push((*x, gx));
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if let Some(mut gx) = take(grads, *x) {
                    for (acc, gv) in gx.iter_mut().zip(g) {
                        *acc += gv;
                    }
                    pending.push((*x, gx));
                }
            }
            Op::Unary(x, kind) => {
                let (xs, ys) = (val(*x).data(), node.value.data());
                if let Some(mut gx) = take(grads, *x) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Exp => ys[i],
                            Unary::Ln => 1.0 / xs[i],
                            Unary::Sqrt => 0.5 / ys[i],
                            Unary::Square => 2.0 * xs[i],
                            Unary::Tanh => 1.0 - ys[i] * ys[i],
                            Unary::Gelu => kernels::gelu_grad(xs[i]),
                        };
                        gx[i] += g[i] * d;
                    }
                    pending.push((*x, gx));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let shared = sb.len() == 2;
                if let Some(mut ga) = take(grads, *a) {
                    // dA = dC · Bᵀ
                    if shared {
                        kernels::gemm(batch * m, n, k, g, (n, 1), tb.data(), (1, n), 1.0, &mut ga, (k, 1));
                    } else {
                        for bi in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..],
                                (n, 1),
                                &tb.data()[bi * k * n..],
                                (1, n),
                                1.0,
                                &mut ga[bi * m * k..],
                                (k, 1),
                            );
                        }
                    }
                    pending.push((*a, ga));
                }
                if let Some(mut gb) = take(grads, *b) {
                    // dB = Aᵀ · dC
                    if shared {
                        kernels::gemm(k, batch * m, n, ta.data(), (1, k), g, (n, 1), 1.0, &mut gb, (n, 1));
                    } else {
                        for bi in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &ta.data()[bi * m * k..],
                                (1, k),
                                &g[bi * m * n..],
                                (n, 1),
                                1.0,
                                &mut gb[bi * k * n..],
                                (n, 1),
                            );
                        }
                    }
                    pending.push((*b, gb));
                }
            }
            Op::Permute(x, axes) => {
                if let Some(mut gx) = take(grads, *x) {
                    let in_strides = val(*x).strides();
                    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
                    let zero = vec![0; axes.len()];
                    kernels::for_each_broadcast(out_shape, &strides, &zero, |o, i, _| gx[i] += g[o]);
                    pending.push((*x, gx));
                }
            }
            Op::Narrow { x, axis, start } => {
                if let Some(mut gx) = take(grads, *x) {
                    let (outer, full, inner) = kernels::axis_split(val(*x).shape(), *axis);
                    let len = out_shape[*axis];
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += g[src + j];
                        }
                    }
                    pending.push((*x, gx));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis];
                    if let Some(mut gv) = take(grads, v) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for j in 0..len * inner {
                                gv[o * len * inner + j] += g[src + j];
                            }
                        }
                        give(grads, v, gv);
                    }
                    offset += len;
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let scale = if matches!(node.op, Op::MeanAll(_)) {
                    1.0 / val(*x).numel() as f64
                } else {
                    1.0
                };
                if let Some(mut gx) = take(grads, *x) {
                    for acc in gx.iter_mut() {
                        *acc += g[0] * scale;
                    }
                    pending.push((*x, gx));
                }
            }
            Op::SumAxis { x, axis } => {
                if let Some(mut gx) = take(grads, *x) {
                    let (outer, len, inner) = kernels::axis_split(val(*x).shape(), *axis);
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                gx[(o * len + a) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                    pending.push((*x, gx));
                }
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, len, inner) = kernels::axis_split(out_shape, *axis);
                let y = node.value.data();
                if let Some(mut gx) = take(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| o * len * inner + a * inner + i;
                            if log {
                                let total: f64 = (0..len).map(|a| g[at(a)]).sum();
                                for a in 0..len {
                                    gx[at(a)] += g[at(a)] - y[at(a)].exp() * total;
                                }
                            } else {
                                let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                                for a in 0..len {
                                    gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                                }
                            }
                        }
                    }
                    pending.push((*x, gx));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let rows = g.len() / d;
                let gain_v = val(*gain).data();
                if let Some(mut gg) = take(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    pending.push((*gain, gg));
                }
                if let Some(mut gb) = take(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    pending.push((*bias, gb));
                }
                if let Some(mut gx) = take(grads, *x) {
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gain_v[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gain_v[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    pending.push((*x, gx));
                }
            }
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let (batch, t_in, d_in) = match *tx.shape() {
                    [t, d] => (1, t, d),
                    [b, t, d] => (b, t, d),
                    _ => unreachable!("conv1d input rank checked in forward"),
                };
                let dims = ConvDims {
                    batch,
                    t_in,
                    d_in,
                    t_out: out_shape[out_shape.len() - 2],
                    kernel: tw.shape()[0],
                    h_out: tw.shape()[2],
                    stride: *stride,
                    padding: *padding,
                };
                let mut dx = take(grads, *x);
                let mut dw = take(grads, *w);
                kernels::conv1d_backward(tx.data(), tw.data(), g, &dims, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    pending.push((*x, dx));
                }
                if let Some(dw) = dw {
                    pending.push((*w, dw));
                }
            }
        }
        for (v, buf) in pending {
            give(grads, v, buf);
        }
    }
}

fn give(grads: &mut [Option<Vec<f64>>], v: Var, buf: Vec<f64>) {
    match &mut grads[v.index()] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(buf) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(buf),
    }
}

/// Accumulates `sign * g` into `target`, summing over axes broadcast in the forward pass.
fn reduce_into(g: &[f64], out_shape: &[usize], in_shape: &[usize], target: &mut [f64], sign: f64) {
    if in_shape == out_shape {
        for (acc, &gv) in target.iter_mut().zip(g) {
            *acc += sign * gv;
        }
        return;
    }
    let s = kernels::aligned_strides(in_shape, out_shape);
    let zero = vec![0; out_shape.len()];
    kernels::for_each_broadcast(out_shape, &s, &zero, |o, i, _| target[i] += sign * g[o]);
}
