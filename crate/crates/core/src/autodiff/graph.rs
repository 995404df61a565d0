//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use crate::autodiff::kernels::{self, broadcast_shape, for_each_broadcast, split_axis};
use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside this module.
pub trait CustomOp<F: Real> {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input (None when the input gets none).
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_out: &[F],
    ) -> Vec<Option<Vec<F>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Sqrt,
    Square,
    Neg,
}

/// The elementwise family exposed as a single entry point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Exp,
    Log,
    Tanh,
}

enum Op<F: Real> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, x: Var },
    Scale { x: Var, k: F },
    Shift(Var),
    ClampMin { x: Var, min: F },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    SliceLast { x: Var, start: usize, len: usize },
    ConcatLast(Vec<Var>),
    Unfold { x: Var, kernel: usize, stride: usize, pad: usize },
    Pick { x: Var, idx: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<F>> },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Vec<F>>>,
    visited: usize,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a leaf. Gradient tracking follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Registers a copy of `t` (without its gradient buffer).
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("valid tensor")
            .with_requires_grad(t.requires_grad());
        self.leaf(copy)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone().with_requires_grad(false);
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![F::zero(); m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if trans_b {
            kernels::mm_nt(da, db, &mut out, m, k, n);
        } else {
            kernels::mm_nn(da, db, &mut out, m, k, n);
        }
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[2]));
        }
        let data = kernels::transpose(self.value(x).data(), s[0], s[1]);
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![s[1], s[0]], data)?, Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape("broadcast", &sa, &sb))?;
        let mut out = vec![F::zero(); numel(&out_shape)];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let f: fn(F, F) -> F = match kind {
                BinaryKind::Add => |x, y| x + y,
                BinaryKind::Sub => |x, y| x - y,
                BinaryKind::Mul => |x, y| x * y,
                BinaryKind::Div => |x, y| x / y,
            };
            for_each_broadcast(&sa, &sb, &out_shape, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        }
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary { kind, a, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f: fn(F) -> F = match kind {
            UnaryKind::Relu => |v| if v > F::zero() { v } else { F::zero() },
            UnaryKind::Exp => |v| v.exp(),
            UnaryKind::Log => |v| v.ln(),
            UnaryKind::Tanh => |v| v.tanh(),
            UnaryKind::Sigmoid => |v| F::one() / (F::one() + (-v).exp()),
            UnaryKind::Sqrt => |v| v.sqrt(),
            UnaryKind::Square => |v| v * v,
            UnaryKind::Neg => |v| -v,
        };
        let src = self.value(x);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let needs = self.any_grad(&[x]);
        self.push(t, Op::Unary { kind, x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Dim {
                op: "elementwise arity",
                expected: arity,
                actual: inputs.len(),
            });
        }
        Ok(match op {
            Elementwise::Add => self.add(inputs[0], inputs[1])?,
            Elementwise::Mul => self.mul(inputs[0], inputs[1])?,
            Elementwise::Relu => self.relu(inputs[0]),
            Elementwise::Exp => self.exp(inputs[0]),
            Elementwise::Log => self.log(inputs[0]),
            Elementwise::Tanh => self.tanh(inputs[0]),
        })
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let src = self.value(x);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v * k).collect())
            .expect("same shape");
        let needs = self.any_grad(&[x]);
        self.push(t, Op::Scale { x, k }, needs)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, c: F) -> Var {
        let src = self.value(x);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v + c).collect())
            .expect("same shape");
        let needs = self.any_grad(&[x]);
        self.push(t, Op::Shift(x), needs)
    }

    pub fn clamp_min(&mut self, x: Var, min: F) -> Var {
        let src = self.value(x);
        let t = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| if v > min { v } else { min }).collect(),
        )
        .expect("same shape");
        let needs = self.any_grad(&[x]);
        self.push(t, Op::ClampMin { x, min }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let needs = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = F::lit(self.value(x).numel() as f64);
        let s = self.sum_all(x);
        self.scale(s, F::one() / n)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        Ok(())
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }, needs))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let n = F::lit(self.shape(x)[axis] as f64);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, F::one() / n))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = map_axis(self.value(x).data(), &shape, axis, |lane, dst| {
            let m = lane.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (d, &v) in dst.iter_mut().zip(lane) {
                *d = (v - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        });
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, needs))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = map_axis(self.value(x).data(), &shape, axis, |lane, dst| {
            let lse = logsumexp_slice(lane.iter().copied());
            for (d, &v) in dst.iter_mut().zip(lane) {
                *d = v - lse;
            }
        });
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, axis }, needs))
    }

    /// Log-sum-exp along `axis`; the axis is removed from the shape.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                out[o * inner + i] =
                    logsumexp_slice((0..n).map(|j| src[(o * n + j) * inner + i]));
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::LogSumExp { x, axis }, needs))
    }

    /// Normalizes over the last axis, then applies the optional affine.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[1]))?;
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).numel() != c {
                return Err(Error::shape("layer_norm affine", &shape, self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let rows = src.len() / c;
        let inv_c = F::one() / F::lit(c as f64);
        let mut xhat = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let lane = &src[r * c..(r + 1) * c];
            let mean = lane.iter().copied().sum::<F>() * inv_c;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (j, &v) in lane.iter().enumerate() {
                xhat[r * c + j] = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(gv) = gain {
            let gd = self.value(gv).data();
            out.chunks_mut(c).for_each(|row| row.iter_mut().zip(gd).for_each(|(o, &g)| *o *= g));
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            out.chunks_mut(c).for_each(|row| row.iter_mut().zip(bd).for_each(|(o, &b)| *o += b));
        }
        let mut deps = vec![x];
        deps.extend(gain);
        deps.extend(bias);
        let needs = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::shape("slice", &shape, &[start, len]))?;
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice", &shape, &[start, len]));
        }
        let src = self.value(x).data();
        let rows = src.len() / cols;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = len;
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SliceLast { x, start, len }, needs))
    }

    /// Concatenation along the last axis; leading extents must match.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(Error::EmptyInput("concat"))?)
            .to_vec();
        let lead = &first[..first.len().saturating_sub(1)];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let mut out_shape = first.clone();
        *out_shape.last_mut().expect("rank >= 1") = total;
        let needs = self.any_grad(parts);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::ConcatLast(parts.to_vec()), needs))
    }

    /// Gathers 1-D convolution windows: `[T, C]` → `[T_out, kernel·C]` with
    /// `T_out = (T + 2·pad − kernel)/stride + 1`. Out-of-range frames are zero.
    pub fn unfold1d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || kernel == 0 || stride == 0 || s[0] + 2 * pad < kernel {
            return Err(Error::shape("unfold1d", &s, &[kernel, stride, pad]));
        }
        let (t, c) = (s[0], s[1]);
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); t_out * kernel * c];
        for o in 0..t_out {
            for j in 0..kernel {
                let ti = (o * stride + j) as isize - pad as isize;
                if ti >= 0 && (ti as usize) < t {
                    let ti = ti as usize;
                    out[(o * kernel + j) * c..(o * kernel + j + 1) * c]
                        .copy_from_slice(&src[ti * c..(ti + 1) * c]);
                }
            }
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![t_out, kernel * c], out)?,
            Op::Unfold {
                x,
                kernel,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// `out[r] = x[r, idx[r]]` for a rank-2 `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] {
            return Err(Error::shape("pick", &s, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: s[1],
            });
        }
        let src = self.value(x).data();
        let out: Vec<F> = idx.iter().enumerate().map(|(r, &i)| src[r * s[1] + i]).collect();
        let needs = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len()], out)?,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Records a custom op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<F>, op: Box<dyn CustomOp<F>>) -> Var {
        let needs = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients of intermediate nodes
    /// are released as soon as they have been propagated; leaf gradients are
    /// returned.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        let mut visited = 0;
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads, visited });
        }
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = node.value.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    if *trans_b {
                        kernels::mm_nn(g, vb.data(), ga, m, n, k);
                    } else {
                        kernels::mm_nt(g, vb.data(), ga, m, n, k);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        kernels::mm_tn(g, va.data(), gb, m, n, k);
                    } else {
                        kernels::mm_tn(va.data(), g, gb, m, k, n);
                    }
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let back = kernels::transpose(g, s[0], s[1]);
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, &back);
                }
            }
            Op::Reshape(x) | Op::Shift(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
                let out_shape = node.value.shape();
                let (da, db) = (va.data(), vb.data());
                if self.nodes[a.0].needs_grad {
                    let mut acc = vec![F::zero(); da.len()];
                    for_each_broadcast(&sa, &sb, out_shape, |o, ia, ib| {
                        acc[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[o],
                            BinaryKind::Mul => g[o] * db[ib],
                            BinaryKind::Div => g[o] / db[ib],
                        };
                    });
                    add_into(self.slot(grads, *a).expect("needs grad"), &acc);
                }
                if self.nodes[b.0].needs_grad {
                    let mut acc = vec![F::zero(); db.len()];
                    for_each_broadcast(&sa, &sb, out_shape, |o, ia, ib| {
                        acc[ib] += match kind {
                            BinaryKind::Add => g[o],
                            BinaryKind::Sub => -g[o],
                            BinaryKind::Mul => g[o] * da[ia],
                            BinaryKind::Div => -g[o] * da[ia] / (db[ib] * db[ib]),
                        };
                    });
                    add_into(self.slot(grads, *b).expect("needs grad"), &acc);
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let two = F::lit(2.0);
                    for i in 0..g.len() {
                        gx[i] += g[i]
                            * match kind {
                                UnaryKind::Relu => {
                                    if xv[i] > F::zero() {
                                        F::one()
                                    } else {
                                        F::zero()
                                    }
                                }
                                UnaryKind::Exp => y[i],
                                UnaryKind::Log => F::one() / xv[i],
                                UnaryKind::Tanh => F::one() - y[i] * y[i],
                                UnaryKind::Sigmoid => y[i] * (F::one() - y[i]),
                                UnaryKind::Sqrt => F::one() / (two * y[i]),
                                UnaryKind::Square => two * xv[i],
                                UnaryKind::Neg => -F::one(),
                            };
                    }
                }
            }
            Op::Scale { x, k } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *k);
                }
            }
            Op::ClampMin { x, min } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > *min {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                gx[(o * n + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let (outer, n, inner) = split_axis(&shape, *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let s: F = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let shape = node.value.shape().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let (outer, n, inner) = split_axis(&shape, *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let s: F = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += g[at(j)] - y[at(j)].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::LogSumExp { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let (outer, n, inner) = split_axis(&shape, *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            for j in 0..n {
                                let at = (o * n + j) * inner + i;
                                gx[at] += g[r] * (xv[at] - y[r]).exp();
                            }
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
                let c = node.value.cols();
                let rows = g.len() / c;
                let gain_data = gain.map(|v| self.value(v).data());
                if let Some(gv) = gain {
                    if let Some(gg) = self.slot(grads, *gv) {
                        for r in 0..rows {
                            for j in 0..c {
                                gg[j] += g[r * c + j] * xhat[r * c + j];
                            }
                        }
                    }
                }
                if let Some(bv) = bias {
                    if let Some(gb) = self.slot(grads, *bv) {
                        for r in 0..rows {
                            for j in 0..c {
                                gb[j] += g[r * c + j];
                            }
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let inv_c = F::one() / F::lit(c as f64);
                    let mut dxhat = vec![F::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            dxhat[j] = g[r * c + j] * gain_data.map_or(F::one(), |gd| gd[j]);
                        }
                        let mean_d = dxhat.iter().copied().sum::<F>() * inv_c;
                        let mean_dx = (0..c).map(|j| dxhat[j] * xhat[r * c + j]).sum::<F>() * inv_c;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * c + j] * mean_dx);
                        }
                    }
                }
            }
            Op::SliceLast { x, start, len } => {
                let cols = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    let rows = g.len() / len;
                    for r in 0..rows {
                        for j in 0..*len {
                            gx[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = node.value.cols();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Unfold {
                x,
                kernel,
                stride,
                pad,
            } => {
                let s = self.shape(*x).to_vec();
                let (t, c) = (s[0], s[1]);
                let t_out = node.value.shape()[0];
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..t_out {
                        for j in 0..*kernel {
                            let ti = (o * stride + j) as isize - *pad as isize;
                            if ti >= 0 && (ti as usize) < t {
                                let ti = ti as usize;
                                for ch in 0..c {
                                    gx[ti * c + ch] += g[(o * kernel + j) * c + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                let cols = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * cols + i] += g[r];
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                let contribs = op.backward(&vals, &node.value, g);
                for (&v, contrib) in inputs.iter().zip(contribs) {
                    if let (Some(c), Some(gv)) = (contrib, self.slot(grads, v)) {
                        add_into(gv, &c);
                    }
                }
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn logsumexp_slice<F: Real>(lane: impl Iterator<Item = F> + Clone) -> F {
    let m = lane.clone().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return m;
    }
    m + lane.map(|v| (v - m).exp()).sum::<F>().ln()
}

fn map_axis<F: Real>(
    src: &[F],
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(&[F], &mut [F]),
) -> Vec<F> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![F::zero(); src.len()];
    if inner == 1 {
        for o in 0..outer {
            f(&src[o * n..(o + 1) * n], &mut out[o * n..(o + 1) * n]);
        }
        return out;
    }
    let mut lane = vec![F::zero(); n];
    let mut dst = vec![F::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                lane[j] = src[(o * n + j) * inner + i];
            }
            f(&lane, &mut dst);
            for j in 0..n {
                out[(o * n + j) * inner + i] = dst[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(vec![2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(vec![1, 2], &[1.0, 2.0]));
        let b = g.constant(t(vec![2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(vec![3], &[-1.0, 0.0, 2.0]));
        let r = g.elementwise(Elementwise::Relu, &[x]).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let a = g.constant(t(vec![2], &[1.0, 2.0]));
        let b = g.constant(t(vec![2], &[3.0, 4.0]));
        let s = g.elementwise(Elementwise::Add, &[a, b]).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let bad = g.constant(t(vec![3], &[1.0, 2.0, 3.0]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn log_exp_chain_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(vec![1], &[0.7]).with_requires_grad(true));
        let e = g.exp(x);
        let l = g.log(e);
        let s = g.sum_all(l);
        let grads = g.backward(s).unwrap();
        assert!((grads.get(x).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relu_gradient_masks_non_positive_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(vec![3], &[-1.0, 0.0, 2.0]).with_requires_grad(true));
        let r = g.relu(x);
        let s = g.sum_all(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(vec![2], &[0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let x = g.constant(t(vec![2], &[1000.0, 1000.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn logsumexp_matches_naive() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(vec![2], &[10.0, 10.0]));
        let l = g.logsumexp(x, 0).unwrap();
        let naive = (10f64.exp() + 10f64.exp()).ln();
        assert!((g.value(l).data()[0] - naive).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(vec![1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, None, None, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
        let x = g.constant(t(vec![1, 3], &[4.0, 4.0, 4.0]));
        let y = g.layer_norm(x, None, None, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn accumulation_over_shared_consumers_doubles() {
        // f(x) = g(x) + g(x) with g(x) = sum(tanh(x) * x)
        let x0 = t(vec![3], &[0.3, -1.2, 2.0]);
        let single = {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(x0.clone().with_requires_grad(true));
            let th = g.tanh(x);
            let m = g.mul(th, x).unwrap();
            let s = g.sum_all(m);
            g.backward(s).unwrap().get(x).unwrap().to_vec()
        };
        let mut g = Graph::<f64>::new();
        let x = g.leaf(x0.with_requires_grad(true));
        let mut parts = vec![];
        for _ in 0..2 {
            let th = g.tanh(x);
            let m = g.mul(th, x).unwrap();
            parts.push(g.sum_all(m));
        }
        let f = g.add(parts[0], parts[1]).unwrap();
        let grads = g.backward(f).unwrap();
        for (d, s) in grads.get(x).unwrap().iter().zip(&single) {
            assert!((d - 2.0 * s).abs() <= 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn backward_visits_each_tracked_node_once() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(vec![2], &[1.0, 2.0]).with_requires_grad(true));
        let c = g.constant(t(vec![2], &[3.0, 4.0]));
        let frozen = g.exp(c);
        let a = g.mul(x, frozen).unwrap();
        let b = g.add(a, x).unwrap();
        let s = g.sum_all(b);
        let grads = g.backward(s).unwrap();
        // x, a, b, s carry gradient; c and exp(c) do not.
        assert_eq!(grads.visited(), 4);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn unfold_shapes() {
        let mut g = Graph::<f64>::new();
        for t_in in [2usize, 3, 10] {
            let x = g.constant(Tensor::zeros(vec![t_in, 4]));
            let u = g.unfold1d(x, 3, 2, 1).unwrap();
            assert_eq!(g.shape(u), &[t_in.div_ceil(2), 12]);
        }
    }

    #[test]
    fn pick_checks_range() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 3]));
        assert!(matches!(g.pick(x, &[3]), Err(Error::LabelOutOfRange { .. })));
    }
}
