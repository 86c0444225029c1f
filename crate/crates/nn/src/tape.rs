//! Recorded-graph reverse-mode differentiation.
//!
//! Every op appends a node holding its value and the ids of its operands.
//! [`Tape::backward`] walks the nodes in reverse and pushes gradients into
//! operands that require them; parameter gradients are then accumulated into
//! the owning [`ParamStore`]. A tape supports exactly one backward pass.

use crate::error::{shape_err, NnError, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddSuffix(NodeId, NodeId),
    AddPrefix(NodeId, NodeId),
    MulPrefix(NodeId, NodeId),
    Affine(NodeId, f64),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Bmm { a: NodeId, b: NodeId, trans_b: bool },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    GlobalAvgPool2d(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    SliceLast { x: NodeId, start: usize },
    Select { x: NodeId, axis: usize, index: usize },
    SumLast(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    relu_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn split_rows(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (numel(shape) / last.max(1), last)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            relu_margin: f64::INFINITY,
        }
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the loss with respect to a node, available after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Smallest `|pre-activation|` seen by any ReLU on this tape.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t.with_trainable(false), Op::Input, false)
    }

    /// A leaf whose gradient is tracked (for input-sensitivity checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> NodeId {
        self.push(t.with_trainable(false), Op::Input, true)
    }

    /// Records a parameter. Frozen parameters act as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let src = store.get(id);
        let trainable = src.trainable();
        let value = Tensor::new(src.shape(), src.data().to_vec()).expect("parameter tensors are valid");
        self.push(value, Op::Param(id), trainable)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?}", self.shape(a)), self.shape(b));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a), data).expect("shape preserved");
        self.derived(t, op, &[a, b])
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a), data).expect("shape preserved");
        self.derived(t, op, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a + b` with `b` broadcast over the leading axes of `a` (its shape is a suffix of `a`'s).
    pub fn add_suffix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add_suffix", format!("suffix of {sa:?}"), sb);
        }
        let inner = self.value(b).len();
        let bd = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % inner]).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.derived(t, Op::AddSuffix(a, b), &[a, b]))
    }

    fn prefix_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[..sb.len()] != *sb {
            return shape_err(op, format!("prefix of {sa:?}"), sb);
        }
        Ok(self.value(a).len() / self.value(b).len())
    }

    /// `a + b` with each element of `b` broadcast over a trailing block of `a`.
    pub fn add_prefix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let inner = self.prefix_check("add_prefix", a, b)?;
        let bd = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i / inner]).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.derived(t, Op::AddPrefix(a, b), &[a, b]))
    }

    /// `a * b` with each element of `b` scaling a trailing block of `a` (channel scaling).
    pub fn mul_prefix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let inner = self.prefix_check("mul_prefix", a, b)?;
        let bd = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x * bd[i / inner]).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.derived(t, Op::MulPrefix(a, b), &[a, b]))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        self.map(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: NodeId, scale: f64) -> NodeId {
        self.affine(a, scale, 0.0)
    }

    /// `x[..., in] @ w[in, out] + b[out]`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return shape_err("linear", "weight of rank 2", &ws);
        }
        let (fan_in, fan_out) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&fan_in) {
            return shape_err("linear", format!("input [..., {fan_in}]"), &xs);
        }
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return shape_err("linear", format!("bias [{fan_out}]"), self.shape(b));
            }
        }
        let rows = numel(&xs) / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            let bd = self.data(b);
            out.chunks_mut(fan_out).for_each(|r| r.copy_from_slice(bd));
        }
        kernels::gemm_nn(self.data(x), self.data(w), &mut out, rows, fan_in, fan_out);
        let mut os = xs;
        *os.last_mut().unwrap() = fan_out;
        let t = Tensor::new(&os, out)?;
        let parents: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.derived(t, Op::Linear { x, w, b }, &parents))
    }

    /// Batched matmul over matching leading axes: `[.., m, k] @ [.., k, n]`,
    /// or `[.., m, k] @ [.., n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return shape_err("bmm", format!("batch-compatible with {sa:?}"), &sb);
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if kb != k {
            return shape_err("bmm", format!("inner dimension {k}"), &sb);
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            let (aa, bb) = (&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n]);
            let cc = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(aa, bb, cc, m, k, n);
            } else {
                kernels::gemm_nn(aa, bb, cc, m, k, n);
            }
        }
        let mut os = sa;
        os[r - 1] = n;
        let t = Tensor::new(&os, out)?;
        Ok(self.derived(t, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let margin = self.data(a).iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.relu_margin = self.relu_margin.min(margin);
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (_, d) = split_rows(self.shape(a));
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(self.shape(a), out).expect("shape preserved");
        self.derived(t, Op::Softmax(a), &[a])
    }

    /// Stride-1 2-D convolution. `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, padding: (usize, usize)) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 {
            return shape_err("conv2d", "input [B, C, H, W]", &xs);
        }
        if ws.len() != 4 || ws[1] != xs[1] {
            return shape_err("conv2d", format!("weight [O, {}, kh, kw]", xs[1]), &ws);
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            ph: padding.0,
            pw: padding.1,
        };
        if geom.h + 2 * geom.ph < geom.kh || geom.w + 2 * geom.pw < geom.kw {
            return shape_err("conv2d", "spatial extent at least the kernel size", &xs);
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return shape_err("conv2d", format!("bias [{}]", geom.out_ch), self.shape(b));
            }
        }
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let t = Tensor::new(&[geom.batch, geom.out_ch, geom.out_h(), geom.out_w()], out)?;
        let parents: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.derived(t, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// `[B, C, H, W] -> [B, C]`
    pub fn global_avg_pool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err("global_avg_pool2d", "input [B, C, H, W]", &xs);
        }
        let hw = xs[2] * xs[3];
        let out = self.data(x).chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let t = Tensor::new(&xs[..2], out)?;
        Ok(self.derived(t, Op::GlobalAvgPool2d(x), &[x]))
    }

    /// Normalizes each row of the last axis, then applies `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, d) = split_rows(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err("layer_norm", format!("gain and bias [{d}]"), self.shape(gain));
        }
        let xd = self.data(x);
        let (g, bvals) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bvals[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.derived(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.derived(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..xs.len()).collect::<Vec<_>>() {
            return shape_err("permute", format!("a permutation of {} axes", xs.len()), axes);
        }
        let (os, data) = kernels::permute(self.data(x), &xs, axes);
        let t = Tensor::new(&os, data)?;
        Ok(self.derived(t, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let (_, d) = split_rows(&xs);
        if len == 0 || start + len > d {
            return shape_err("slice_last", format!("range {start}..{} within last axis", start + len), &xs);
        }
        let out = self.data(x).chunks(d).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut os = xs;
        *os.last_mut().unwrap() = len;
        let t = Tensor::new(&os, out)?;
        Ok(self.derived(t, Op::SliceLast { x, start }, &[x]))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: NodeId, axis: usize, index: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || index >= xs[axis] || xs.len() < 2 {
            return shape_err("select", format!("index {index} on axis {axis}"), &xs);
        }
        let outer = numel(&xs[..axis]);
        let inner = numel(&xs[axis + 1..]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + index) * inner;
            out.extend_from_slice(&xd[base..base + inner]);
        }
        let mut os = xs;
        os.remove(axis);
        let t = Tensor::new(&os, out)?;
        Ok(self.derived(t, Op::Select { x, axis, index }, &[x]))
    }

    /// Sum over the last axis, dropping it (a rank-1 input reduces to `[1]`).
    pub fn sum_last(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (_, d) = split_rows(&xs);
        let out = self.data(x).chunks(d).map(|r| r.iter().sum()).collect();
        let os = if xs.len() > 1 { xs[..xs.len() - 1].to_vec() } else { vec![1] };
        let t = Tensor::new(&os, out).expect("reduced shape");
        self.derived(t, Op::SumLast(x), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.derived(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Runs the reverse pass from a scalar `loss` and accumulates gradients of
    /// trainable parameters into `store`. Frozen parameters are left untouched.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(NnError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else { continue };
            backprop_node(&self.nodes, before, i, g)?;
        }
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(pid), Some(g)) = (&node.op, g) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFiniteGrad(store.name(*pid).to_string()));
                }
                store.get_mut(*pid).accumulate_grad(g)?;
            }
        }
        Ok(())
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

fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> Option<&'a mut [f64]> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let n = nodes[id.0].value.len();
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) -> Result<()> {
    let node = &nodes[i];
    let out = node.value.data();
    let val = |id: NodeId| nodes[id.0].value.data();
    match &node.op {
        Op::Input | Op::Param(_) => {}
        Op::Add(a, b) => {
            if let Some(d) = buf(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = buf(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = buf(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = buf(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = buf(grads, nodes, *a) {
                let bv = val(*b);
                d.iter_mut().zip(g).zip(bv).for_each(|((d, g), y)| *d += g * y);
            }
            if let Some(d) = buf(grads, nodes, *b) {
                let av = val(*a);
                d.iter_mut().zip(g).zip(av).for_each(|((d, g), x)| *d += g * x);
            }
        }
        Op::AddSuffix(a, b) => {
            if let Some(d) = buf(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = buf(grads, nodes, *b) {
                let inner = d.len();
                for (k, gv) in g.iter().enumerate() {
                    d[k % inner] += gv;
                }
            }
        }
        Op::AddPrefix(a, b) => {
            if let Some(d) = buf(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = buf(grads, nodes, *b) {
                let inner = g.len() / d.len();
                for (j, chunk) in g.chunks(inner).enumerate() {
                    d[j] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::MulPrefix(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let inner = av.len() / bv.len();
            if let Some(d) = buf(grads, nodes, *a) {
                for (k, (d, gv)) in d.iter_mut().zip(g).enumerate() {
                    *d += gv * bv[k / inner];
                }
            }
            if let Some(d) = buf(grads, nodes, *b) {
                for (j, (gc, ac)) in g.chunks(inner).zip(av.chunks(inner)).enumerate() {
                    d[j] += kernels::dot(gc, ac);
                }
            }
        }
        Op::Affine(a, s) => {
            if let Some(d) = buf(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
            }
        }
        Op::Linear { x, w, b } => {
            let ws = nodes[w.0].value.shape();
            let (fan_in, fan_out) = (ws[0], ws[1]);
            let rows = g.len() / fan_out;
            if let Some(d) = buf(grads, nodes, *x) {
                kernels::gemm_nt(g, val(*w), d, rows, fan_out, fan_in);
            }
            if let Some(d) = buf(grads, nodes, *w) {
                kernels::gemm_tn(val(*x), g, d, fan_in, rows, fan_out);
            }
            if let Some(b) = b {
                if let Some(d) = buf(grads, nodes, *b) {
                    for row in g.chunks(fan_out) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let sa = nodes[a.0].value.shape();
            let r = sa.len();
            let (m, k) = (sa[r - 2], sa[r - 1]);
            let n = node.value.shape()[r - 1];
            let batch = numel(&sa[..r - 2]);
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = buf(grads, nodes, *a) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let di = &mut d[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        // b is [n, k]: dA = G B
                        kernels::gemm_nn(gi, bi, di, m, n, k);
                    } else {
                        kernels::gemm_nt(gi, bi, di, m, n, k);
                    }
                }
            }
            if let Some(d) = buf(grads, nodes, *b) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let di = &mut d[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // dB[n, k] = G^T A
                        kernels::gemm_tn(gi, ai, di, n, m, k);
                    } else {
                        kernels::gemm_tn(ai, gi, di, k, m, n);
                    }
                }
            }
        }
        Op::Relu(a) => {
            if let Some(d) = buf(grads, nodes, *a) {
                let av = val(*a);
                d.iter_mut().zip(g).zip(av).for_each(|((d, g), x)| {
                    if *x > 0.0 {
                        *d += g
                    }
                });
            }
        }
        Op::Sigmoid(a) => {
            if let Some(d) = buf(grads, nodes, *a) {
                d.iter_mut().zip(g).zip(out).for_each(|((d, g), y)| *d += g * y * (1.0 - y));
            }
        }
        Op::Tanh(a) => {
            if let Some(d) = buf(grads, nodes, *a) {
                d.iter_mut().zip(g).zip(out).for_each(|((d, g), y)| *d += g * (1.0 - y * y));
            }
        }
        Op::Softmax(a) => {
            if let Some(d) = buf(grads, nodes, *a) {
                let (_, n) = split_rows(node.value.shape());
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let s = kernels::dot(gr, yr);
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            // Gradient buffers belong to distinct nodes; take them out to borrow all three at once.
            let mut dx = nodes[x.0].requires_grad.then(|| take_buf(grads, nodes, *x));
            let mut dw = nodes[w.0].requires_grad.then(|| take_buf(grads, nodes, *w));
            let mut db = b.filter(|b| nodes[b.0].requires_grad).map(|b| take_buf(grads, nodes, b));
            kernels::conv2d_backward(geom, xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            if let Some(dx) = dx {
                grads[x.0] = Some(dx);
            }
            if let Some(dw) = dw {
                grads[w.0] = Some(dw);
            }
            if let (Some(b), Some(db)) = (b, db) {
                grads[b.0] = Some(db);
            }
        }
        Op::GlobalAvgPool2d(x) => {
            if let Some(d) = buf(grads, nodes, *x) {
                let hw = d.len() / g.len();
                for (chunk, gv) in d.chunks_mut(hw).zip(g) {
                    let v = gv / hw as f64;
                    chunk.iter_mut().for_each(|c| *c += v);
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let dim = nodes[gain.0].value.len();
            let gv = val(*gain);
            if let Some(d) = buf(grads, nodes, *gain) {
                for (gr, xr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                    d.iter_mut().zip(gr).zip(xr).for_each(|((d, g), xh)| *d += g * xh);
                }
            }
            if let Some(d) = buf(grads, nodes, *bias) {
                for gr in g.chunks(dim) {
                    d.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                }
            }
            if let Some(d) = buf(grads, nodes, *x) {
                let mut dxh = vec![0.0; dim];
                for (r, ((dr, gr), xr)) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(xhat.chunks(dim)).enumerate() {
                    for j in 0..dim {
                        dxh[j] = gr[j] * gv[j];
                    }
                    let m1 = dxh.iter().sum::<f64>() / dim as f64;
                    let m2 = kernels::dot(&dxh, xr) / dim as f64;
                    for j in 0..dim {
                        dr[j] += rstd[r] * (dxh[j] - m1 - xr[j] * m2);
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = buf(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::Permute(x, axes) => {
            if let Some(d) = buf(grads, nodes, *x) {
                let (_, back) = kernels::permute(g, node.value.shape(), &kernels::inverse_axes(axes));
                d.iter_mut().zip(&back).for_each(|(d, g)| *d += g);
            }
        }
        Op::SliceLast { x, start } => {
            if let Some(d) = buf(grads, nodes, *x) {
                let len = *node.value.shape().last().unwrap();
                let full = *nodes[x.0].value.shape().last().unwrap();
                for (dr, gr) in d.chunks_mut(full).zip(g.chunks(len)) {
                    dr[*start..start + len].iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Select { x, axis, index } => {
            if let Some(d) = buf(grads, nodes, *x) {
                let xs = nodes[x.0].value.shape();
                let inner = numel(&xs[axis + 1..]);
                for (o, gr) in g.chunks(inner).enumerate() {
                    let base = (o * xs[*axis] + index) * inner;
                    d[base..base + inner].iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::SumLast(x) => {
            if let Some(d) = buf(grads, nodes, *x) {
                let dim = d.len() / g.len();
                for (dr, gv) in d.chunks_mut(dim).zip(g) {
                    dr.iter_mut().for_each(|v| *v += gv);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = buf(grads, nodes, *x) {
                d.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(d) = buf(grads, nodes, *x) {
                let v = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += v);
            }
        }
    }
    Ok(())
}

fn take_buf(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> Vec<f64> {
    grads[id.0].take().unwrap_or_else(|| vec![0.0; nodes[id.0].value.len()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn linear_form_gradient_is_input() {
        let mut store = ParamStore::new();
        let w = store.insert("w", t(&[4], &[0.3, -0.2, 0.1, 0.9])).unwrap();
        let xs = [1.5, -2.0, 0.25, 4.0];
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let x = tape.input(t(&[4], &xs));
        let p = tape.mul(wn, x).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &xs);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input_with_grad(t(&[3], &[-1.0, -0.5, -3.0]));
        let y = tape.relu(x);
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input_with_grad(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y, &mut store), Err(NnError::NonScalarLoss(_))));
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert!(matches!(tape.backward(loss, &mut store), Err(NnError::BackwardTwice)));
    }

    #[test]
    fn frozen_param_untouched() {
        let mut store = ParamStore::new();
        let w = store.insert("w", t(&[2], &[1.0, 2.0])).unwrap();
        store.get_mut(w).set_trainable(false);
        let before = store.clone();
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let x = tape.input_with_grad(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(wn, x).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store, before);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], &[1.0, 2.0, 3.0, -500.0, 0.0, 500.0]));
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_reports_dims() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("[3, 2]"), "{err}");
    }
}
