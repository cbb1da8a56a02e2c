//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and the ids of its inputs; because inputs must
//! already exist on the tape, node order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{shape_mismatch, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    MulConst(Var, Box<Tensor>),
    AddConst(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Silu(Var),
    MeanSq(Var),
    Dot(Var, Box<Tensor>),
    NodeMix {
        x: Var,
        a: Box<Tensor>,
        f: usize,
    },
    AddCond {
        x: Var,
        c: Var,
        group: usize,
    },
    AddLeading {
        x: Var,
        p: Var,
        group: usize,
    },
    SwapLast2(Var),
    ConcatChannels(Vec<Var>),
    SliceTime {
        x: Var,
        start: usize,
    },
    Upsample2(Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; all-zeros when the root does
    /// not depend on `v`.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::NotRecorded)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (data, noise, fixed operators).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        self.node(v).map(|n| &n.value)
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let out = match kind {
            Elementwise::Add => va.add(vb)?,
            Elementwise::Sub => va.sub(vb)?,
            Elementwise::Mul => va.mul(vb)?,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.node(a)?.value.scale(c);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    /// Elementwise product with a fixed tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let out = self.node(a)?.value.mul(&c)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MulConst(a, Box::new(c)), rg))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let out = self.node(a)?.value.add(c)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AddConst(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.node(a)?.value.matmul(&self.node(b)?.value)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x[R, C] + b[C]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (&self.node(x)?.value, &self.node(b)?.value);
        if vx.rank() != 2 || vb.shape() != [vx.dim(1)] {
            return Err(shape_mismatch("add_row_bias", vx.shape(), vb.shape()));
        }
        let c = vx.dim(1);
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRowBias(x, b), rg))
    }

    /// 1-D convolution over the last axis of `x[M, C, T]` with kernel
    /// `w[C', C, k]` and optional bias `b[C']`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let vw = &self.node(w)?.value;
        if vx.rank() != 3 || vw.rank() != 3 || vx.dim(1) != vw.dim(1) || stride == 0 {
            return Err(shape_mismatch("conv1d", vx.shape(), vw.shape()));
        }
        let geom = ConvGeom {
            m: vx.dim(0),
            c_in: vx.dim(1),
            t_in: vx.dim(2),
            c_out: vw.dim(0),
            k: vw.dim(2),
            stride,
            pad,
        };
        if geom.t_in + 2 * pad < geom.k {
            return Err(shape_mismatch("conv1d", vx.shape(), vw.shape()));
        }
        let bias = match b {
            Some(b) => {
                let vb = &self.node(b)?.value;
                if vb.shape() != [geom.c_out] {
                    return Err(shape_mismatch("conv1d bias", vb.shape(), &[geom.c_out]));
                }
                Some(vb.data())
            }
            None => None,
        };
        let y = kernels::conv1d_forward(&geom, vx.data(), vw.data(), bias);
        let out = Tensor::from_vec(&[geom.m, geom.c_out, geom.t_out()], y);
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        Ok(self.push(out, Op::Conv1d { x, w, b, geom }, rg))
    }

    /// Same-padded temporal convolution (odd kernel, stride 1).
    pub fn temporal_conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let k = self.node(w)?.value.shape().get(2).copied().unwrap_or(0);
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "same padding needs an odd kernel, got {k}"
            )));
        }
        self.conv1d(x, w, b, 1, k / 2)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(kernels::silu);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Silu(x), rg))
    }

    /// `(1/len) Σ x_i²` as a scalar.
    pub fn mean_sq(&mut self, x: Var) -> Result<Var> {
        let vx = &self.node(x)?.value;
        if vx.is_empty() {
            return Err(Error::EmptyTensor("mean_sq"));
        }
        let out = Tensor::scalar(vx.sum_sq() / vx.len() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanSq(x), rg))
    }

    /// `Σ x_i c_i` against a fixed tensor, as a scalar.
    pub fn dot_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let vx = &self.node(x)?.value;
        if vx.shape() != c.shape() {
            return Err(shape_mismatch("dot_const", vx.shape(), c.shape()));
        }
        let out = Tensor::scalar(crate::tensor::dot(vx.data(), c.data()));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dot(x, Box::new(c)), rg))
    }

    /// Contract a fixed `N×N` operator with the node axis of `x`, where `x`
    /// is viewed as `[B, N, inner]` in row-major order.
    pub fn node_mix(&mut self, a: &Tensor, x: Var, inner: usize) -> Result<Var> {
        let vx = &self.node(x)?.value;
        if a.rank() != 2 || a.dim(0) != a.dim(1) {
            return Err(shape_mismatch("node_mix", a.shape(), vx.shape()));
        }
        let n = a.dim(0);
        if n == 0 || inner == 0 || vx.len() % (n * inner) != 0 {
            return Err(shape_mismatch("node_mix", a.shape(), vx.shape()));
        }
        let out = Tensor::from_vec(vx.shape(), kernels::node_mix(a.data(), n, vx.data(), inner));
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::NodeMix {
                x,
                a: Box::new(a.clone()),
                f: inner,
            },
            rg,
        ))
    }

    /// `x[B·G, C, T] + c[B, C]`, broadcasting `c` over the group and time axes.
    pub fn add_cond(&mut self, x: Var, c: Var, group: usize) -> Result<Var> {
        let (vx, vc) = (&self.node(x)?.value, &self.node(c)?.value);
        if vx.rank() != 3 || vc.rank() != 2 || vx.dim(0) != vc.dim(0) * group || vx.dim(1) != vc.dim(1)
        {
            return Err(shape_mismatch("add_cond", vx.shape(), vc.shape()));
        }
        let (ch, t) = (vx.dim(1), vx.dim(2));
        let mut out = vx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(t).enumerate() {
            let m = i / ch;
            let cv = vc.data()[(m / group) * ch + i % ch];
            for v in chunk {
                *v += cv;
            }
        }
        let rg = self.rg(&[x, c]);
        Ok(self.push(out, Op::AddCond { x, c, group }, rg))
    }

    /// `x[B·G, C, T] + p[B, C, Tp]` on the first `Tp` time steps of every
    /// group member.
    pub fn add_leading(&mut self, x: Var, p: Var, group: usize) -> Result<Var> {
        let (vx, vp) = (&self.node(x)?.value, &self.node(p)?.value);
        if vx.rank() != 3
            || vp.rank() != 3
            || vx.dim(0) != vp.dim(0) * group
            || vx.dim(1) != vp.dim(1)
            || vp.dim(2) > vx.dim(2)
        {
            return Err(shape_mismatch("add_leading", vx.shape(), vp.shape()));
        }
        let (ch, t, tp) = (vx.dim(1), vx.dim(2), vp.dim(2));
        let mut out = vx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(t).enumerate() {
            let (m, c) = (i / ch, i % ch);
            let src = &vp.data()[((m / group) * ch + c) * tp..((m / group) * ch + c + 1) * tp];
            for (o, &s) in chunk.iter_mut().zip(src) {
                *o += s;
            }
        }
        let rg = self.rg(&[x, p]);
        Ok(self.push(out, Op::AddLeading { x, p, group }, rg))
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let vx = &self.node(x)?.value;
        if vx.rank() != 3 {
            return Err(shape_mismatch("swap_last2", vx.shape(), &[0, 0, 0]));
        }
        let out = vx.permute(&[0, 2, 1]);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SwapLast2(x), rg))
    }

    /// Concatenate `[M, C_i, T]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.node(*xs.first().ok_or(Error::EmptyTensor("concat"))?)?.value.shape();
        if first.len() != 3 {
            return Err(shape_mismatch("concat_channels", first, &[0, 0, 0]));
        }
        let (m, t) = (first[0], first[2]);
        let mut total_c = 0;
        for &v in xs {
            let s = self.node(v)?.value.shape();
            if s.len() != 3 || s[0] != m || s[2] != t {
                return Err(shape_mismatch("concat_channels", s, &[m, 0, t]));
            }
            total_c += s[1];
        }
        let mut out = Vec::with_capacity(m * total_c * t);
        for mi in 0..m {
            for &v in xs {
                let vv = &self.nodes[v.0].value;
                let c = vv.dim(1);
                out.extend_from_slice(&vv.data()[mi * c * t..(mi + 1) * c * t]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::from_vec(&[m, total_c, t], out),
            Op::ConcatChannels(xs.to_vec()),
            rg,
        ))
    }

    /// Keep time steps `start..end` of `x[M, C, T]`.
    pub fn slice_time(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = &self.node(x)?.value;
        if vx.rank() != 3 || start >= end || end > vx.dim(2) {
            return Err(Error::InvalidArgument(alloc::format!(
                "slice_time {start}..{end} of shape {:?}",
                vx.shape()
            )));
        }
        let t = vx.dim(2);
        let len = end - start;
        let mut out = Vec::with_capacity(vx.len() / t * len);
        for chunk in vx.data().chunks(t) {
            out.extend_from_slice(&chunk[start..end]);
        }
        let shape = [vx.dim(0), vx.dim(1), len];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::SliceTime { x, start }, rg))
    }

    /// Nearest-neighbour ×2 upsampling along the time axis of `x[M, C, T]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let vx = &self.node(x)?.value;
        if vx.rank() != 3 {
            return Err(shape_mismatch("upsample2", vx.shape(), &[0, 0, 0]));
        }
        let mut out = Vec::with_capacity(vx.len() * 2);
        for &v in vx.data() {
            out.push(v);
            out.push(v);
        }
        let shape = [vx.dim(0), vx.dim(1), vx.dim(2) * 2];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Upsample2(x), rg))
    }

    /// Row lookup `table[rows[i], :]` → `[rows.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let vt = &self.node(table)?.value;
        if vt.rank() != 2 {
            return Err(shape_mismatch("gather_rows", vt.shape(), &[0, 0]));
        }
        let (r, e) = (vt.dim(0), vt.dim(1));
        let mut out = Vec::with_capacity(rows.len() * e);
        for &i in rows {
            if i >= r {
                return Err(Error::IndexOutOfRange { index: i, len: r });
            }
            out.extend_from_slice(&vt.data()[i * e..(i + 1) * e]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_vec(&[rows.len(), e], out),
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(x)?.value.reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if root_node.value.len() != 1 {
            return Err(Error::NotScalar(root_node.value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                match kind {
                    Elementwise::Add => {
                        acc(grads, a, wants(a), || g.clone());
                        acc(grads, b, wants(b), || g.clone());
                    }
                    Elementwise::Sub => {
                        acc(grads, a, wants(a), || g.clone());
                        acc(grads, b, wants(b), || g.scale(-1.0));
                    }
                    Elementwise::Mul => {
                        acc(grads, a, wants(a), || g.mul(val(b)).expect("shape"));
                        acc(grads, b, wants(b), || g.mul(val(a)).expect("shape"));
                    }
                }
            }
            Op::Scale(a, c) => acc(grads, *a, wants(*a), || g.scale(*c)),
            Op::MulConst(a, c) => acc(grads, *a, wants(*a), || g.mul(c).expect("shape")),
            Op::AddConst(a) => acc(grads, *a, wants(*a), || g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                acc(grads, *a, wants(*a), || {
                    let mut d = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), vb.data(), &mut d);
                    Tensor::from_vec(&[m, k], d)
                });
                acc(grads, *b, wants(*b), || {
                    let mut d = vec![0.0; k * n];
                    gemm_tn(k, m, n, va.data(), g.data(), &mut d);
                    Tensor::from_vec(&[k, n], d)
                });
            }
            Op::AddRowBias(x, b) => {
                acc(grads, *x, wants(*x), || g.clone());
                acc(grads, *b, wants(*b), || {
                    let c = g.dim(1);
                    let mut d = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (dv, &gv) in d.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                    Tensor::from_vec(&[c], d)
                });
            }
            Op::Conv1d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv1d_backward(
                    geom,
                    val(*x).data(),
                    val(*w).data(),
                    g.data(),
                    wants(*x),
                );
                if let Some(dx) = dx {
                    acc(grads, *x, true, || Tensor::from_vec(val(*x).shape(), dx));
                }
                acc(grads, *w, wants(*w), || Tensor::from_vec(val(*w).shape(), dw));
                if let Some(b) = b {
                    acc(grads, *b, wants(*b), || Tensor::from_vec(&[geom.c_out], db));
                }
            }
            Op::Silu(x) => acc(grads, *x, wants(*x), || {
                let vx = val(*x);
                let d = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * kernels::silu_grad(xv))
                    .collect();
                Tensor::from_vec(vx.shape(), d)
            }),
            Op::MeanSq(x) => acc(grads, *x, wants(*x), || {
                let vx = val(*x);
                vx.scale(2.0 * g.data()[0] / vx.len() as f64)
            }),
            Op::Dot(x, c) => acc(grads, *x, wants(*x), || c.scale(g.data()[0])),
            Op::NodeMix { x, a, f } => acc(grads, *x, wants(*x), || {
                let n = a.dim(0);
                Tensor::from_vec(g.shape(), kernels::node_mix_adjoint(a.data(), n, g.data(), *f))
            }),
            Op::AddCond { x, c, group } => {
                acc(grads, *x, wants(*x), || g.clone());
                acc(grads, *c, wants(*c), || {
                    let vc = val(*c);
                    let (ch, t) = (g.dim(1), g.dim(2));
                    let mut d = vec![0.0; vc.len()];
                    for (i, chunk) in g.data().chunks(t).enumerate() {
                        let m = i / ch;
                        d[(m / group) * ch + i % ch] += chunk.iter().sum::<f64>();
                    }
                    Tensor::from_vec(vc.shape(), d)
                });
            }
            Op::AddLeading { x, p, group } => {
                acc(grads, *x, wants(*x), || g.clone());
                acc(grads, *p, wants(*p), || {
                    let vp = val(*p);
                    let (ch, t, tp) = (g.dim(1), g.dim(2), vp.dim(2));
                    let mut d = vec![0.0; vp.len()];
                    for (i, chunk) in g.data().chunks(t).enumerate() {
                        let (m, c) = (i / ch, i % ch);
                        let off = ((m / group) * ch + c) * tp;
                        for (dv, &gv) in d[off..off + tp].iter_mut().zip(chunk) {
                            *dv += gv;
                        }
                    }
                    Tensor::from_vec(vp.shape(), d)
                });
            }
            Op::SwapLast2(x) => acc(grads, *x, wants(*x), || g.permute(&[0, 2, 1])),
            Op::ConcatChannels(xs) => {
                let (m, total_c, t) = (g.dim(0), g.dim(1), g.dim(2));
                let mut offset = 0;
                for &v in xs {
                    let c = val(v).dim(1);
                    if wants(v) {
                        let mut d = Vec::with_capacity(m * c * t);
                        for mi in 0..m {
                            let base = (mi * total_c + offset) * t;
                            d.extend_from_slice(&g.data()[base..base + c * t]);
                        }
                        acc(grads, v, true, || Tensor::from_vec(&[m, c, t], d));
                    }
                    offset += c;
                }
            }
            Op::SliceTime { x, start } => acc(grads, *x, wants(*x), || {
                let vx = val(*x);
                let t = vx.dim(2);
                let len = g.dim(2);
                let mut d = vec![0.0; vx.len()];
                for (dst, src) in d.chunks_mut(t).zip(g.data().chunks(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                Tensor::from_vec(vx.shape(), d)
            }),
            Op::Upsample2(x) => acc(grads, *x, wants(*x), || {
                let d = g.data().chunks(2).map(|p| p[0] + p[1]).collect();
                Tensor::from_vec(val(*x).shape(), d)
            }),
            Op::Gather { table, rows } => acc(grads, *table, wants(*table), || {
                let vt = val(*table);
                let e = vt.dim(1);
                let mut d = vec![0.0; vt.len()];
                for (r, src) in rows.iter().zip(g.data().chunks(e)) {
                    for (dv, &gv) in d[r * e..(r + 1) * e].iter_mut().zip(src) {
                        *dv += gv;
                    }
                }
                Tensor::from_vec(vt.shape(), d)
            }),
            Op::Reshape(x) => acc(grads, *x, wants(*x), || {
                g.reshape(val(*x).shape()).expect("reshape adjoint")
            }),
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, wanted: bool, f: impl FnOnce() -> Tensor) {
    if !wanted {
        return;
    }
    let d = f();
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &d).expect("gradient shape"),
        slot @ None => *slot = Some(d),
    }
}

/// Largest relative discrepancy between the tape gradient of a scalar
/// function and its central finite difference,
/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-6·max_j |n_j|, 1e-12)`.
/// The floor keeps entries whose true gradient is (nearly) zero from
/// turning finite-difference rounding into huge relative errors.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 1e-7 && eps < 1e-3) {
        return Err(Error::InvalidArgument(alloc::format!(
            "finite-difference step {eps} outside (1e-7, 1e-3)"
        )));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    let analytic = tape.backward(root)?.get(leaf);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let r = f(&mut t, v)?;
        t.value(r).item()
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }
    let floor = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())) * 1e-6;
    Ok(numeric
        .iter()
        .zip(analytic.data())
        .map(|(&n, &a)| (a - n).abs() / a.abs().max(n.abs()).max(floor).max(1e-12))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, stream};

    #[test]
    fn mean_sq_values_and_gradient() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[3]));
        let r = t.mean_sq(z).unwrap();
        assert_eq!(t.value(r).item().unwrap(), 0.0);
        let a = t.constant(Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let r = t.mean_sq(a).unwrap();
        assert_eq!(t.value(r).item().unwrap(), 1.0);
        let b = t.constant(Tensor::from_vec(&[1], vec![3.0]));
        let r = t.mean_sq(b).unwrap();
        assert_eq!(t.value(r).item().unwrap(), 9.0);

        let mut t = Tape::new();
        let leaf = t.leaf(Tensor::from_vec(&[1], vec![2.0]));
        let root = t.mean_sq(leaf).unwrap();
        assert_eq!(t.backward(root).unwrap().get(leaf).data(), &[4.0]);
    }

    #[test]
    fn mean_sq_rejects_empty() {
        let mut t = Tape::new();
        let e = t.leaf(Tensor::zeros(&[0]));
        assert_eq!(t.mean_sq(e), Err(Error::EmptyTensor("mean_sq")));
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let used = t.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let unused = t.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let root = t.mean_sq(used).unwrap();
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
        assert_eq!(t.backward(Var(99)).unwrap_err(), Error::NotRecorded);
    }

    #[test]
    fn scalar_broadcast_sub_and_mul() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[2], vec![2.0, 3.0]));
        let y = t.scale(x, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
        let d = t.sub(x, x).unwrap();
        assert_eq!(t.value(d).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        let x0 = normal_tensor(&mut stream(5, 0, 0), &[2, 3, 6]);
        let w0 = normal_tensor(&mut stream(5, 1, 0), &[4, 3, 3]);
        let build = |t: &mut Tape, which: u8| {
            let x = t.leaf(x0.clone());
            let w = t.constant(w0.clone());
            let y = t.temporal_conv1d(x, w, None).unwrap();
            let s = t.silu(y).unwrap();
            let f = t.mean_sq(s).unwrap();
            let g = t.mean_sq(x).unwrap();
            let root = match which {
                0 => f,
                1 => g,
                _ => t.add(f, g).unwrap(),
            };
            (x, root)
        };
        let grad = |which| {
            let mut t = Tape::new();
            let (x, r) = build(&mut t, which);
            t.backward(r).unwrap().get(x)
        };
        let (gf, gg, gs) = (grad(0), grad(1), grad(2));
        assert!(gf.add(&gg).unwrap().max_abs_diff(&gs).unwrap() < 1e-14);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec(&[3], vec![0.3, 0.2, 0.1]);
        let err = gradient_check(
            |t, x| {
                let z = t.scale(x, 0.0)?;
                t.mean_sq(z)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
