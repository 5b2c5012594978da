//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] records every op eagerly. Nodes whose inputs do not require a
//! gradient are evaluated but never visited by [`Tape::backward`], so a pass
//! that only differentiates w.r.t. a late input (e.g. the null embedding)
//! pays no backward cost for the layers in front of it.

use super::kernels::{self, ConvGeom};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F: Float> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    MaskedSoftmax { x: Var },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Option<Vec<F>> },
    UpNearest { x: Var, c: usize, h: usize, w: usize },
    Bilinear { x: Var, c: usize, from: (usize, usize), to: (usize, usize) },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, c: usize, hw: usize, xhat: Vec<F>, rstd: Vec<F> },
    Silu(Var),
    Embedding { table: Var, ids: Vec<usize>, over: Option<(Var, usize)> },
    Sum(Var),
    Mean(Var),
    L1(Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Slice { x: Var, start: usize },
}

struct Node<F: Float> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Eager computation record supporting one or more backward sweeps.
pub struct Tape<F: Float = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (never receives a gradient).
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push_raw(t.detach(), Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push_raw(t.detach(), Op::Leaf, true)
    }

    /// Copies `v`'s value into a new constant: gradients stop here.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.detach();
        self.constant(t)
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

    /// Gradient from the most recent [`backward`](Self::backward), as a tensor.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].value.grad_tensor()
    }

    fn push_raw(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    // ----- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(self.value(b))?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).sub(self.value(b))?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).mul(self.value(b))?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let t = self.value(a).scale(s);
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Result<Var> {
        let t = self.value(a).map(|x| x + s);
        self.push("add_scalar", t, Op::AddScalar(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x * kernels::sigmoid(x));
        self.push("silu", t, Op::Silu(a), &[a])
    }

    // ----- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank-2 required, got {:?}", x.shape())));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let t = Tensor::raw(vec![n, m], kernels::transpose(x.data(), m, n));
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    /// Contiguous flat slice `[start, start+len)` returned as a rank-1 tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if len == 0 || start + len > x.numel() {
            return Err(Error::shape("slice", format!("{start}+{len} of {}", x.numel())));
        }
        let t = Tensor::raw(vec![len], x.data()[start..start + len].to_vec());
        self.push("slice", t, Op::Slice { x: a, start }, &[a])
    }

    // ----- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", Tensor::raw(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || self.value(b).numel() != sx[1] {
            return Err(Error::shape("add_row", format!("{sx:?} + {sb:?}")));
        }
        let n = sx[1];
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let t = Tensor::raw(sx.to_vec(), data);
        self.push("add_row", t, Op::AddRow(x, b), &[x, b])
    }

    fn channel_check(&self, x: Var, c: Var, op: &'static str) -> Result<usize> {
        let sx = self.shape(x);
        if sx.len() < 2 || self.value(c).numel() != sx[0] {
            return Err(Error::shape(op, format!("{sx:?} with {:?}", self.shape(c))));
        }
        Ok(self.value(x).numel() / sx[0])
    }

    /// `x[c, ...] + b[c]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let per = self.channel_check(x, b, "add_channel")?;
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i / per])
            .collect();
        let t = Tensor::raw(self.shape(x).to_vec(), data);
        self.push("add_channel", t, Op::AddChannel(x, b), &[x, b])
    }

    /// `x[c, ...] * s[c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let per = self.channel_check(x, s, "mul_channel")?;
        let sc = self.data(s);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sc[i / per])
            .collect();
        let t = Tensor::raw(self.shape(x).to_vec(), data);
        self.push("mul_channel", t, Op::MulChannel(x, s), &[x, s])
    }

    // ----- normalisation / attention ---------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        self.value(x).check_finite("softmax input")?;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let y = kernels::softmax(self.data(x), outer, n, inner);
        self.push(
            "softmax",
            Tensor::raw(shape, y),
            Op::Softmax { x, outer, n, inner },
            &[x],
        )
    }

    /// Row softmax of `x[m,n]` with masked columns given zero probability.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || keep.len() != shape[1] {
            return Err(Error::shape("masked_softmax_rows", format!("{shape:?} mask {}", keep.len())));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::invalid("masked_softmax_rows: every column masked"));
        }
        self.value(x).check_finite("softmax input")?;
        let y = kernels::masked_softmax_rows(self.data(x), shape[0], shape[1], keep);
        self.push("masked_softmax_rows", Tensor::raw(shape, y), Op::MaskedSoftmax { x }, &[x])
    }

    /// Group normalization of `x[c,h,w]` (or `x[c,n]`).
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        if shape.len() < 2 || groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{shape:?} groups {groups}")));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("group_norm", "affine parameters must have C elements"));
        }
        let hw = self.value(x).numel() / c;
        let out = kernels::group_norm(self.data(x), c, hw, groups, self.data(gamma), self.data(beta));
        let needs = [x, gamma, beta].iter().any(|v| self.needs_grad(*v));
        let (xhat, rstd) = if needs { (out.xhat, out.rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            "group_norm",
            Tensor::raw(shape, out.y),
            Op::GroupNorm { x, gamma, beta, groups, c, hw, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    // ----- spatial ------------------------------------------------------------

    /// 3×3 convolution with zero padding 1: `x[cin,h,w]`, `w[cout,cin,3,3]`, `b[cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::shape("conv3x3", format!("x {sx:?} w {sw:?}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!("conv3x3 stride {stride}")));
        }
        let cout = sw[0];
        if self.value(b).numel() != cout {
            return Err(Error::shape("conv3x3", "bias must have cout elements"));
        }
        let geom = ConvGeom {
            cin: sx[0],
            h: sx[1],
            w: sx[2],
            stride,
        };
        let cols = kernels::im2col(self.data(x), geom);
        let p = geom.p();
        let mut out = vec![F::zero(); cout * p];
        kernels::matmul(self.data(w), &cols, &mut out, cout, geom.k(), p);
        let bias = self.data(b);
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            for v in chunk {
                *v = *v + bias[co];
            }
        }
        let keep_cols = self.needs_grad(w).then_some(cols);
        self.push(
            "conv3x3",
            Tensor::raw(vec![cout, geom.out_h(), geom.out_w()], out),
            Op::Conv { x, w, b, geom, cols: keep_cols },
            &[x, w, b],
        )
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("upsample_nearest2x", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut out = vec![F::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[ch * 4 * h * w + y * 2 * w + xx] = src[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        self.push(
            "upsample_nearest2x",
            Tensor::raw(vec![c, 2 * h, 2 * w], out),
            Op::UpNearest { x, c, h, w },
            &[x],
        )
    }

    /// Half-pixel-centre bilinear resize of `x[c,h,w]` to `[c, oh, ow]`.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || oh == 0 || ow == 0 {
            return Err(Error::shape("resize_bilinear", format!("{s:?} -> {oh}x{ow}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = kernels::resize_bilinear(self.data(x), c, (h, w), (oh, ow));
        self.push(
            "resize_bilinear",
            Tensor::raw(vec![c, oh, ow], out),
            Op::Bilinear { x, c, from: (h, w), to: (oh, ow) },
            &[x],
        )
    }

    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("upsample_bilinear2x", format!("{s:?}")));
        }
        self.resize_bilinear(x, 2 * s[1], 2 * s[2])
    }

    /// Row lookup `table[ids]` → `[len(ids), d]`. Positions whose id equals
    /// `over.1` read the rank-1 row `over.0` instead of the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize], over: Option<(Var, usize)>) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape("embedding", format!("table {st:?}")));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        if let Some((row, _)) = over {
            if self.value(row).numel() != d {
                return Err(Error::shape("embedding", "override row width"));
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            match over {
                Some((row, oid)) if oid == id => out.extend_from_slice(self.data(row)),
                _ => out.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]),
            }
        }
        let mut inputs = vec![table];
        if let Some((row, _)) = over {
            inputs.push(row);
        }
        self.push(
            "embedding",
            Tensor::raw(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec(), over },
            &inputs,
        )
    }

    // ----- reductions -----------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_f64();
        self.push("sum", Tensor::scalar(F::of(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).mean_f64();
        self.push("mean", Tensor::scalar(F::of(s)), Op::Mean(x), &[x])
    }

    /// `Σ |x|`.
    pub fn l1(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().fold(0.0f64, |a, v| a + v.abs().f64());
        self.push("l1", Tensor::scalar(F::of(s)), Op::L1(x), &[x])
    }

    // ----- backward ---------------------------------------------------------------

    /// Clears every stored gradient, then back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with(loss, Tensor::full(&[1], F::one()))
    }

    /// Back-propagates an explicit upstream gradient `seed` (same shape as `out`).
    pub fn backward_with(&mut self, out: Var, seed: Tensor<F>) -> Result<()> {
        if self.value(out).shape() != seed.shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.shape(out)),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        grads[out.0] = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: Vec<F>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let y = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&g, &b)| g * b).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&g, &a)| g * a).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| {
                        let s = kernels::sigmoid(x);
                        g * s * (F::one() + x * (F::one() - s))
                    })
                    .collect();
                acc(*a, d);
            }
            Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                // y is [n, m]; its transpose is the gradient of x[m, n].
                acc(*a, kernels::transpose(g, s[1], s[0]));
            }
            Op::Slice { x, start } => {
                let mut d = vec![F::zero(); nodes[x.0].value.numel()];
                d[*start..*start + g.len()].copy_from_slice(g);
                acc(*x, d);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let mut da = vec![F::zero(); m * k];
                    kernels::matmul_nt_acc(g, val(*b), &mut da, m, n, k);
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![F::zero(); k * n];
                    kernels::matmul_tn_acc(val(*a), g, &mut db, k, m, n);
                    acc(*b, db);
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.to_vec());
                if needs(*b) {
                    let n = nodes[b.0].value.numel();
                    let mut db = vec![0.0f64; n];
                    for (idx, &v) in g.iter().enumerate() {
                        db[idx % n] += v.f64();
                    }
                    acc(*b, db.into_iter().map(F::of).collect());
                }
            }
            Op::AddChannel(x, b) => {
                acc(*x, g.to_vec());
                if needs(*b) {
                    let c = nodes[b.0].value.numel();
                    let per = g.len() / c;
                    let db = g
                        .chunks(per)
                        .map(|ch| F::of(ch.iter().fold(0.0f64, |a, v| a + v.f64())))
                        .collect();
                    acc(*b, db);
                }
            }
            Op::MulChannel(x, s) => {
                let c = nodes[s.0].value.numel();
                let per = g.len() / c;
                if needs(*x) {
                    let sc = val(*s);
                    acc(*x, g.iter().enumerate().map(|(i, &v)| v * sc[i / per]).collect());
                }
                if needs(*s) {
                    let xs = val(*x);
                    let ds = (0..c)
                        .map(|ch| {
                            let r = ch * per..(ch + 1) * per;
                            F::of(
                                g[r.clone()]
                                    .iter()
                                    .zip(&xs[r])
                                    .fold(0.0f64, |a, (g, x)| a + (*g * *x).f64()),
                            )
                        })
                        .collect();
                    acc(*s, ds);
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                acc(*x, kernels::softmax_backward(y, g, *outer, *n, *inner));
            }
            Op::MaskedSoftmax { x } => {
                let s = nodes[i].value.shape();
                acc(*x, kernels::softmax_backward(y, g, s[0], s[1], 1));
            }
            Op::GroupNorm { x, gamma, beta, groups, c, hw, xhat, rstd } => {
                let (dx, dgamma, dbeta) =
                    kernels::group_norm_backward(g, xhat, rstd, val(*gamma), *c, *hw, *groups);
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Conv { x, w, b, geom, cols } => {
                let (cout, k, p) = (nodes[w.0].value.shape()[0], geom.k(), geom.p());
                if needs(*w) {
                    let cols = cols
                        .as_ref()
                        .ok_or_else(|| Error::invalid("conv3x3: columns not retained"))?;
                    let mut dw = vec![F::zero(); cout * k];
                    kernels::matmul_nt_acc(g, cols, &mut dw, cout, p, k);
                    acc(*w, dw);
                }
                if needs(*b) {
                    let db = g
                        .chunks(p)
                        .map(|ch| F::of(ch.iter().fold(0.0f64, |a, v| a + v.f64())))
                        .collect();
                    acc(*b, db);
                }
                if needs(*x) {
                    let mut dcols = vec![F::zero(); k * p];
                    kernels::matmul_tn_acc(val(*w), g, &mut dcols, k, cout, p);
                    let mut dx = vec![F::zero(); nodes[x.0].value.numel()];
                    kernels::col2im_acc(&dcols, &mut dx, *geom);
                    acc(*x, dx);
                }
            }
            Op::UpNearest { x, c, h, w } => {
                let (c, h, w) = (*c, *h, *w);
                let mut dx = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let d = &mut dx[ch * h * w + (yy / 2) * w + xx / 2];
                            *d = *d + g[ch * 4 * h * w + yy * 2 * w + xx];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Bilinear { x, c, from, to } => {
                acc(*x, kernels::resize_bilinear_backward(g, *c, *from, *to));
            }
            Op::Embedding { table, ids, over } => {
                let d = nodes[table.0].value.shape()[1];
                let over_id = over.map(|(_, id)| id);
                if needs(*table) {
                    let mut dt = vec![F::zero(); nodes[table.0].value.numel()];
                    for (pos, &id) in ids.iter().enumerate() {
                        if Some(id) == over_id {
                            continue;
                        }
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g[pos * d + j];
                        }
                    }
                    acc(*table, dt);
                }
                if let Some((row, oid)) = over {
                    if needs(*row) {
                        let mut dr = vec![F::zero(); d];
                        for (pos, &id) in ids.iter().enumerate() {
                            if id == *oid {
                                for j in 0..d {
                                    dr[j] = dr[j] + g[pos * d + j];
                                }
                            }
                        }
                        acc(*row, dr);
                    }
                }
            }
            Op::Sum(x) => {
                let n = nodes[x.0].value.numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                acc(*x, vec![g[0] / F::of(n as f64); n]);
            }
            Op::L1(x) => {
                let d = val(*x)
                    .iter()
                    .map(|&v| {
                        if v > F::zero() {
                            g[0]
                        } else if v < F::zero() {
                            -g[0]
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                acc(*x, d);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetric_pair() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_log_ratio() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let f = tape.sum(sq).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_multiplier_rule() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[3], &[0.5, -1.5, 2.0]));
        let sx = tape.stop_gradient(x);
        let p = tape.mul(sx, x).unwrap();
        let f = tape.sum(p).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.input(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(a, b).unwrap();
        let f = tape.sum(p).unwrap();
        tape.backward(f).unwrap();
        assert!(tape.grad(a).is_none());
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn repeated_backward_resets_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[1], &[3.0]));
        let f = tape.sum(x).unwrap();
        tape.backward(f).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn embedding_override_routes_gradient() {
        let mut tape = Tape::<f64>::new();
        let table = tape.input(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = tape.input(t(&[2], &[10.0, 20.0]));
        let e = tape.embedding(table, &[0, 1, 0], Some((row, 0))).unwrap();
        assert_eq!(tape.value(e).data(), &[10.0, 20.0, 3.0, 4.0, 10.0, 20.0]);
        let f = tape.sum(e).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(row).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(tape.grad(table).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
