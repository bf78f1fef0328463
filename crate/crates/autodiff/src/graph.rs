//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar with respect to every node that
//! (transitively) depends on a leaf created with `requires_grad = true`.

use crate::error::{invalid, shape_err, Result};
use crate::kernels::{self, ConvGeom, Taps};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, padding and dilation of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dOptions {
    /// Stride 1, "same" padding for an odd kernel of size `k` at `dilation`.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            dilation: 1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        out_ch: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
        dims: [usize; 4],
    },
    Softmax(Var),
    ChannelNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Resize {
        x: Var,
        planes: usize,
        hw: (usize, usize),
        ty: Taps,
        tx: Taps,
    },
    AvgPool(Var, usize),
    GlobalAvgPool(Var),
    MulChannel(Var, Var),
    BceLogits(Var, Tensor),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf tensor; trainable when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// 2D convolution of `x: [N, C, H, W]` with `w: [O, C, k, k]` and
    /// optional bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err("conv2d", format!("input {:?}, weight {:?}", xs, ws));
        }
        if xs[1] != ws[1] {
            return shape_err(
                "conv2d",
                format!("input channels {} vs weight channels {}", xs[1], ws[1]),
            );
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return shape_err("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0]));
            }
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride: opts.stride,
            padding: opts.padding,
            dilation: opts.dilation.max(1),
        };
        let Some((ho, wo)) = geom.out_hw() else {
            return shape_err("conv2d", format!("kernel does not fit input {:?}", xs));
        };
        let (n, o) = (xs[0], ws[0]);
        let hw = ho * wo;
        let in_plane = geom.channels * geom.height * geom.width;
        let rows = geom.col_rows();
        let mut out = vec![0.0; n * o * hw];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * hw] };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let xi = &xv[i * in_plane..(i + 1) * in_plane];
            let src: &[f64] = if geom.is_pointwise() {
                xi
            } else {
                kernels::im2col(xi, &geom, &mut cols);
                &cols
            };
            let dst = &mut out[i * o * hw..(i + 1) * o * hw];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (oc, chunk) in dst.chunks_mut(hw).enumerate() {
                    chunk.fill(bv[oc]);
                }
                kernels::gemm(o, rows, hw, wv, false, src, false, 1.0, dst);
            } else {
                kernels::gemm(o, rows, hw, wv, false, src, false, 0.0, dst);
            }
        }
        let t = Tensor::new(vec![n, o, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch: n,
                out_ch: o,
            },
            rg,
        ))
    }

    /// Batched matrix product over rank-3 operands `[B, M, K] · [B, K, N]`;
    /// `a_t` / `b_t` read the operand as stored transposed.
    pub fn bmm(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", format!("{:?} x {:?}", sa, sb));
        }
        let (m, k) = if a_t { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if b_t { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return shape_err("bmm", format!("inner dims {} vs {}", k, k2));
        }
        let batch = sa[0];
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                a_t,
                &bv[i * k * n..(i + 1) * k * n],
                b_t,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            t,
            Op::Bmm {
                a,
                b,
                a_t,
                b_t,
                dims: [batch, m, k, n],
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let Some(&last) = x.shape().last() else {
            return shape_err("softmax", "rank-0 input");
        };
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(last.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Standardizes every position's channel vector of an `[N, C, ...]`
    /// tensor to zero mean and unit variance (`eps` added to the variance).
    pub fn channel_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let sh = x.shape().to_vec();
        if sh.len() < 2 || sh[1] == 0 {
            return shape_err("channel_norm", format!("need [N, C, ...] with C ≥ 1, got {:?}", sh));
        }
        let (n, c) = (sh[0], sh[1]);
        let inner: usize = sh[2..].iter().product();
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; n * inner];
        for b in 0..n {
            for p in 0..inner {
                let at = |ch: usize| (b * c + ch) * inner + p;
                let mean = (0..c).map(|ch| xd[at(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xd[at(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[b * inner + p] = is;
                for ch in 0..c {
                    out[at(ch)] = (xd[at(ch)] - mean) * is;
                }
            }
        }
        let t = Tensor::new(sh, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::ChannelNorm { x: a, inv_std }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return invalid("permute", format!("{:?} is not a permutation of rank {}", perm, shape.len()));
        }
        let (data, out_shape) = kernels::permute(self.value(a).data(), &shape, perm);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return invalid("concat", format!("axis {} for rank {}", axis, base.len()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err("concat", format!("{:?} vs {:?} on axis {}", s, base, axis));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Bilinear resize of the trailing two axes (half-pixel centres).
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || out_h == 0 || out_w == 0 {
            return shape_err("resize_bilinear", format!("{:?} -> {}x{}", shape, out_h, out_w));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes: usize = shape[..r - 2].iter().product();
        let ty = Taps::new(h, out_h);
        let tx = Taps::new(w, out_w);
        let data = kernels::resize_forward(self.value(a).data(), planes, h, w, &ty, &tx);
        let mut os = shape.clone();
        os[r - 2] = out_h;
        os[r - 1] = out_w;
        let t = Tensor::new(os, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            t,
            Op::Resize {
                x: a,
                planes,
                hw: (h, w),
                ty,
                tx,
            },
            rg,
        ))
    }

    /// Non-overlapping `factor × factor` mean pooling of the trailing two axes.
    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || factor == 0 || !shape[r - 2].is_multiple_of(factor) || !shape[r - 1].is_multiple_of(factor) {
            return shape_err("avg_pool", format!("{:?} by factor {}", shape, factor));
        }
        let out = area_pool(self.value(a).data(), &shape, factor);
        let mut os = shape.clone();
        os[r - 2] /= factor;
        os[r - 1] /= factor;
        let t = Tensor::new(os, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::AvgPool(a, factor), rg))
    }

    /// Mean over the trailing two axes, keeping them as size 1.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return shape_err("global_avg_pool", format!("{:?}", shape));
        }
        let hw = shape[r - 2] * shape[r - 1];
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let mut os = shape.clone();
        os[r - 2] = 1;
        os[r - 1] = 1;
        let t = Tensor::new(os, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::GlobalAvgPool(a), rg))
    }

    /// `x: [N, C, ...] * m: [N, 1, ...]`, broadcasting `m` over channels.
    pub fn mul_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xs, ms) = (self.shape(x).to_vec(), self.shape(m).to_vec());
        if xs.len() < 2 || ms.len() != xs.len() || ms[0] != xs[0] || ms[1] != 1 || ms[2..] != xs[2..] {
            return shape_err("mul_channel", format!("{:?} * {:?}", xs, ms));
        }
        let plane: usize = xs[2..].iter().product();
        let c = xs[1];
        let (xv, mv) = (self.value(x).data(), self.value(m).data());
        let mut out = Vec::with_capacity(xv.len());
        for n in 0..xs[0] {
            let mp = &mv[n * plane..(n + 1) * plane];
            for ch in 0..c {
                let xp = &xv[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                out.extend(xp.iter().zip(mp).map(|(a, b)| a * b));
            }
        }
        let t = Tensor::new(xs, out)?;
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(t, Op::MulChannel(x, m), rg))
    }

    /// Mean binary cross-entropy between logits and a target in `[0, 1]`,
    /// evaluated as `max(z, 0) - z·m + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor) -> Result<Var> {
        if self.shape(z) != target.shape() {
            return shape_err(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.shape(z), target.shape()),
            );
        }
        let zv = self.value(z).data();
        let n = zv.len().max(1) as f64;
        let total: f64 = zv
            .iter()
            .zip(target.data())
            .map(|(&z, &m)| bce_term(z, m))
            .sum();
        let rg = self.rg(z);
        Ok(self.push(Tensor::scalar(total / n), Op::BceLogits(z, target.clone()), rg))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Gradient of scalar `loss` with respect to all grad-requiring nodes.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let g = zip(gy, self.value(*b), |g, y| g * y);
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = zip(gy, self.value(*a), |g, x| g * x);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gy.map(|g| g * s));
            }
            Op::Relu(a) => {
                let g = zip(gy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *a, g);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_ch,
            } => self.conv2d_backward(gy, *x, *w, *b, geom, *batch, *out_ch, grads),
            Op::Bmm { a, b, a_t, b_t, dims } => {
                let [batch, m, k, n] = *dims;
                let gyd = gy.data();
                if self.rg(*a) {
                    // dA = dC · op(B)^T, stored in A's layout
                    let bv = self.value(*b).data();
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gc = &gyd[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if *a_t {
                            // A stored k×m: dA^T = op(B) · dC^T
                            kernels::gemm(k, n, m, bi, *b_t, gc, true, 0.0, dst);
                        } else {
                            kernels::gemm(m, n, k, gc, false, bi, !*b_t, 0.0, dst);
                        }
                    }
                    let t = Tensor::new(self.shape(*a).to_vec(), ga).expect("shape");
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gc = &gyd[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *b_t {
                            // B stored n×k: dB^T = dC^T · op(A)
                            kernels::gemm(n, m, k, gc, true, ai, *a_t, 0.0, dst);
                        } else {
                            kernels::gemm(k, m, n, ai, !*a_t, gc, false, 0.0, dst);
                        }
                    }
                    let t = Tensor::new(self.shape(*b).to_vec(), gb).expect("shape");
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let last = *y.shape().last().unwrap_or(&1);
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), gyr) in g
                    .chunks_mut(last.max(1))
                    .zip(y.data().chunks(last.max(1)))
                    .zip(gy.data().chunks(last.max(1)))
                {
                    let dot: f64 = yr.iter().zip(gyr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in gr.iter_mut().zip(yr).zip(gyr) {
                        *o = yi * (gi - dot);
                    }
                }
                let t = Tensor::new(y.shape().to_vec(), g).expect("shape");
                self.accumulate(grads, *a, t);
            }
            Op::ChannelNorm { x, inv_std } => {
                let y = &node.value;
                let sh = y.shape();
                let (n, c) = (sh[0], sh[1]);
                let inner: usize = sh[2..].iter().product();
                let (yd, gd) = (y.data(), gy.data());
                let mut g = vec![0.0; y.len()];
                for b in 0..n {
                    for p in 0..inner {
                        let at = |ch: usize| (b * c + ch) * inner + p;
                        let mg = (0..c).map(|ch| gd[at(ch)]).sum::<f64>() / c as f64;
                        let mgy = (0..c).map(|ch| gd[at(ch)] * yd[at(ch)]).sum::<f64>() / c as f64;
                        let is = inv_std[b * inner + p];
                        for ch in 0..c {
                            g[at(ch)] = is * (gd[at(ch)] - mg - yd[at(ch)] * mgy);
                        }
                    }
                }
                let t = Tensor::new(sh.to_vec(), g).expect("shape");
                self.accumulate(grads, *x, t);
            }
            Op::Reshape(a) => {
                let t = gy.reshape(self.shape(*a).to_vec()).expect("shape");
                self.accumulate(grads, *a, t);
            }
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_perm(perm);
                let (d, s) = kernels::permute(gy.data(), gy.shape(), &inv);
                self.accumulate(grads, *a, Tensor::new(s, d).expect("shape"));
            }
            Op::Concat(parts, axis) => {
                let shape = gy.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&gy.data()[o * total + offset..o * total + offset + len]);
                        }
                        let t = Tensor::new(self.shape(p).to_vec(), d).expect("shape");
                        self.accumulate(grads, p, t);
                    }
                    offset += len;
                }
            }
            Op::Resize { x, planes, hw, ty, tx } => {
                let d = kernels::resize_backward(gy.data(), *planes, hw.0, hw.1, ty, tx);
                let t = Tensor::new(self.shape(*x).to_vec(), d).expect("shape");
                self.accumulate(grads, *x, t);
            }
            Op::AvgPool(a, f) => {
                let shape = self.shape(*a);
                let r = shape.len();
                let (h, w) = (shape[r - 2], shape[r - 1]);
                let (oh, ow) = (h / f, w / f);
                let planes: usize = shape[..r - 2].iter().product();
                let inv = 1.0 / (f * f) as f64;
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..h {
                        for x in 0..w {
                            d[(p * h + y) * w + x] = gy.data()[(p * oh + y / f) * ow + x / f] * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(shape.to_vec(), d).expect("shape"));
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.shape(*a);
                let r = shape.len();
                let hw = shape[r - 2] * shape[r - 1];
                let mut d = Vec::with_capacity(hw * gy.len());
                for &g in gy.data() {
                    d.extend(std::iter::repeat_n(g / hw as f64, hw));
                }
                self.accumulate(grads, *a, Tensor::new(shape.to_vec(), d).expect("shape"));
            }
            Op::MulChannel(x, m) => {
                let xs = self.shape(*x);
                let plane: usize = xs[2..].iter().product();
                let c = xs[1];
                let (xv, mv) = (self.value(*x).data(), self.value(*m).data());
                let gyd = gy.data();
                if self.rg(*x) {
                    let mut d = Vec::with_capacity(gyd.len());
                    for n in 0..xs[0] {
                        let mp = &mv[n * plane..(n + 1) * plane];
                        for ch in 0..c {
                            let gp = &gyd[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                            d.extend(gp.iter().zip(mp).map(|(a, b)| a * b));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xs.to_vec(), d).expect("shape"));
                }
                if self.rg(*m) {
                    let mut d = vec![0.0; xs[0] * plane];
                    for n in 0..xs[0] {
                        for ch in 0..c {
                            let base = (n * c + ch) * plane;
                            for j in 0..plane {
                                d[n * plane + j] += gyd[base + j] * xv[base + j];
                            }
                        }
                    }
                    let t = Tensor::new(self.shape(*m).to_vec(), d).expect("shape");
                    self.accumulate(grads, *m, t);
                }
            }
            Op::BceLogits(z, target) => {
                let g0 = gy.item();
                let zv = self.value(*z);
                let n = zv.len().max(1) as f64;
                let d: Vec<f64> = zv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &m)| g0 * (sigmoid(z) - m) / n)
                    .collect();
                self.accumulate(grads, *z, Tensor::new(zv.shape().to_vec(), d).expect("shape"));
            }
            Op::Mean(a) => {
                let s = self.shape(*a).to_vec();
                let n: usize = s.iter().product();
                let g = gy.item() / n.max(1) as f64;
                self.accumulate(grads, *a, Tensor::full(s, g));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        gy: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        batch: usize,
        out_ch: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let (ho, wo) = geom.out_hw().expect("valid geometry");
        let hw = ho * wo;
        let rows = geom.col_rows();
        let in_plane = geom.channels * geom.height * geom.width;
        let gyd = gy.data();
        if let Some(b) = b {
            if self.rg(b) {
                let mut gb = vec![0.0; out_ch];
                for i in 0..batch {
                    for (oc, acc) in gb.iter_mut().enumerate() {
                        let s = (i * out_ch + oc) * hw;
                        *acc += gyd[s..s + hw].iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, b, Tensor::new(vec![out_ch], gb).expect("shape"));
            }
        }
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        if !need_w && !need_x {
            return;
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let pointwise = geom.is_pointwise();
        let mut gw = if need_w { vec![0.0; out_ch * rows] } else { Vec::new() };
        let mut gx = if need_x { vec![0.0; batch * in_plane] } else { Vec::new() };
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * hw] };
        let mut dcols = if need_x && !pointwise { vec![0.0; rows * hw] } else { Vec::new() };
        for i in 0..batch {
            let gyi = &gyd[i * out_ch * hw..(i + 1) * out_ch * hw];
            let xi = &xv[i * in_plane..(i + 1) * in_plane];
            if need_w {
                let src: &[f64] = if pointwise {
                    xi
                } else {
                    kernels::im2col(xi, geom, &mut cols);
                    &cols
                };
                kernels::gemm(out_ch, hw, rows, gyi, false, src, true, 1.0, &mut gw);
            }
            if need_x {
                let gxi = &mut gx[i * in_plane..(i + 1) * in_plane];
                if pointwise {
                    kernels::gemm(rows, out_ch, hw, wv, true, gyi, false, 0.0, gxi);
                } else {
                    kernels::gemm(rows, out_ch, hw, wv, true, gyi, false, 0.0, &mut dcols);
                    kernels::col2im(&dcols, geom, gxi);
                }
            }
        }
        if need_w {
            let t = Tensor::new(self.shape(w).to_vec(), gw).expect("shape");
            self.accumulate(grads, w, t);
        }
        if need_x {
            let t = Tensor::new(self.shape(x).to_vec(), gx).expect("shape");
            self.accumulate(grads, x, t);
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), d).expect("same shape")
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One pixel of binary cross-entropy with logits.
pub fn bce_term(z: f64, m: f64) -> f64 {
    z.max(0.0) - z * m + (-z.abs()).exp().ln_1p()
}

/// Non-overlapping mean pooling over the trailing two axes of `shape`.
pub fn area_pool(x: &[f64], shape: &[usize], factor: usize) -> Vec<f64> {
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let (oh, ow) = (h / factor, w / factor);
    let planes: usize = shape[..r - 2].iter().product();
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out[(p * oh + y / factor) * ow + xx / factor] += x[(p * h + y) * w + xx];
            }
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    out
}
