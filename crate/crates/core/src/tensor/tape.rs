//! Gradient tape: records forward ops in execution order and replays
//! them in exact reverse order on `backward`.
//!
//! A tape is confined to one thread. Data parallelism happens one
//! level up by running independent tapes per batch shard and summing
//! leaf gradients afterward.

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64 },
    UpsampleNearest2x(NodeId),
    AvgPool2x(NodeId),
    MatMul(NodeId, NodeId),
    Transpose2d(NodeId),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    ConcatChannels(Vec<NodeId>),
    /// `[N,C,H,W]` -> `[H*W, c1-c0]` for one batch index: pixel rows,
    /// channel columns. Used to feed attention.
    HeadRows { x: NodeId, n: usize, c0: usize, c1: usize },
    /// Inverse of a set of `HeadRows` extractions: parts are ordered
    /// batch-major then head-major and reassemble to `[N,C,H,W]`.
    StackHeads { parts: Vec<NodeId>, head_width: usize },
    /// x[n,c,h,w] * (1 + scale[c]) + shift[c]
    ScaleShift { x: NodeId, scale: NodeId, shift: NodeId },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op,
}

/// Records ops for one forward pass; `backward` may run once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Leaves with `requires_grad` receive
    /// accumulated gradients on `backward`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient buffer of a node, if backward has populated it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn val(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    // ---- elementwise ----

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op_name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b)?;
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("sub", a, b)?;
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b)?;
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let f = T::from_f64(factor);
        let value = self.nodes[a.0].value.map(|x| x * f);
        let rg = self.requires(a);
        self.push(value, rg, Op::Scale(a, factor))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| x * kernels::sigmoid(x));
        let rg = self.requires(a);
        self.push(value, rg, Op::Silu(a))
    }

    // ---- dense / conv ----

    /// y[i,o] = sum_d x[i,d] * w[o,d] + b[o], x `[n,din]`, w `[dout,din]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(TensorError::shape(
                "linear",
                format!("want x[n,din], w[dout,din], b[dout]; got {:?} {:?} {:?}", xs, ws, bs),
            ));
        }
        let (n, din) = (xs[0], xs[1]);
        let (dout, wdin) = (ws[0], ws[1]);
        if wdin != din {
            return Err(TensorError::shape(
                "linear",
                format!("input axis: x has {}, w has {}", din, wdin),
            ));
        }
        if bs[0] != dout {
            return Err(TensorError::shape(
                "linear",
                format!("output axis: w has {}, b has {}", dout, bs[0]),
            ));
        }
        let mut out = vec![T::zero(); n * dout];
        kernels::matmul_bt_acc(&mut out, self.val(x), self.val(w), n, din, dout);
        let bias = self.val(b);
        for row in out.chunks_exact_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(value, rg, Op::Linear { x, w, b }))
    }

    /// 2-D convolution, NCHW, zero padding. Kernel extents must be odd
    /// and the output geometry must divide exactly.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(TensorError::shape(
                "conv2d",
                format!("want x[N,C,H,W], w[O,C,kh,kw], b[O]; got {:?} {:?} {:?}", xs, ws, bs),
            ));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::invalid("conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be >= 1"));
        }
        if wc != c {
            return Err(TensorError::shape(
                "conv2d",
                format!("channel axis: input has {c}, kernel expects {wc}"),
            ));
        }
        if bs[0] != o {
            return Err(TensorError::shape(
                "conv2d",
                format!("output-channel axis: kernel has {o}, bias has {}", bs[0]),
            ));
        }
        let oh = kernels::conv_out_extent(h, kh, stride, pad).ok_or_else(|| {
            TensorError::invalid(
                "conv2d",
                format!("height axis: extent {h} with kernel {kh}, stride {stride}, pad {pad} does not divide"),
            )
        })?;
        let ow = kernels::conv_out_extent(wd, kw, stride, pad).ok_or_else(|| {
            TensorError::invalid(
                "conv2d",
                format!("width axis: extent {wd} with kernel {kw}, stride {stride}, pad {pad} does not divide"),
            )
        })?;

        let patch = c * kh * kw;
        let cols = oh * ow;
        let mut out = vec![T::zero(); n * o * cols];
        let xv = self.val(x);
        let wv = self.val(w);
        let bv = self.val(b);
        for ni in 0..n {
            let col = kernels::im2col(
                &xv[ni * c * h * wd..(ni + 1) * c * h * wd],
                c,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
            );
            let dst = &mut out[ni * o * cols..(ni + 1) * o * cols];
            kernels::matmul_acc(dst, wv, &col, o, patch, cols);
            for (oi, plane) in dst.chunks_exact_mut(cols).enumerate() {
                let bias = bv[oi];
                for v in plane {
                    *v += bias;
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Normalizes each (sample, group) slice to zero mean / unit
    /// variance, then applies the per-channel affine.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape("group_norm", format!("want [N,C,H,W], got {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::invalid(
                "group_norm",
                format!("channels {c} not divisible by groups {groups}"),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape(
                "group_norm",
                format!("affine params must be [{c}], got {:?} and {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let cg = c / groups;
        let plane = h * w;
        let gsz = cg * plane;
        let xv = self.val(x);
        let gv = self.val(gamma);
        let bv = self.val(beta);
        let mut out = vec![T::zero(); xv.len()];
        let epsv = T::from_f64(eps);
        let inv_m = T::one() / T::from_f64(gsz as f64);
        for ni in 0..n {
            for gi in 0..groups {
                let base = ni * c * plane + gi * gsz;
                let src = &xv[base..base + gsz];
                let mut mean = T::zero();
                for &v in src {
                    mean += v;
                }
                mean = mean * inv_m;
                let mut var = T::zero();
                for &v in src {
                    let d = v - mean;
                    var += d * d;
                }
                var = var * inv_m;
                let inv_std = T::one() / (var + epsv).sqrt();
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let s = &src[ci * plane..(ci + 1) * plane];
                    let d = &mut out[base + ci * plane..base + (ci + 1) * plane];
                    for (dv, &sv) in d.iter_mut().zip(s) {
                        *dv = ga * ((sv - mean) * inv_std) + be;
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, rg, Op::GroupNorm { x, gamma, beta, groups, eps }))
    }

    pub fn upsample_nearest_2x(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape("nearest_upsample2x", format!("want [N,C,H,W], got {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.val(x);
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for pc in 0..n * c {
            let src = &xv[pc * h * w..(pc + 1) * h * w];
            let dst = &mut out[pc * oh * ow..(pc + 1) * oh * ow];
            for y in 0..oh {
                let sy = y / 2;
                for x2 in 0..ow {
                    dst[y * ow + x2] = src[sy * w + x2 / 2];
                }
            }
        }
        let rg = self.requires(x);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, rg, Op::UpsampleNearest2x(x)))
    }

    pub fn avg_pool_2x(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape("avgpool2x", format!("want [N,C,H,W], got {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::invalid("avgpool2x", format!("extents {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let xv = self.val(x);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for pc in 0..n * c {
            let src = &xv[pc * h * w..(pc + 1) * h * w];
            let dst = &mut out[pc * oh * ow..(pc + 1) * oh * ow];
            for y in 0..oh {
                for x2 in 0..ow {
                    let s = src[2 * y * w + 2 * x2]
                        + src[2 * y * w + 2 * x2 + 1]
                        + src[(2 * y + 1) * w + 2 * x2]
                        + src[(2 * y + 1) * w + 2 * x2 + 1];
                    dst[y * ow + x2] = s * quarter;
                }
            }
        }
        let rg = self.requires(x);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, rg, Op::AvgPool2x(x)))
    }

    // ---- matrix / attention ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("inner axis: {:?} x {:?}", ash, bsh),
            ));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let out = kernels::matmul(self.val(a), self.val(b), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn transpose2d(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let ash = self.shape(a).to_vec();
        if ash.len() != 2 {
            return Err(TensorError::shape("transpose2d", format!("want 2-d, got {:?}", ash)));
        }
        let (m, n) = (ash[0], ash[1]);
        let av = self.val(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.requires(a);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, rg, Op::Transpose2d(a)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let ash = self.shape(a).to_vec();
        if ash.len() != 2 {
            return Err(TensorError::shape("softmax", format!("want 2-d, got {:?}", ash)));
        }
        let mut out = self.val(a).to_vec();
        kernels::softmax_rows_inplace(&mut out, ash[0], ash[1]);
        let rg = self.requires(a);
        let value = Tensor::new(ash, out)?;
        Ok(self.push(value, rg, Op::SoftmaxRows(a)))
    }

    /// softmax(q k^T / sqrt(d)) v for q,k,v of identical shape `[p,d]`.
    pub fn softmax_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
    ) -> Result<NodeId, TensorError> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 {
            return Err(TensorError::shape("softmax_attention", format!("want [p,d], got {:?}", qs)));
        }
        if self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(TensorError::shape(
                "softmax_attention",
                format!("q {:?}, k {:?}, v {:?}", qs, self.shape(k), self.shape(v)),
            ));
        }
        let d = qs[1];
        if d == 0 {
            return Err(TensorError::invalid("softmax_attention", "feature dim is zero"));
        }
        for id in [q, k, v] {
            if !self.nodes[id.0].value.is_all_finite() {
                return Err(TensorError::NonFinite { op: "softmax_attention" });
            }
        }
        let kt = self.transpose2d(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax_rows(scaled)?;
        self.matmul(weights, v)
    }

    // ---- reductions / shape ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in self.val(a) {
            s += v;
        }
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.val(a).len();
        let mut s = T::zero();
        for &v in self.val(a) {
            s += v;
        }
        let m = s / T::from_f64(n as f64);
        let rg = self.requires(a);
        self.push(Tensor::scalar(m), rg, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Concatenates `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_channels", "no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 4 {
            return Err(TensorError::shape("concat_channels", format!("want [N,C,H,W], got {:?}", first)));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut ctot = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("non-channel axes differ: {:?} vs {:?}", first, s),
                ));
            }
            ctot += s[1];
        }
        let plane = h * w;
        let mut out = vec![T::zero(); n * ctot * plane];
        for ni in 0..n {
            let mut coff = 0;
            for &p in parts {
                let ci = self.shape(p)[1];
                let src = &self.val(p)[ni * ci * plane..(ni + 1) * ci * plane];
                out[(ni * ctot + coff) * plane..(ni * ctot + coff + ci) * plane]
                    .copy_from_slice(src);
                coff += ci;
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        let value = Tensor::new(vec![n, ctot, h, w], out)?;
        Ok(self.push(value, rg, Op::ConcatChannels(parts.to_vec())))
    }

    /// Channel range `[c0,c1)` of batch element `n`, flattened to
    /// pixel-major rows `[H*W, c1-c0]`.
    pub fn head_rows(
        &mut self,
        x: NodeId,
        n: usize,
        c0: usize,
        c1: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape("head_rows", format!("want [N,C,H,W], got {:?}", xs)));
        }
        if n >= xs[0] || c1 > xs[1] || c0 >= c1 {
            return Err(TensorError::invalid(
                "head_rows",
                format!("slice n={n} c=[{c0},{c1}) out of bounds for {:?}", xs),
            ));
        }
        let (c, h, w) = (xs[1], xs[2], xs[3]);
        let plane = h * w;
        let width = c1 - c0;
        let xv = self.val(x);
        let mut out = vec![T::zero(); plane * width];
        for (j, ch) in (c0..c1).enumerate() {
            let src = &xv[(n * c + ch) * plane..(n * c + ch + 1) * plane];
            for p in 0..plane {
                out[p * width + j] = src[p];
            }
        }
        let rg = self.requires(x);
        let value = Tensor::new(vec![plane, width], out)?;
        Ok(self.push(value, rg, Op::HeadRows { x, n, c0, c1 }))
    }

    /// Reassembles per-(sample, head) pixel-row matrices back into an
    /// `[N,C,H,W]` tensor. `parts` is batch-major, head-minor; each part
    /// is `[H*W, head_width]`.
    pub fn stack_heads(
        &mut self,
        parts: &[NodeId],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<NodeId, TensorError> {
        if c == 0 || parts.is_empty() || parts.len() % n != 0 {
            return Err(TensorError::invalid("stack_heads", "part count must be a multiple of batch"));
        }
        let heads = parts.len() / n;
        if c % heads != 0 {
            return Err(TensorError::invalid(
                "stack_heads",
                format!("channels {c} not divisible by {heads} heads"),
            ));
        }
        let head_width = c / heads;
        let plane = h * w;
        for &p in parts {
            if self.shape(p) != [plane, head_width] {
                return Err(TensorError::shape(
                    "stack_heads",
                    format!("part is {:?}, want [{plane},{head_width}]", self.shape(p)),
                ));
            }
        }
        let mut out = vec![T::zero(); n * c * plane];
        for ni in 0..n {
            for hd in 0..heads {
                let pv = self.val(parts[ni * heads + hd]);
                for j in 0..head_width {
                    let ch = hd * head_width + j;
                    let dst = &mut out[(ni * c + ch) * plane..(ni * c + ch + 1) * plane];
                    for p in 0..plane {
                        dst[p] = pv[p * head_width + j];
                    }
                }
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, rg, Op::StackHeads { parts: parts.to_vec(), head_width }))
    }

    /// x[n,c,h,w] * (1 + scale[c]) + shift[c]; the conditioning path
    /// feeding time embeddings into residual blocks.
    pub fn scale_shift(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape("scale_shift", format!("want [N,C,H,W], got {:?}", xs)));
        }
        let c = xs[1];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(TensorError::shape(
                "scale_shift",
                format!("scale {:?} / shift {:?} must both be [{c}]", self.shape(scale), self.shape(shift)),
            ));
        }
        let plane = xs[2] * xs[3];
        let xv = self.val(x);
        let sv = self.val(scale);
        let tv = self.val(shift);
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..xs[0] {
            for ch in 0..c {
                let s = T::one() + sv[ch];
                let t = tv[ch];
                let base = (ni * c + ch) * plane;
                for p in 0..plane {
                    out[base + p] = xv[base + p] * s + t;
                }
            }
        }
        let rg = self.requires(x) || self.requires(scale) || self.requires(shift);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, rg, Op::ScaleShift { x, scale, shift }))
    }

    // ---- backward ----

    /// Runs reverse-mode accumulation from a scalar loss. Each leaf
    /// with `requires_grad` ends up with exactly one accumulated
    /// gradient; leaves the loss never touched keep zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardConsumed);
        }
        let lshape = self.shape(loss);
        if lshape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(lshape.to_vec()));
        }
        self.backward_done = true;

        for node in self.nodes.iter_mut() {
            if node.requires_grad {
                node.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = T::one();
        } else {
            // Loss independent of every requires_grad leaf: nothing to do.
            return Ok(());
        }

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.step_backward(idx);
        }
        Ok(())
    }

    fn take_grad(&mut self, idx: usize) -> Vec<T> {
        self.nodes[idx].grad.clone().expect("grad allocated for requires_grad node")
    }

    fn acc_into(&mut self, id: NodeId, contrib: &[T]) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            for (gv, &cv) in g.iter_mut().zip(contrib) {
                *gv += cv;
            }
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].grad.is_some()
    }

    #[allow(clippy::needless_range_loop)]
    fn step_backward(&mut self, idx: usize) {
        // Ops are dispatched on a copied descriptor so the node table
        // can be borrowed for reads and grad accumulation separately.
        enum Desc {
            Nop,
            Add(NodeId, NodeId),
            Sub(NodeId, NodeId),
            Mul(NodeId, NodeId),
            Scale(NodeId, f64),
            Silu(NodeId),
            Linear(NodeId, NodeId, NodeId),
            Conv2d(NodeId, NodeId, NodeId, usize, usize),
            GroupNorm(NodeId, NodeId, NodeId, usize, f64),
            Upsample(NodeId),
            AvgPool(NodeId),
            MatMul(NodeId, NodeId),
            Transpose(NodeId),
            SoftmaxRows(NodeId),
            Sum(NodeId),
            Mean(NodeId),
            Reshape(NodeId),
            Concat(Vec<NodeId>),
            HeadRows(NodeId, usize, usize, usize),
            StackHeads(Vec<NodeId>, usize),
            ScaleShift(NodeId, NodeId, NodeId),
        }
        let desc = match &self.nodes[idx].op {
            Op::Leaf => Desc::Nop,
            Op::Add(a, b) => Desc::Add(*a, *b),
            Op::Sub(a, b) => Desc::Sub(*a, *b),
            Op::Mul(a, b) => Desc::Mul(*a, *b),
            Op::Scale(a, f) => Desc::Scale(*a, *f),
            Op::Silu(a) => Desc::Silu(*a),
            Op::Linear { x, w, b } => Desc::Linear(*x, *w, *b),
            Op::Conv2d { x, w, b, stride, pad } => Desc::Conv2d(*x, *w, *b, *stride, *pad),
            Op::GroupNorm { x, gamma, beta, groups, eps } => {
                Desc::GroupNorm(*x, *gamma, *beta, *groups, *eps)
            }
            Op::UpsampleNearest2x(a) => Desc::Upsample(*a),
            Op::AvgPool2x(a) => Desc::AvgPool(*a),
            Op::MatMul(a, b) => Desc::MatMul(*a, *b),
            Op::Transpose2d(a) => Desc::Transpose(*a),
            Op::SoftmaxRows(a) => Desc::SoftmaxRows(*a),
            Op::Sum(a) => Desc::Sum(*a),
            Op::Mean(a) => Desc::Mean(*a),
            Op::Reshape(a) => Desc::Reshape(*a),
            Op::ConcatChannels(parts) => Desc::Concat(parts.clone()),
            Op::HeadRows { x, n, c0, c1 } => Desc::HeadRows(*x, *n, *c0, *c1),
            Op::StackHeads { parts, head_width } => Desc::StackHeads(parts.clone(), *head_width),
            Op::ScaleShift { x, scale, shift } => Desc::ScaleShift(*x, *scale, *shift),
        };

        match desc {
            Desc::Nop => {}
            Desc::Add(a, b) => {
                let g = self.take_grad(idx);
                self.acc_into(a, &g);
                self.acc_into(b, &g);
            }
            Desc::Sub(a, b) => {
                let g = self.take_grad(idx);
                self.acc_into(a, &g);
                if self.wants(b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.acc_into(b, &neg);
                }
            }
            Desc::Mul(a, b) => {
                let g = self.take_grad(idx);
                if self.wants(a) {
                    let bv = self.val(b);
                    let da: Vec<T> = g.iter().zip(bv).map(|(&gv, &bvv)| gv * bvv).collect();
                    self.acc_into(a, &da);
                }
                if self.wants(b) {
                    let av = self.val(a);
                    let db: Vec<T> = g.iter().zip(av).map(|(&gv, &avv)| gv * avv).collect();
                    self.acc_into(b, &db);
                }
            }
            Desc::Scale(a, f) => {
                if self.wants(a) {
                    let fv = T::from_f64(f);
                    let g = self.take_grad(idx);
                    let da: Vec<T> = g.iter().map(|&v| v * fv).collect();
                    self.acc_into(a, &da);
                }
            }
            Desc::Silu(a) => {
                if self.wants(a) {
                    let g = self.take_grad(idx);
                    let xv = self.val(a);
                    let da: Vec<T> = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &x)| {
                            let s = kernels::sigmoid(x);
                            gv * (s + x * s * (T::one() - s))
                        })
                        .collect();
                    self.acc_into(a, &da);
                }
            }
            Desc::Linear(x, w, b) => {
                let g = self.take_grad(idx);
                let (n, dout) = {
                    let s = &self.nodes[idx].value.shape();
                    (s[0], s[1])
                };
                let din = self.shape(x)[1];
                if self.wants(x) {
                    // dx[n,din] = g[n,dout] * w[dout,din]
                    let mut dx = vec![T::zero(); n * din];
                    kernels::matmul_acc(&mut dx, &g, self.val(w), n, dout, din);
                    self.acc_into(x, &dx);
                }
                if self.wants(w) {
                    // dw[dout,din] = g^T[dout,n] * x[n,din]
                    let mut dw = vec![T::zero(); dout * din];
                    kernels::matmul_at_acc(&mut dw, &g, self.val(x), dout, n, din);
                    self.acc_into(w, &dw);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks_exact(dout) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.acc_into(b, &db);
                }
            }
            Desc::Conv2d(x, w, b, stride, pad) => {
                let g = self.take_grad(idx);
                let os = self.nodes[idx].value.shape().to_vec();
                let (n, o, oh, ow) = (os[0], os[1], os[2], os[3]);
                let xs = self.shape(x).to_vec();
                let (c, h, wd) = (xs[1], xs[2], xs[3]);
                let ws = self.shape(w).to_vec();
                let (kh, kw) = (ws[2], ws[3]);
                let patch = c * kh * kw;
                let cols = oh * ow;

                if self.wants(b) {
                    let mut db = vec![T::zero(); o];
                    for ni in 0..n {
                        for oi in 0..o {
                            let gp = &g[(ni * o + oi) * cols..(ni * o + oi + 1) * cols];
                            for &gv in gp {
                                db[oi] += gv;
                            }
                        }
                    }
                    self.acc_into(b, &db);
                }
                let want_x = self.wants(x);
                let want_w = self.wants(w);
                if want_x || want_w {
                    let mut dw = vec![T::zero(); o * patch];
                    let mut dx = vec![T::zero(); n * c * h * wd];
                    for ni in 0..n {
                        let gmat = &g[ni * o * cols..(ni + 1) * o * cols];
                        if want_w {
                            let xv = self.val(x);
                            let col = kernels::im2col(
                                &xv[ni * c * h * wd..(ni + 1) * c * h * wd],
                                c,
                                h,
                                wd,
                                kh,
                                kw,
                                stride,
                                pad,
                                oh,
                                ow,
                            );
                            // dw[o,patch] += g[o,cols] * col^T[cols,patch]
                            kernels::matmul_bt_acc(&mut dw, gmat, &col, o, cols, patch);
                        }
                        if want_x {
                            // dcol[patch,cols] = w^T[patch,o] * g[o,cols]
                            let mut dcol = vec![T::zero(); patch * cols];
                            kernels::matmul_at_acc(&mut dcol, self.val(w), gmat, patch, o, cols);
                            kernels::col2im_acc(
                                &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd],
                                &dcol,
                                c,
                                h,
                                wd,
                                kh,
                                kw,
                                stride,
                                pad,
                                oh,
                                ow,
                            );
                        }
                    }
                    if want_w {
                        self.acc_into(w, &dw);
                    }
                    if want_x {
                        self.acc_into(x, &dx);
                    }
                }
            }
            Desc::GroupNorm(x, gamma, beta, groups, eps) => {
                let g = self.take_grad(idx);
                let xs = self.shape(x).to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let cg = c / groups;
                let plane = h * w;
                let gsz = cg * plane;
                let xv = self.val(x).to_vec();
                let gv = self.val(gamma).to_vec();
                let epsv = T::from_f64(eps);
                let inv_m = T::one() / T::from_f64(gsz as f64);

                let want_x = self.wants(x);
                let want_gamma = self.wants(gamma);
                let want_beta = self.wants(beta);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];

                for ni in 0..n {
                    for gi in 0..groups {
                        let base = ni * c * plane + gi * gsz;
                        let src = &xv[base..base + gsz];
                        let mut mean = T::zero();
                        for &v in src {
                            mean += v;
                        }
                        mean = mean * inv_m;
                        let mut var = T::zero();
                        for &v in src {
                            let d = v - mean;
                            var += d * d;
                        }
                        var = var * inv_m;
                        let inv_std = T::one() / (var + epsv).sqrt();

                        // xhat and dxhat for this group
                        let gslice = &g[base..base + gsz];
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        let mut xhat = vec![T::zero(); gsz];
                        let mut dxhat = vec![T::zero(); gsz];
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let ga = gv[ch];
                            for p in 0..plane {
                                let k = ci * plane + p;
                                let xh = (src[k] - mean) * inv_std;
                                xhat[k] = xh;
                                let dxh = gslice[k] * ga;
                                dxhat[k] = dxh;
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xh;
                                if want_gamma {
                                    dgamma[ch] += gslice[k] * xh;
                                }
                                if want_beta {
                                    dbeta[ch] += gslice[k];
                                }
                            }
                        }
                        if want_x {
                            let mean_dxhat = sum_dxhat * inv_m;
                            let mean_dxhat_xhat = sum_dxhat_xhat * inv_m;
                            for k in 0..gsz {
                                dx[base + k] =
                                    (dxhat[k] - mean_dxhat - xhat[k] * mean_dxhat_xhat) * inv_std;
                            }
                        }
                    }
                }
                if want_x {
                    self.acc_into(x, &dx);
                }
                if want_gamma {
                    self.acc_into(gamma, &dgamma);
                }
                if want_beta {
                    self.acc_into(beta, &dbeta);
                }
            }
            Desc::Upsample(a) => {
                if self.wants(a) {
                    let g = self.take_grad(idx);
                    let xs = self.shape(a).to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut da = vec![T::zero(); n * c * h * w];
                    for pc in 0..n * c {
                        let gp = &g[pc * oh * ow..(pc + 1) * oh * ow];
                        let dp = &mut da[pc * h * w..(pc + 1) * h * w];
                        for y in 0..oh {
                            for x2 in 0..ow {
                                dp[(y / 2) * w + x2 / 2] += gp[y * ow + x2];
                            }
                        }
                    }
                    self.acc_into(a, &da);
                }
            }
            Desc::AvgPool(a) => {
                if self.wants(a) {
                    let g = self.take_grad(idx);
                    let xs = self.shape(a).to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::from_f64(0.25);
                    let mut da = vec![T::zero(); n * c * h * w];
                    for pc in 0..n * c {
                        let gp = &g[pc * oh * ow..(pc + 1) * oh * ow];
                        let dp = &mut da[pc * h * w..(pc + 1) * h * w];
                        for y in 0..oh {
                            for x2 in 0..ow {
                                let gv = gp[y * ow + x2] * quarter;
                                dp[2 * y * w + 2 * x2] += gv;
                                dp[2 * y * w + 2 * x2 + 1] += gv;
                                dp[(2 * y + 1) * w + 2 * x2] += gv;
                                dp[(2 * y + 1) * w + 2 * x2 + 1] += gv;
                            }
                        }
                    }
                    self.acc_into(a, &da);
                }
            }
            Desc::MatMul(a, b) => {
                let g = self.take_grad(idx);
                let (m, k) = {
                    let s = self.shape(a);
                    (s[0], s[1])
                };
                let n = self.shape(b)[1];
                if self.wants(a) {
                    // da[m,k] = g[m,n] * b^T[n,k]
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_bt_acc(&mut da, &g, self.val(b), m, n, k);
                    self.acc_into(a, &da);
                }
                if self.wants(b) {
                    // db[k,n] = a^T[k,m] * g[m,n]
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_at_acc(&mut db, self.val(a), &g, k, m, n);
                    self.acc_into(b, &db);
                }
            }
            Desc::Transpose(a) => {
                if self.wants(a) {
                    let g = self.take_grad(idx);
                    let os = self.nodes[idx].value.shape().to_vec(); // [n,m]
                    let (n, m) = (os[0], os[1]);
                    let mut da = vec![T::zero(); m * n];
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] = g[i * m + j];
                        }
                    }
                    self.acc_into(a, &da);
                }
            }
            Desc::SoftmaxRows(a) => {
                if self.wants(a) {
                    let g = self.take_grad(idx);
                    let y = self.nodes[idx].value.data().to_vec();
                    let s = self.nodes[idx].value.shape().to_vec();
                    let (rows, cols) = (s[0], s[1]);
                    let mut da = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut dot = T::zero();
                        for (yv, gv) in yr.iter().zip(gr) {
                            dot += *yv * *gv;
                        }
                        let dr = &mut da[r * cols..(r + 1) * cols];
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    self.acc_into(a, &da);
                }
            }
            Desc::Sum(a) => {
                if self.wants(a) {
                    let g0 = self.take_grad(idx)[0];
                    let da = vec![g0; self.val(a).len()];
                    self.acc_into(a, &da);
                }
            }
            Desc::Mean(a) => {
                if self.wants(a) {
                    let n = self.val(a).len();
                    let g0 = self.take_grad(idx)[0] / T::from_f64(n as f64);
                    let da = vec![g0; n];
                    self.acc_into(a, &da);
                }
            }
            Desc::Reshape(a) => {
                if self.wants(a) {
                    let g = self.take_grad(idx);
                    self.acc_into(a, &g);
                }
            }
            Desc::Concat(parts) => {
                let g = self.take_grad(idx);
                let os = self.nodes[idx].value.shape().to_vec();
                let (n, ctot, plane) = (os[0], os[1], os[2] * os[3]);
                let mut coff = 0;
                for &p in &parts {
                    let ci = self.shape(p)[1];
                    if self.wants(p) {
                        let mut dp = vec![T::zero(); n * ci * plane];
                        for ni in 0..n {
                            let src = &g
                                [(ni * ctot + coff) * plane..(ni * ctot + coff + ci) * plane];
                            dp[ni * ci * plane..(ni + 1) * ci * plane].copy_from_slice(src);
                        }
                        self.acc_into(p, &dp);
                    }
                    coff += ci;
                }
            }
            Desc::HeadRows(x, n, c0, c1) => {
                if self.wants(x) {
                    let g = self.take_grad(idx);
                    let xs = self.shape(x).to_vec();
                    let (c, plane) = (xs[1], xs[2] * xs[3]);
                    let width = c1 - c0;
                    let mut dx = vec![T::zero(); xs.iter().product()];
                    for (j, ch) in (c0..c1).enumerate() {
                        let dst = &mut dx[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                        for p in 0..plane {
                            dst[p] += g[p * width + j];
                        }
                    }
                    self.acc_into(x, &dx);
                }
            }
            Desc::StackHeads(parts, head_width) => {
                let g = self.take_grad(idx);
                let os = self.nodes[idx].value.shape().to_vec();
                let (c, plane) = (os[1], os[2] * os[3]);
                let heads = parts.len() / os[0];
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.wants(p) {
                        continue;
                    }
                    let ni = pi / heads;
                    let hd = pi % heads;
                    let mut dp = vec![T::zero(); plane * head_width];
                    for j in 0..head_width {
                        let ch = hd * head_width + j;
                        let src = &g[(ni * c + ch) * plane..(ni * c + ch + 1) * plane];
                        for q in 0..plane {
                            dp[q * head_width + j] = src[q];
                        }
                    }
                    self.acc_into(p, &dp);
                }
            }
            Desc::ScaleShift(x, scale, shift) => {
                let g = self.take_grad(idx);
                let xs = self.shape(x).to_vec();
                let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let sv = self.val(scale).to_vec();
                if self.wants(x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for ni in 0..n {
                        for ch in 0..c {
                            let s = T::one() + sv[ch];
                            let base = (ni * c + ch) * plane;
                            for p in 0..plane {
                                dx[base + p] = g[base + p] * s;
                            }
                        }
                    }
                    self.acc_into(x, &dx);
                }
                if self.wants(scale) {
                    let xv = self.val(x);
                    let mut ds = vec![T::zero(); c];
                    for ni in 0..n {
                        for ch in 0..c {
                            let base = (ni * c + ch) * plane;
                            for p in 0..plane {
                                ds[ch] += g[base + p] * xv[base + p];
                            }
                        }
                    }
                    self.acc_into(scale, &ds);
                }
                if self.wants(shift) {
                    let mut dt = vec![T::zero(); c];
                    for ni in 0..n {
                        for ch in 0..c {
                            let base = (ni * c + ch) * plane;
                            for p in 0..plane {
                                dt[ch] += g[base + p];
                            }
                        }
                    }
                    self.acc_into(shift, &dt);
                }
            }
        }
    }
}
