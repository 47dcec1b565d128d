//! Generic tape operations: broadcast elementwise arithmetic, activations,
//! matmul, reductions, channel concat/slice, channel softmax, ground-truth
//! probability gathering, per-channel normalization, and nearest upsampling.
//!
//! Reductions use a fixed 8-lane accumulation order so results are bit-identical
//! across runs regardless of feature flags or thread counts.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BinKind, Op, ScalarKind, Tape, TensorId, UnaryKind};
use crate::tensor::{broadcast_shape, broadcast_strides, reduce_to_shape, Tensor};

// ── Deterministic reduction ─────────────────────────────────────────

/// Sum with a fixed 8-lane accumulation order.
pub(crate) fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut lanes = [T::ZERO; 8];
    let mut chunks = xs.chunks_exact(8);
    for ch in chunks.by_ref() {
        for (l, v) in lanes.iter_mut().zip(ch.iter()) {
            *l += *v;
        }
    }
    for (l, v) in lanes.iter_mut().zip(chunks.remainder().iter()) {
        *l += *v;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += *s;
    }
}

// ── Broadcast machinery ─────────────────────────────────────────────

fn binary_eval<T: Scalar>(
    kind: BinKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
) -> Vec<T> {
    let apply = |x: T, y: T| match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    };
    if a.shape() == out_shape && b.shape() == out_shape {
        return a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| apply(x, y))
            .collect();
    }
    let ndim = out_shape.len();
    let sa = broadcast_strides(a.shape(), ndim);
    let sb = broadcast_strides(b.shape(), ndim);
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; ndim];
    let (ad, bd) = (a.data(), b.data());
    for _ in 0..numel {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..ndim {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        out.push(apply(ad[ia], bd[ib]));
        for d in (0..ndim).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Elementwise map of `g` against a broadcast-expanded operand, producing a
/// full-output-shaped buffer which the caller reduces back to an input shape.
fn mapped_grad<T: Scalar, F: Fn(T, T, T) -> T>(
    g: &[T],
    out_shape: &[usize],
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: F,
) -> Vec<T> {
    let ndim = out_shape.len();
    let sa = broadcast_strides(a.shape(), ndim);
    let sb = broadcast_strides(b.shape(), ndim);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(g.len());
    let mut idx = vec![0usize; ndim];
    for &gi in g {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..ndim {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        out.push(f(gi, ad[ia], bd[ib]));
        for d in (0..ndim).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn binary_backward_lhs<T: Scalar>(
    kind: BinKind,
    g: &[T],
    out_shape: &[usize],
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Vec<T> {
    let full = match kind {
        BinKind::Add | BinKind::Sub => g.to_vec(),
        BinKind::Mul => mapped_grad(g, out_shape, a, b, |gi, _av, bv| gi * bv),
        BinKind::Div => mapped_grad(g, out_shape, a, b, |gi, _av, bv| gi / bv),
    };
    reduce_to_shape(&full, out_shape, a.shape())
}

pub(crate) fn binary_backward_rhs<T: Scalar>(
    kind: BinKind,
    g: &[T],
    out_shape: &[usize],
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Vec<T> {
    let full = match kind {
        BinKind::Add => g.to_vec(),
        BinKind::Sub => g.iter().map(|&gi| -gi).collect(),
        BinKind::Mul => mapped_grad(g, out_shape, a, b, |gi, av, _bv| gi * av),
        BinKind::Div => mapped_grad(g, out_shape, a, b, |gi, av, bv| -gi * av / (bv * bv)),
    };
    reduce_to_shape(&full, out_shape, b.shape())
}

pub(crate) fn scalar_backward<T: Scalar>(kind: ScalarKind, c: T, g: &[T], buf: &mut [T]) {
    match kind {
        ScalarKind::Add => add_into(buf, g),
        ScalarKind::Mul => {
            for (o, gi) in buf.iter_mut().zip(g.iter()) {
                *o += *gi * c;
            }
        }
        ScalarKind::Rsub => {
            for (o, gi) in buf.iter_mut().zip(g.iter()) {
                *o -= *gi;
            }
        }
        ScalarKind::Div => {
            for (o, gi) in buf.iter_mut().zip(g.iter()) {
                *o += *gi / c;
            }
        }
    }
}

pub(crate) fn unary_backward<T: Scalar>(kind: UnaryKind, x: &[T], y: &[T], g: &[T], buf: &mut [T]) {
    match kind {
        UnaryKind::Relu => {
            for ((o, &xi), &gi) in buf.iter_mut().zip(x.iter()).zip(g.iter()) {
                if xi > T::ZERO {
                    *o += gi;
                }
            }
        }
        UnaryKind::Sigmoid => {
            for ((o, &yi), &gi) in buf.iter_mut().zip(y.iter()).zip(g.iter()) {
                *o += gi * yi * (T::ONE - yi);
            }
        }
        UnaryKind::Log => {
            for ((o, &xi), &gi) in buf.iter_mut().zip(x.iter()).zip(g.iter()) {
                *o += gi / xi;
            }
        }
        UnaryKind::Neg => {
            for (o, &gi) in buf.iter_mut().zip(g.iter()) {
                *o -= gi;
            }
        }
    }
}

pub(crate) fn pow_backward<T: Scalar>(p: T, x: &[T], g: &[T], buf: &mut [T]) {
    if p == T::ZERO {
        return; // x^0 is constant
    }
    for ((o, &xi), &gi) in buf.iter_mut().zip(x.iter()).zip(g.iter()) {
        *o += gi * p * xi.powf(p - T::ONE);
    }
}

// ── Matmul kernels ──────────────────────────────────────────────────

pub(crate) fn matmul_forward<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn matmul_backward_lhs<T: Scalar>(
    g: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    buf: &mut [T],
) {
    // dA = G @ B^T
    for i in 0..m {
        for p in 0..k {
            let mut acc = T::ZERO;
            let grow = &g[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            for (&gv, &bv) in grow.iter().zip(brow.iter()) {
                acc += gv * bv;
            }
            buf[i * k + p] += acc;
        }
    }
}

pub(crate) fn matmul_backward_rhs<T: Scalar>(
    g: &[T],
    a: &[T],
    m: usize,
    k: usize,
    n: usize,
    buf: &mut [T],
) {
    // dB = A^T @ G
    for p in 0..k {
        for i in 0..m {
            let av = a[i * k + p];
            let grow = &g[i * n..(i + 1) * n];
            let brow = &mut buf[p * n..(p + 1) * n];
            for (o, &gv) in brow.iter_mut().zip(grow.iter()) {
                *o += av * gv;
            }
        }
    }
}

// ── Channel layout helpers ──────────────────────────────────────────

/// (lead, channels, tail) decomposition around the channel axis of a CHW or
/// BCHW tensor.
fn channel_split(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 && shape.len() != 4 {
        return Err(Error::ShapeExpected {
            op,
            expected: vec![0, 0, 0, 0],
            got: shape.to_vec(),
        });
    }
    let axis = shape.len() - 3;
    let lead: usize = shape[..axis].iter().product();
    let tail: usize = shape[axis + 1..].iter().product();
    Ok((lead, shape[axis], tail))
}

pub(crate) fn concat_backward_piece<T: Scalar>(
    g: &[T],
    out_shape: &[usize],
    piece_shape: &[usize],
    start: usize,
    buf: &mut [T],
) {
    let (lead, out_c, tail) = channel_split("concat_channels", out_shape).expect("checked at forward");
    let c = piece_shape[piece_shape.len() - 3];
    for l in 0..lead {
        let src = &g[(l * out_c + start) * tail..(l * out_c + start + c) * tail];
        let dst = &mut buf[l * c * tail..(l + 1) * c * tail];
        add_into(dst, src);
    }
}

pub(crate) fn slice_backward<T: Scalar>(
    g: &[T],
    in_shape: &[usize],
    start: usize,
    len: usize,
    buf: &mut [T],
) {
    let (lead, c, tail) = channel_split("slice_channels", in_shape).expect("checked at forward");
    for l in 0..lead {
        let dst = &mut buf[(l * c + start) * tail..(l * c + start + len) * tail];
        let src = &g[l * len * tail..(l + 1) * len * tail];
        add_into(dst, src);
    }
}

// ── Softmax / class selection kernels ───────────────────────────────

pub(crate) fn softmax_backward<T: Scalar>(s: &[T], shape: &[usize], g: &[T], buf: &mut [T]) {
    let (b, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    for bi in 0..b {
        let base = bi * k * hw;
        for p in 0..hw {
            let mut dot = T::ZERO;
            for c in 0..k {
                let i = base + c * hw + p;
                dot += g[i] * s[i];
            }
            for c in 0..k {
                let i = base + c * hw + p;
                buf[i] += s[i] * (g[i] - dot);
            }
        }
    }
}

pub(crate) fn select_class_backward<T: Scalar>(
    labels: &[u8],
    probs_shape: &[usize],
    g: &[T],
    buf: &mut [T],
) {
    let (b, k, hw) = (
        probs_shape[0],
        probs_shape[1],
        probs_shape[2] * probs_shape[3],
    );
    for bi in 0..b {
        for p in 0..hw {
            let l = labels[bi * hw + p] as usize;
            buf[bi * k * hw + l * hw + p] += g[bi * hw + p];
        }
    }
    let _ = k;
}

// ── Instance norm kernels ───────────────────────────────────────────

pub(crate) struct InstanceNormGrads<T: Scalar> {
    pub dx: Option<Vec<T>>,
    pub dgamma: Option<Vec<T>>,
    pub dbeta: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn instance_norm_backward<T: Scalar>(
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    g: &[T],
    need_dx: bool,
    need_dgamma: bool,
    need_dbeta: bool,
) -> InstanceNormGrads<T> {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = T::from_f64(hw as f64);
    let mut dx = need_dx.then(|| vec![T::ZERO; x.len()]);
    let mut dgamma = need_dgamma.then(|| vec![T::ZERO; c]);
    let mut dbeta = need_dbeta.then(|| vec![T::ZERO; c]);
    for bi in 0..b {
        for ci in 0..c {
            let plane = bi * c + ci;
            let base = plane * hw;
            let (mu, inv) = (mean[plane], inv_std[plane]);
            let xs = &x[base..base + hw];
            let gs = &g[base..base + hw];
            let mut sum_g = T::ZERO;
            let mut sum_gx = T::ZERO;
            for (&xi, &gi) in xs.iter().zip(gs.iter()) {
                sum_g += gi;
                sum_gx += gi * (xi - mu) * inv;
            }
            if let Some(dg) = dgamma.as_mut() {
                dg[ci] += sum_gx;
            }
            if let Some(db) = dbeta.as_mut() {
                db[ci] += sum_g;
            }
            if let Some(dx) = dx.as_mut() {
                let gam = gamma[ci];
                let mean_dxhat = gam * sum_g / m;
                let mean_dxhat_xhat = gam * sum_gx / m;
                for (i, (&xi, &gi)) in xs.iter().zip(gs.iter()).enumerate() {
                    let xhat = (xi - mu) * inv;
                    dx[base + i] += inv * (gam * gi - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    }
    InstanceNormGrads { dx, dgamma, dbeta }
}

pub(crate) fn upsample2_backward<T: Scalar>(g: &[T], in_shape: &[usize], buf: &mut [T]) {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..b * c {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let bp = &mut buf[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let o = 2 * y * ow + 2 * x;
                bp[y * w + x] += (gp[o] + gp[o + 1]) + (gp[o + ow] + gp[o + ow + 1]);
            }
        }
    }
}

// ── Tape methods ────────────────────────────────────────────────────

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, name: &'static str, kind: BinKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let data = binary_eval(kind, self.value(a), self.value(b), &out_shape);
        let value = Tensor::from_vec(out_shape, data)?;
        self.push(name, value, Op::Binary { kind, a, b })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("div", BinKind::Div, a, b)
    }

    fn scalar_op(&mut self, name: &'static str, kind: ScalarKind, a: TensorId, c: T) -> Result<TensorId> {
        let data: Vec<T> = self
            .data(a)
            .iter()
            .map(|&x| match kind {
                ScalarKind::Add => x + c,
                ScalarKind::Mul => x * c,
                ScalarKind::Rsub => c - x,
                ScalarKind::Div => x / c,
            })
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push(name, value, Op::ScalarOp { kind, a, c })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        self.scalar_op("add_scalar", ScalarKind::Add, a, c)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        self.scalar_op("mul_scalar", ScalarKind::Mul, a, c)
    }

    /// `c - a`
    pub fn rsub_scalar(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        self.scalar_op("rsub_scalar", ScalarKind::Rsub, a, c)
    }

    pub fn div_scalar(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        self.scalar_op("div_scalar", ScalarKind::Div, a, c)
    }

    fn unary(&mut self, name: &'static str, kind: UnaryKind, a: TensorId) -> Result<TensorId> {
        if kind == UnaryKind::Log {
            if let Some(index) = self.data(a).iter().position(|v| *v <= T::ZERO) {
                return Err(Error::LogDomain {
                    index,
                    value: self.data(a)[index].to_f64(),
                });
            }
        }
        let data: Vec<T> = self
            .data(a)
            .iter()
            .map(|&x| match kind {
                UnaryKind::Relu => x.maximum(T::ZERO),
                UnaryKind::Sigmoid => T::ONE / (T::ONE + (-x).exp()),
                UnaryKind::Log => x.ln(),
                UnaryKind::Neg => -x,
            })
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push(name, value, Op::Unary { kind, a })
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("relu", UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("sigmoid", UnaryKind::Sigmoid, a)
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("log", UnaryKind::Log, a)
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("neg", UnaryKind::Neg, a)
    }

    pub fn pow_scalar(&mut self, a: TensorId, p: T) -> Result<TensorId> {
        let data: Vec<T> = self.data(a).iter().map(|&x| x.powf(p)).collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push("pow", value, Op::PowScalar { a, p })
    }

    /// `max(a, floor)`; gradient passes through where `a >= floor`.
    pub fn clamp_min(&mut self, a: TensorId, floor: T) -> Result<TensorId> {
        let data: Vec<T> = self.data(a).iter().map(|&x| x.maximum(floor)).collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push("clamp_min", value, Op::ClampMin { a, floor })
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_forward(self.data(a), self.data(b), m, k, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n })
    }

    pub fn reduce_sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s = lane_sum(self.data(a));
        self.push("reduce_sum", Tensor::scalar(s), Op::ReduceSum { a })
    }

    pub fn reduce_mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::EmptyInput { op: "reduce_mean" });
        }
        let s = lane_sum(self.data(a)) / T::from_f64(n as f64);
        self.push("reduce_mean", Tensor::scalar(s), Op::ReduceMean { a })
    }

    /// Concatenates CHW or BCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput {
                op: "concat_channels",
            });
        }
        let first = self.shape(inputs[0]).to_vec();
        let (lead, _, tail) = channel_split("concat_channels", &first)?;
        let axis = first.len() - 3;
        let mut total_c = 0usize;
        for &inp in inputs {
            let s = self.shape(inp);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total_c += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_c;
        let mut data = Vec::with_capacity(lead * total_c * tail);
        for l in 0..lead {
            for &inp in inputs {
                let c = self.shape(inp)[axis];
                let block = &self.data(inp)[l * c * tail..(l + 1) * c * tail];
                data.extend_from_slice(block);
            }
        }
        let value = Tensor::from_vec(out_shape, data)?;
        self.push(
            "concat_channels",
            value,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        )
    }

    pub fn slice_channels(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (lead, c, tail) = channel_split("slice_channels", &shape)?;
        if start + len > c {
            return Err(Error::ShapeExpected {
                op: "slice_channels",
                expected: vec![start + len],
                got: vec![c],
            });
        }
        let mut out_shape = shape.clone();
        let axis = shape.len() - 3;
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(lead * len * tail);
        for l in 0..lead {
            let block = &self.data(a)[(l * c + start) * tail..(l * c + start + len) * tail];
            data.extend_from_slice(block);
        }
        let value = Tensor::from_vec(out_shape, data)?;
        self.push("slice_channels", value, Op::SliceChannels { a, start, len })
    }

    /// Softmax over the channel axis of a BCHW tensor.
    pub fn softmax_channels(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeExpected {
                op: "softmax_channels",
                expected: vec![0, 0, 0, 0],
                got: shape,
            });
        }
        let (b, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = self.data(a);
        let mut out = vec![T::ZERO; x.len()];
        for bi in 0..b {
            let base = bi * k * hw;
            for p in 0..hw {
                let mut mx = x[base + p];
                for c in 1..k {
                    let v = x[base + c * hw + p];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = T::ZERO;
                for c in 0..k {
                    let e = (x[base + c * hw + p] - mx).exp();
                    out[base + c * hw + p] = e;
                    denom += e;
                }
                for c in 0..k {
                    out[base + c * hw + p] /= denom;
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        self.push("softmax_channels", value, Op::SoftmaxChannels { a })
    }

    /// Gathers the probability of each pixel's ground-truth class:
    /// `out[b,h,w] = probs[b, labels[b,h,w], h, w]`.
    pub fn select_class(&mut self, probs: TensorId, labels: &[u8]) -> Result<TensorId> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeExpected {
                op: "select_class",
                expected: vec![0, 0, 0, 0],
                got: shape,
            });
        }
        let (b, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if labels.len() != b * hw {
            return Err(Error::ShapeExpected {
                op: "select_class",
                expected: vec![b, shape[2], shape[3]],
                got: vec![labels.len()],
            });
        }
        let p = self.data(probs);
        let mut out = Vec::with_capacity(b * hw);
        for bi in 0..b {
            for pos in 0..hw {
                let l = labels[bi * hw + pos] as usize;
                if l >= k {
                    return Err(Error::LabelOutOfRange {
                        index: bi * hw + pos,
                        label: labels[bi * hw + pos],
                        num_classes: k,
                    });
                }
                out.push(p[bi * k * hw + l * hw + pos]);
            }
        }
        let value = Tensor::from_vec(vec![b, shape[2], shape[3]], out)?;
        self.push(
            "select_class",
            value,
            Op::SelectClass {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Per-channel batch-free normalization over the spatial extent of each
    /// `(batch, channel)` plane, with learnable per-channel scale and shift.
    pub fn instance_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: T,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeExpected {
                op: "instance_norm",
                expected: vec![0, 0, 0, 0],
                got: shape,
            });
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeExpected {
                op: "instance_norm",
                expected: vec![c],
                got: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.data(x);
        let gv = self.data(gamma).to_vec();
        let bv = self.data(beta).to_vec();
        let m = T::from_f64(hw as f64);
        let mut out = vec![T::ZERO; xv.len()];
        let mut mean = Vec::with_capacity(b * c);
        let mut inv_std = Vec::with_capacity(b * c);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let xs = &xv[base..base + hw];
                let mu = lane_sum(xs) / m;
                let mut var = T::ZERO;
                for &xi in xs {
                    let d = xi - mu;
                    var += d * d;
                }
                var /= m;
                let inv = T::ONE / (var + eps).sqrt();
                for (i, &xi) in xs.iter().enumerate() {
                    out[base + i] = (xi - mu) * inv * gv[ci] + bv[ci];
                }
                mean.push(mu);
                inv_std.push(inv);
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        self.push(
            "instance_norm",
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        )
    }

    /// Nearest-neighbor 2x spatial upsampling of a BCHW tensor.
    pub fn upsample_nearest2(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeExpected {
                op: "upsample_nearest2",
                expected: vec![0, 0, 0, 0],
                got: shape,
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.data(x);
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for p in 0..b * c {
            let xp = &xv[p * h * w..(p + 1) * h * w];
            let op_ = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    let v = xp[y * w + xx];
                    let o = 2 * y * ow + 2 * xx;
                    op_[o] = v;
                    op_[o + 1] = v;
                    op_[o + ow] = v;
                    op_[o + ow + 1] = v;
                }
            }
        }
        let value = Tensor::from_vec(vec![b, c, oh, ow], out)?;
        self.push("upsample_nearest2", value, Op::UpsampleNearest2 { x })
    }
}
